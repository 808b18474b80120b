"""Cost-effectiveness outputs: QALY/cost aggregation, ICER, CEP, CEAC.

Per-draw QALYs use the trapezoid rule over the per-time utility means,
μ_e = Σ_{j>=1} (μ^u_j + μ^u_{j-1}) δ_j / 2 with δ_j the fraction of the time
unit between visits. Total cost sums the follow-up means only (the baseline
cost is excluded by default; a flag includes it). The ICER is the ratio of
mean increments, never the mean of per-draw ratios. A CEP point is counted as
cost-effective at threshold k only when k·Δe − Δc is strictly positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .data import DEFAULT_TIME_FRACTIONS, TrialDataset, format_float
from .errors import EconError, ValidationError
from .extrapolation import MarginalMeans, ORIGINAL

DEFAULT_CEP_K = 25000.0


def qaly_trapezoid(mean_u, delta: Sequence[float]) -> np.ndarray:
    """Trapezoid-rule QALYs from per-time utility means, shape (..., J+1) -> (...)."""
    mean_u = np.asarray(mean_u, dtype=float)
    delta = np.asarray(delta, dtype=float)
    J = mean_u.shape[-1] - 1
    if delta.shape != (J,):
        raise ValidationError(
            f"need one time fraction per follow-up interval: got {delta.shape} for J={J}")
    return ((mean_u[..., 1:] + mean_u[..., :-1]) * delta / 2.0).sum(axis=-1)


def total_cost(mean_c, include_baseline: bool = False) -> np.ndarray:
    """Total per-subject cost from per-time cost means; baseline excluded by default."""
    mean_c = np.asarray(mean_c, dtype=float)
    if include_baseline:
        return mean_c.sum(axis=-1)
    return mean_c[..., 1:].sum(axis=-1)


def default_k_grid(k_max: float = 40000.0, k_step: float = 100.0) -> np.ndarray:
    """Willingness-to-pay grid 0..k_max inclusive."""
    if k_max < 0 or k_step <= 0:
        raise ValidationError("need k_max >= 0 and k_step > 0")
    n = int(math.floor(k_max / k_step + 1e-9)) + 1
    return np.arange(n) * k_step


@dataclass
class EconSummary:
    """Per-draw QALY/cost means per arm plus the increment draws (arm 2 - arm 1)."""

    scenario: str
    e1: np.ndarray
    c1: np.ndarray
    e2: np.ndarray
    c2: np.ndarray
    k_grid: np.ndarray

    def __post_init__(self):
        n = len(self.e1)
        for arr in (self.c1, self.e2, self.c2):
            if len(arr) != n:
                raise ValidationError("per-arm draw vectors must share one length")

    @property
    def delta_e(self) -> np.ndarray:
        return self.e2 - self.e1

    @property
    def delta_c(self) -> np.ndarray:
        return self.c2 - self.c1

    @property
    def n_draws(self) -> int:
        return len(self.e1)

    def icer(self) -> float:
        return icer(self.delta_e, self.delta_c)

    def ceac(self) -> np.ndarray:
        return ceac(self.delta_e, self.delta_c, self.k_grid)


def summarize_economics(means_arm1: MarginalMeans, means_arm2: MarginalMeans,
                        delta: Sequence[float] = DEFAULT_TIME_FRACTIONS,
                        k_grid: np.ndarray | None = None,
                        include_baseline_cost: bool = False) -> EconSummary:
    """Aggregate two arms' marginal means into the economic summary."""
    for m in (means_arm1, means_arm2):
        if m.scale != ORIGINAL:
            raise EconError(
                f"economic aggregation needs original-scale means, got {m.scale!r}")
    if means_arm1.n_draws != means_arm2.n_draws:
        raise ValidationError("arms must supply the same number of draws")
    if means_arm1.scenario != means_arm2.scenario:
        raise ValidationError(
            f"mixing scenarios {means_arm1.scenario!r} and {means_arm2.scenario!r}")
    if k_grid is None:
        k_grid = default_k_grid()
    return EconSummary(
        means_arm1.scenario,
        qaly_trapezoid(means_arm1.mean_u, delta),
        total_cost(means_arm1.mean_c, include_baseline_cost),
        qaly_trapezoid(means_arm2.mean_u, delta),
        total_cost(means_arm2.mean_c, include_baseline_cost),
        np.asarray(k_grid, dtype=float),
    )


def icer(delta_e, delta_c) -> float:
    """Ratio of mean increments; exact-zero mean effectiveness is an error."""
    delta_e = np.asarray(delta_e, dtype=float)
    delta_c = np.asarray(delta_c, dtype=float)
    if delta_e.size == 0:
        raise EconError("no draws to summarize")
    me = float(delta_e.mean())
    if me == 0.0:
        raise EconError("mean incremental effectiveness is zero; ICER undefined")
    return float(delta_c.mean()) / me


def ceac(delta_e, delta_c, k_grid) -> np.ndarray:
    """P(cost-effective) per threshold: fraction of draws with k*de - dc > 0."""
    delta_e = np.asarray(delta_e, dtype=float)
    delta_c = np.asarray(delta_c, dtype=float)
    k = np.asarray(k_grid, dtype=float)
    margins = k[:, None] * delta_e[None, :] - delta_c[None, :]
    return (margins > 0).mean(axis=1)


def cep_points(delta_e, delta_c, k: float = DEFAULT_CEP_K):
    """Per-draw plane points with the sustainability-area flag at threshold k."""
    delta_e = np.asarray(delta_e, dtype=float)
    delta_c = np.asarray(delta_c, dtype=float)
    in_area = (k * delta_e - delta_c) > 0
    return delta_e, delta_c, in_area


def write_ceac_csv(path, k_grid, probabilities, scenario: str,
                   meta: Mapping[str, object] | None = None) -> None:
    header = dict(meta or {})
    header.setdefault("scenario", scenario)
    with open(path, "w", newline="") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
        fh.write("k,probability,scenario\n")
        for k, p in zip(k_grid, probabilities):
            fh.write(f"{format_float(k)},{format_float(p)},{scenario}\n")


def write_cep_csv(path, summary: EconSummary, k: float = DEFAULT_CEP_K,
                  meta: Mapping[str, object] | None = None) -> None:
    de, dc, flag = cep_points(summary.delta_e, summary.delta_c, k)
    header = dict(meta or {})
    header.setdefault("scenario", summary.scenario)
    header.setdefault("k", format_float(k))
    with open(path, "w", newline="") as fh:
        fh.write("# " + " ".join(f"{kk}={v}" for kk, v in header.items()) + "\n")
        fh.write("draw,delta_e,delta_c,in_area,scenario\n")
        for s in range(len(de)):
            fh.write(f"{s},{format_float(de[s])},{format_float(dc[s])},"
                     f"{int(flag[s])},{summary.scenario}\n")


# ---------------------------------------------------------------------------
# cross-sectional comparator
# ---------------------------------------------------------------------------

def subject_level_qaly_cost(ds: TrialDataset, include_baseline_cost: bool = False
                            ) -> dict[int, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """Per-arm completer-level (e_i, c_i, u0_i, c0_i) on the original scales."""
    out = {}
    delta = np.asarray(ds.delta, dtype=float)
    for arm in ds.arms():
        completers = [s for s in ds.arm_subjects(arm) if s.is_completer()]
        if not completers:
            out[arm] = (np.empty(0), np.empty(0), np.empty(0), np.empty(0))
            continue
        u = np.stack([s.u for s in completers])
        c = np.stack([s.c for s in completers])
        e_i = qaly_trapezoid(u, delta)
        c_i = total_cost(c, include_baseline_cost)
        out[arm] = (e_i, c_i, u[:, 0], c[:, 0])
    return out


@dataclass
class ComparatorDraws:
    """Posterior draws of baseline-adjusted arm means from the bivariate model."""

    e1: np.ndarray
    c1: np.ndarray
    e2: np.ndarray
    c2: np.ndarray

    @property
    def delta_e(self) -> np.ndarray:
        return self.e2 - self.e1

    @property
    def delta_c(self) -> np.ndarray:
        return self.c2 - self.c1


def cross_sectional_comparator(ds: TrialDataset, n_draws: int = 10000,
                               rng: np.random.Generator | None = None,
                               include_baseline_cost: bool = False) -> ComparatorDraws:
    """Bivariate-normal regression of completer (e_i, c_i) on arm and baselines.

    Covariates: intercept, arm-2 indicator, centred baseline utility, centred
    baseline cost. Noninformative prior p(B, Sigma) proportional to
    |Sigma|^-(3/2); draws come from the conjugate inverse-Wishart / matrix
    normal posterior. Returns adjusted arm means at the pooled baselines.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    per_arm = subject_level_qaly_cost(ds, include_baseline_cost)
    for arm in (1, 2):
        if arm not in per_arm or len(per_arm[arm][0]) < 3:
            raise EconError(f"arm {arm}: need at least 3 completers for the comparator")
    e = np.concatenate([per_arm[1][0], per_arm[2][0]])
    c = np.concatenate([per_arm[1][1], per_arm[2][1]])
    u0 = np.concatenate([per_arm[1][2], per_arm[2][2]])
    c0 = np.concatenate([per_arm[1][3], per_arm[2][3]])
    arm2 = np.concatenate([np.zeros(len(per_arm[1][0])), np.ones(len(per_arm[2][0]))])
    n = len(e)
    x = np.column_stack([np.ones(n), arm2, u0 - u0.mean(), c0 - c0.mean()])
    y = np.column_stack([e, c])
    q = x.shape[1]
    if n - q < 4:
        raise EconError(f"too few completers ({n}) for a {q}-covariate comparator")
    xtx = x.T @ x
    xtx_inv = np.linalg.inv(xtx)
    b_hat = xtx_inv @ x.T @ y
    resid = y - x @ b_hat
    s_mat = resid.T @ resid
    chol_xtx_inv = np.linalg.cholesky(xtx_inv)
    sigma_draws = stats.invwishart.rvs(df=n - q, scale=s_mat, size=n_draws,
                                       random_state=rng).reshape(n_draws, 2, 2)
    e1 = np.empty(n_draws)
    c1 = np.empty(n_draws)
    e2 = np.empty(n_draws)
    c2 = np.empty(n_draws)
    for s in range(n_draws):
        sigma = sigma_draws[s]
        z = rng.standard_normal((q, 2))
        b = b_hat + chol_xtx_inv @ z @ np.linalg.cholesky(sigma).T
        e1[s], c1[s] = b[0]
        e2[s], c2[s] = b[0] + b[1]
    return ComparatorDraws(e1, c1, e2, c2)
