"""Ground-truth trial generator for recovery, sensitivity, and DIC studies.

Full trajectories come from the hurdle model; a missingness mechanism then
masks cells. Baseline costs are never masked (they are the one fully observed
variable in the motivating design). Mechanisms:

  mcar  every maskable cell goes missing independently with one rate;
  mar   follow-up masks are logistic in the always-observed baselines
        (baseline cells stay observed, so the mechanism is genuinely
        ignorable given the recorded data);
  mnar  each cell's mask is logistic in that cell's own current value,
        the canonical nonignorable generator.

True per-time means come in closed form when every regression slope is zero
(the per-time mixtures decouple) and otherwise by large Monte Carlo with a
reported standard error. The ground-truth QALY applies the same trapezoid
aggregation as the estimator, so recovery targets and estimands coincide.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import expit

from .data import SubjectRecord, TrialDataset
from .econ import qaly_trapezoid, total_cost
from .errors import ValidationError
from .extrapolation import MarginalMeans, ORIGINAL
from .hurdle import HurdleParams, param_names, simulate_paths
from .mcmc import PosteriorDraws

MECHANISMS = ("mcar", "mar", "mnar")


@dataclass(frozen=True)
class MissingnessSpec:
    """How cells are masked. Slopes act on utility values and log1p(cost)."""

    mechanism: str = "mcar"
    rate: float = 0.0
    intercept_u: float = 0.0
    intercept_c: float = 0.0
    slope_u: float = 0.0
    slope_c: float = 0.0

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValidationError(
                f"unknown mechanism {self.mechanism!r}; expected one of {MECHANISMS}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValidationError(f"mcar rate must lie in [0, 1], got {self.rate}")
        for v in (self.intercept_u, self.intercept_c, self.slope_u, self.slope_c):
            if not math.isfinite(v):
                raise ValidationError(f"mechanism coefficients must be finite, got {v}")


@dataclass(frozen=True)
class TruthSpec:
    """Everything needed to generate one synthetic trial deterministically."""

    params: Mapping[int, HurdleParams]
    n_per_arm: int
    delta: tuple[float, ...]
    missing: MissingnessSpec = field(default_factory=MissingnessSpec)
    seed: int = 0
    bounds: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if sorted(self.params) != [1, 2]:
            raise ValidationError(f"need parameters for arms 1 and 2, got {sorted(self.params)}")
        js = {p.J for p in self.params.values()}
        if len(js) != 1:
            raise ValidationError(f"arms disagree on the number of follow-ups: {js}")
        if self.n_per_arm < 1:
            raise ValidationError("n_per_arm must be >= 1")
        if len(self.delta) != self.J:
            raise ValidationError(
                f"delta needs one entry per follow-up: got {len(self.delta)} for J={self.J}")
        if self.bounds[0] >= self.bounds[1]:
            raise ValidationError(f"bounds must increase, got {self.bounds}")

    @property
    def J(self) -> int:
        return self.params[1].J

    def to_json(self) -> str:
        payload = {
            "n_per_arm": self.n_per_arm,
            "delta": list(self.delta),
            "seed": self.seed,
            "bounds": list(self.bounds),
            "missing": {
                "mechanism": self.missing.mechanism,
                "rate": self.missing.rate,
                "intercept_u": self.missing.intercept_u,
                "intercept_c": self.missing.intercept_c,
                "slope_u": self.missing.slope_u,
                "slope_c": self.missing.slope_c,
            },
            "params": {
                str(arm): {
                    "J": p.J,
                    "cost_family": p.cost_family,
                    "cost_floor": p.cost_floor,
                    "values": {k: p.values[k] for k in param_names(p.J)},
                }
                for arm, p in sorted(self.params.items())
            },
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TruthSpec":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"truth spec is not valid JSON: {exc}") from exc
        try:
            params = {
                int(arm): HurdleParams(d["J"], d["values"], d["cost_family"],
                                       d.get("cost_floor", 1.0))
                for arm, d in payload["params"].items()
            }
            missing = MissingnessSpec(**payload.get("missing", {}))
            return cls(params, payload["n_per_arm"], tuple(payload["delta"]),
                       missing, payload.get("seed", 0),
                       tuple(payload.get("bounds", (0.0, 1.0))))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"truth spec missing field: {exc}") from exc


def _mask_cells(ms: MissingnessSpec, u: np.ndarray, c: np.ndarray,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n, J1 = u.shape
    # one uniform per cell regardless of mechanism keeps the stream stable
    un_u = rng.random((n, J1))
    un_c = rng.random((n, J1))
    if ms.mechanism == "mcar":
        p_u = np.full((n, J1), ms.rate)
        p_c = np.full((n, J1), ms.rate)
    elif ms.mechanism == "mar":
        base = ms.intercept_u + ms.slope_u * u[:, :1] + ms.slope_c * np.log1p(c[:, :1])
        p_u = np.tile(expit(base), (1, J1))
        base_c = ms.intercept_c + ms.slope_u * u[:, :1] + ms.slope_c * np.log1p(c[:, :1])
        p_c = np.tile(expit(base_c), (1, J1))
        p_u[:, 0] = 0.0  # the history the mechanism reads must stay observed
    else:
        p_u = expit(ms.intercept_u + ms.slope_u * u)
        p_c = expit(ms.intercept_c + ms.slope_c * np.log1p(c))
    r_u = un_u >= p_u
    r_c = un_c >= p_c
    r_c[:, 0] = True  # baseline costs are always recorded
    return r_u, r_c


def generate_trial(spec: TruthSpec, rng: np.random.Generator | None = None):
    """One synthetic trial.

    Returns (observed dataset, full dataset, truth) where truth is
    {arm: TrueTargets}. Utilities are written on the original scale implied
    by `spec.bounds`.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    lo, hi = spec.bounds
    J1 = spec.J + 1
    observed = []
    full = []
    truth = {}
    for arm in (1, 2):
        params = spec.params[arm]
        u_star, c, _, _ = simulate_paths(params, spec.n_per_arm, rng)
        u = lo + np.clip(u_star, 0.0, 1.0) * (hi - lo)
        r_u, r_c = _mask_cells(spec.missing, u_star, c, rng)
        for i in range(spec.n_per_arm):
            sid = f"s{arm}_{i:04d}"
            full.append(SubjectRecord(sid, arm, u[i].copy(), c[i].copy(),
                                      np.ones(J1, bool), np.ones(J1, bool)))
            uo = np.where(r_u[i], u[i], np.nan)
            co = np.where(r_c[i], c[i], np.nan)
            observed.append(SubjectRecord(sid, arm, uo, co, r_u[i], r_c[i]))
        truth[arm] = true_targets(params, spec.delta, spec.bounds)
    obs_ds = TrialDataset(tuple(observed), spec.J, spec.delta, bounds=spec.bounds)
    full_ds = TrialDataset(tuple(full), spec.J, spec.delta, bounds=spec.bounds)
    return obs_ds, full_ds, truth


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrueTargets:
    """Per-time means on the original scales plus the aggregated estimands."""

    mean_u: tuple[float, ...]
    mean_c: tuple[float, ...]
    total_qaly: float
    total_cost: float
    mc_error_u: tuple[float, ...]
    mc_error_c: tuple[float, ...]
    analytic: bool


def _slopes_all_zero(params: HurdleParams) -> bool:
    v = params.values
    names = ["gamma_1_0", "alpha_1_0"]
    for j in range(1, params.J + 1):
        names += [f"zeta_1_{j}", f"zeta_2_{j}", f"beta_1_{j}", f"beta_2_{j}",
                  f"gamma_1_{j}", f"gamma_2_{j}", f"alpha_1_{j}", f"alpha_2_{j}"]
    return all(v[n] == 0.0 for n in names)


def _family_mean(family: str, nu: float, tau: float) -> float:
    if family == "lognormal":
        return math.exp(nu + tau * tau / 2.0)
    return math.exp(nu)


def true_time_means(params: HurdleParams, rng: np.random.Generator | None = None,
                    n_mc: int = 1_000_000):
    """Per-time (E[u*], E[c]) with Monte Carlo standard errors.

    With every slope zero, the per-time mixtures decouple and the means are
    closed-form (errors zero). Otherwise simulates `n_mc` trajectories.
    """
    v = params.values
    J = params.J
    if _slopes_all_zero(params):
        mean_u = np.empty(J + 1)
        mean_c = np.empty(J + 1)
        mean_c[0] = (1.0 - v["pi_c_0"]) * _family_mean(
            params.cost_family, v["nu_c_0"], v["tau_c_0"])
        pi_u = expit(v["gamma_0_0"])
        mean_u[0] = pi_u + (1.0 - pi_u) * expit(v["alpha_0_0"])
        for j in range(1, J + 1):
            pi_c = expit(v[f"zeta_0_{j}"])
            mean_c[j] = (1.0 - pi_c) * _family_mean(
                params.cost_family, v[f"beta_0_{j}"], v[f"tau_c_{j}"])
            pi_u = expit(v[f"gamma_0_{j}"])
            mean_u[j] = pi_u + (1.0 - pi_u) * expit(v[f"alpha_0_{j}"])
        zeros = np.zeros(J + 1)
        return mean_u, mean_c, zeros, zeros.copy(), True
    if rng is None:
        rng = np.random.default_rng(0)
    u, c, _, _ = simulate_paths(params, n_mc, rng)
    se_u = u.std(axis=0, ddof=1) / math.sqrt(n_mc)
    se_c = c.std(axis=0, ddof=1) / math.sqrt(n_mc)
    return u.mean(axis=0), c.mean(axis=0), se_u, se_c, False


def true_targets(params: HurdleParams, delta, bounds=(0.0, 1.0),
                 include_baseline_cost: bool = False,
                 rng: np.random.Generator | None = None,
                 n_mc: int = 1_000_000) -> TrueTargets:
    mean_u_star, mean_c, se_u, se_c, analytic = true_time_means(params, rng, n_mc)
    lo, hi = bounds
    mean_u = lo + mean_u_star * (hi - lo)
    return TrueTargets(
        tuple(float(x) for x in mean_u),
        tuple(float(x) for x in mean_c),
        float(qaly_trapezoid(mean_u, delta)),
        float(total_cost(mean_c, include_baseline_cost)),
        tuple(float(x) * (hi - lo) for x in se_u),
        tuple(float(x) for x in se_c),
        analytic,
    )


# ---------------------------------------------------------------------------
# recovery report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RecoveryRow:
    name: str
    truth: float
    posterior_mean: float
    lower: float
    upper: float

    @property
    def bias(self) -> float:
        return self.posterior_mean - self.truth

    @property
    def covered(self) -> bool:
        return self.lower <= self.truth <= self.upper


@dataclass(frozen=True)
class RecoveryReport:
    arm: int
    params: dict[str, RecoveryRow]
    targets: dict[str, RecoveryRow]

    def coverage_rate(self) -> float:
        rows = list(self.params.values()) + list(self.targets.values())
        if not rows:
            return math.nan
        return sum(r.covered for r in rows) / len(rows)

    def to_json(self) -> str:
        def dump(rows):
            return {
                name: {"truth": r.truth, "posterior_mean": r.posterior_mean,
                       "bias": r.bias, "lower": r.lower, "upper": r.upper,
                       "covered": r.covered}
                for name, r in rows.items()
            }
        return json.dumps({"arm": self.arm, "params": dump(self.params),
                           "targets": dump(self.targets)},
                          indent=1, sort_keys=True)


def _row(name, truth, draws_1d, level):
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(draws_1d, [tail, 1.0 - tail])
    return RecoveryRow(name, float(truth), float(np.mean(draws_1d)),
                       float(lo), float(hi))


def recovery_report(spec: TruthSpec, arm: int,
                    draws: PosteriorDraws | None = None,
                    means: MarginalMeans | None = None,
                    include_baseline_cost: bool = False,
                    level: float = 0.95) -> RecoveryReport:
    """Bias and interval coverage against the generating truth.

    `draws` scores the hurdle parameters (sensible only for fits of
    completely observed data, where the fitted group is the generating
    model); `means` scores the per-time means and the aggregated QALY/cost
    targets. Either part may be omitted.
    """
    if draws is None and means is None:
        raise ValidationError("need parameter draws, marginal means, or both")
    if arm not in spec.params:
        raise ValidationError(f"no truth for arm {arm}")
    truth_params = spec.params[arm]
    param_rows: dict[str, RecoveryRow] = {}
    if draws is not None:
        expected = set(param_names(truth_params.J))
        got = set(draws.names)
        if got != expected:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ValidationError(
                f"parameter names do not match the truth: missing {missing}, "
                f"unexpected {extra}")
        stacked = draws.stacked()
        for k, name in enumerate(draws.names):
            param_rows[name] = _row(name, truth_params.values[name],
                                    stacked[:, k], level)
    target_rows: dict[str, RecoveryRow] = {}
    if means is not None:
        if means.scale != ORIGINAL:
            raise ValidationError(
                f"recovery targets need original-scale means, got {means.scale!r}")
        targets = true_targets(truth_params, spec.delta, spec.bounds,
                               include_baseline_cost)
        for j in range(spec.J + 1):
            target_rows[f"mean_u_{j}"] = _row(
                f"mean_u_{j}", targets.mean_u[j], means.mean_u[:, j], level)
            target_rows[f"mean_c_{j}"] = _row(
                f"mean_c_{j}", targets.mean_c[j], means.mean_c[:, j], level)
        qaly = qaly_trapezoid(means.mean_u, np.asarray(spec.delta))
        cost = total_cost(means.mean_c, include_baseline_cost)
        target_rows["total_qaly"] = _row("total_qaly", targets.total_qaly, qaly, level)
        target_rows["total_cost"] = _row("total_cost", targets.total_cost, cost, level)
    return RecoveryReport(arm, param_rows, target_rows)
