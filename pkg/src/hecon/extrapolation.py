"""Identified marginal means under partial restrictions with sensitivity shifts.

The fitted model only determines the distribution of observed components. The
mean of the missing part of the non-completer group is set equal to the
working-model mean shifted by a sensitivity parameter: with observed fraction
w_j, the group time-j mean is

    w_j * m_j + (1 - w_j) * (m_j + delta_j) = m_j + (1 - w_j) * delta_j.

Overall means mix the completer and non-completer group means with the
pattern-probability posterior. Utilities live on the rescaled [0, 1] scale
until the final back-transformation; containers carry a scale tag and the
mixing step refuses mismatched inputs rather than producing unit nonsense.

delta sign convention: missing utilities are shifted down (delta_u <= 0) and
missing costs up (delta_c >= 0). Every non-benchmark family draws magnitudes
scaled by twice a calibration sd, so the draws are monotone in the sd under a
fixed RNG stream.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data import GroupData, RescaledDataset, format_float
from .errors import ScaleMismatchError, ValidationError
from .hurdle import HurdleParams, simulate_paths
from .mcmc import PosteriorDraws

DELTA_FAMILIES = ("benchmark_zero", "flat", "skew0", "skew1", "degenerate")

USTAR = "ustar"
ORIGINAL = "original"


@dataclass(frozen=True)
class SensitivityScenario:
    """Prior over the per-time shifts (delta_u_j, delta_c_j).

    sd_u / sd_c are calibration constants (observed-data standard deviations
    among non-completers, utilities on the rescaled scale). The degenerate
    family ignores them and uses the fixed vectors delta_u / delta_c.
    """

    family: str
    sd_u: tuple[float, ...] = ()
    sd_c: tuple[float, ...] = ()
    delta_u: tuple[float, ...] = ()
    delta_c: tuple[float, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.family not in DELTA_FAMILIES:
            raise ValidationError(
                f"unknown sensitivity family {self.family!r}; expected one of {DELTA_FAMILIES}")
        if self.family == "degenerate":
            if not self.delta_u or not self.delta_c:
                raise ValidationError("degenerate family needs delta_u and delta_c vectors")
            if len(self.delta_u) != len(self.delta_c):
                raise ValidationError("delta_u and delta_c must have equal length")
            for v in (*self.delta_u, *self.delta_c):
                if not math.isfinite(v):
                    raise ValidationError(f"degenerate delta must be finite, got {v}")
            if any(v > 0 for v in self.delta_u):
                raise ValidationError(
                    f"utility shifts must be <= 0, got delta_u={self.delta_u}")
            if any(v < 0 for v in self.delta_c):
                raise ValidationError(
                    f"cost shifts must be >= 0, got delta_c={self.delta_c}")
        elif self.family != "benchmark_zero":
            if not self.sd_u or not self.sd_c:
                raise ValidationError(f"family {self.family!r} needs sd_u and sd_c")
            if len(self.sd_u) != len(self.sd_c):
                raise ValidationError("sd_u and sd_c must have equal length")
            if any(v < 0 for v in (*self.sd_u, *self.sd_c)):
                raise ValidationError("calibration sds must be >= 0")

    @property
    def n_times(self) -> int:
        if self.family == "degenerate":
            return len(self.delta_u)
        if self.family == "benchmark_zero":
            return 0  # any length; shifts are identically zero
        return len(self.sd_u)


def benchmark_scenario() -> SensitivityScenario:
    return SensitivityScenario("benchmark_zero")


def calibration_sds(group: GroupData | None, J: int) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Observed-data sds among non-completers, per time (utility on u* scale).

    Times with fewer than 2 observed values get sd 0 with a warning: the
    sensitivity prior then collapses to no shift at that time.
    """
    sd_u, sd_c = [], []
    sparse = []
    for j in range(J + 1):
        for arr_r, out in (((group.u, group.r_u) if group else (None, None), sd_u),
                           ((group.c, group.r_c) if group else (None, None), sd_c)):
            arr, r = arr_r
            if arr is None:
                out.append(0.0)
                continue
            vals = arr[r[:, j], j]
            if len(vals) < 2:
                out.append(0.0)
                sparse.append(j)
            else:
                out.append(float(np.std(vals, ddof=1)))
    if sparse:
        warnings.warn(
            f"fewer than 2 observed non-completer values at times {sorted(set(sparse))}; "
            "calibration sd set to 0 there", stacklevel=2)
    return tuple(sd_u), tuple(sd_c)


def sample_delta(scenario: SensitivityScenario, j: int, rng: np.random.Generator
                 ) -> tuple[float, float]:
    """One draw of (delta_u_j, delta_c_j); utility uniform draw consumed first."""
    du, dc = sample_delta_matrix(scenario, 1, j_max=j, rng=rng)
    return float(du[0, j]), float(dc[0, j])


def sample_delta_matrix(scenario: SensitivityScenario, n_draws: int, j_max: int,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Shift draws for times 0..j_max, shape (n_draws, j_max + 1) each.

    Per draw, per time: utility magnitude uses one uniform, cost another
    (independent). Families: flat = 2 sd U; skew0 = 2 sd (1 - sqrt(U)) piling
    mass near zero; skew1 = 2 sd sqrt(U) piling mass near the 2 sd endpoint.
    """
    J1 = j_max + 1
    if scenario.family == "benchmark_zero":
        z = np.zeros((n_draws, J1))
        return z, z.copy()
    if scenario.family == "degenerate":
        if len(scenario.delta_u) < J1:
            raise ValidationError(
                f"degenerate scenario provides {len(scenario.delta_u)} times, need {J1}")
        du = np.tile(np.asarray(scenario.delta_u[:J1]), (n_draws, 1))
        dc = np.tile(np.asarray(scenario.delta_c[:J1]), (n_draws, 1))
        return du, dc
    if len(scenario.sd_u) < J1:
        raise ValidationError(
            f"scenario provides calibration sds for {len(scenario.sd_u)} times, need {J1}")
    sd_u = np.asarray(scenario.sd_u[:J1])
    sd_c = np.asarray(scenario.sd_c[:J1])
    # one uniform per (draw, time, outcome); utility first at each time
    unif = rng.random((n_draws, J1, 2))
    if scenario.family == "flat":
        g_u, g_c = unif[:, :, 0], unif[:, :, 1]
    elif scenario.family == "skew0":
        g_u = 1.0 - np.sqrt(unif[:, :, 0])
        g_c = 1.0 - np.sqrt(unif[:, :, 1])
    else:  # skew1
        g_u = np.sqrt(unif[:, :, 0])
        g_c = np.sqrt(unif[:, :, 1])
    return -2.0 * sd_u * g_u, 2.0 * sd_c * g_c


# ---------------------------------------------------------------------------
# working-model means per posterior draw
# ---------------------------------------------------------------------------

@dataclass
class WorkingMeans:
    """Per-draw per-time marginal means of the working model (u on u* scale)."""

    mean_u: np.ndarray
    mean_c: np.ndarray
    draw_indices: np.ndarray
    scale: str = USTAR

    @property
    def n_draws(self) -> int:
        return self.mean_u.shape[0]

    @property
    def J(self) -> int:
        return self.mean_u.shape[1] - 1


def working_time_means(draws: PosteriorDraws, n_sims: int = 100,
                       rng: np.random.Generator | None = None,
                       max_draws: int | None = None,
                       chunk: int = 400) -> WorkingMeans:
    """Monte Carlo marginal means per posterior draw.

    For each kept draw, simulates `n_sims` trajectories under that draw's
    parameters and averages. `max_draws` thins the kept draws to an evenly
    strided subset so downstream pipelines stay draw-aligned across scenarios.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    stacked = draws.stacked()
    S_all = stacked.shape[0]
    idx = _strided_indices(S_all, max_draws)
    S = len(idx)
    J = draws.meta["J"]
    family = draws.meta.get("family", "lognormal")
    floor = draws.meta.get("cost_floor", 1.0)
    zero_mask = frozenset(draws.meta.get("zero_mask", ()))
    base = HurdleParams(J, dict(zip(draws.names, stacked[idx[0]])), family, floor, zero_mask)
    mean_u = np.empty((S, J + 1))
    mean_c = np.empty((S, J + 1))
    name_cols = {n: k for k, n in enumerate(draws.names)}
    for lo in range(0, S, chunk):
        hi = min(lo + chunk, S)
        block = stacked[idx[lo:hi]]
        n_block = hi - lo
        override = {n: np.repeat(block[:, name_cols[n]], n_sims) for n in draws.names}
        u, c, _, _ = simulate_paths(base, n_block * n_sims, rng, values_override=override)
        mean_u[lo:hi] = u.reshape(n_block, n_sims, J + 1).mean(axis=1)
        mean_c[lo:hi] = c.reshape(n_block, n_sims, J + 1).mean(axis=1)
    return WorkingMeans(mean_u, mean_c, idx)


def _strided_indices(total: int, max_draws: int | None) -> np.ndarray:
    if max_draws is None or max_draws >= total:
        return np.arange(total)
    if max_draws < 1:
        raise ValidationError("max_draws must be >= 1")
    return np.unique(np.linspace(0, total - 1, max_draws).round().astype(int))


# ---------------------------------------------------------------------------
# restriction
# ---------------------------------------------------------------------------

def observed_fractions(group: GroupData) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of the group's subjects with each outcome observed per time."""
    w_u = group.r_u.mean(axis=0)
    w_c = group.r_c.mean(axis=0)
    zero = [j for j in range(group.J + 1) if w_u[j] == 0 or w_c[j] == 0]
    if zero:
        warnings.warn(
            f"no observed non-completer data at times {zero}; the group mean there "
            "is pure model extrapolation", stacklevel=2)
    return w_u, w_c


def apply_restriction(m, w, delta):
    """Group mean under the partial restriction: m + (1 - w) * delta."""
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or np.any(w > 1):
        raise ValidationError(f"observed fractions must lie in [0, 1], got {w}")
    return np.asarray(m) + (1.0 - w) * np.asarray(delta)


@dataclass
class GroupMeans:
    """Non-completer group means after the restriction (still on u* scale)."""

    mean_u: np.ndarray
    mean_c: np.ndarray
    delta_u: np.ndarray
    delta_c: np.ndarray
    scale: str = USTAR


def noncompleter_group_means(working: WorkingMeans, w_u, w_c,
                             scenario: SensitivityScenario,
                             rng: np.random.Generator | None = None) -> GroupMeans:
    """Shift working means by per-draw sensitivity draws."""
    if working.scale != USTAR:
        raise ScaleMismatchError(
            f"expected working means on the {USTAR!r} scale, got {working.scale!r}")
    if rng is None:
        rng = np.random.default_rng(scenario.seed)
    S, J = working.n_draws, working.J
    du, dc = sample_delta_matrix(scenario, S, J, rng)
    return GroupMeans(apply_restriction(working.mean_u, w_u, du),
                      apply_restriction(working.mean_c, w_c, dc),
                      du, dc)


# ---------------------------------------------------------------------------
# overall means
# ---------------------------------------------------------------------------

@dataclass
class MarginalMeans:
    """Overall per-draw marginal means on the original scales."""

    arm: int
    scenario: str
    mean_u: np.ndarray
    mean_c: np.ndarray
    scale: str = ORIGINAL
    flags: tuple[str, ...] = ()

    @property
    def n_draws(self) -> int:
        return self.mean_u.shape[0]

    @property
    def J(self) -> int:
        return self.mean_u.shape[1] - 1

    def summary(self) -> dict[str, list[float]]:
        return {
            "mean_u": [float(x) for x in self.mean_u.mean(axis=0)],
            "mean_c": [float(x) for x in self.mean_c.mean(axis=0)],
        }

    def write_csv(self, path, meta: Mapping[str, object] | None = None) -> None:
        """Long format: draw, arm, time, outcome, value."""
        header = dict(meta or {})
        header.setdefault("scenario", self.scenario)
        with open(path, "w", newline="") as fh:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
            fh.write("draw,arm,time,outcome,value,scenario\n")
            for s in range(self.n_draws):
                for j in range(self.J + 1):
                    fh.write(f"{s},{self.arm},{j},u,{format_float(self.mean_u[s, j])},"
                             f"{self.scenario}\n")
                    fh.write(f"{s},{self.arm},{j},c,{format_float(self.mean_c[s, j])},"
                             f"{self.scenario}\n")


def mix_overall_means(psi_completer: np.ndarray,
                      completer: WorkingMeans,
                      noncompleter: GroupMeans | None,
                      rescaled: RescaledDataset,
                      arm: int,
                      scenario_name: str,
                      instrument_bounds: tuple[float, float] | None = None) -> MarginalMeans:
    """Per draw: psi * completer mean + (1 - psi) * non-completer group mean.

    Inputs must be on the u* scale; the result is back-transformed to the
    original utility scale with the dataset's rescaling constants. Out-of-range
    results (utility outside the instrument bounds, negative costs) are
    recorded in `flags`, never clipped.
    """
    if completer.scale != USTAR:
        raise ScaleMismatchError(
            f"completer means must be on the {USTAR!r} scale, got {completer.scale!r}")
    psi = np.asarray(psi_completer, dtype=float)
    S = completer.n_draws
    if psi.shape != (S,):
        raise ValidationError(f"need one psi draw per mean draw: {psi.shape} vs {S}")
    if noncompleter is None:
        if not np.allclose(psi, 1.0):
            raise ValidationError(
                "non-completer means are required when psi puts mass off the completers")
        mean_u_star = completer.mean_u.copy()
        mean_c = completer.mean_c.copy()
    else:
        if noncompleter.scale != USTAR:
            raise ScaleMismatchError(
                f"non-completer means must be on the {USTAR!r} scale, got {noncompleter.scale!r}")
        if noncompleter.mean_u.shape != completer.mean_u.shape:
            raise ValidationError("completer and non-completer draw shapes differ")
        w = psi[:, None]
        mean_u_star = w * completer.mean_u + (1.0 - w) * noncompleter.mean_u
        mean_c = w * completer.mean_c + (1.0 - w) * noncompleter.mean_c
    J = completer.J
    mean_u = np.empty_like(mean_u_star)
    for j in range(J + 1):
        mean_u[:, j] = rescaled.to_original(mean_u_star[:, j], j)
    flags = []
    bounds = instrument_bounds
    if bounds is None:
        lo = min(rescaled.lo)
        hi = max(rescaled.hi)
        bounds = (lo, hi)
    n_low = int(np.sum(mean_u < bounds[0]))
    n_high = int(np.sum(mean_u > bounds[1]))
    if n_low or n_high:
        flags.append(f"{n_low + n_high} utility mean draws outside instrument "
                     f"bounds [{bounds[0]}, {bounds[1]}]")
    n_neg = int(np.sum(mean_c < 0))
    if n_neg:
        flags.append(f"{n_neg} cost mean draws negative")
    return MarginalMeans(arm, scenario_name, mean_u, mean_c, flags=tuple(flags))
