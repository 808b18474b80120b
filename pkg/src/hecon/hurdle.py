"""Two-part (hurdle) longitudinal model for utility/cost trajectories.

Responses at time 0 depend on nothing; responses at time j >= 1 depend on the
previous time only. Each response has a structural point mass (cost 0, utility
1 on the rescaled [0, 1] scale) selected by a Bernoulli hurdle, and a
continuous part elsewhere: LogNormal or Gamma for positive costs, Beta
(mean/sd parameterised) for utilities in (0, 1).

Conditional structure, with lc = log cost (structural zeros replaced by the
log of a configurable floor):

    time 0:   dc0 ~ Bern(pi_c_0);              c0 | dc0=0 ~ CostFamily(nu_c_0, tau_c_0)
              logit P(du0=1) = gamma_0_0 + gamma_1_0 * lc0
              u0 | du0=0 ~ Beta(mean=expit(alpha_0_0 + alpha_1_0 * lc0), sd=sigma_u_0)
    time j:   logit P(dcj=1) = zeta_0_j + zeta_1_j * lc(j-1) + zeta_2_j * u(j-1)
              cj | dcj=0 ~ CostFamily(beta_0_j + beta_1_j * lc(j-1) + beta_2_j * u(j-1), tau_c_j)
              logit P(duj=1) = gamma_0_j + gamma_1_j * lcj + gamma_2_j * u(j-1)
              uj | duj=0 ~ Beta(mean=expit(alpha_0_j + alpha_1_j * lcj + alpha_2_j * u(j-1)),
                                sd=sigma_u_j)

The LogNormal family reads (nu, tau) as log-scale mean and sd; the Gamma
family keeps the mean at exp(nu) and uses shape 1/tau^2, so tau stays the
coefficient of variation and parameters remain comparable across families.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import betaln, expit, gammaln

from .errors import FeasibilityError, SimulationError, ValidationError

LOG_2PI = math.log(2.0 * math.pi)
UNIT_EPS = 1e-9
COST_FAMILIES = ("lognormal", "gamma")


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

def param_names(J: int) -> tuple[str, ...]:
    """Flat parameter names in sampling order (time 0 block first)."""
    names = ["pi_c_0", "nu_c_0", "tau_c_0",
             "gamma_0_0", "gamma_1_0", "alpha_0_0", "alpha_1_0", "sigma_u_0"]
    for j in range(1, J + 1):
        names += [f"zeta_0_{j}", f"zeta_1_{j}", f"zeta_2_{j}",
                  f"beta_0_{j}", f"beta_1_{j}", f"beta_2_{j}", f"tau_c_{j}",
                  f"gamma_0_{j}", f"gamma_1_{j}", f"gamma_2_{j}",
                  f"alpha_0_{j}", f"alpha_1_{j}", f"alpha_2_{j}", f"sigma_u_{j}"]
    return tuple(names)


def param_kind(name: str) -> str:
    """"coef" (unconstrained), "scale" (positive sd), or "prob" (unit interval)."""
    if name.startswith(("tau_", "sigma_")):
        return "scale"
    if name.startswith("pi_"):
        return "prob"
    return "coef"


def block_labels(J: int) -> tuple[str, ...]:
    """Conditional blocks in chain order; labels name the conditioning set."""
    labels = ["c_0", "u_0|c_0"]
    for j in range(1, J + 1):
        labels.append(f"c_{j}|c_{j - 1},u_{j - 1}")
        labels.append(f"u_{j}|u_{j - 1},c_{j}")
    return tuple(labels)


def block_of_time(outcome: str, j: int) -> str:
    if j == 0:
        return "c_0" if outcome == "c" else "u_0|c_0"
    if outcome == "c":
        return f"c_{j}|c_{j - 1},u_{j - 1}"
    return f"u_{j}|u_{j - 1},c_{j}"


def param_site(name: str) -> tuple[str, int, str]:
    """Map a parameter to (outcome, time, term) with term in {"bern", "cont"}."""
    stem, _, time = name.rpartition("_")
    j = int(time)
    if stem in ("pi_c", "zeta_0", "zeta_1", "zeta_2"):
        return "c", j, "bern"
    if stem in ("nu_c", "tau_c", "beta_0", "beta_1", "beta_2"):
        return "c", j, "cont"
    if stem in ("gamma_0", "gamma_1", "gamma_2"):
        return "u", j, "bern"
    if stem in ("alpha_0", "alpha_1", "alpha_2", "sigma_u"):
        return "u", j, "cont"
    raise ValidationError(f"unknown parameter name {name!r}")


def slope_covariate(name: str) -> tuple[str, int] | None:
    """Which covariate a regression slope multiplies: ("lc"|"u", time), else None."""
    stem, _, time = name.rpartition("_")
    j = int(time)
    if stem in ("zeta_1", "beta_1"):
        return ("lc", j - 1)
    if stem in ("zeta_2", "beta_2"):
        return ("u", j - 1)
    if stem in ("gamma_1", "alpha_1"):
        return ("lc", j)
    if stem in ("gamma_2", "alpha_2"):
        return ("u", j - 1)
    return None


@dataclass(frozen=True)
class HurdleParams:
    """One complete parameter set; `values` maps every name from param_names(J).

    Zero-masked coefficient names must carry the value 0.0; they stay pinned
    during fitting and contribute no prior term.
    """

    J: int
    values: Mapping[str, float]
    cost_family: str = "lognormal"
    cost_floor: float = 1.0
    zero_mask: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        expected = set(param_names(self.J))
        got = set(self.values)
        if got != expected:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ValidationError(
                f"parameter set mismatch for J={self.J}: missing {missing}, unexpected {extra}")
        if self.cost_family not in COST_FAMILIES:
            raise ValidationError(f"unknown cost family {self.cost_family!r}")
        if not (self.cost_floor > 0):
            raise ValidationError(f"cost floor must be positive, got {self.cost_floor}")
        for name, v in self.values.items():
            if not math.isfinite(v):
                raise ValidationError(f"parameter {name} is not finite: {v}")
            kind = param_kind(name)
            if kind == "scale" and not v > 0:
                raise ValidationError(f"scale parameter {name} must be positive, got {v}")
            if kind == "prob" and not 0.0 <= v <= 1.0:
                raise ValidationError(f"probability {name} must lie in [0, 1], got {v}")
        for name in self.zero_mask:
            if name not in expected:
                raise ValidationError(f"zero-masked name {name!r} is not a parameter for J={self.J}")
            if param_kind(name) != "coef":
                raise ValidationError(f"only regression coefficients can be zero-masked, got {name!r}")
            if self.values[name] != 0.0:
                raise ValidationError(f"zero-masked parameter {name} must be 0, got {self.values[name]}")

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    def to_flat_dict(self) -> dict[str, float]:
        return {name: float(self.values[name]) for name in param_names(self.J)}

    def replace_values(self, updates: Mapping[str, float]) -> "HurdleParams":
        merged = dict(self.values)
        merged.update(updates)
        return HurdleParams(self.J, merged, self.cost_family, self.cost_floor, self.zero_mask)


@dataclass(frozen=True)
class Trajectory:
    """One simulated subject path on the rescaled utility scale."""

    u: np.ndarray
    c: np.ndarray
    du: np.ndarray
    dc: np.ndarray

    def __post_init__(self):
        if not (len(self.u) == len(self.c) == len(self.du) == len(self.dc)):
            raise ValidationError("trajectory arrays must share one length")
        if np.any((self.c == 0) != self.dc):
            raise ValidationError("cost hurdle indicator inconsistent with cost values")
        if np.any((self.u == 1.0) != self.du):
            raise ValidationError("utility hurdle indicator inconsistent with utility values")
        if np.any(self.c < 0) or np.any((self.u < 0) | (self.u > 1)):
            raise ValidationError("trajectory values outside their supports")

    @property
    def J(self) -> int:
        return len(self.u) - 1


@dataclass(frozen=True)
class PriorConfig:
    """Vague priors: Normal(0, coef_sd^2) on coefficients, Uniform(0, scale_upper)
    on tau/sigma, Uniform(0, 1) on free probabilities."""

    coef_sd: float = 100.0
    scale_upper: float = 100.0


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------

def beta_moments_to_shapes(nu, sigma):
    """Convert Beta mean/sd to shapes (a, b); requires sd^2 < nu * (1 - nu)."""
    nu = np.asarray(nu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    phi = nu * (1.0 - nu) / (sigma * sigma) - 1.0
    if np.any(phi <= 0):
        bad = np.asarray(phi <= 0)
        bad_nu = np.broadcast_to(nu, bad.shape)[bad].flat[0]
        bad_sd = np.broadcast_to(sigma, bad.shape)[bad].flat[0]
        raise FeasibilityError(
            f"infeasible Beta moments: mean {float(bad_nu)}, sd {float(bad_sd)} "
            "(need sd^2 < mean*(1-mean))")
    a = nu * phi
    b = (1.0 - nu) * phi
    if a.ndim == 0:
        return float(a), float(b)
    return a, b


def clamp_unit(u):
    """Clamp onto [1e-9, 1 - 1e-9] before Beta density evaluation."""
    return np.clip(u, UNIT_EPS, 1.0 - UNIT_EPS)


def lognormal_logpdf(c, mu, tau):
    lc = np.log(c)
    return -lc - np.log(tau) - 0.5 * LOG_2PI - (lc - mu) ** 2 / (2.0 * tau * tau)


def gamma_logpdf_mean_cv(c, mu, tau):
    """Gamma with mean exp(mu) and coefficient of variation tau (shape 1/tau^2)."""
    k = 1.0 / (tau * tau)
    rate = k / np.exp(mu)
    return k * np.log(rate) - gammaln(k) + (k - 1.0) * np.log(c) - rate * c


def cost_cont_logpdf(family: str, c, mu, tau):
    if family == "lognormal":
        return lognormal_logpdf(c, mu, tau)
    return gamma_logpdf_mean_cv(c, mu, tau)


def beta_logpdf_moments(u, nu, sigma):
    """Beta log-density by moments; -inf where the moment pair is infeasible."""
    nu = np.asarray(nu, dtype=float)
    var = np.asarray(sigma, dtype=float) ** 2
    phi = nu * (1.0 - nu) / var - 1.0
    feasible = phi > 0
    phi_safe = np.where(feasible, phi, 1.0)
    a = nu * phi_safe
    b = (1.0 - nu) * phi_safe
    uc = clamp_unit(u)
    ll = (a - 1.0) * np.log(uc) + (b - 1.0) * np.log1p(-uc) - betaln(a, b)
    return np.where(feasible, ll, -np.inf)


def bernoulli_logit_loglik(d, lin):
    """log P(d | logit = lin) for d in {0, 1}: d*lin - log(1 + exp(lin))."""
    return np.asarray(d, dtype=float) * lin - np.logaddexp(0.0, lin)


def log_cost_covariate(c, floor: float):
    """log cost with structural zeros replaced by log(floor)."""
    return np.log(np.where(c > 0, c, floor))


# ---------------------------------------------------------------------------
# block log-likelihood (reference implementation)
# ---------------------------------------------------------------------------

def per_block_loglik(params: HurdleParams, u, c, du, dc) -> dict[str, np.ndarray]:
    """Per-subject log-likelihood of every conditional block.

    Arrays are (n, J+1); utilities must already be on [0, 1]. Every block is
    evaluated for every subject; callers that need observed-data likelihoods
    select blocks by the response masks.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    c = np.atleast_2d(np.asarray(c, dtype=float))
    du = np.atleast_2d(du).astype(bool)
    dc = np.atleast_2d(dc).astype(bool)
    v = params.values
    J = params.J
    lc = log_cost_covariate(c, params.cost_floor)
    out: dict[str, np.ndarray] = {}

    with np.errstate(divide="ignore", invalid="ignore"):
        pi0 = v["pi_c_0"]
        cont0 = cost_cont_logpdf(params.cost_family, np.where(dc[:, 0], 1.0, c[:, 0]),
                                 v["nu_c_0"], v["tau_c_0"])
        lp = math.log(pi0) if pi0 > 0 else -math.inf
        lq = math.log1p(-pi0) if pi0 < 1 else -math.inf
        out["c_0"] = np.where(dc[:, 0], lp, lq + np.where(dc[:, 0], 0.0, cont0))

        lin_g = v["gamma_0_0"] + v["gamma_1_0"] * lc[:, 0]
        lin_a = v["alpha_0_0"] + v["alpha_1_0"] * lc[:, 0]
        beta0 = beta_logpdf_moments(u[:, 0], expit(lin_a), v["sigma_u_0"])
        out["u_0|c_0"] = bernoulli_logit_loglik(du[:, 0], lin_g) + np.where(du[:, 0], 0.0, beta0)

        for j in range(1, J + 1):
            lcp, up = lc[:, j - 1], u[:, j - 1]
            lin_z = v[f"zeta_0_{j}"] + v[f"zeta_1_{j}"] * lcp + v[f"zeta_2_{j}"] * up
            mu_c = v[f"beta_0_{j}"] + v[f"beta_1_{j}"] * lcp + v[f"beta_2_{j}"] * up
            cont = cost_cont_logpdf(params.cost_family, np.where(dc[:, j], 1.0, c[:, j]),
                                    mu_c, v[f"tau_c_{j}"])
            out[block_of_time("c", j)] = (bernoulli_logit_loglik(dc[:, j], lin_z)
                                          + np.where(dc[:, j], 0.0, cont))

            lin_g = v[f"gamma_0_{j}"] + v[f"gamma_1_{j}"] * lc[:, j] + v[f"gamma_2_{j}"] * up
            lin_a = v[f"alpha_0_{j}"] + v[f"alpha_1_{j}"] * lc[:, j] + v[f"alpha_2_{j}"] * up
            beta_j = beta_logpdf_moments(u[:, j], expit(lin_a), v[f"sigma_u_{j}"])
            out[block_of_time("u", j)] = (bernoulli_logit_loglik(du[:, j], lin_g)
                                          + np.where(du[:, j], 0.0, beta_j))
    return out


def loglik_subject(params: HurdleParams, traj: Trajectory,
                   r_u=None, r_c=None) -> float:
    """Joint log-likelihood of one trajectory.

    When response masks are given, blocks whose response is unobserved are
    omitted; blocks that condition on unobserved predecessors still use the
    values carried by `traj`, which must then hold imputations.
    """
    if traj.J != params.J:
        raise ValidationError(f"trajectory has J={traj.J}, parameters have J={params.J}")
    blocks = per_block_loglik(params, traj.u[None, :], traj.c[None, :],
                              traj.du[None, :], traj.dc[None, :])
    r_u = np.ones(params.J + 1, dtype=bool) if r_u is None else np.asarray(r_u, dtype=bool)
    r_c = np.ones(params.J + 1, dtype=bool) if r_c is None else np.asarray(r_c, dtype=bool)
    total = 0.0
    for j in range(params.J + 1):
        if r_c[j]:
            total += float(blocks[block_of_time("c", j)][0])
        if r_u[j]:
            total += float(blocks[block_of_time("u", j)][0])
    return total


# ---------------------------------------------------------------------------
# prior
# ---------------------------------------------------------------------------

def log_prior(params: HurdleParams, prior: PriorConfig) -> float:
    """Joint log prior; -inf outside the Uniform supports. Zero-masked
    coefficients contribute nothing."""
    total = 0.0
    const_coef = -0.5 * LOG_2PI - math.log(prior.coef_sd)
    for name in param_names(params.J):
        if name in params.zero_mask:
            continue
        v = params.values[name]
        kind = param_kind(name)
        if kind == "coef":
            total += const_coef - 0.5 * (v / prior.coef_sd) ** 2
        elif kind == "scale":
            if not (0.0 < v < prior.scale_upper):
                return -math.inf
            total += -math.log(prior.scale_upper)
        else:
            if not (0.0 <= v <= 1.0):
                return -math.inf
    return total


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def simulate_paths(params: HurdleParams, n_paths: int, rng: np.random.Generator,
                   values_override: Mapping[str, np.ndarray] | None = None,
                   max_retries: int = 100):
    """Simulate `n_paths` trajectories; returns (u, c, du, dc), each (n_paths, J+1).

    `values_override` may replace any parameter with a per-path array, which
    lets callers integrate over posterior draws in one vectorised pass. Paths
    that hit an infeasible Beta mean/sd pair are redrawn whole, up to
    `max_retries` rounds; leftovers raise SimulationError.
    """
    values: dict[str, object] = dict(params.values)
    if values_override:
        for k, arr in values_override.items():
            values[k] = np.asarray(arr, dtype=float)
    u, c, du, dc, bad = _simulate_once(values, params.J, params.cost_family,
                                       params.cost_floor, n_paths, rng)
    tries = 0
    while bad.any():
        tries += 1
        if tries > max_retries:
            raise SimulationError(
                f"{int(bad.sum())} of {n_paths} paths still infeasible after "
                f"{max_retries} redraw rounds (Beta mean/sd out of range)")
        idx = np.nonzero(bad)[0]
        sub = {k: (v[idx] if isinstance(v, np.ndarray) and v.ndim else v)
               for k, v in values.items()}
        su, sc, sdu, sdc, sbad = _simulate_once(sub, params.J, params.cost_family,
                                                params.cost_floor, len(idx), rng)
        u[idx], c[idx], du[idx], dc[idx] = su, sc, sdu, sdc
        bad[:] = False
        bad[idx] = sbad
    return u, c, du, dc


def _simulate_once(v: Mapping[str, object], J: int, family: str, floor: float,
                   n: int, rng: np.random.Generator):
    with np.errstate(over="ignore"):
        return _simulate_once_inner(v, J, family, floor, n, rng)


def _simulate_once_inner(v: Mapping[str, object], J: int, family: str, floor: float,
                         n: int, rng: np.random.Generator):
    u = np.empty((n, J + 1))
    c = np.empty((n, J + 1))
    du = np.zeros((n, J + 1), dtype=bool)
    dc = np.zeros((n, J + 1), dtype=bool)
    bad = np.zeros(n, dtype=bool)

    def draw_cost(mu, tau, hit):
        if family == "lognormal":
            pos = np.exp(rng.normal(np.broadcast_to(mu, (n,)), np.broadcast_to(tau, (n,))))
        else:
            k = 1.0 / (np.asarray(tau, dtype=float) ** 2)
            pos = rng.gamma(np.broadcast_to(k, (n,)), np.broadcast_to(np.exp(mu) / k, (n,)))
        pos = np.maximum(pos, np.finfo(float).tiny)
        return np.where(hit, 0.0, pos)

    def draw_utility(lin, sigma, hit):
        nu = expit(lin)
        var = np.broadcast_to(np.asarray(sigma, dtype=float), (n,)) ** 2
        phi = nu * (1.0 - nu) / var - 1.0
        feasible = phi > 0
        phi_safe = np.where(feasible, phi, 1.0)
        # infeasible rows are redrawn whole; keep Beta shapes strictly positive
        nu_draw = np.clip(nu, 1e-9, 1.0 - 1e-9)
        draw = rng.beta(np.broadcast_to(nu_draw * phi_safe, (n,)),
                        np.broadcast_to((1.0 - nu_draw) * phi_safe, (n,)))
        draw = clamp_unit(draw)
        out = np.where(hit, 1.0, draw)
        return out, feasible | hit

    dc[:, 0] = rng.random(n) < np.broadcast_to(np.asarray(v["pi_c_0"], dtype=float), (n,))
    c[:, 0] = draw_cost(v["nu_c_0"], v["tau_c_0"], dc[:, 0])
    lc_prev = np.log(np.where(c[:, 0] > 0, c[:, 0], floor))
    lin_g = v["gamma_0_0"] + v["gamma_1_0"] * lc_prev
    du[:, 0] = rng.random(n) < expit(lin_g)
    lin_a = v["alpha_0_0"] + v["alpha_1_0"] * lc_prev
    u[:, 0], ok = draw_utility(lin_a, v["sigma_u_0"], du[:, 0])
    bad |= ~ok

    for j in range(1, J + 1):
        up = u[:, j - 1]
        lin_z = v[f"zeta_0_{j}"] + v[f"zeta_1_{j}"] * lc_prev + v[f"zeta_2_{j}"] * up
        dc[:, j] = rng.random(n) < expit(lin_z)
        mu_c = v[f"beta_0_{j}"] + v[f"beta_1_{j}"] * lc_prev + v[f"beta_2_{j}"] * up
        c[:, j] = draw_cost(mu_c, v[f"tau_c_{j}"], dc[:, j])
        lc_j = np.log(np.where(c[:, j] > 0, c[:, j], floor))
        lin_g = v[f"gamma_0_{j}"] + v[f"gamma_1_{j}"] * lc_j + v[f"gamma_2_{j}"] * up
        du[:, j] = rng.random(n) < expit(lin_g)
        lin_a = v[f"alpha_0_{j}"] + v[f"alpha_1_{j}"] * lc_j + v[f"alpha_2_{j}"] * up
        u[:, j], ok = draw_utility(lin_a, v[f"sigma_u_{j}"], du[:, j])
        bad |= ~ok
        lc_prev = lc_j
    return u, c, du, dc, bad


def simulate_trajectory(params: HurdleParams, rng: np.random.Generator) -> Trajectory:
    u, c, du, dc = simulate_paths(params, 1, rng)
    return Trajectory(u[0], c[0], du[0], dc[0])


def marginal_mean_by_mc(params: HurdleParams, n_sims: int,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo per-time marginal means (E[u*], E[c]) under the model."""
    if n_sims < 1:
        raise ValidationError("n_sims must be >= 1")
    u, c, _, _ = simulate_paths(params, n_sims, rng)
    return u.mean(axis=0), c.mean(axis=0)
