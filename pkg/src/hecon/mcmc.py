"""Posterior sampling: adaptive componentwise random-walk Metropolis within Gibbs.

Each scalar parameter is updated by a random-walk proposal on an unconstrained
transform (identity for coefficients, log for tau/sigma, logit for the free
zero-cost probability, with the matching Jacobians). Proposal scales adapt
toward a target acceptance rate during burn-in only. Missing responses are
part of the sampler state: each sweep re-proposes them from the model
conditional given the current history, accepting by the ratio of the
downstream likelihood terms.

Intercepts are proposed at the covariate centre (the linear predictor at the
within-group mean of each covariate) rather than at covariate zero; this is an
affine change of proposal coordinates only. Recorded draws and priors are
always in the raw parameterisation of the model equations.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, gammaln, betaln

from . import hurdle
from .data import GroupData, PatternTable, format_float
from .errors import FitError, ValidationError
from .hurdle import HurdleParams, PriorConfig, param_kind, param_names, param_site, slope_covariate

LOGIT_CAP = 35.0


def _logit(p: float) -> float:
    p = min(max(p, 1e-12), 1 - 1e-12)
    return math.log(p / (1 - p))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainConfig:
    """Sampler settings; defaults give 2 x (20000 - 5000) = 30000 kept draws."""

    n_chains: int = 2
    n_iter: int = 20000
    burn_in: int = 5000
    thin: int = 1
    seed: int = 0
    adapt_window: int = 50
    target_accept: float = 0.44
    zero_mask: tuple[str, ...] = ()
    fixed: Mapping[str, float] = field(default_factory=dict)
    retain_imputations: bool = False

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValidationError("n_chains must be >= 1")
        if not 0 <= self.burn_in < self.n_iter:
            raise ValidationError(
                f"need 0 <= burn_in < n_iter, got burn_in={self.burn_in}, n_iter={self.n_iter}")
        if self.thin < 1:
            raise ValidationError("thin must be >= 1")
        if not 0 < self.target_accept < 1:
            raise ValidationError("target_accept must lie in (0, 1)")

    @property
    def kept_per_chain(self) -> int:
        return (self.n_iter - self.burn_in + self.thin - 1) // self.thin


# ---------------------------------------------------------------------------
# convergence diagnostics
# ---------------------------------------------------------------------------

def rhat(chains) -> float:
    """Split potential-scale-reduction factor.

    `chains` is (n_chains, n_samples). Chains are halved before computing the
    between/within variance ratio. Degenerate cases: zero within-chain and
    zero between-chain variance gives 1.0; zero within- with nonzero
    between-chain variance gives +inf.
    """
    x = np.atleast_2d(np.asarray(chains, dtype=float))
    n = x.shape[1] // 2
    if n < 2:
        raise ValidationError("rhat needs at least 4 samples per chain")
    halves = np.concatenate([x[:, :n], x[:, n:2 * n]], axis=0)
    means = halves.mean(axis=1)
    w = float(np.mean(np.var(halves, axis=1, ddof=1)))
    b_over_n = float(np.var(means, ddof=1))
    if w == 0.0:
        return 1.0 if b_over_n == 0.0 else math.inf
    var_plus = (n - 1) / n * w + b_over_n
    return math.sqrt(var_plus / w)


def ess(chains) -> float:
    """Effective sample size from the initial positive sequence of autocorrelations.

    Autocovariances are averaged across chains and normalised by the pooled
    (between + within) variance; pairwise sums of autocorrelations are
    accumulated while positive. Result is clipped to (0, total draws]; a
    constant chain reports the sentinel 1.0.
    """
    x = np.atleast_2d(np.asarray(chains, dtype=float))
    k, n = x.shape
    if n < 100:
        raise ValidationError("ess needs at least 100 samples per chain")
    total = k * n
    chain_means = x.mean(axis=1)
    w = float(np.mean(np.var(x, axis=1, ddof=1)))
    b_over_n = float(np.var(chain_means, ddof=1)) if k > 1 else 0.0
    var_plus = (n - 1) / n * w + b_over_n
    if var_plus == 0.0 or w == 0.0:
        return 1.0
    acov = np.zeros(n)
    for i in range(k):
        acov += _autocov_fft(x[i] - chain_means[i])
    acov /= k
    rho = 1.0 - (w - acov) / var_plus
    rho[0] = 1.0
    tau = 0.0
    m = 0
    while 2 * m + 1 < n:
        gamma = rho[2 * m] + rho[2 * m + 1]
        if gamma <= 0:
            break
        tau += gamma
        m += 1
    tau = max(2.0 * tau - 1.0, 1e-12)
    return float(min(total / tau, total))


def _autocov_fft(y: np.ndarray) -> np.ndarray:
    n = len(y)
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(y, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n].real
    return acov / n


# ---------------------------------------------------------------------------
# pattern-probability posterior
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DirichletSpec:
    """Prior over observed missingness patterns.

    "structured" puts weight 1 - dropout_weight on the completer pattern and
    dropout_weight / R_star on each observed non-completer pattern, where
    R_star = 4^(J+1) counts all potential patterns. "flat" is Dirichlet(1,..,1).
    """

    kind: str = "structured"
    dropout_weight: float = 0.2

    def __post_init__(self):
        if self.kind not in ("structured", "flat"):
            raise ValidationError(f"unknown Dirichlet prior kind {self.kind!r}")
        if not 0 < self.dropout_weight < 1:
            raise ValidationError("dropout_weight must lie in (0, 1)")


@dataclass(frozen=True)
class PsiPosterior:
    """Dirichlet posterior over one arm's observed patterns (completer first)."""

    arm: int
    signatures: tuple[tuple[int, ...], ...]
    prior_alpha: np.ndarray
    alpha: np.ndarray
    completer_index: int | None

    @property
    def n_patterns(self) -> int:
        return len(self.signatures)

    def sample(self, n_draws: int, rng: np.random.Generator) -> np.ndarray:
        """Draws of the full pattern-probability vector, shape (n_draws, R_t)."""
        if self.n_patterns == 1:
            return np.ones((n_draws, 1))
        return rng.dirichlet(self.alpha, size=n_draws)

    def sample_completer(self, n_draws: int, rng: np.random.Generator) -> np.ndarray:
        """Draws of (psi_completer); completer mass is 0 when never observed."""
        if self.completer_index is None:
            return np.zeros(n_draws)
        return self.sample(n_draws, rng)[:, self.completer_index]

    def posterior_mean(self) -> np.ndarray:
        return self.alpha / self.alpha.sum()


def r_star(J: int) -> int:
    """Total count of potential response patterns: 4^(J+1)."""
    return 4 ** (J + 1)


def fit_pattern_probs(table: PatternTable, spec: DirichletSpec = DirichletSpec()) -> PsiPosterior:
    """Conjugate multinomial-Dirichlet update over the table's patterns."""
    counts = np.array(table.counts(), dtype=float)
    completer_index = None
    for i, row in enumerate(table.rows):
        if row.is_completer:
            completer_index = i
    if spec.kind == "flat":
        prior = np.ones(len(counts))
    else:
        x = spec.dropout_weight
        prior = np.full(len(counts), x / r_star(table.J))
        if completer_index is not None:
            prior[completer_index] = 1.0 - x
    return PsiPosterior(table.arm, tuple(r.signature for r in table.rows),
                        prior, prior + counts, completer_index)


# ---------------------------------------------------------------------------
# generic componentwise sampler
# ---------------------------------------------------------------------------

def run_componentwise_chain(target, n_iter: int, burn_in: int, thin: int,
                            adapt_window: int, target_accept: float,
                            rng: np.random.Generator):
    """Drive one chain over any target exposing the componentwise protocol.

    Target protocol: attributes `n_params`, `free` (bool array); methods
    `logpost_delta(k, z_new) -> float`, `commit(k, z_new)`, `z_value(k)`,
    `sweep_latent(rng)`, `record() -> 1-D array`, and optionally
    `refresh_caches()`.
    """
    p = target.n_params
    free_idx = np.nonzero(target.free)[0]
    log_scale = np.full(p, math.log(0.5))
    accept_win = np.zeros(p)
    accept_tot = np.zeros(p)
    kept = []
    n_windows = 0
    refresh_every = 500
    for it in range(n_iter):
        for k in free_idx:
            z_new = target.z_value(k) + math.exp(log_scale[k]) * rng.standard_normal()
            delta = target.logpost_delta(k, z_new)
            if math.log(rng.random()) < delta:
                target.commit(k, z_new)
                accept_win[k] += 1
                accept_tot[k] += 1
        target.sweep_latent(rng)
        if it < burn_in and (it + 1) % adapt_window == 0:
            n_windows += 1
            gain = min(2.0, 8.0 / math.sqrt(n_windows))
            log_scale[free_idx] += gain * (accept_win[free_idx] / adapt_window - target_accept)
            accept_win[:] = 0.0
        if hasattr(target, "refresh_caches") and (it + 1) % refresh_every == 0:
            target.refresh_caches()
        if it >= burn_in and (it - burn_in) % thin == 0:
            kept.append(target.record())
    return np.asarray(kept), accept_tot / n_iter


# ---------------------------------------------------------------------------
# hurdle-model target
# ---------------------------------------------------------------------------

class _Site:
    """One likelihood sub-term: a (outcome, time, bern|cont) cell."""

    __slots__ = ("outcome", "j", "term", "intercept_k", "slopes", "scale_k",
                 "prob_k", "lin", "ll", "intercept_free")

    def __init__(self, outcome, j, term):
        self.outcome = outcome
        self.j = j
        self.term = term
        self.intercept_k = None
        self.slopes = []           # (param index, cov kind, cov time)
        self.scale_k = None
        self.prob_k = None
        self.lin = None
        self.ll = -math.inf
        self.intercept_free = True


class HurdleGroupTarget:
    """Sampler state for one arm-by-completion group.

    Holds the current complete data (observed plus imputed), the sampler
    coordinates z, and cached linear predictors / log-likelihood terms per
    sub-block so a scalar update costs one block evaluation.
    """

    def __init__(self, group: GroupData, family: str, prior: PriorConfig,
                 config: ChainConfig, cost_floor: float | None = None):
        self.group = group
        self.J = group.J
        self.family = family
        self.prior = prior
        self.config = config
        self.names = list(param_names(self.J))
        self.n_params = len(self.names)
        self.index = {n: k for k, n in enumerate(self.names)}
        self._validate_mask_and_fixed(config)

        self.u = group.u.copy()
        self.c = group.c.copy()
        self.r_u = group.r_u.copy()
        self.r_c = group.r_c.copy()
        self._init_imputations()
        self.du = self.u == 1.0
        self.dc = self.c == 0.0
        if cost_floor is None:
            pos = self.c[self.r_c & (self.c > 0)]
            cost_floor = float(pos.min()) / 2.0 if pos.size else 1.0
        self.cost_floor = cost_floor
        self.lc = np.log(np.where(self.c > 0, self.c, self.cost_floor))
        self.center_lc = self.lc.mean(axis=0)
        self.center_u = self.u.mean(axis=0)

        self.kinds = [param_kind(n) for n in self.names]
        self.free = np.ones(self.n_params, dtype=bool)
        self.z = np.zeros(self.n_params)
        self.sites = self._build_sites()
        self.site_of_param = {}
        for site in self.sites.values():
            for k in self._site_params(site):
                self.site_of_param[k] = site
        self._init_z()
        self.has_missing = bool(np.any(~self.r_u) or np.any(~self.r_c))
        self._missing_cells = [(o, j) for j in range(self.J + 1) for o in ("c", "u")
                               if np.any(~(self.r_c if o == "c" else self.r_u)[:, j])]
        self.refresh_caches()
        total = sum(s.ll for s in self.sites.values())
        if not math.isfinite(total):
            raise FitError("non-finite log posterior at initialization")

    # -- construction helpers ------------------------------------------------

    def _validate_mask_and_fixed(self, config: ChainConfig):
        valid = set(self.names)
        for name in config.zero_mask:
            if name not in valid:
                raise FitError(f"zero-masked name {name!r} is not a parameter for J={self.J}")
            if slope_covariate(name) is None:
                raise FitError(f"only slope coefficients can be zero-masked, got {name!r}")
        for name in config.fixed:
            if name not in valid:
                raise FitError(f"fixed parameter {name!r} is not a parameter for J={self.J}")
            if name in config.zero_mask:
                raise FitError(f"parameter {name!r} is both fixed and zero-masked")

    def _init_imputations(self):
        for j in range(self.J + 1):
            for arr, r, fallback in ((self.u, self.r_u, 0.5), (self.c, self.r_c, 1.0)):
                miss = ~r[:, j]
                if not miss.any():
                    continue
                obs = arr[r[:, j], j]
                fill = float(obs.mean()) if obs.size else fallback
                arr[miss, j] = fill

    def _build_sites(self):
        sites = {}
        for j in range(self.J + 1):
            for outcome in ("c", "u"):
                for term in ("bern", "cont"):
                    sites[(outcome, j, term)] = _Site(outcome, j, term)
        for k, name in enumerate(self.names):
            outcome, j, term = param_site(name)
            site = sites[(outcome, j, term)]
            kind = self.kinds[k]
            if kind == "scale":
                site.scale_k = k
            elif kind == "prob":
                site.prob_k = k
            else:
                cov = slope_covariate(name)
                if cov is None:
                    site.intercept_k = k
                else:
                    site.slopes.append((k, cov[0], cov[1]))
        return sites

    def _site_params(self, site: _Site):
        out = []
        for k in (site.intercept_k, site.scale_k, site.prob_k):
            if k is not None:
                out.append(k)
        out.extend(k for k, _, _ in site.slopes)
        return out

    def _init_z(self):
        fixed = dict(self.config.fixed)
        mask = set(self.config.zero_mask)
        n = self.group.n
        for k, name in enumerate(self.names):
            kind = self.kinds[k]
            if name in mask:
                self.z[k] = 0.0
                self.free[k] = False
                continue
            if name in fixed:
                v = float(fixed[name])
                if kind == "scale":
                    if not v > 0:
                        raise FitError(f"fixed scale {name} must be positive, got {v}")
                    self.z[k] = math.log(v)
                elif kind == "prob":
                    self.z[k] = _logit(v)
                else:
                    self.z[k] = v  # adjusted below for intercepts
                self.free[k] = False
                continue
            if kind == "scale":
                self.z[k] = math.log(1.0) if name.startswith("tau_") else math.log(0.2)
            elif kind == "prob":
                obs = self.r_c[:, 0]
                count = float(np.sum(self.dc[obs, 0]))
                n_obs = float(np.sum(obs))
                self.z[k] = _logit((count + 0.5) / (n_obs + 1.0))
            else:
                self.z[k] = 0.0
        # hurdle regression intercepts start at the empirical event logit
        for site in self.sites.values():
            if site.term != "bern" or site.intercept_k is None:
                continue
            k = site.intercept_k
            if not self.free[k]:
                continue
            d = self.dc if site.outcome == "c" else self.du
            r = self.r_c if site.outcome == "c" else self.r_u
            obs = r[:, site.j]
            count = float(np.sum(d[obs, site.j]))
            n_obs = float(np.sum(obs))
            if n_obs > 0:
                self.z[k] = _logit((count + 0.5) / (n_obs + 1.0))
        # move intercept coordinates to the covariate centre; a fixed intercept
        # keeps its raw value and flags the site so slope moves stay raw
        for site in self.sites.values():
            ki = site.intercept_k
            if ki is None:
                continue
            if self.names[ki] in self.config.fixed or not self.free[ki]:
                site.intercept_free = self.free[ki]
            if site.intercept_free:
                self.z[ki] += self._center_shift(site)

    def _center_shift(self, site: _Site) -> float:
        return sum(self.z[k] * self._center_of(cov, t) for k, cov, t in site.slopes)

    def _center_of(self, cov: str, t: int) -> float:
        return self.center_lc[t] if cov == "lc" else self.center_u[t]

    # -- likelihood evaluation -----------------------------------------------

    def _lin_rows(self, site: _Site, rows=None):
        """Linear predictor at the current coordinates, full length or rows."""
        sl = slice(None) if rows is None else rows
        ki = site.intercept_k
        if site.intercept_free:
            lin = np.full(self.group.n if rows is None else len(rows), self.z[ki])
            for k, cov, t in site.slopes:
                x = (self.lc if cov == "lc" else self.u)[sl, t]
                lin = lin + self.z[k] * (x - self._center_of(cov, t))
        else:
            lin = np.full(self.group.n if rows is None else len(rows), self.z[ki])
            for k, cov, t in site.slopes:
                x = (self.lc if cov == "lc" else self.u)[sl, t]
                lin = lin + self.z[k] * x
        return lin

    def _site_ll(self, site: _Site, lin=None, scale=None, prob_z=None):
        """Log-likelihood of a site at the given (possibly proposed) pieces."""
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return self._site_ll_inner(site, lin, scale, prob_z)

    def _site_ll_inner(self, site: _Site, lin=None, scale=None, prob_z=None):
        j = site.j
        if site.outcome == "c" and j == 0 and site.term == "bern":
            zp = self.z[site.prob_k] if prob_z is None else prob_z
            n1 = float(np.sum(self.dc[:, 0]))
            n0 = self.group.n - n1
            # log pi = -softplus(-z), log(1-pi) = -softplus(z)
            return -n1 * np.logaddexp(0.0, -zp) - n0 * np.logaddexp(0.0, zp)
        if site.term == "bern":
            d = (self.dc if site.outcome == "c" else self.du)[:, j]
            if lin is None:
                lin = self._lin_rows(site)
            return float(np.sum(lin[d]) - np.sum(np.logaddexp(0.0, lin)))
        # continuous parts evaluate over the d == 0 subset
        if site.outcome == "c":
            keep = ~self.dc[:, j]
            if not keep.any():
                return 0.0
            tau = math.exp(self.z[site.scale_k]) if scale is None else scale
            if site.intercept_k is not None and site.slopes:
                mu = (self._lin_rows(site)[keep] if lin is None else lin[keep])
            elif lin is None:
                mu = np.full(int(keep.sum()), self.z[site.intercept_k])
            else:
                mu = lin[keep]
            lcj = self.lc[keep, j]
            if self.family == "lognormal":
                return float(np.sum(-lcj) - lcj.size * (math.log(tau) + 0.5 * hurdle.LOG_2PI)
                             - np.sum((lcj - mu) ** 2) / (2.0 * tau * tau))
            k_sh = 1.0 / (tau * tau)
            cj = self.c[keep, j]
            return float(k_sh * np.sum(np.log(k_sh) - mu) - cj.size * gammaln(k_sh)
                         + (k_sh - 1.0) * np.sum(lcj) - k_sh * np.sum(cj * np.exp(-mu)))
        keep = ~self.du[:, j]
        if not keep.any():
            return 0.0
        sigma = math.exp(self.z[site.scale_k]) if scale is None else scale
        lin_k = self._lin_rows(site)[keep] if lin is None else lin[keep]
        nu = expit(lin_k)
        var = sigma * sigma
        phi = nu * (1.0 - nu) / var - 1.0
        if np.any(phi <= 0):
            return -math.inf
        a = nu * phi
        b = (1.0 - nu) * phi
        uj = hurdle.clamp_unit(self.u[keep, j])
        return float(np.sum((a - 1.0) * np.log(uj) + (b - 1.0) * np.log1p(-uj)
                            - betaln(a, b)))

    def refresh_caches(self):
        for site in self.sites.values():
            if site.term == "bern" and not (site.outcome == "c" and site.j == 0):
                site.lin = self._lin_rows(site)
                site.ll = self._site_ll(site, lin=site.lin)
            elif site.term == "cont" and site.slopes:
                site.lin = self._lin_rows(site)
                site.ll = self._site_ll(site, lin=site.lin)
            else:
                site.lin = None
                site.ll = self._site_ll(site)

    # -- prior ----------------------------------------------------------------

    def _raw_intercept(self, site: _Site) -> float:
        ki = site.intercept_k
        if not site.intercept_free:
            return self.z[ki]
        return self.z[ki] - self._center_shift(site)

    def _coef_logprior(self, value: float) -> float:
        sd = self.prior.coef_sd
        return -0.5 * (value / sd) ** 2 - math.log(sd) - 0.5 * hurdle.LOG_2PI

    # -- componentwise protocol ------------------------------------------------

    def z_value(self, k: int) -> float:
        return float(self.z[k])

    def logpost_delta(self, k: int, z_new: float):
        site = self.site_of_param[k]
        kind = self.kinds[k]
        z_old = self.z[k]
        self._pending = None
        if kind == "prob":
            ll_new = self._site_ll(site, prob_z=z_new)
            # Uniform(0,1) prior plus logit Jacobian log(pi (1 - pi))
            jac = -(np.logaddexp(0.0, z_new) + np.logaddexp(0.0, -z_new)) \
                + (np.logaddexp(0.0, z_old) + np.logaddexp(0.0, -z_old))
            self._pending = (site, None, ll_new)
            return ll_new - site.ll + float(jac)
        if kind == "scale":
            if z_new > math.log(self.prior.scale_upper):
                return -math.inf
            ll_new = self._site_ll(site, lin=site.lin, scale=math.exp(z_new))
            self._pending = (site, None, ll_new)
            return ll_new - site.ll + (z_new - z_old)
        # coefficient: intercept or slope
        dz = z_new - z_old
        if k == site.intercept_k:
            if site.lin is not None:
                lin_new = site.lin + dz
                ll_new = self._site_ll(site, lin=lin_new)
            else:
                # no cached predictor (constant-mean block): evaluate at z_new
                lin_new = None
                self.z[k] = z_new
                ll_new = self._site_ll(site)
                self.z[k] = z_old
            raw_old = self._raw_intercept(site)
            dprior = self._coef_logprior(raw_old + dz) - self._coef_logprior(raw_old)
            self._pending = (site, lin_new, ll_new)
            return ll_new - site.ll + dprior
        cov, t = next((cv, tt) for kk, cv, tt in site.slopes if kk == k)
        x = (self.lc if cov == "lc" else self.u)[:, t]
        if site.intercept_free:
            lin_new = site.lin + dz * (x - self._center_of(cov, t))
        else:
            lin_new = site.lin + dz * x
        ll_new = self._site_ll(site, lin=lin_new)
        dprior = self._coef_logprior(z_new) - self._coef_logprior(z_old)
        if site.intercept_free and site.intercept_k is not None:
            # holding the centred intercept moves the raw intercept with the slope
            raw_old = self._raw_intercept(site)
            raw_new = raw_old - dz * self._center_of(cov, t)
            dprior += self._coef_logprior(raw_new) - self._coef_logprior(raw_old)
        self._pending = (site, lin_new, ll_new)
        return ll_new - site.ll + dprior

    def commit(self, k: int, z_new: float):
        site, lin_new, ll_new = self._pending
        self.z[k] = z_new
        if lin_new is not None:
            site.lin = lin_new
        site.ll = ll_new

    def record(self) -> np.ndarray:
        out = np.empty(self.n_params)
        for k, name in enumerate(self.names):
            kind = self.kinds[k]
            if kind == "scale":
                out[k] = math.exp(self.z[k])
            elif kind == "prob":
                out[k] = expit(self.z[k])
            else:
                out[k] = self.z[k]
        for site in self.sites.values():
            if site.intercept_k is not None and site.intercept_free and site.slopes:
                out[site.intercept_k] = self._raw_intercept(site)
        return out

    def current_params(self) -> HurdleParams:
        vals = dict(zip(self.names, self.record()))
        return HurdleParams(self.J, vals, self.family, self.cost_floor,
                            frozenset(self.config.zero_mask))

    # -- data augmentation ------------------------------------------------------

    def sweep_latent(self, rng: np.random.Generator):
        if not self.has_missing:
            return
        for outcome, j in self._missing_cells:
            if outcome == "c":
                self._update_missing_cost(j, rng)
            else:
                self._update_missing_utility(j, rng)
        self.refresh_caches()

    def _cell_lin(self, site_key, rows, lc_vals=None, u_vals=None):
        """Raw linear predictor for given rows, optionally overriding covariates."""
        site = self.sites[site_key]
        lin = np.full(len(rows), self._raw_intercept(site))
        for k, cov, t in site.slopes:
            if cov == "lc":
                x = self.lc[rows, t] if lc_vals is None or t != lc_vals[0] else lc_vals[1]
            else:
                x = self.u[rows, t] if u_vals is None or t != u_vals[0] else u_vals[1]
            lin += self.z[k] * x
        return lin

    def _downstream_cost_terms(self, j, rows, lc_j):
        """Terms that read c_j as a covariate, at hypothetical log-cost lc_j."""
        total = np.zeros(len(rows))
        site_u = ("u", j, "bern")
        lin = self._cell_lin(site_u, rows, lc_vals=(j, lc_j))
        d = self.du[rows, j]
        total += np.where(d, lin, 0.0) - np.logaddexp(0.0, lin)
        cont = ~d
        if cont.any():
            lin_a = self._cell_lin(("u", j, "cont"), rows, lc_vals=(j, lc_j))
            sigma = math.exp(self.z[self.sites[("u", j, "cont")].scale_k])
            total += np.where(cont, _beta_term_safe(self.u[rows, j], lin_a, sigma), 0.0)
        if j < self.J:
            lin_z = self._cell_lin(("c", j + 1, "bern"), rows, lc_vals=(j, lc_j))
            d2 = self.dc[rows, j + 1]
            total += np.where(d2, lin_z, 0.0) - np.logaddexp(0.0, lin_z)
            cont2 = ~d2
            if cont2.any():
                mu = self._cell_lin(("c", j + 1, "cont"), rows, lc_vals=(j, lc_j))
                tau = math.exp(self.z[self.sites[("c", j + 1, "cont")].scale_k])
                total += np.where(cont2, _cost_term_safe(self.family, self.c[rows, j + 1],
                                                         self.lc[rows, j + 1], mu, tau), 0.0)
        return total

    def _downstream_utility_terms(self, j, rows, u_j):
        """Terms that read u_j as a covariate, at hypothetical value u_j."""
        total = np.zeros(len(rows))
        if j >= self.J:
            return total
        lin_z = self._cell_lin(("c", j + 1, "bern"), rows, u_vals=(j, u_j))
        d2 = self.dc[rows, j + 1]
        total += np.where(d2, lin_z, 0.0) - np.logaddexp(0.0, lin_z)
        cont2 = ~d2
        if cont2.any():
            mu = self._cell_lin(("c", j + 1, "cont"), rows, u_vals=(j, u_j))
            tau = math.exp(self.z[self.sites[("c", j + 1, "cont")].scale_k])
            total += np.where(cont2, _cost_term_safe(self.family, self.c[rows, j + 1],
                                                     self.lc[rows, j + 1], mu, tau), 0.0)
        lin_g = self._cell_lin(("u", j + 1, "bern"), rows, u_vals=(j, u_j))
        d3 = self.du[rows, j + 1]
        total += np.where(d3, lin_g, 0.0) - np.logaddexp(0.0, lin_g)
        cont3 = ~d3
        if cont3.any():
            lin_a = self._cell_lin(("u", j + 1, "cont"), rows, u_vals=(j, u_j))
            sigma = math.exp(self.z[self.sites[("u", j + 1, "cont")].scale_k])
            total += np.where(cont3, _beta_term_safe(self.u[rows, j + 1], lin_a, sigma), 0.0)
        return total

    def _update_missing_cost(self, j, rng):
        rows = np.nonzero(~self.r_c[:, j])[0]
        if j == 0:
            pi = expit(self.z[self.index["pi_c_0"]]) * np.ones(len(rows))
            mu = np.full(len(rows), self.z[self.index["nu_c_0"]])
            tau = math.exp(self.z[self.index["tau_c_0"]])
        else:
            pi = expit(self._cell_lin(("c", j, "bern"), rows))
            mu = self._cell_lin(("c", j, "cont"), rows)
            tau = math.exp(self.z[self.sites[("c", j, "cont")].scale_k])
        d_new = rng.random(len(rows)) < pi
        if self.family == "lognormal":
            pos = np.exp(rng.normal(mu, tau))
        else:
            k_sh = 1.0 / (tau * tau)
            pos = rng.gamma(k_sh, np.exp(mu) / k_sh)
        pos = np.maximum(pos, np.finfo(float).tiny)
        c_new = np.where(d_new, 0.0, pos)
        lc_new = np.log(np.where(c_new > 0, c_new, self.cost_floor))
        delta = (self._downstream_cost_terms(j, rows, lc_new)
                 - self._downstream_cost_terms(j, rows, self.lc[rows, j]))
        acc = np.log(rng.random(len(rows))) < delta
        rows_acc = rows[acc]
        self.c[rows_acc, j] = c_new[acc]
        self.dc[rows_acc, j] = d_new[acc]
        self.lc[rows_acc, j] = lc_new[acc]

    def _update_missing_utility(self, j, rng):
        rows = np.nonzero(~self.r_u[:, j])[0]
        site_b = self.sites[("u", j, "bern")]
        site_c = self.sites[("u", j, "cont")]
        pi = expit(self._cell_lin(("u", j, "bern"), rows))
        lin_a = self._cell_lin(("u", j, "cont"), rows)
        sigma = math.exp(self.z[site_c.scale_k])
        nu = expit(lin_a)
        phi = nu * (1.0 - nu) / (sigma * sigma) - 1.0
        feasible = phi > 0
        phi_safe = np.where(feasible, phi, 1.0)
        # infeasible cells never use their draw; keep shapes strictly positive
        nu_draw = np.clip(nu, 1e-9, 1.0 - 1e-9)
        d_new = rng.random(len(rows)) < pi
        draw = hurdle.clamp_unit(rng.beta(nu_draw * phi_safe, (1.0 - nu_draw) * phi_safe))
        u_new = np.where(d_new, 1.0, draw)
        usable = feasible | d_new
        delta = (self._downstream_utility_terms(j, rows, u_new)
                 - self._downstream_utility_terms(j, rows, self.u[rows, j]))
        acc = usable & (np.log(rng.random(len(rows))) < delta)
        rows_acc = rows[acc]
        self.u[rows_acc, j] = u_new[acc]
        self.du[rows_acc, j] = d_new[acc]

    def imputed_cells(self) -> list[tuple[int, str, int]]:
        cells = []
        for i in range(self.group.n):
            for j in range(self.J + 1):
                if not self.r_u[i, j]:
                    cells.append((i, "u", j))
                if not self.r_c[i, j]:
                    cells.append((i, "c", j))
        return cells

    def imputed_values(self, cells) -> np.ndarray:
        return np.array([(self.u if o == "u" else self.c)[i, j] for i, o, j in cells])


def _beta_term_safe(u, lin, sigma):
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        nu = expit(lin)
        phi = nu * (1.0 - nu) / (sigma * sigma) - 1.0
        ok = phi > 0
        phi_safe = np.where(ok, phi, 1.0)
        a = nu * phi_safe
        b = (1.0 - nu) * phi_safe
        uc = hurdle.clamp_unit(u)
        ll = (a - 1.0) * np.log(uc) + (b - 1.0) * np.log1p(-uc) - betaln(a, b)
        return np.where(ok, ll, -np.inf)


def _cost_term_safe(family, c, lc, mu, tau):
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if family == "lognormal":
            return -lc - math.log(tau) - 0.5 * hurdle.LOG_2PI - (lc - mu) ** 2 / (2.0 * tau * tau)
        k_sh = 1.0 / (tau * tau)
        return (k_sh * (np.log(k_sh) - mu) - gammaln(k_sh)
                + (k_sh - 1.0) * lc - k_sh * c * np.exp(-mu))


# ---------------------------------------------------------------------------
# posterior container
# ---------------------------------------------------------------------------

@dataclass
class PosteriorDraws:
    """Kept draws on the natural (raw) parameter scale, shape (chains, kept, P)."""

    names: tuple[str, ...]
    chains: np.ndarray
    meta: dict

    @property
    def n_chains(self) -> int:
        return self.chains.shape[0]

    @property
    def n_draws(self) -> int:
        return self.chains.shape[0] * self.chains.shape[1]

    def stacked(self) -> np.ndarray:
        return self.chains.reshape(-1, self.chains.shape[2])

    def param(self, name: str) -> np.ndarray:
        return self.chains[:, :, self.names.index(name)]

    def params_at(self, flat_index: int) -> HurdleParams:
        row = self.stacked()[flat_index]
        return HurdleParams(self.meta["J"], dict(zip(self.names, row)),
                            self.meta.get("family", "lognormal"),
                            self.meta.get("cost_floor", 1.0),
                            frozenset(self.meta.get("zero_mask", ())))

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        stacked = self.stacked()
        for k, name in enumerate(self.names):
            col = stacked[:, k]
            per_chain = self.chains[:, :, k]
            try:
                rh = rhat(per_chain)
            except ValidationError:
                rh = float("nan")
            try:
                es = ess(per_chain)
            except ValidationError:
                es = float("nan")
            out[name] = {
                "mean": float(col.mean()),
                "sd": float(col.std(ddof=1)) if len(col) > 1 else 0.0,
                "q025": float(np.quantile(col, 0.025)),
                "q975": float(np.quantile(col, 0.975)),
                "rhat": rh,
                "ess": es,
            }
        return out

    def to_csv(self, path, extra_meta: Mapping[str, object] | None = None) -> None:
        meta = {"scenario": self.meta.get("scenario", "fit"),
                "seed": self.meta.get("seed", ""),
                "group": self.meta.get("group", ""),
                "arm": self.meta.get("arm", ""),
                "family": self.meta.get("family", ""),
                "cost_floor": self.meta.get("cost_floor", "")}
        if extra_meta:
            meta.update(extra_meta)
        with open(path, "w", newline="") as fh:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
            writer = csv.writer(fh)
            writer.writerow(["chain", "iter", *self.names])
            for ci in range(self.chains.shape[0]):
                for it in range(self.chains.shape[1]):
                    writer.writerow([ci, it, *(format_float(v) for v in self.chains[ci, it])])

    @staticmethod
    def from_csv(path) -> "PosteriorDraws":
        meta: dict = {}
        with open(path, "r", newline="") as fh:
            first = fh.readline()
            if first.startswith("#"):
                for tok in first[1:].strip().split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        meta[k] = v
                body = fh.read()
            else:
                body = first + fh.read()
        reader = csv.reader(io.StringIO(body))
        header = next(reader)
        names = tuple(header[2:])
        rows = [(int(r[0]), [float(x) for x in r[2:]]) for r in reader]
        n_chains = max(r[0] for r in rows) + 1
        per_chain = [[] for _ in range(n_chains)]
        for ci, vals in rows:
            per_chain[ci].append(vals)
        chains = np.array(per_chain)
        for key in ("cost_floor",):
            if key in meta:
                try:
                    meta[key] = float(meta[key])
                except ValueError:
                    pass
        if "J" not in meta:
            meta["J"] = _infer_J(names)
        else:
            meta["J"] = int(meta["J"])
        return PosteriorDraws(names, chains, meta)


def _infer_J(names: Sequence[str]) -> int:
    return max(int(n.rpartition("_")[2]) for n in names)


# ---------------------------------------------------------------------------
# group fit
# ---------------------------------------------------------------------------

def suggest_zero_mask(group: GroupData) -> list[str]:
    """Slope coefficients whose hurdle has fewer than 2 observed structural
    events (or fewer than 2 non-events) at a time point."""
    suggestions = []
    du = group.u == 1.0
    dc = group.c == 0.0
    for j in range(group.J + 1):
        obs_c = group.r_c[:, j]
        events = int(np.sum(dc[obs_c, j]))
        nonevents = int(np.sum(obs_c)) - events
        if j >= 1 and (events < 2 or nonevents < 2):
            suggestions += [f"zeta_1_{j}", f"zeta_2_{j}"]
        obs_u = group.r_u[:, j]
        events = int(np.sum(du[obs_u, j]))
        nonevents = int(np.sum(obs_u)) - events
        if events < 2 or nonevents < 2:
            if j == 0:
                suggestions += ["gamma_1_0"]
            else:
                suggestions += [f"gamma_1_{j}", f"gamma_2_{j}"]
    return suggestions


def fit_group(group: GroupData, family: str = "lognormal",
              config: ChainConfig = ChainConfig(), prior: PriorConfig = PriorConfig(),
              cost_floor: float | None = None) -> PosteriorDraws:
    """Fit the hurdle model to one group by adaptive componentwise MH.

    Missing responses are augmented inside the sampler. Returns natural-scale
    draws per chain; meta records the family, cost floor, zero mask, seed and
    per-parameter acceptance rates.
    """
    if group is None or group.n == 0:
        raise FitError("cannot fit an empty group")
    if family not in hurdle.COST_FAMILIES:
        raise FitError(f"unknown cost family {family!r}")
    suggested = [s for s in suggest_zero_mask(group)
                 if s not in config.zero_mask and s not in config.fixed]
    if suggested:
        warnings.warn(
            f"arm {group.arm} {group.label}: sparse structural events leave these "
            f"hurdle slopes weakly identified; consider zero-masking {suggested}",
            stacklevel=2)
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    chains = []
    accept = []
    imput_values = []
    cells = None
    floor_used = None
    for ci in range(config.n_chains):
        rng = np.random.Generator(np.random.PCG64(seeds[ci]))
        target = HurdleGroupTarget(group, family, prior, config, cost_floor)
        floor_used = target.cost_floor
        if config.retain_imputations and cells is None:
            cells = target.imputed_cells()
        if config.retain_imputations:
            trace = []
            original_record = target.record

            def record_with_imputations():
                trace.append(target.imputed_values(cells))
                return original_record()

            target.record = record_with_imputations
        kept, acc = run_componentwise_chain(
            target, config.n_iter, config.burn_in, config.thin,
            config.adapt_window, config.target_accept, rng)
        chains.append(kept)
        accept.append(acc)
        if config.retain_imputations:
            imput_values.append(np.asarray(trace))
    meta = {
        "J": group.J,
        "family": family,
        "cost_floor": floor_used,
        "group": group.label,
        "arm": group.arm,
        "seed": config.seed,
        "zero_mask": tuple(config.zero_mask),
        "fixed": dict(config.fixed),
        "acceptance": np.asarray(accept),
        "suggested_zero_mask": suggested,
        "n_subjects": group.n,
    }
    if config.retain_imputations:
        meta["imputation_cells"] = cells
        meta["imputations"] = np.asarray(imput_values)
    return PosteriorDraws(tuple(param_names(group.J)), np.asarray(chains), meta)
