"""Model assessment: observed-data DIC per variable block and predictive checks.

The observed-data likelihood of a partially observed subject integrates the
full-data model over the missing components. The integral is estimated by
Monte Carlo: missing components are simulated forward from their model
conditionals given the (observed or already filled) history, and the log
terms of the OBSERVED components are averaged on the likelihood scale,

    log p(y_obs) ~= logmeanexp_m [ sum over observed blocks of log p_block(fill m) ]

The proposal terms of the filled components cancel exactly, so for a fully
observed subject the estimate equals the complete-data log-likelihood for any
M, and when the only missing component has no observed descendants the
estimate is exact as well.

DIC is reported per variable block (c_0, u_0|c_0, ...) with the estimator
applied blockwise; block DICs add up to the totals by construction, matching
the per-variable table layout. The plug-in deviance uses posterior means on
the unconstrained scale mapped back to the natural scale.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import stats
from scipy.special import betaln, expit, logsumexp

from . import hurdle
from .data import GroupData, PatternTable, format_float
from .errors import AssessmentError, SimulationError, ValidationError
from .extrapolation import _strided_indices
from .hurdle import HurdleParams, block_labels, param_kind, per_block_loglik
from .mcmc import PosteriorDraws, PsiPosterior


def _logit_clipped(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# observed-data likelihood by Monte Carlo fills
# ---------------------------------------------------------------------------

def _fill_block_terms(params: HurdleParams, u, c, r_u, r_c, M: int,
                      rng: np.random.Generator):
    """Per-block observed-component log terms under M forward fills.

    Arrays are (n, J+1) with NaN in unobserved slots. Returns
    (blocks: {label: (n, M)}, invalid: (n, M) bool). Terms are 0 where the
    block's component is unobserved. `invalid` marks fills that required a
    draw from an infeasible Beta conditional; such fills carry zero weight.
    """
    v = params.values
    J = params.J
    family = params.cost_family
    floor = params.cost_floor
    n = u.shape[0]
    blocks: dict[str, np.ndarray] = {}
    invalid = np.zeros((n, M), dtype=bool)
    lc_prev = None
    u_prev = None
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for j in range(J + 1):
            # --- cost at time j ---------------------------------------------
            if j == 0:
                pi = np.full((n, M), v["pi_c_0"])
                mu = np.full((n, M), v["nu_c_0"])
                tau = v["tau_c_0"]
            else:
                lin = (v[f"zeta_0_{j}"] + v[f"zeta_1_{j}"] * lc_prev
                       + v[f"zeta_2_{j}"] * u_prev)
                pi = expit(lin)
                mu = (v[f"beta_0_{j}"] + v[f"beta_1_{j}"] * lc_prev
                      + v[f"beta_2_{j}"] * u_prev)
                tau = v[f"tau_c_{j}"]
            term = np.zeros((n, M))
            c_state = np.empty((n, M))
            obs = r_c[:, j]
            if obs.any():
                dc_obs = (c[obs, j] == 0.0)[:, None]
                term_obs = np.where(dc_obs, np.log(pi[obs]), np.log1p(-pi[obs]))
                pos = ~dc_obs[:, 0]
                if pos.any():
                    rows = np.nonzero(obs)[0][pos]
                    cont = hurdle.cost_cont_logpdf(
                        family, c[rows, j][:, None], mu[rows], tau)
                    term_obs[pos] += cont
                term[obs] = term_obs
                c_state[obs] = c[obs, j][:, None]
            miss = ~obs
            if miss.any():
                d_new = rng.random((int(miss.sum()), M)) < pi[miss]
                if family == "lognormal":
                    draw = np.exp(rng.normal(mu[miss], tau))
                else:
                    k_sh = 1.0 / (tau * tau)
                    draw = rng.gamma(k_sh, np.exp(mu[miss]) / k_sh)
                c_state[miss] = np.where(d_new, 0.0, np.maximum(draw, np.finfo(float).tiny))
            blocks[hurdle.block_of_time("c", j)] = term
            lc_j = np.log(np.maximum(c_state, floor))
            # --- utility at time j ------------------------------------------
            if j == 0:
                lin_g = v["gamma_0_0"] + v["gamma_1_0"] * lc_j
                lin_a = v["alpha_0_0"] + v["alpha_1_0"] * lc_j
                sigma = v["sigma_u_0"]
            else:
                lin_g = (v[f"gamma_0_{j}"] + v[f"gamma_1_{j}"] * lc_j
                         + v[f"gamma_2_{j}"] * u_prev)
                lin_a = (v[f"alpha_0_{j}"] + v[f"alpha_1_{j}"] * lc_j
                         + v[f"alpha_2_{j}"] * u_prev)
                sigma = v[f"sigma_u_{j}"]
            pi_u = expit(lin_g)
            nu = expit(lin_a)
            phi = nu * (1.0 - nu) / (sigma * sigma) - 1.0
            feasible = phi > 0
            term = np.zeros((n, M))
            u_state = np.empty((n, M))
            obs = r_u[:, j]
            if obs.any():
                du_obs = (u[obs, j] == 1.0)[:, None]
                term_obs = np.where(du_obs, np.log(pi_u[obs]), np.log1p(-pi_u[obs]))
                cont_rows = ~du_obs[:, 0]
                if cont_rows.any():
                    rows = np.nonzero(obs)[0][cont_rows]
                    uc = hurdle.clamp_unit(u[rows, j])[:, None]
                    ok = feasible[rows]
                    phi_safe = np.where(ok, phi[rows], 1.0)
                    a = nu[rows] * phi_safe
                    b = (1.0 - nu[rows]) * phi_safe
                    beta_ll = ((a - 1.0) * np.log(uc) + (b - 1.0) * np.log1p(-uc)
                               - betaln(a, b))
                    term_obs[cont_rows] += np.where(ok, beta_ll, -np.inf)
                term[obs] = term_obs
                u_state[obs] = u[obs, j][:, None]
            miss = ~obs
            if miss.any():
                rows = np.nonzero(miss)[0]
                d_new = rng.random((len(rows), M)) < pi_u[rows]
                ok = feasible[rows]
                phi_safe = np.where(ok, phi[rows], 1.0)
                nu_draw = np.clip(nu[rows], 1e-9, 1.0 - 1e-9)
                draw = hurdle.clamp_unit(
                    rng.beta(nu_draw * phi_safe, (1.0 - nu_draw) * phi_safe))
                u_state[rows] = np.where(d_new, 1.0, draw)
                # a fill that needed an infeasible Beta draw gets zero weight
                invalid[rows] |= ~ok & ~d_new
            blocks[hurdle.block_of_time("u", j)] = term
            lc_prev = lc_j
            u_prev = u_state
    return blocks, invalid


def observed_data_loglik(params: HurdleParams, u, c, r_u, r_c, M: int = 200,
                         rng: np.random.Generator | None = None,
                         per_block: bool = False, subject_id: str | None = None):
    """Observed-data log-likelihood of one subject (arrays of length J+1).

    Fully observed subjects evaluate exactly (M is irrelevant). With
    `per_block`, returns {block label: blockwise log-mean-exp estimate}.
    """
    if M < 1:
        raise ValidationError("M must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    u = np.asarray(u, dtype=float).reshape(1, -1)
    c = np.asarray(c, dtype=float).reshape(1, -1)
    r_u = np.asarray(r_u, dtype=bool).reshape(1, -1)
    r_c = np.asarray(r_c, dtype=bool).reshape(1, -1)
    blocks, invalid = _fill_block_terms(params, u, c, r_u, r_c, M, rng)
    label = subject_id if subject_id is not None else "<subject>"
    if per_block:
        out = {}
        for key, term in blocks.items():
            w = np.where(invalid[0], -np.inf, term[0])
            val = float(logsumexp(w) - math.log(M))
            if math.isnan(val):
                raise AssessmentError(
                    f"subject {label}: block {key} observed-data log-likelihood is not finite")
            out[key] = val
        return out
    total = sum(blocks.values())[0]
    w = np.where(invalid[0], -np.inf, total)
    val = float(logsumexp(w) - math.log(M))
    if not math.isfinite(val):
        raise AssessmentError(
            f"subject {label}: observed-data log-likelihood is not finite")
    return val


def group_block_loglik(params: HurdleParams, group: GroupData, M: int = 200,
                       rng: np.random.Generator | None = None) -> dict[str, float]:
    """Groupwise per-block observed-data log-likelihood (summed over subjects).

    Fully observed subjects take the exact vectorized path; partially observed
    subjects share one vectorized M-fill pass.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    full = np.all(group.r_u, axis=1) & np.all(group.r_c, axis=1)
    out = {label: 0.0 for label in block_labels(group.J)}
    if full.any():
        exact = per_block_loglik(params, group.u[full], group.c[full],
                                 group.u[full] == 1.0, group.c[full] == 0.0)
        for key, arr in exact.items():
            out[key] += float(arr.sum())
    part = ~full
    if part.any():
        blocks, invalid = _fill_block_terms(
            params, group.u[part], group.c[part], group.r_u[part], group.r_c[part],
            M, rng)
        for key, term in blocks.items():
            w = np.where(invalid, -np.inf, term)
            vals = logsumexp(w, axis=1) - math.log(M)
            out[key] += float(vals.sum())
    return out


# ---------------------------------------------------------------------------
# DIC
# ---------------------------------------------------------------------------

@dataclass
class BlockDic:
    dbar: float
    d_plug: float

    @property
    def p_d(self) -> float:
        return self.dbar - self.d_plug

    @property
    def dic(self) -> float:
        return self.dbar + self.p_d


@dataclass
class DicReport:
    """Per-variable-block DIC; totals are exact sums of the blocks."""

    family: str
    blocks: dict[str, BlockDic]
    m_fills: int
    n_draws_used: int

    @property
    def total_dic(self) -> float:
        return sum(b.dic for b in self.blocks.values())

    @property
    def total_p_d(self) -> float:
        return sum(b.p_d for b in self.blocks.values())

    @property
    def total_dbar(self) -> float:
        return sum(b.dbar for b in self.blocks.values())

    def __add__(self, other: "DicReport") -> "DicReport":
        if set(self.blocks) != set(other.blocks):
            raise ValidationError("cannot combine DIC reports with different blocks")
        if self.family != other.family:
            raise ValidationError(
                f"cannot combine DIC across families {self.family!r} and {other.family!r}")
        merged = {k: BlockDic(self.blocks[k].dbar + other.blocks[k].dbar,
                              self.blocks[k].d_plug + other.blocks[k].d_plug)
                  for k in self.blocks}
        return DicReport(self.family, merged, self.m_fills,
                         min(self.n_draws_used, other.n_draws_used))

    def to_json(self) -> str:
        payload = {
            "family": self.family,
            "m_fills": self.m_fills,
            "n_draws_used": self.n_draws_used,
            "blocks": {
                key: {"dic": b.dic, "p_d": b.p_d, "dbar": b.dbar}
                for key, b in self.blocks.items()
            },
            "total": {"dic": self.total_dic, "p_d": self.total_p_d,
                      "dbar": self.total_dbar},
        }
        return json.dumps(payload, indent=1, sort_keys=True)


def plug_in_params(draws: PosteriorDraws, central: str = "mean") -> HurdleParams:
    """Posterior-central parameters on the unconstrained scale, mapped back."""
    stacked = draws.stacked()
    values = {}
    for k, name in enumerate(draws.names):
        col = stacked[:, k]
        kind = param_kind(name)
        if central == "median":
            # medians commute with the monotone transforms
            values[name] = float(np.median(col))
        elif kind == "scale":
            values[name] = float(np.exp(np.mean(np.log(np.maximum(col, 1e-300)))))
        elif kind == "prob":
            values[name] = float(expit(np.mean(_logit_clipped(col))))
        else:
            values[name] = float(np.mean(col))
    return HurdleParams(draws.meta["J"], values, draws.meta.get("family", "lognormal"),
                        draws.meta.get("cost_floor", 1.0),
                        frozenset(draws.meta.get("zero_mask", ())))


def dic(draws: PosteriorDraws, group: GroupData, M: int = 200, M_plug: int = 5000,
        rng: np.random.Generator | None = None, max_draws: int = 500) -> DicReport:
    """Observed-data DIC per block: Dbar from strided draws, plug-in at the
    posterior mean (median fallback when the mean parameters go infeasible)."""
    if rng is None:
        rng = np.random.default_rng(0)
    stacked = draws.stacked()
    idx = _strided_indices(stacked.shape[0], max_draws)
    labels = block_labels(group.J)
    dev_sums = {key: 0.0 for key in labels}
    for s in idx:
        params = draws.params_at(int(s))
        ll = group_block_loglik(params, group, M, rng)
        for key in labels:
            dev_sums[key] += -2.0 * ll[key]
    dbar = {key: dev_sums[key] / len(idx) for key in labels}
    plug = plug_in_params(draws, central="mean")
    ll_plug = group_block_loglik(plug, group, M_plug, rng)
    if not all(math.isfinite(v) for v in ll_plug.values()):
        warnings.warn("posterior-mean parameters infeasible for the plug-in deviance; "
                      "falling back to posterior medians", stacklevel=2)
        plug = plug_in_params(draws, central="median")
        ll_plug = group_block_loglik(plug, group, M_plug, rng)
    blocks = {key: BlockDic(dbar[key], -2.0 * ll_plug[key]) for key in labels}
    return DicReport(draws.meta.get("family", "lognormal"), blocks, M, len(idx))


# ---------------------------------------------------------------------------
# posterior predictive replication
# ---------------------------------------------------------------------------

@dataclass
class ArmReplicator:
    """Everything needed to replicate one arm's observed dataset."""

    completer_draws: PosteriorDraws | None
    noncompleter_draws: PosteriorDraws | None
    psi: PsiPosterior
    table: PatternTable

    def __post_init__(self):
        needs_completer = any(r.is_completer for r in self.table.rows)
        needs_nonc = any(not r.is_completer for r in self.table.rows)
        if needs_completer and self.completer_draws is None:
            raise ValidationError(f"arm {self.table.arm}: completer draws required")
        if needs_nonc and self.noncompleter_draws is None:
            raise ValidationError(f"arm {self.table.arm}: non-completer draws required")


def replicate_observed(rep: ArmReplicator, rng: np.random.Generator):
    """One replicated arm: (u, c, r_u, r_c) with masks drawn from the psi posterior.

    Subjects are allocated to observed patterns by a multinomial draw on one
    psi sample; trajectories come from one posterior parameter draw per group;
    components are masked per the assigned pattern signature.
    """
    n = rep.table.n_subjects
    J = rep.table.J
    psi_draw = rep.psi.sample(1, rng)[0]
    counts = rng.multinomial(n, psi_draw)
    u_parts, c_parts, ru_parts, rc_parts = [], [], [], []
    for is_completer, draws in ((True, rep.completer_draws),
                                (False, rep.noncompleter_draws)):
        rows = [(row, int(k)) for row, k in zip(rep.table.rows, counts)
                if row.is_completer == is_completer and k > 0]
        if not rows:
            continue
        # a posterior draw can be infeasible for forward simulation; re-draw it
        for attempt in range(20):
            params = draws.params_at(int(rng.integers(draws.n_draws)))
            try:
                sims = [hurdle.simulate_paths(params, k, rng) for _, k in rows]
                break
            except SimulationError:
                if attempt == 19:
                    raise
        for (row, k), (u, c, _, _) in zip(rows, sims):
            sig = np.asarray(row.signature).reshape(J + 1, 2)
            r_u = np.tile(sig[:, 0].astype(bool), (k, 1))
            r_c = np.tile(sig[:, 1].astype(bool), (k, 1))
            u_parts.append(np.where(r_u, u, np.nan))
            c_parts.append(np.where(r_c, c, np.nan))
            ru_parts.append(r_u)
            rc_parts.append(r_c)
    return (np.concatenate(u_parts), np.concatenate(c_parts),
            np.concatenate(ru_parts), np.concatenate(rc_parts))


# ---------------------------------------------------------------------------
# rank-correlation checks
# ---------------------------------------------------------------------------

def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    res = stats.spearmanr(x, y)
    return float(res.statistic if hasattr(res, "statistic") else res.correlation)


def _variable_columns(u, c, J):
    cols = {}
    for j in range(J + 1):
        cols[f"u{j}"] = u[:, j]
        cols[f"c{j}"] = c[:, j]
    return cols


def _pair_names(J):
    names = [f"u{j}" for j in range(J + 1)] + [f"c{j}" for j in range(J + 1)]
    names.sort()
    return [(a, b) for i, a in enumerate(names) for b in names[i + 1:]]


@dataclass
class PairCheck:
    observed: float
    replicated: np.ndarray
    p_value: float
    n_valid: int


@dataclass
class PpcReport:
    pairs: dict[str, PairCheck]
    skipped: tuple[str, ...]
    n_replicates: int

    def to_csv(self, path, meta: Mapping[str, object] | None = None) -> None:
        header = dict(meta or {})
        with open(path, "w", newline="") as fh:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
            fh.write("pair,replicate,value\n")
            for name, check in self.pairs.items():
                for r, v in enumerate(check.replicated):
                    fh.write(f"{name},{r},{format_float(float(v))}\n")

    def summary_json(self) -> str:
        payload = {
            "n_replicates": self.n_replicates,
            "skipped": list(self.skipped),
            "pairs": {
                name: {"observed": check.observed, "p_value": check.p_value,
                       "n_valid_replicates": check.n_valid,
                       "replicated_mean": float(np.mean(check.replicated))
                       if len(check.replicated) else math.nan}
                for name, check in self.pairs.items()
            },
        }
        return json.dumps(payload, indent=1, sort_keys=True)


def _pair_corr(cols, r_cols, a, b, min_n=3):
    joint = r_cols[a] & r_cols[b]
    if int(joint.sum()) < min_n:
        return None
    x = cols[a][joint]
    y = cols[b][joint]
    if np.all(x == x[0]) or np.all(y == y[0]):
        return None
    return spearman(x, y)


def rank_corr_check(observed_arms: Mapping[int, GroupData | tuple],
                    replicators: Mapping[int, ArmReplicator],
                    n_rep: int = 1000,
                    rng: np.random.Generator | None = None,
                    min_pairs: int = 3) -> PpcReport:
    """Posterior predictive p-values for all pairwise rank correlations.

    `observed_arms` maps arm -> (u, c, r_u, r_c) arrays of the real data
    (both completion groups together); correlations pool the two arms.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if n_rep < 100:
        raise ValidationError("need at least 100 replicates for stable p-values")

    def stack(parts):
        u = np.concatenate([p[0] for p in parts])
        c = np.concatenate([p[1] for p in parts])
        r_u = np.concatenate([p[2] for p in parts])
        r_c = np.concatenate([p[3] for p in parts])
        return u, c, r_u, r_c

    obs_parts = []
    for arm in sorted(observed_arms):
        g = observed_arms[arm]
        if isinstance(g, GroupData):
            obs_parts.append((g.u, g.c, g.r_u, g.r_c))
        else:
            obs_parts.append(g)
    u, c, r_u, r_c = stack(obs_parts)
    J = u.shape[1] - 1
    cols = _variable_columns(u, c, J)
    r_cols = _variable_columns(r_u, r_c, J)
    pairs = _pair_names(J)
    observed_corr = {}
    skipped = []
    for a, b in pairs:
        val = _pair_corr(cols, r_cols, a, b, min_pairs)
        name = f"{a}:{b}"
        if val is None:
            skipped.append(name)
        else:
            observed_corr[name] = val
    rep_values: dict[str, list[float]] = {name: [] for name in observed_corr}
    for _ in range(n_rep):
        parts = [replicate_observed(replicators[arm], rng)
                 for arm in sorted(replicators)]
        ur, cr, rur, rcr = stack(parts)
        cols_r = _variable_columns(ur, cr, J)
        rcols_r = _variable_columns(rur, rcr, J)
        for a, b in pairs:
            name = f"{a}:{b}"
            if name not in observed_corr:
                continue
            val = _pair_corr(cols_r, rcols_r, a, b, min_pairs)
            if val is not None:
                rep_values[name].append(val)
    checks = {}
    for name, obs_val in observed_corr.items():
        rep = np.asarray(rep_values[name])
        if len(rep) == 0:
            skipped.append(name)
            continue
        lo = float(np.mean(rep <= obs_val))
        hi = float(np.mean(rep >= obs_val))
        p = min(1.0, 2.0 * min(lo, hi))
        checks[name] = PairCheck(obs_val, rep, p, len(rep))
    return PpcReport(checks, tuple(skipped), n_rep)
