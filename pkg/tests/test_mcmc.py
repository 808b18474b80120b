"""Sampler correctness against conjugate closed forms, plus diagnostics.

The decisive tests pin every model parameter except one and compare the
sampled marginal against the exact conjugate posterior:

* free zero-cost probability with a uniform prior -> Beta(1 + s, 1 + n - s),
  which fails if the logit-scale Jacobian is wrong;
* free cost location with known scale -> the normal-normal posterior, which
  fails if the coefficient prior or the centred-coordinate recording is wrong.
"""

import math
import warnings

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit, logit

from hecon.data import GroupData, parse_trial_csv, classify_patterns
from hecon.errors import FitError, ValidationError
from hecon.hurdle import HurdleParams, param_names, simulate_paths
from hecon.mcmc import (
    ChainConfig,
    DirichletSpec,
    PosteriorDraws,
    fit_group,
    fit_pattern_probs,
    r_star,
    rhat,
    run_componentwise_chain,
    ess,
    suggest_zero_mask,
)

import io


def reference_rhat(chains):
    """Textbook split potential-scale-reduction, written independently."""
    x = np.asarray(chains, dtype=float)
    n = x.shape[1] // 2
    halves = [x[i, k * n:(k + 1) * n] for i in range(x.shape[0]) for k in (0, 1)]
    m = len(halves)
    means = np.array([h.mean() for h in halves])
    vars_ = np.array([h.var(ddof=1) for h in halves])
    w = vars_.mean()
    b = n * means.var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    return math.sqrt(var_plus / w)


class TestRhat:
    def test_identical_constant_chains_give_one(self):
        chains = np.ones((2, 500))
        assert rhat(chains) == pytest.approx(1.0, abs=1e-9)

    def test_distinct_constant_chains_give_inf(self):
        chains = np.vstack([np.zeros(500), np.ones(500)])
        assert rhat(chains) == math.inf

    def test_matches_reference_formula(self, rng):
        chains = rng.normal(size=(3, 400)) + np.array([[0.0], [0.2], [0.5]])
        assert rhat(chains) == pytest.approx(reference_rhat(chains), rel=1e-12)

    def test_far_apart_chains_flag_nonconvergence(self, rng):
        chains = rng.normal(size=(2, 1000))
        chains[1] += 10.0
        assert rhat(chains) > 1.5

    def test_well_mixed_chains_near_one(self, rng):
        chains = rng.normal(size=(4, 2000))
        assert rhat(chains) == pytest.approx(1.0, abs=0.02)

    def test_too_short_raises(self):
        with pytest.raises(ValidationError):
            rhat(np.ones((2, 3)))


class TestEss:
    def test_constant_chain_sentinel(self):
        assert ess(np.ones((2, 500))) == 1.0

    def test_iid_chains_near_total(self, rng):
        x = rng.normal(size=(2, 5000))
        ratio = ess(x) / 10000
        assert 0.7 < ratio < 1.4

    def test_ar1_matches_theory_within_factor(self, rng):
        rho = 0.9
        k, n = 2, 20000
        x = np.empty((k, n))
        for i in range(k):
            e = rng.normal(size=n)
            x[i, 0] = e[0]
            for t in range(1, n):
                x[i, t] = rho * x[i, t - 1] + math.sqrt(1 - rho * rho) * e[t]
        theory = (1 - rho) / (1 + rho) * k * n
        got = ess(x)
        assert theory / 1.5 < got < theory * 1.5

    def test_never_exceeds_total_draws(self, rng):
        x = -np.ones((1, 200))
        x[0, ::2] = 1.0  # perfectly antithetic: raw estimate would exceed N
        assert ess(x) <= 200

    def test_too_short_raises(self):
        with pytest.raises(ValidationError):
            ess(np.ones((2, 50)))


class TestPatternPosterior:
    CSV = """\
id,arm,u0,u1,u2,c0,c1,c2
c1,1,0.5,0.6,0.7,10,20,30
c2,1,0.5,0.6,0.7,10,20,30
c3,1,0.5,0.6,0.7,10,20,30
c4,1,0.5,0.6,0.7,10,20,30
c5,1,0.5,0.6,0.7,10,20,30
c6,1,0.5,0.6,0.7,10,20,30
c7,1,0.5,0.6,0.7,10,20,30
d1,1,0.5,NA,NA,10,NA,NA
d2,1,0.5,NA,NA,10,NA,NA
d3,1,0.5,0.6,NA,10,20,NA
x1,2,0.5,0.6,0.7,10,20,30
"""

    def table(self):
        ds = parse_trial_csv(io.StringIO(self.CSV))
        return classify_patterns(ds)[1]

    def test_r_star_counts_all_potential_patterns(self):
        assert r_star(2) == 64
        assert r_star(1) == 16

    def test_structured_prior_concentrates_on_completers(self):
        post = fit_pattern_probs(self.table(), DirichletSpec("structured", 0.2))
        assert post.completer_index == 0
        np.testing.assert_allclose(post.prior_alpha,
                                   [0.8, 0.2 / 64, 0.2 / 64])
        np.testing.assert_allclose(post.alpha, [7.8, 1 + 0.2 / 64, 2 + 0.2 / 64])

    def test_flat_prior_adds_one(self):
        post = fit_pattern_probs(self.table(), DirichletSpec("flat"))
        np.testing.assert_allclose(post.prior_alpha, [1.0, 1.0, 1.0])
        np.testing.assert_allclose(sorted(post.alpha), [2.0, 3.0, 8.0])

    def test_draws_are_simplex_rows(self, rng):
        post = fit_pattern_probs(self.table())
        draws = post.sample(100, rng)
        assert draws.shape == (100, 3)
        np.testing.assert_allclose(draws.sum(axis=1), 1.0, rtol=1e-12)

    def test_completer_draws_match_marginal_beta(self, rng):
        post = fit_pattern_probs(self.table(), DirichletSpec("flat"))
        draws = post.sample_completer(40000, rng)
        a = post.alpha[post.completer_index]
        b = post.alpha.sum() - a
        assert draws.mean() == pytest.approx(a / (a + b), abs=0.005)

    def test_no_completers_gives_zero_mass(self, rng):
        csv = "id,arm,u0,u1,c0,c1\nd1,1,0.5,NA,10,NA\nd2,1,0.4,NA,9,NA\n"
        table = classify_patterns(parse_trial_csv(io.StringIO(csv)))[1]
        post = fit_pattern_probs(table)
        assert post.completer_index is None
        assert np.all(post.sample_completer(10, rng) == 0.0)

    def test_invalid_spec_rejected(self):
        with pytest.raises(ValidationError):
            DirichletSpec("jeffreys")
        with pytest.raises(ValidationError):
            DirichletSpec("structured", 0.0)


class _NormalToy:
    """Single-parameter target: x_i ~ N(theta, sigma^2), theta ~ N(0, 100^2)."""

    def __init__(self, x, sigma):
        self.x = np.asarray(x)
        self.sigma = sigma
        self.n_params = 1
        self.free = np.array([True])
        self.theta = 0.0

    def _lp(self, theta):
        return (-0.5 * np.sum((self.x - theta) ** 2) / self.sigma**2
                - 0.5 * theta**2 / 100.0**2)

    def z_value(self, k):
        return self.theta

    def logpost_delta(self, k, z_new):
        return self._lp(z_new) - self._lp(self.theta)

    def commit(self, k, z_new):
        self.theta = z_new

    def sweep_latent(self, rng):
        pass

    def record(self):
        return np.array([self.theta])


class TestGenericDriver:
    def test_normal_toy_matches_conjugate_posterior(self, rng):
        sigma = 2.0
        x = rng.normal(1.3, sigma, size=60)
        prec = len(x) / sigma**2 + 1 / 100.0**2
        post_mean = (x.sum() / sigma**2) / prec
        post_sd = math.sqrt(1 / prec)
        toy = _NormalToy(x, sigma)
        kept, accept = run_componentwise_chain(
            toy, n_iter=6000, burn_in=1000, thin=1,
            adapt_window=50, target_accept=0.44, rng=np.random.default_rng(5))
        draws = kept[:, 0]
        assert abs(draws.mean() - post_mean) < 4 * post_sd / math.sqrt(200)
        assert draws.std(ddof=1) == pytest.approx(post_sd, rel=0.15)
        assert 0.25 < accept[0] < 0.65

    def test_adaptation_targets_acceptance_rate(self, rng):
        toy = _NormalToy(rng.normal(size=40), 1.0)
        _, accept = run_componentwise_chain(
            toy, n_iter=8000, burn_in=4000, thin=1,
            adapt_window=50, target_accept=0.25, rng=np.random.default_rng(9))
        assert 0.15 < accept[0] < 0.38


def _complete_group(params, n, seed, label="completers"):
    rng = np.random.default_rng(seed)
    u, c, du, dc = simulate_paths(params, n, rng)
    ones = np.ones((n, params.J + 1), dtype=bool)
    return GroupData(1, label, u, c, ones.copy(), ones.copy(),
                     tuple(f"s{i}" for i in range(n)))


def _base_values_j1():
    vals = {n: 0.0 for n in param_names(1)}
    vals.update({"pi_c_0": 0.2, "nu_c_0": 5.0, "tau_c_0": 0.6,
                 "gamma_0_0": -1.4, "gamma_1_0": 0.1,
                 "alpha_0_0": 0.8, "alpha_1_0": -0.05, "sigma_u_0": 0.12,
                 "zeta_0_1": -1.5, "zeta_1_1": 0.1, "zeta_2_1": -0.2,
                 "beta_0_1": 2.0, "beta_1_1": 0.5, "beta_2_1": -0.4,
                 "tau_c_1": 0.5,
                 "gamma_0_1": -1.6, "gamma_1_1": 0.1, "gamma_2_1": 0.5,
                 "alpha_0_1": 0.3, "alpha_1_1": 0.05, "alpha_2_1": 0.8,
                 "sigma_u_1": 0.1})
    return vals


class TestConjugateOracles:
    def test_zero_cost_probability_matches_beta_posterior(self):
        vals = _base_values_j1()
        params = HurdleParams(1, vals)
        group = _complete_group(params, 150, seed=21)
        fixed = {k: v for k, v in vals.items() if k != "pi_c_0"}
        cfg = ChainConfig(n_chains=2, n_iter=4000, burn_in=1000, seed=77, fixed=fixed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            draws = fit_group(group, config=cfg)
        s = int(np.sum(group.c[:, 0] == 0.0))
        n = group.n
        exact = stats.beta(1 + s, 1 + n - s)
        got = draws.param("pi_c_0").ravel()
        assert abs(got.mean() - exact.mean()) < 4 * exact.std() / math.sqrt(300)
        assert got.std(ddof=1) == pytest.approx(exact.std(), rel=0.12)
        # every other parameter stays pinned
        assert np.all(draws.param("nu_c_0") == vals["nu_c_0"])
        assert np.all(draws.param("beta_1_1") == vals["beta_1_1"])

    def test_cost_location_matches_normal_posterior(self):
        vals = _base_values_j1()
        params = HurdleParams(1, vals)
        group = _complete_group(params, 150, seed=22)
        fixed = {k: v for k, v in vals.items() if k != "nu_c_0"}
        cfg = ChainConfig(n_chains=2, n_iter=4000, burn_in=1000, seed=78, fixed=fixed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            draws = fit_group(group, config=cfg)
        keep = group.c[:, 0] > 0
        lc = np.log(group.c[keep, 0])
        tau = vals["tau_c_0"]
        prec = len(lc) / tau**2 + 1 / 100.0**2
        post_mean = (lc.sum() / tau**2) / prec
        post_sd = math.sqrt(1 / prec)
        got = draws.param("nu_c_0").ravel()
        assert abs(got.mean() - post_mean) < 4 * post_sd / math.sqrt(300)
        assert got.std(ddof=1) == pytest.approx(post_sd, rel=0.12)

    def test_followup_intercept_with_fixed_slopes_matches_normal_posterior(self):
        # slopes pinned at nonzero truth: the recorded intercept must be on the
        # raw parameterisation for the residual-mean oracle to line up
        vals = _base_values_j1()
        params = HurdleParams(1, vals)
        group = _complete_group(params, 200, seed=23)
        fixed = {k: v for k, v in vals.items() if k != "beta_0_1"}
        cfg = ChainConfig(n_chains=2, n_iter=4000, burn_in=1000, seed=79, fixed=fixed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            draws = fit_group(group, config=cfg)
        keep = group.c[:, 1] > 0
        floor = draws.meta["cost_floor"]
        lc0 = np.log(np.maximum(group.c[keep, 0], floor))
        resid = (np.log(group.c[keep, 1])
                 - vals["beta_1_1"] * lc0 - vals["beta_2_1"] * group.u[keep, 0])
        tau = vals["tau_c_1"]
        prec = len(resid) / tau**2 + 1 / 100.0**2
        post_mean = (resid.sum() / tau**2) / prec
        post_sd = math.sqrt(1 / prec)
        got = draws.param("beta_0_1").ravel()
        assert abs(got.mean() - post_mean) < 4 * post_sd / math.sqrt(300)
        assert got.std(ddof=1) == pytest.approx(post_sd, rel=0.12)


class TestAugmentation:
    def test_leaf_utility_imputation_matches_model_conditional(self):
        vals = _base_values_j1()
        params = HurdleParams(1, vals)
        group = _complete_group(params, 80, seed=31, label="noncompleters")
        r_u = group.r_u.copy()
        r_u[:10, 1] = False  # final-time utilities unobserved: exact Gibbs leaf
        u = group.u.copy()
        u[:10, 1] = np.nan
        group = GroupData(group.arm, group.label, u, group.c, r_u, group.r_c,
                          group.subject_ids)
        fixed = dict(vals)
        cfg = ChainConfig(n_chains=2, n_iter=2500, burn_in=500, seed=41,
                          fixed=fixed, retain_imputations=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            draws = fit_group(group, config=cfg)
        cells = draws.meta["imputation_cells"]
        imps = draws.meta["imputations"]  # (chains, kept, n_cells)
        assert imps.shape[2] == 10
        floor = draws.meta["cost_floor"]
        for ci, (i, outcome, j) in enumerate(cells):
            assert outcome == "u" and j == 1
            lc1 = math.log(max(group.c[i, 1], floor))
            pi = expit(vals["gamma_0_1"] + vals["gamma_1_1"] * lc1
                       + vals["gamma_2_1"] * group.u[i, 0])
            nu = expit(vals["alpha_0_1"] + vals["alpha_1_1"] * lc1
                       + vals["alpha_2_1"] * group.u[i, 0])
            want = pi * 1.0 + (1 - pi) * nu
            got = imps[:, :, ci].ravel()
            se = got.std(ddof=1) / math.sqrt(len(got))
            assert abs(got.mean() - want) < max(5 * se, 0.02)

    def test_missing_cells_filled_in_state(self):
        vals = _base_values_j1()
        params = HurdleParams(1, vals)
        group = _complete_group(params, 60, seed=32, label="noncompleters")
        r_u = group.r_u.copy()
        r_c = group.r_c.copy()
        r_u[:15, 1] = False
        r_c[:15, 1] = False
        u = group.u.copy()
        c = group.c.copy()
        u[:15, 1] = np.nan
        c[:15, 1] = np.nan
        group = GroupData(group.arm, group.label, u, c, r_u, r_c, group.subject_ids)
        cfg = ChainConfig(n_chains=1, n_iter=200, burn_in=100, seed=42,
                          retain_imputations=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            draws = fit_group(group, config=cfg)
        imps = draws.meta["imputations"]
        assert np.all(np.isfinite(imps))
        cells = draws.meta["imputation_cells"]
        u_cols = [k for k, (_, o, _) in enumerate(cells) if o == "u"]
        c_cols = [k for k, (_, o, _) in enumerate(cells) if o == "c"]
        assert np.all(imps[:, :, u_cols] > 0) and np.all(imps[:, :, u_cols] <= 1)
        assert np.all(imps[:, :, c_cols] >= 0)


class TestFitMechanics:
    def setup_method(self):
        self.vals = _base_values_j1()
        self.params = HurdleParams(1, self.vals)

    def test_determinism_same_seed_bitwise(self):
        group = _complete_group(self.params, 60, seed=51)
        cfg = ChainConfig(n_chains=2, n_iter=300, burn_in=100, seed=7)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            a = fit_group(group, config=cfg)
            b = fit_group(group, config=cfg)
        np.testing.assert_array_equal(a.chains, b.chains)

    def test_different_seed_differs(self):
        group = _complete_group(self.params, 60, seed=51)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            a = fit_group(group, config=ChainConfig(2, 300, 100, seed=7))
            b = fit_group(group, config=ChainConfig(2, 300, 100, seed=8))
        assert not np.array_equal(a.chains, b.chains)

    def test_zero_mask_pins_slopes_at_zero(self):
        group = _complete_group(self.params, 60, seed=52)
        cfg = ChainConfig(2, 300, 100, seed=9, zero_mask=("zeta_1_1", "zeta_2_1"))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            draws = fit_group(group, config=cfg)
        assert np.all(draws.param("zeta_1_1") == 0.0)
        assert np.all(draws.param("zeta_2_1") == 0.0)
        assert draws.param("zeta_0_1").std() > 0

    def test_zero_mask_rejects_intercepts(self):
        group = _complete_group(self.params, 30, seed=53)
        with pytest.raises(FitError, match="slope"):
            fit_group(group, config=ChainConfig(2, 100, 50, zero_mask=("beta_0_1",)))

    def test_unknown_names_rejected(self):
        group = _complete_group(self.params, 30, seed=53)
        with pytest.raises(FitError):
            fit_group(group, config=ChainConfig(2, 100, 50, zero_mask=("nope_1",)))
        with pytest.raises(FitError):
            fit_group(group, config=ChainConfig(2, 100, 50, fixed={"nope_1": 0.0}))

    def test_sparse_structural_events_warn_with_names(self):
        vals = dict(self.vals)
        vals["zeta_0_1"] = -40.0  # no zero costs at follow-up
        params = HurdleParams(1, vals)
        group = _complete_group(params, 80, seed=54)
        assert "zeta_1_1" in suggest_zero_mask(group)
        with pytest.warns(UserWarning, match="zeta_1_1"):
            fit_group(group, config=ChainConfig(1, 40, 10, seed=1))

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            ChainConfig(n_iter=100, burn_in=100)
        with pytest.raises(ValidationError):
            ChainConfig(thin=0)
        with pytest.raises(ValidationError):
            ChainConfig(target_accept=1.5)

    def test_kept_per_chain_counts(self):
        assert ChainConfig(n_iter=20000, burn_in=5000).kept_per_chain == 15000
        assert ChainConfig(n_iter=101, burn_in=50, thin=10).kept_per_chain == 6

    def test_acceptance_rates_recorded(self):
        group = _complete_group(self.params, 60, seed=55)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            draws = fit_group(group, config=ChainConfig(2, 400, 200, seed=3))
        acc = draws.meta["acceptance"]
        assert acc.shape == (2, len(param_names(1)))
        free = [k for k, n in enumerate(draws.names)
                if n not in draws.meta["fixed"] and n not in draws.meta["zero_mask"]]
        assert np.all(acc[:, free] > 0)

    def test_gamma_family_runs(self):
        vals = _base_values_j1()
        params = HurdleParams(1, vals, cost_family="gamma")
        rng = np.random.default_rng(77)
        u, c, du, dc = simulate_paths(params, 80, rng)
        ones = np.ones((80, 2), dtype=bool)
        group = GroupData(1, "completers", u, c, ones.copy(), ones.copy(),
                          tuple(f"g{i}" for i in range(80)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            draws = fit_group(group, family="gamma",
                              config=ChainConfig(2, 500, 200, seed=12))
        assert draws.meta["family"] == "gamma"
        assert np.isfinite(draws.chains).all()

    def test_unknown_family_rejected(self):
        group = _complete_group(self.params, 30, seed=56)
        with pytest.raises(FitError, match="family"):
            fit_group(group, family="weibull")


class TestPosteriorDrawsContainer:
    def make_draws(self):
        group = _complete_group(HurdleParams(1, _base_values_j1()), 40, seed=61)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return fit_group(group, config=ChainConfig(2, 200, 100, seed=4))

    def test_csv_round_trip_exact(self, tmp_path):
        draws = self.make_draws()
        path = tmp_path / "draws.csv"
        draws.to_csv(path)
        back = PosteriorDraws.from_csv(path)
        assert back.names == draws.names
        np.testing.assert_array_equal(back.chains, draws.chains)
        assert back.meta["J"] == 1
        assert float(back.meta["cost_floor"]) == draws.meta["cost_floor"]

    def test_metadata_header_line(self, tmp_path):
        draws = self.make_draws()
        path = tmp_path / "draws.csv"
        draws.to_csv(path, extra_meta={"scenario": "cc"})
        with open(path) as fh:
            first = fh.readline()
        assert first.startswith("#") and "scenario=cc" in first

    def test_param_and_stacked_views(self):
        draws = self.make_draws()
        stacked = draws.stacked()
        assert stacked.shape == (draws.n_draws, len(draws.names))
        col = draws.names.index("nu_c_0")
        np.testing.assert_array_equal(draws.param("nu_c_0").ravel(), stacked[:, col])

    def test_params_at_builds_model(self):
        draws = self.make_draws()
        params = draws.params_at(0)
        assert params.J == 1
        assert params.values["tau_c_0"] > 0
