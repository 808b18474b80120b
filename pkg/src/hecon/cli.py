"""Command line pipeline: simulate, fit, evaluate, assess.

One run directory holds everything: `fits/` for posterior draws and
convergence summaries, one directory per evaluation scenario, `assess/` for
DIC and predictive checks, and a run-level `manifest.json`. Timestamps live
only in the manifest, so repeated runs with the same config and seed are
byte-identical everywhere else.

Exit codes: 0 success, 1 fit completed but some R-hat exceeded 1.1,
2 configuration/parse/dependency problems.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import warnings
from dataclasses import dataclass, fields

import numpy as np

from .assessment import ArmReplicator, DicReport, dic, rank_corr_check
from .data import (
    EQ5D_BOUNDS,
    TrialDataset,
    classify_patterns,
    format_float,
    parse_trial_csv,
    rescale_utilities,
    split_by_completion,
    write_trial_csv,
)
from .econ import (
    DEFAULT_CEP_K,
    default_k_grid,
    summarize_economics,
    write_ceac_csv,
    write_cep_csv,
)
from .errors import EconError, HeconError
from .extrapolation import (
    SensitivityScenario,
    benchmark_scenario,
    calibration_sds,
    mix_overall_means,
    noncompleter_group_means,
    observed_fractions,
    working_time_means,
)
from .hurdle import COST_FAMILIES
from .mcmc import ChainConfig, PosteriorDraws, ess, fit_group, fit_pattern_probs, rhat
from .synthetic import TruthSpec, generate_trial

GROUP_LABELS = ("completers", "noncompleters")
PLAIN_SCENARIOS = ("cc", "mar", "delta0", "flat", "skew0", "skew1")


class CliError(Exception):
    """Raised for problems the user must fix; carries the exit code."""

    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _num_token(v: float) -> str:
    return format_float(v).replace("-", "m").replace(".", "p")


@dataclass(frozen=True)
class ScenarioSpec:
    """One evaluation scenario; `label` doubles as the output directory name."""

    label: str
    kind: str
    delta_u: float = 0.0
    delta_c: float = 0.0


def parse_scenario_token(token: str) -> ScenarioSpec:
    token = token.strip()
    if token in PLAIN_SCENARIOS:
        return ScenarioSpec(token, token)
    if token.startswith("degenerate(") and token.endswith(")"):
        inner = token[len("degenerate("):-1]
        parts = [p.strip() for p in inner.split(",") if p.strip()]
        try:
            values = [float(p) for p in parts]
        except ValueError as exc:
            raise CliError(f"could not parse degenerate shift {token!r}: {exc}")
        if len(values) == 1:
            du, dc = 0.0, values[0]  # single value shifts costs only
        elif len(values) == 2:
            du, dc = values
        else:
            raise CliError(
                f"degenerate scenario takes one or two values, got {token!r}")
        if du > 0 or dc < 0:
            raise CliError(
                f"degenerate shifts must have delta_u <= 0 and delta_c >= 0, got {token!r}")
        label = f"degenerate_{_num_token(du)}_{_num_token(dc)}"
        return ScenarioSpec(label, "degenerate", du, dc)
    raise CliError(
        f"unknown scenario {token!r}; expected one of {PLAIN_SCENARIOS} "
        "or degenerate(dc) / degenerate(du,dc)")


@dataclass(frozen=True)
class RunConfig:
    """Resolved run settings; a JSON document with the same field names."""

    dataset: str | None = None
    truth: str | None = None
    out: str = "hecon-run"
    seed: int | None = None
    scenarios: tuple[ScenarioSpec, ...] = ()
    families: tuple[str, ...] = ("lognormal",)
    n_chains: int = 2
    n_iter: int = 20000
    burn_in: int = 5000
    thin: int = 1
    k_max: float = 40000.0
    k_step: float = 100.0
    n_sims: int = 100
    max_draws: int | None = None
    dic_fills: int = 200
    ppc_replicates: int = 1000
    delta: tuple[float, ...] | None = None
    bounds: tuple[float, float] = EQ5D_BOUNDS
    rescale_mode: str = "theoretical"
    include_baseline_cost: bool = False
    threads: int | None = None

    def __post_init__(self):
        for fam in self.families:
            if fam not in COST_FAMILIES:
                raise CliError(f"unknown cost family {fam!r}")
        if not self.families:
            raise CliError("need at least one cost family")
        if self.seed is not None and self.seed < 0:
            raise CliError(f"seed must be >= 0, got {self.seed}")
        labels = [s.label for s in self.scenarios]
        if len(set(labels)) != len(labels):
            raise CliError(f"duplicate scenario labels: {labels}")

    @property
    def effective_seed(self) -> int:
        return 0 if self.seed is None else self.seed

    def require_scenarios(self) -> tuple[ScenarioSpec, ...]:
        if not self.scenarios:
            raise CliError("config needs at least one scenario")
        return self.scenarios

    def single_family(self) -> str:
        if len(self.families) != 1:
            raise CliError(
                "this command needs a single cost family; pass --family")
        return self.families[0]


_CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def thread_cap() -> int:
    """HECON_THREADS caps internal parallelism; this build is single-threaded,
    so the cap only bounds the reported thread budget."""
    raw = os.environ.get("HECON_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"HECON_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise CliError(f"HECON_THREADS must be >= 1, got {n}")
    return n


def load_config(path: str | None, args: argparse.Namespace) -> RunConfig:
    doc: dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise CliError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(doc, dict):
            raise CliError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(doc) - _CONFIG_KEYS)
        if unknown:
            raise CliError(f"unknown config keys: {unknown}")
    # flags override config fields
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        doc["out"] = args.out
    if getattr(args, "scenario", None):
        doc["scenarios"] = list(args.scenario)
    if getattr(args, "family", None) is not None:
        doc["families"] = (("lognormal", "gamma") if args.family == "both"
                           else (args.family,))
    if getattr(args, "k_max", None) is not None:
        doc["k_max"] = args.k_max
    if getattr(args, "k_step", None) is not None:
        doc["k_step"] = args.k_step
    if "scenarios" in doc:
        doc["scenarios"] = tuple(parse_scenario_token(t) for t in doc["scenarios"])
    for key in ("families", "delta"):
        if doc.get(key) is not None:
            doc[key] = tuple(doc[key])
    if doc.get("bounds") is not None:
        b = doc["bounds"]
        if len(b) != 2:
            raise CliError(f"bounds must be a [low, high] pair, got {b}")
        doc["bounds"] = (float(b[0]), float(b[1]))
    try:
        return RunConfig(**doc)
    except TypeError as exc:
        raise CliError(f"bad config value: {exc}")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, *key)))


def _chain_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence((seed, *key)).generate_state(1)[0])


def _load_dataset(config: RunConfig) -> TrialDataset:
    if config.dataset is None:
        raise CliError("config needs a dataset path")
    if not os.path.exists(config.dataset):
        raise CliError(f"dataset file not found: {config.dataset}")
    try:
        return parse_trial_csv(config.dataset, delta=config.delta,
                               bounds=config.bounds)
    except HeconError as exc:
        raise CliError(f"could not parse {config.dataset}: {exc}")


def _fit_path(out: str, arm: int, label: str, family: str) -> str:
    return os.path.join(out, "fits", f"arm{arm}_{label}_{family}.csv")


def _load_fit(config: RunConfig, arm: int, label: str, family: str,
              needed_by: str) -> PosteriorDraws:
    path = _fit_path(config.out, arm, label, family)
    if not os.path.exists(path):
        raise CliError(
            f"{needed_by} needs the {label} fit for arm {arm} "
            f"(family {family}); missing {path} - run the fit command first")
    return PosteriorDraws.from_csv(path)


def _update_manifest(out: str, command: str, payload: dict) -> None:
    path = os.path.join(out, "manifest.json")
    doc = {"commands": {}}
    if os.path.exists(path):
        with open(path) as fh:
            doc = json.load(fh)
    doc.setdefault("commands", {})[command] = dict(
        payload, completed_unix=time.time())
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _meta(config: RunConfig, scenario: str) -> dict:
    return {"scenario": scenario, "seed": config.effective_seed}


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(config: RunConfig) -> int:
    if config.truth is None:
        raise CliError("simulate needs a truth spec path in the config")
    if not os.path.exists(config.truth):
        raise CliError(f"truth spec file not found: {config.truth}")
    with open(config.truth) as fh:
        try:
            spec = TruthSpec.from_json(fh.read())
        except HeconError as exc:
            raise CliError(f"could not parse {config.truth}: {exc}")
    seed = spec.seed if config.seed is None else config.seed
    observed, full, truth = generate_trial(spec, np.random.default_rng(seed))
    os.makedirs(config.out, exist_ok=True)
    meta = {
        "scenario": "simulate", "seed": seed,
        "mechanism": spec.missing.mechanism,
        "delta": ";".join(format_float(d) for d in spec.delta),
        "bounds": ";".join(format_float(b) for b in spec.bounds),
    }
    obs_path = os.path.join(config.out, "dataset.csv")
    full_path = os.path.join(config.out, "dataset_full.csv")
    write_trial_csv(observed, obs_path, meta)
    write_trial_csv(full, full_path, meta)
    truth_doc = {
        "scenario": "simulate", "seed": seed,
        "delta": list(spec.delta), "bounds": list(spec.bounds),
        "arms": {
            str(arm): {
                "mean_u": list(t.mean_u), "mean_c": list(t.mean_c),
                "total_qaly": t.total_qaly, "total_cost": t.total_cost,
                "mc_error_u": list(t.mc_error_u), "mc_error_c": list(t.mc_error_c),
                "analytic": t.analytic,
            }
            for arm, t in sorted(truth.items())
        },
    }
    truth_path = os.path.join(config.out, "truth.json")
    _write_json(truth_path, truth_doc)
    _update_manifest(config.out, "simulate", {
        "seed": seed, "truth_spec": config.truth,
        "threads": thread_cap(),
        "outputs": [obs_path, full_path, truth_path],
    })
    print(f"wrote {observed.n} subjects to {obs_path}")
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _group_key(arm: int, label: str, family: str) -> str:
    return f"arm{arm}_{label}_{family}"


def cmd_fit(config: RunConfig) -> int:
    scenarios = config.require_scenarios()
    ds = _load_dataset(config)
    seed = config.effective_seed
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rds = rescale_utilities(ds, config.rescale_mode)
    groups = split_by_completion(rds)
    cc_only = all(s.kind == "cc" for s in scenarios)
    labels = GROUP_LABELS[:1] if cc_only else GROUP_LABELS
    fits_dir = os.path.join(config.out, "fits")
    os.makedirs(fits_dir, exist_ok=True)
    summary: dict = {"scenario": "fit", "seed": seed, "groups": {},
                     "absent_groups": [], "warnings": []}
    worst_rhat = 0.0
    outputs = []
    for fi, family in enumerate(config.families):
        for arm in ds.arms():
            for gi, label in enumerate(labels):
                group = groups[arm][label]
                if group is None:
                    summary["absent_groups"].append(_group_key(arm, label, family))
                    continue
                chain = ChainConfig(
                    n_chains=config.n_chains, n_iter=config.n_iter,
                    burn_in=config.burn_in, thin=config.thin,
                    seed=_chain_seed(seed, 1, arm, gi, fi))
                with warnings.catch_warnings(record=True) as fit_warns:
                    warnings.simplefilter("always")
                    draws = fit_group(group, family, chain)
                caught.extend(fit_warns)
                path = _fit_path(config.out, arm, label, family)
                draws.to_csv(path, extra_meta=_meta(config, "fit"))
                outputs.append(path)
                per_rhat = {}
                per_ess = {}
                for k, name in enumerate(draws.names):
                    chains_k = draws.chains[:, :, k]
                    r = rhat(chains_k) if config.n_chains > 1 else float("nan")
                    per_rhat[name] = None if np.isnan(r) else float(r)
                    per_ess[name] = float(ess(chains_k))
                finite = [v for v in per_rhat.values() if v is not None]
                if finite:
                    worst_rhat = max(worst_rhat, max(finite))
                summary["groups"][_group_key(arm, label, family)] = {
                    "n_subjects": group.n,
                    "n_kept": int(draws.chains.shape[0] * draws.chains.shape[1]),
                    "rhat": per_rhat,
                    "ess": per_ess,
                    "max_rhat": max(finite) if finite else None,
                    "min_ess": min(per_ess.values()),
                }
    for w in caught:
        text = str(w.message)
        summary["warnings"].append(text)
        print(f"warning: {text}", file=sys.stderr)
    converged = worst_rhat <= 1.1
    summary["max_rhat"] = worst_rhat
    summary["converged"] = converged
    summary_path = os.path.join(fits_dir, "summary.json")
    _write_json(summary_path, summary)
    _update_manifest(config.out, "fit", {
        "seed": seed, "dataset": config.dataset,
        "families": list(config.families), "threads": thread_cap(),
        "converged": converged, "outputs": outputs + [summary_path],
    })
    if not converged:
        print(f"error: max R-hat {worst_rhat:.4f} exceeds 1.1", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _scenario_object(spec: ScenarioSpec, sds_u, sds_c, J: int) -> SensitivityScenario:
    if spec.kind in ("mar", "delta0", "cc"):
        return benchmark_scenario()
    if spec.kind == "degenerate":
        # the same shift at every time; baseline cost is fully observed so
        # its restriction weight zeroes the time-0 cost term regardless
        return SensitivityScenario("degenerate",
                                   delta_u=(spec.delta_u,) * (J + 1),
                                   delta_c=(spec.delta_c,) * (J + 1))
    return SensitivityScenario(spec.kind, sd_u=sds_u, sd_c=sds_c)


@dataclass
class _ArmPipeline:
    """Per-arm quantities shared by every scenario (draw-aligned)."""

    arm: int
    completer_working: object
    noncompleter_working: object | None
    psi_completer: np.ndarray
    w_u: np.ndarray | None
    w_c: np.ndarray | None
    sds_u: tuple
    sds_c: tuple


def _prepare_arm(config: RunConfig, arm: int, family: str, groups, tables,
                 needs_noncompleters: bool) -> _ArmPipeline:
    seed = config.effective_seed
    comp = _load_fit(config, arm, "completers", family, "evaluate")
    w_comp = working_time_means(comp, n_sims=config.n_sims,
                                rng=_rng(seed, 2, arm, 0),
                                max_draws=config.max_draws)
    nonc_group = groups[arm]["noncompleters"]
    w_nonc = None
    w_u = w_c = None
    sds_u = sds_c = ()
    if nonc_group is not None:
        if needs_noncompleters:
            nonc = _load_fit(config, arm, "noncompleters", family, "this scenario list")
            w_nonc = working_time_means(nonc, n_sims=config.n_sims,
                                        rng=_rng(seed, 2, arm, 1),
                                        max_draws=config.max_draws)
            if w_nonc.n_draws != w_comp.n_draws:
                raise CliError(
                    f"arm {arm}: completer and non-completer fits kept different "
                    f"draw counts ({w_comp.n_draws} vs {w_nonc.n_draws}); refit "
                    "with one chain configuration")
        w_u, w_c = observed_fractions(nonc_group)
        sds_u, sds_c = calibration_sds(nonc_group, nonc_group.J)
    psi = fit_pattern_probs(tables[arm])
    psi_draws = psi.sample_completer(w_comp.n_draws, _rng(seed, 3, arm))
    return _ArmPipeline(arm, w_comp, w_nonc, psi_draws, w_u, w_c, sds_u, sds_c)


def _write_qaly_cost_csv(path, summary, meta) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        fh.write("draw,arm,qaly,cost,scenario\n")
        for arm, e, c in ((1, summary.e1, summary.c1), (2, summary.e2, summary.c2)):
            for s in range(summary.n_draws):
                fh.write(f"{s},{arm},{format_float(e[s])},"
                         f"{format_float(c[s])},{summary.scenario}\n")


def cmd_evaluate(config: RunConfig) -> int:
    scenarios = config.require_scenarios()
    family = config.single_family()
    ds = _load_dataset(config)
    seed = config.effective_seed
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rds = rescale_utilities(ds, config.rescale_mode)
    groups = split_by_completion(rds)
    tables = classify_patterns(ds)
    needs_nonc = any(s.kind != "cc" for s in scenarios)
    arms = {arm: _prepare_arm(config, arm, family, groups, tables, needs_nonc)
            for arm in ds.arms()}
    k_grid = default_k_grid(config.k_max, config.k_step)
    outputs = []
    for si, spec in enumerate(scenarios):
        scen_dir = os.path.join(config.out, spec.label)
        os.makedirs(scen_dir, exist_ok=True)
        meta = _meta(config, spec.label)
        per_arm_means = {}
        for arm, pipe in arms.items():
            if spec.kind == "cc" or pipe.noncompleter_working is None:
                psi = np.ones(pipe.completer_working.n_draws)
                nonc_means = None
            else:
                scen_obj = _scenario_object(spec, pipe.sds_u, pipe.sds_c, ds.J)
                nonc_means = noncompleter_group_means(
                    pipe.noncompleter_working, pipe.w_u, pipe.w_c, scen_obj,
                    rng=_rng(seed, 4, arm, si))
                psi = pipe.psi_completer
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                mm = mix_overall_means(psi, pipe.completer_working, nonc_means,
                                       rds, arm, spec.label)
            for w in caught:
                print(f"warning: {w.message}", file=sys.stderr)
            per_arm_means[arm] = mm
            path = os.path.join(scen_dir, f"means_arm{arm}.csv")
            mm.write_csv(path, meta)
            outputs.append(path)
        summary = summarize_economics(
            per_arm_means[1], per_arm_means[2], delta=ds.delta, k_grid=k_grid,
            include_baseline_cost=config.include_baseline_cost)
        probabilities = summary.ceac()
        try:
            icer_value = summary.icer()
        except EconError:
            icer_value = None
        paths = {
            "qaly_cost": os.path.join(scen_dir, "qaly_cost.csv"),
            "ceac": os.path.join(scen_dir, "ceac.csv"),
            "cep": os.path.join(scen_dir, "cep.csv"),
            "summary": os.path.join(scen_dir, "summary.json"),
        }
        _write_qaly_cost_csv(paths["qaly_cost"], summary, meta)
        write_ceac_csv(paths["ceac"], k_grid, probabilities, spec.label, meta)
        write_cep_csv(paths["cep"], summary, DEFAULT_CEP_K, meta)
        k_at = min(range(len(k_grid)),
                   key=lambda i: abs(k_grid[i] - DEFAULT_CEP_K))
        _write_json(paths["summary"], {
            "scenario": spec.label, "seed": seed, "family": family,
            "n_draws": summary.n_draws,
            "icer": icer_value,
            "mean_qaly": {"arm1": float(summary.e1.mean()),
                          "arm2": float(summary.e2.mean())},
            "mean_cost": {"arm1": float(summary.c1.mean()),
                          "arm2": float(summary.c2.mean())},
            "mean_delta_e": float(summary.delta_e.mean()),
            "mean_delta_c": float(summary.delta_c.mean()),
            "ceac_at_k": {"k": float(k_grid[k_at]),
                          "probability": float(probabilities[k_at])},
            "flags": sorted(set(per_arm_means[1].flags)
                            | set(per_arm_means[2].flags)),
        })
        outputs.extend(paths.values())
    _update_manifest(config.out, "evaluate", {
        "seed": seed, "dataset": config.dataset, "family": family,
        "scenarios": [s.label for s in scenarios], "threads": thread_cap(),
        "k_max": config.k_max, "k_step": config.k_step, "outputs": outputs,
    })
    return 0


# ---------------------------------------------------------------------------
# assess
# ---------------------------------------------------------------------------

def _family_dic(config: RunConfig, family: str, fi: int, groups) -> DicReport:
    seed = config.effective_seed
    total = None
    for arm in sorted(groups):
        for gi, label in enumerate(GROUP_LABELS):
            group = groups[arm][label]
            if group is None:
                continue
            path = _fit_path(config.out, arm, label, family)
            if not os.path.exists(path):
                raise CliError(
                    f"cost family {family!r}: missing fit output {path}; "
                    "fit that family before assessing it")
            draws = PosteriorDraws.from_csv(path)
            report = dic(draws, group, M=config.dic_fills,
                         rng=_rng(seed, 5, arm, gi, fi))
            total = report if total is None else total + report
    if total is None:
        raise CliError(f"cost family {family!r}: no groups to assess")
    return total


def cmd_assess(config: RunConfig) -> int:
    ds = _load_dataset(config)
    seed = config.effective_seed
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rds = rescale_utilities(ds, config.rescale_mode)
    groups = split_by_completion(rds)
    tables = classify_patterns(ds)
    assess_dir = os.path.join(config.out, "assess")
    os.makedirs(assess_dir, exist_ok=True)

    dic_doc = {"scenario": "assess", "seed": seed, "families": {}}
    totals = {}
    for fi, family in enumerate(config.families):
        report = _family_dic(config, family, fi, groups)
        body = json.loads(report.to_json())
        dic_doc["families"][family] = body
        totals[family] = body["total"]["dic"]
    if len(totals) > 1:
        dic_doc["preferred_family"] = min(totals, key=totals.get)
    dic_path = os.path.join(assess_dir, "dic.json")
    _write_json(dic_path, dic_doc)

    family = config.families[0]
    replicators = {}
    observed_arms = {}
    for arm in ds.arms():
        table = tables[arm]
        comp = nonc = None
        if any(r.is_completer for r in table.rows):
            comp = _load_fit(config, arm, "completers", family, "the predictive check")
        if any(not r.is_completer for r in table.rows):
            nonc = _load_fit(config, arm, "noncompleters", family,
                             "the predictive check")
        replicators[arm] = ArmReplicator(comp, nonc, fit_pattern_probs(table), table)
        observed_arms[arm] = rds.dataset.arm_arrays(arm)
    report = rank_corr_check(observed_arms, replicators,
                             n_rep=config.ppc_replicates, rng=_rng(seed, 6))
    ppc_path = os.path.join(assess_dir, "ppc.csv")
    report.to_csv(ppc_path, _meta(config, "assess"))
    ppc_summary_path = os.path.join(assess_dir, "ppc_summary.json")
    ppc_doc = json.loads(report.summary_json())
    ppc_doc.update(_meta(config, "assess"))
    _write_json(ppc_summary_path, ppc_doc)

    _update_manifest(config.out, "assess", {
        "seed": seed, "dataset": config.dataset,
        "families": list(config.families), "threads": thread_cap(),
        "outputs": [dic_path, ppc_path, ppc_summary_path],
    })
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "assess": cmd_assess,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hecon",
        description="Bayesian cost-effectiveness pipeline for longitudinal "
                    "trials with nonignorable missing outcomes.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "generate a synthetic trial from a truth spec",
        "fit": "fit the hurdle model per arm and completion group",
        "evaluate": "marginal means, QALY/cost draws, CEAC/CEP per scenario",
        "assess": "DIC per cost family and predictive rank-correlation checks",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", help="path to a JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--scenario", action="append",
                        help="scenario token (repeatable, replaces the config list)")
        sp.add_argument("--family", choices=(*COST_FAMILIES, "both"),
                        help="cost family (or 'both' for DIC comparison)")
        sp.add_argument("--k-max", type=float, dest="k_max",
                        help="willingness-to-pay grid maximum")
        sp.add_argument("--k-step", type=float, dest="k_step",
                        help="willingness-to-pay grid step")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args)
        return COMMANDS[args.command](config)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except HeconError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
