"""Command-line front end: one subcommand per workflow stage.

    rtworkflow gen-design     Latin-square design (and optionally one simulated data set)
    rtworkflow prior-predict  prior predictive summary statistics
    rtworkflow fit            fit the model to a data file
    rtworkflow sbc            simulation-based calibration
    rtworkflow sensitivity    posterior z-scores and contraction
    rtworkflow ppc            posterior predictive checks
    rtworkflow bf             Bayes factor of the full over the null model
    rtworkflow report         collect stage outputs into one document

Every stage writes CSV/JSON (and SVG figures) into ``--out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks, config, io, seeding, svg
from .bridge import bf_workflow
from .diagnostics import diagnose
from .ensemble import EnsembleConfig, run_ensemble
from .errors import WorkflowError
from .hmc import sample_with_remediation
from .model import ModelTarget, model_variant
from .sbc import results_from_fits
from .sensitivity import prior_sd, records_from_fits, summarize
from .simulate import draw_prior, generate_design, prior_predictive_ensemble, simulate_dataset

log = logging.getLogger("rtworkflow")

STAGE_ORDER = ("prior_predictive", "sbc", "sensitivity", "fit", "ppc", "bf")
DEFAULT_SIMS = {"prior-predict": 1000, "sbc": 200, "sensitivity": 200, "ppc": 1000}
PPC_TITLES = {
    "histogram": "a) reading-time histogram",
    "mean_log_rt": "b) mean log reading time",
    "effect_ms": "c) OR - SR difference (ms)",
    "sd_resid_rt": "d) SD of residual reading times",
    "max_subject_effect_ms": "e) maximal subject effect (ms)",
    "sd_subject_effect_ms": "f) SD of subject effects (ms)",
}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="TOML run configuration")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--jobs", type=int, help="worker processes for ensemble stages")
    p.add_argument("--out", type=str, help="output directory")
    p.add_argument("--prior", type=str, help="diffuse | weakly-informative | PATH to a prior TOML file")
    p.add_argument("--model", choices=("full", "null"), help="include the condition slope (full) or not (null)")
    p.add_argument("--n-sims", type=int, dest="n_sims", help="number of simulated data sets")
    p.add_argument("--adapt-delta", type=float, dest="adapt_delta", help="target acceptance during warmup")
    p.add_argument("--iter", type=int, help="iterations per chain, warmup included")
    p.add_argument("--warmup", type=int, help="warmup iterations per chain")
    p.add_argument("--chains", type=int, help="number of chains")
    p.add_argument("--thin", type=int, help="initial thinning factor for rank statistics")
    p.add_argument("--subjects", type=int, help="number of subjects in a generated design")
    p.add_argument("--items", type=int, help="number of items in a generated design")
    p.add_argument("--data", type=str, help="CSV with columns subj,item,so,rt")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtworkflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("gen-design", "write a Latin-square design"),
        ("prior-predict", "prior predictive checks"),
        ("fit", "fit the model to data"),
        ("sbc", "simulation-based calibration"),
        ("sensitivity", "posterior z-scores and contraction"),
        ("ppc", "posterior predictive checks"),
        ("bf", "Bayes factor, full over null model"),
        ("report", "compose stage outputs into one summary"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        if name == "gen-design":
            p.add_argument("--simulate", action="store_true", help="also simulate one data set from the prior")
    return parser


def _overrides(args) -> dict:
    return {
        "seed": args.seed,
        "jobs": args.jobs,
        "out": args.out,
        "model.prior": args.prior,
        "model.variant": args.model,
        "workflow.n_sims": args.n_sims,
        "sampler.adapt_delta": args.adapt_delta,
        "sampler.iter": args.iter,
        "sampler.warmup": args.warmup,
        "sampler.chains": args.chains,
        "workflow.thin": args.thin,
        "design.n_subjects": args.subjects,
        "design.n_items": args.items,
        "design.data": args.data,
    }


def _n_sims(cfg, command):
    return cfg.n_sims if cfg.n_sims is not None else DEFAULT_SIMS[command]


def _load_data(cfg):
    if cfg.data is None:
        raise WorkflowError("this stage needs data: pass --data PATH or set design.data")
    data, mapping = io.parse_data(cfg.data)
    return data, mapping


def _design(cfg):
    return generate_design(cfg.n_subjects, cfg.n_items)


# ---------------------------------------------------------------------------
# stages


def cmd_gen_design(cfg, args):
    design = _design(cfg)
    rows = zip(design.subject + 1, design.item + 1, design.so)
    io.write_csv(cfg.out / "design.csv", ("subj", "item", "so"), rows)
    out = {"n_subjects": design.n_subjects, "n_items": design.n_items, "n_trials": design.n_trials,
           "condition_counts_per_subject": design.condition_counts("subject").tolist()}
    if args.simulate:
        theta = draw_prior(cfg.prior, design, cfg.seed_spec, 0, cfg.include_slope)
        data = simulate_dataset(theta, design, cfg.seed_spec, 0)
        io.write_data(cfg.out / "data.csv", data)
        io.write_json(cfg.out / "truth.json", {"prior": cfg.prior.name, "parameters": theta.structural()})
        out["simulated"] = "data.csv"
    io.write_json(cfg.out / "design.json", out)
    print(f"design: {design.n_subjects} subjects x {design.n_items} items, {design.n_trials} trials "
          f"-> {cfg.out / 'design.csv'}")


def _write_statistics(path, check):
    names = list(check.statistics)
    rows = zip(range(check.n_sims), *[check.statistics[k] for k in names])
    io.write_csv(path, ["sim", *names], rows)


def _write_band(path, band):
    rows = []
    for k in range(band.quantiles.shape[1]):
        lo = band.edges[k]
        rows.append([lo, "inf" if not np.isfinite(band.edges[k + 1]) else band.edges[k + 1],
                     *band.quantiles[:, k]])
    io.write_csv(path, ["bin_lo_ms", "bin_hi_ms", *[f"q{int(round(100 * q))}" for q in band.levels]], rows)


def cmd_prior_predict(cfg, args):
    n = _n_sims(cfg, "prior-predict")
    design = _design(cfg)
    ens = prior_predictive_ensemble(cfg.prior, design, n, cfg.seed_spec, cfg.include_slope)
    check = checks.predictive_check([d for _, d in ens])
    _write_statistics(cfg.out / "prior_predictive_statistics.csv", check)
    _write_band(cfg.out / "prior_predictive_histogram_band.csv", check.band)
    mean_ms = np.exp(check.statistics["mean_log_rt"])
    summary = {
        "prior": cfg.prior.name,
        "n_sims": n,
        "fraction_abs_effect_over_2000ms": check.fraction("effect_ms", lambda x: np.abs(x) > 2000),
        "fraction_mean_between_148_and_1097ms": float(np.mean((mean_ms >= 148) & (mean_ms <= 1097))),
        "fraction_mean_log_rt_over_10": check.fraction("mean_log_rt", lambda x: x > 10),
        "quantiles": {k: np.quantile(v[np.isfinite(v)], [0.05, 0.5, 0.95]).tolist()
                      for k, v in check.statistics.items()},
        "config": cfg.describe(),
    }
    io.write_json(cfg.out / "prior_predictive.json", summary)
    io.atomic_write(cfg.out / "prior_predictive.svg", svg.predictive_panels(check, PPC_TITLES))
    print(f"prior predictive ({cfg.prior.name}, {n} data sets): "
          f"P(|effect| > 2000 ms) = {summary['fraction_abs_effect_over_2000ms']:.3f}, "
          f"P(148 <= mean <= 1097 ms) = {summary['fraction_mean_between_148_and_1097ms']:.3f}")


def fixed_effects_table(draws, names=("beta0", "beta1")) -> list:
    labels = {"beta0": "Intercept", "beta1": "so"}
    rows = []
    for n in names:
        if n not in draws.param_names:
            continue
        x = draws.flat(n)
        q = np.quantile(x, [0.025, 0.975])
        rows.append((labels.get(n, n), float(x.mean()), float(x.std(ddof=1)), float(q[0]), float(q[1])))
    return rows


def cmd_fit(cfg, args):
    data, mapping = _load_data(cfg)
    variant = model_variant(cfg.include_slope)
    target = ModelTarget(data, cfg.prior, variant)
    draws = sample_with_remediation(target, cfg.sampler, rhat_cutoff=1.05)
    diag = diagnose(draws)
    io.persist_draws(draws, cfg.out / "draws.csv")
    io.write_mapping(cfg.out / "mapping.csv", mapping)
    table = fixed_effects_table(draws)
    io.write_csv(cfg.out / "fixed_effects.csv", ("term", "Estimate", "Est.Error", "Q2.5", "Q97.5"), table)
    report = {
        "model": variant.name,
        "prior": cfg.prior.name,
        "n_subjects": data.design.n_subjects,
        "n_items": data.design.n_items,
        "n_trials": data.design.n_trials,
        "fixed_effects": [dict(zip(("term", "Estimate", "Est.Error", "Q2.5", "Q97.5"), r)) for r in table],
        "max_rhat": diag.max_rhat,
        "min_ess": diag.min_ess,
        "divergent": diag.n_divergent,
        "max_treedepth_hits": diag.n_max_treedepth,
        "retries": draws.retries,
        "remediation": draws.remediation,
        "config": cfg.describe(),
    }
    if cfg.include_slope:
        report["p_beta1_negative"] = float(np.mean(draws.flat("beta1") < 0))
    io.write_json(cfg.out / "fit.json", report)
    print("Population-Level Effects:")
    print(f"{'':<10}{'Estimate':>9}{'Est.Error':>10}{'Q2.5':>8}{'Q97.5':>8}")
    for term, est, err, lo, hi in table:
        print(f"{term:<10}{est:9.3f}{err:10.3f}{lo:8.3f}{hi:8.3f}")
    if cfg.include_slope:
        print(f"p(b<0) = {report['p_beta1_negative']:.2f}")
    print(f"max R-hat {diag.max_rhat:.3f}, divergent transitions {diag.n_divergent}, retries {draws.retries}")


def _ensemble(cfg, command):
    n = _n_sims(cfg, command)
    ecfg = EnsembleConfig(prior=cfg.prior, design=_design(cfg), include_slope=cfg.include_slope,
                          sampler=cfg.sampler, monitored=cfg.monitored, thin=cfg.thin, bins=cfg.bins,
                          seed=cfg.seed_spec)

    def progress(f):
        log.info("sim %d: thin %d, max R-hat %.3f, retries %d%s", f.index, f.thin, f.max_rhat, f.retries,
                 " (failed)" if f.failed else "")

    fits = run_ensemble(ecfg, n, jobs=cfg.jobs, progress=progress)
    rows = [(f.index, f.thin, f.r, f.lag1, f.max_rhat, f.n_divergent, f.retries, int(f.failed)) for f in fits]
    io.write_csv(cfg.out / f"{command}_fits.csv",
                 ("sim_index", "thin", "R", "lag1_after_thin", "max_rhat", "divergent", "retries", "excluded"),
                 rows)
    return fits


def cmd_sbc(cfg, args):
    fits = _ensemble(cfg, "sbc")
    results = results_from_fits(fits, cfg.monitored, cfg.bins, cfg.coverage)
    rows = []
    for f in fits:
        for p in cfg.monitored:
            rows.append((f.index, p, f.true_values[p], f.ranks.get(p, -1), int(f.failed)))
    io.write_csv(cfg.out / "sbc_ranks.csv", ("sim_index", "parameter", "true_value", "rank", "excluded_flag"), rows)
    summary = {p: r.summary() for p, r in results.items()}
    summary["config"] = cfg.describe()
    summary["max_rhat"] = max(f.max_rhat for f in fits if not f.failed)
    summary["retries"] = int(sum(f.retries for f in fits))
    io.write_json(cfg.out / "sbc_summary.json", summary)
    for p, r in results.items():
        fig = svg.rank_histogram(r.bin_counts, r.band, r.expected, title=f"rank histogram: {p}")
        io.atomic_write(cfg.out / f"sbc_{_safe(p)}.svg", fig)
        print(f"SBC {p}: {r.n_sims} used, {r.n_excluded} excluded, {r.n_outside} of {r.bins} bins outside "
              f"the {r.coverage:.0%} band, pathology: {r.pathology}")


def _safe(name: str) -> str:
    return name.replace("[", "_").replace("]", "")


def cmd_sensitivity(cfg, args):
    fits = _ensemble(cfg, "sensitivity")
    recs = records_from_fits(fits, cfg.prior, cfg.monitored)
    fields = ("sim_index", "parameter", "true_value", "mu_post", "sd_post", "sd_prior", "z", "contraction", "label")
    io.write_csv(cfg.out / "sensitivity.csv", fields, [tuple(getattr(r, k) for k in fields) for r in recs])
    summary = {p: summarize(recs, p).to_dict() for p in cfg.monitored}
    summary["config"] = cfg.describe()
    summary["prior_sd"] = {p: prior_sd(cfg.prior, p) for p in cfg.monitored}
    io.write_json(cfg.out / "sensitivity_summary.json", summary)
    for p in cfg.monitored:
        sel = [r for r in recs if r.parameter == p]
        fig = svg.sensitivity_scatter([r.contraction for r in sel], [r.z for r in sel], title=p)
        io.atomic_write(cfg.out / f"sensitivity_{_safe(p)}.svg", fig)
        s = summary[p]
        print(f"sensitivity {p}: mean contraction {s['mean_contraction']:.3f}, mean |z| {s['mean_abs_z']:.3f}, "
              f"mean z {s['mean_z']:+.3f}")


def cmd_ppc(cfg, args):
    data, _ = _load_data(cfg)
    target = ModelTarget(data, cfg.prior, model_variant(cfg.include_slope))
    draws = sample_with_remediation(target, cfg.sampler, rhat_cutoff=1.05)
    n = min(_n_sims(cfg, "ppc"), draws.n_chains * draws.n_iter)
    ens = checks.posterior_predictive_ensemble(draws, data, n, cfg.seed_spec)
    check = checks.predictive_check(ens, observed=data)
    _write_statistics(cfg.out / "ppc_statistics.csv", check)
    _write_band(cfg.out / "ppc_histogram_band.csv", check.band)
    out = {
        "n_sims": n,
        "observed": check.observed.to_dict(),
        "position": check.position,
        "two_sided_tail_p": check.tail_p,
        "config": cfg.describe(),
    }
    io.write_json(cfg.out / "ppc.json", out)
    io.atomic_write(cfg.out / "ppc.svg", svg.predictive_panels(check, PPC_TITLES))
    for k, p in check.tail_p.items():
        print(f"{k:<24} observed {getattr(check.observed, k):12.4g}  two-sided tail p {p:.3f}")


def cmd_bf(cfg, args):
    data, _ = _load_data(cfg)
    sampler = cfg.sampler
    if args.iter is None and _file_sets(args, "sampler", "iter") is False:
        sampler = sampler.replace(iter=10000, warmup=2000)
    report = bf_workflow(data, cfg.prior, sampler, cfg.bridge_repetitions, cfg.seed_spec)
    out = report.to_dict()
    out["config"] = cfg.describe() | {"sampler": {"chains": sampler.n_chains, "iter": sampler.iter,
                                                  "warmup": sampler.warmup, "adapt_delta": sampler.adapt_delta}}
    io.write_json(cfg.out / "bf.json", out)
    for line in out["interpretation"]:
        print(line)
    for k, v in out["log_marginal_likelihood"].items():
        print(f"log marginal likelihood ({k}): {v:.4f} (spread {out['repeat_spread'][k]:.4f})")


def _file_sets(args, section, key):
    if args.config is None:
        return False
    try:
        values = config.tomllib.loads(Path(args.config).read_text())
    except (OSError, config.tomllib.TOMLDecodeError):
        return False
    return key in values.get(section, {})


def cmd_report(cfg, args):
    out = cfg.out
    sources = {
        "prior_predictive": "prior_predictive.json",
        "sbc": "sbc_summary.json",
        "sensitivity": "sensitivity_summary.json",
        "fit": "fit.json",
        "ppc": "ppc.json",
        "bf": "bf.json",
    }
    collected = {}
    lines = ["# Workflow report", ""]
    for stage in STAGE_ORDER:
        path = out / sources[stage]
        if not path.exists():
            lines += [f"## {stage}", "", "not run", ""]
            continue
        data = json.loads(path.read_text())
        data.pop("config", None)
        collected[stage] = data
        lines += [f"## {stage}", "", *_report_lines(stage, data), ""]
    if not collected:
        raise WorkflowError(f"no stage outputs found in {out}")
    io.write_json(out / "report.json", {"stages": collected, "order": list(STAGE_ORDER)})
    io.atomic_write(out / "report.md", "\n".join(lines) + "\n")
    print(f"report with {len(collected)} stage(s) -> {out / 'report.md'}")


def _report_lines(stage, d):
    if stage == "prior_predictive":
        return [f"- prior: {d['prior']}, {d['n_sims']} simulated data sets",
                f"- P(|effect| > 2000 ms) = {d['fraction_abs_effect_over_2000ms']:.3f}",
                f"- P(148 ms <= mean <= 1097 ms) = {d['fraction_mean_between_148_and_1097ms']:.3f}"]
    if stage == "sbc":
        rows = []
        for p, s in d.items():
            if isinstance(s, dict) and "bin_counts" in s:
                rows.append(f"- {p}: {s['n_sims']} fits ({s['n_excluded']} excluded), "
                            f"{s['bins_outside_band']} of {s['bins']} bins outside band, "
                            f"chi-square p = {s['chi_square_p']}, pathology {s['pathology']}")
        return rows
    if stage == "sensitivity":
        return [f"- {p}: mean contraction {s['mean_contraction']:.3f}, mean |z| {s['mean_abs_z']:.3f}, "
                f"mean z {s['mean_z']:+.3f}" for p, s in d.items() if isinstance(s, dict) and "mean_z" in s]
    if stage == "fit":
        rows = [f"- {r['term']}: {r['Estimate']:.3f} ({r['Est.Error']:.3f}) [{r['Q2.5']:.3f}, {r['Q97.5']:.3f}]"
                for r in d["fixed_effects"]]
        if "p_beta1_negative" in d:
            rows.append(f"- p(b<0) = {d['p_beta1_negative']:.2f}")
        rows.append(f"- max R-hat {d['max_rhat']:.3f}, divergent {d['divergent']}, retries {d['retries']}")
        return rows
    if stage == "ppc":
        return [f"- {k}: two-sided tail p {v:.3f}" for k, v in d["two_sided_tail_p"].items() if v is not None]
    if stage == "bf":
        return [f"- {s}" for s in d["interpretation"]]
    return []


COMMANDS = {
    "gen-design": cmd_gen_design,
    "prior-predict": cmd_prior_predict,
    "fit": cmd_fit,
    "sbc": cmd_sbc,
    "sensitivity": cmd_sensitivity,
    "ppc": cmd_ppc,
    "bf": cmd_bf,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config.load_config(args.config, _overrides(args))
        COMMANDS[args.command](cfg, args)
    except WorkflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
