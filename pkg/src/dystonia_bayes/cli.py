"""Command-line interface.

Exit codes: 0 success, 2 invalid input or flags, 3 sampler failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from . import reporting
from .analyses import group_mean_posteriors, pairwise_contrasts, sensitivity_analysis
from .diagnostics import kde
from .errors import ConfigError, SamplerError, ValidationError
from .model import PriorConfig, default_prior, sensitivity_presets
from .pipeline import fit
from .sampler import SamplerConfig
from .selection import backward_select
from .synthetic import (
    TRIAL_LAYOUT,
    SBC_LAYOUT,
    SBC_PRIOR,
    SBC_SPEC,
    SURROGATE_LAYOUT,
    trial_truth,
    sbc,
    simulate_panel,
)
from .trial_data import (
    FINAL_SPEC,
    FULL_SPEC,
    baseline_summary,
    load_bundled_panel,
    parse_panel,
    read_spec_file,
    serialize_panel,
)

PRIOR_PRESETS = {"veryweak": "VeryWeak", "very-weak": "VeryWeak",
                 "weak": "Weak", "moderate": "Moderate", "default": None}
SIM_PRESETS = ("trial-truth", "trial-surrogate")


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    return value


def _seed(text):
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2**64)")
    return value


def _add_data(p):
    p.add_argument("--data", help="panel CSV path, '-' for stdin; defaults to the bundled surrogate panel")


def _add_model(p, default_spec):
    p.add_argument("--spec", default=default_spec, help="full | final | file:<path> (default: %(default)s)")
    p.add_argument("--prior-file", help="flat key=value prior configuration")
    p.add_argument("--preset", help="prior preset: default | very-weak | weak | moderate")


def _add_sampler(p, seed_required, chains=4, iterations=10_000, burn_in=2_000):
    p.add_argument("--chains", type=_positive_int, default=chains)
    p.add_argument("--iterations", type=_positive_int, default=iterations,
                   help="post-burn-in sweeps per chain (>= 100)")
    p.add_argument("--burn-in", type=_positive_int, default=burn_in)
    p.add_argument("--thin", type=_positive_int, default=1)
    p.add_argument("--seed", type=_seed, required=seed_required, default=None if seed_required else 0)
    p.add_argument("--workers", type=_positive_int, default=None,
                   help="worker processes for chains (default: one per chain, capped at CPU count)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dystonia-bayes", allow_abbrev=False,
                                     description="Bayesian random-intercept analysis of TWSTRS trial panels.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        return sub.add_parser(name, help=help_text, allow_abbrev=False)

    p = command("fit", "fit the model and write summary, traces and manifest")
    _add_data(p)
    _add_model(p, "full")
    _add_sampler(p, seed_required=True)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--hpd", action="store_true", help="report HPD instead of central intervals")
    p.add_argument("--densities", action="store_true", help="also write density_<parameter>.csv curves")
    p.add_argument("--include-gamma", action="store_true", help="include random intercepts in trace CSVs")

    p = command("select", "backward covariate selection")
    _add_data(p)
    _add_model(p, "full")
    _add_sampler(p, seed_required=True)
    p.add_argument("--out-dir", default=".")

    p = command("sensitivity", "refit under the three prior-strength presets")
    _add_data(p)
    p.add_argument("--spec", default="final", help="full | final | file:<path> (default: %(default)s)")
    p.add_argument("--prior-file", help="base prior for the presets")
    _add_sampler(p, seed_required=False)
    p.add_argument("--out-dir", default=".")

    p = command("contrasts", "posterior arm means and pairwise arm contrasts")
    _add_data(p)
    _add_model(p, "final")
    _add_sampler(p, seed_required=False)
    p.add_argument("--mode", choices=("observed", "reference"), default="observed")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--densities", action="store_true", help="also write contrast_<group>-<reference>.csv curves")

    p = command("simulate", "simulate a panel in the CSV wire format")
    p.add_argument("--preset", choices=SIM_PRESETS, default="trial-truth")
    p.add_argument("--seed", type=_seed, required=True)
    p.add_argument("--out", default="-", help="output path, '-' for stdout")

    p = command("sbc", "simulation-based calibration of the sampler")
    p.add_argument("--seed", type=_seed, required=True)
    p.add_argument("--replications", type=_positive_int, default=100)
    p.add_argument("--chains", type=_positive_int, default=1)
    p.add_argument("--iterations", type=_positive_int, default=2_000)
    p.add_argument("--burn-in", type=_positive_int, default=500)
    p.add_argument("--thin", type=_positive_int, default=1)
    p.add_argument("--freeze", action="append", default=[],
                   help="hold a hyperparameter at its initial value (negative control)")
    p.add_argument("--out-dir", default=".")

    p = command("describe", "baseline (week-0) summary by arm and sex")
    _add_data(p)
    p.add_argument("--out", default="-")
    return parser


def _load_data(arg):
    if arg is None:
        return load_bundled_panel()
    if arg == "-":
        return parse_panel(sys.stdin.buffer)
    try:
        with open(arg, "rb") as fh:
            return parse_panel(fh)
    except OSError as err:
        raise ConfigError(f"cannot read data file {arg}: {err.strerror or err}") from None


def _load_spec(arg):
    if arg == "full":
        return FULL_SPEC
    if arg == "final":
        return FINAL_SPEC
    if arg and arg.startswith("file:"):
        path = arg[5:]
        try:
            return read_spec_file(path)
        except OSError as err:
            raise ConfigError(f"cannot read spec file {path}: {err.strerror or err}") from None
    raise ConfigError(f"--spec must be full, final or file:<path>, got {arg!r}")


def _load_prior(args):
    prior = default_prior()
    if getattr(args, "prior_file", None):
        try:
            with open(args.prior_file, encoding="utf-8") as fh:
                prior = PriorConfig.from_text(fh.read())
        except OSError as err:
            raise ConfigError(f"cannot read prior file {args.prior_file}: {err.strerror or err}") from None
    preset = getattr(args, "preset", None)
    if preset:
        key = preset.lower()
        if key not in PRIOR_PRESETS:
            raise ConfigError(f"unknown prior preset {preset!r}")
        if PRIOR_PRESETS[key]:
            prior = sensitivity_presets(prior)[PRIOR_PRESETS[key]]
    return prior


def _sampler_config(args, **extra):
    return SamplerConfig(seed=args.seed, chains=args.chains, iterations=args.iterations,
                         burn_in=args.burn_in, thin=args.thin, **extra)


def _workers(args):
    if args.workers:
        return args.workers
    return max(1, min(args.chains, os.cpu_count() or 1))


def _out_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as err:
        raise ConfigError(f"cannot create output directory {path}: {err.strerror or err}") from None
    return path


def _write_text(path, text):
    if path == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def cmd_fit(args):
    data = _load_data(args.data)
    spec = _load_spec(args.spec)
    prior = _load_prior(args)
    config = _sampler_config(args)
    out = _out_dir(args.out_dir)
    result = fit(data, spec, config, prior, workers=_workers(args), hpd=args.hpd)
    columns = result.model.design.columns
    payload = {
        "terms": list(spec.terms),
        "n_patients": data.n_patients,
        "n_rows": data.n_rows,
        "interval": "hpd" if args.hpd else "central",
        **reporting.summary_payload(result.summary, columns),
    }
    reporting.write_json(os.path.join(out, "summary.json"), payload)
    reporting.write_traces(out, result.trace, result.model, config, include_gamma=args.include_gamma,
                           extra={"terms": list(spec.terms)})
    if args.densities:
        for name in result.summary:
            grid, dens = kde(result.trace.pooled(name))
            _write_text(os.path.join(out, f"density_{name.replace(':', 'x')}.csv"),
                        reporting.density_csv(grid, dens))
    return 0


def cmd_select(args):
    data = _load_data(args.data)
    spec = _load_spec(args.spec)
    prior = _load_prior(args)
    config = _sampler_config(args)
    out = _out_dir(args.out_dir)
    result = backward_select(data, spec, prior, config, workers=_workers(args))
    reporting.write_json(os.path.join(out, "steps.json"), result.as_dict())
    return 0


def cmd_sensitivity(args):
    data = _load_data(args.data)
    spec = _load_spec(args.spec)
    base = _load_prior(args)
    config = _sampler_config(args)
    out = _out_dir(args.out_dir)
    report = sensitivity_analysis(data, spec, config, base, workers=_workers(args))
    reporting.write_json(os.path.join(out, "stability.json"), {"terms": list(spec.terms), **report.as_dict()})
    return 0


def cmd_contrasts(args):
    data = _load_data(args.data)
    spec = _load_spec(args.spec)
    prior = _load_prior(args)
    config = _sampler_config(args)
    out = _out_dir(args.out_dir)
    result = fit(data, spec, config, prior, workers=_workers(args))
    groups = group_mean_posteriors(result.trace, data, spec, mode=args.mode)
    table = pairwise_contrasts(groups)
    payload = {
        "terms": list(spec.terms),
        "mode": args.mode,
        "group_means": {k: v.as_dict() for k, v in groups.summaries.items()},
        "contrasts": [c.as_dict() for c in table],
    }
    reporting.write_json(os.path.join(out, "contrasts.json"), payload)
    if args.densities:
        for c in table:
            diff = (groups.draws[c.group] - groups.draws[c.reference]).ravel()
            grid, dens = kde(diff)
            _write_text(os.path.join(out, f"contrast_{c.group}-{c.reference}.csv"),
                        reporting.density_csv(grid, dens))
    return 0


def cmd_simulate(args):
    spec, truth = trial_truth()
    layout = TRIAL_LAYOUT if args.preset == "trial-truth" else SURROGATE_LAYOUT
    sim = simulate_panel(truth, layout, args.seed, spec)
    _write_text(args.out, serialize_panel(sim.data))
    print(f"simulated {sim.data.n_rows} rows for {sim.data.n_patients} patients; "
          f"{sim.n_clamped} scores clamped to 0-87", file=sys.stderr)
    return 0


def cmd_sbc(args):
    config = SamplerConfig(seed=args.seed, chains=args.chains, iterations=args.iterations,
                           burn_in=args.burn_in, thin=args.thin, store_gamma=False,
                           frozen=tuple(args.freeze))
    out = _out_dir(args.out_dir)
    result = sbc(SBC_PRIOR, SBC_LAYOUT, args.replications, config, SBC_SPEC)
    reporting.write_json(os.path.join(out, "sbc.json"), {"config": config.as_dict(), **result.as_dict()})
    return 0


def cmd_describe(args):
    data = _load_data(args.data)
    table = baseline_summary(data)

    def section(groups):
        return {k: {"n": v.n, "score_mean": v.score_mean, "score_sd": v.score_sd, "age_mean": v.age_mean}
                for k, v in groups.items()}

    payload = reporting.versioned({
        "n_patients": data.n_patients,
        "n_rows": data.n_rows,
        "arm_patients": {arm.label: n for arm, n in data.counts.items()},
        "baseline_by_arm": section(table.by_arm),
        "baseline_by_sex": section(table.by_sex),
    })
    _write_text(args.out, reporting.dumps(payload))
    return 0


COMMANDS = {
    "fit": cmd_fit, "select": cmd_select, "sensitivity": cmd_sensitivity,
    "contrasts": cmd_contrasts, "simulate": cmd_simulate, "sbc": cmd_sbc, "describe": cmd_describe,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except SamplerError as err:
        print(f"sampler error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
