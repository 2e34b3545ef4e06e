"""Command-line entry point: simulate, fit, eval, experiment.

Exit codes: 0 success, 2 invalid flags or config, 3 I/O failure, 4 solver
produced non-finite values, 5 degenerate nuisance fit, 6 empty agreement set
when computing the value.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import (BadShape, ConstantColumn, DegenerateDesign, EmptyIntersection, ItrError,
                     NonConvergence, NonFinite)
from .evaluation import PropensitySource, evaluate
from .experiments import (ExperimentConfig, aggregate_table, format_table, run_experiment,
                          write_results_csv, write_summary_csv)
from .federation import (FitConfig, build_sites, fit_avg, fit_dce, fit_fce, fit_initial,
                         kkt_residual)
from .gcd import standardize
from .nuisance import aipwe_contrasts, fit_nuisance, pseudo_labels
from .objective import RuleCoefficients
from .rng import stream
from .simgen import (ScenarioSpec, gen_dataset, partition_sites, read_dataset_csv,
                     site_partition, write_dataset_csv)
from .smoothing import KernelKind, SmoothedLoss

log = logging.getLogger("smoothitr")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NONFINITE, EXIT_NUISANCE, EXIT_EMPTY = 0, 2, 3, 4, 5, 6
HELP_WIDTH = 100


class UsageError(Exception):
    pass


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    def __init__(self, prog):
        super().__init__(prog, width=HELP_WIDTH, max_help_position=32)

    def _get_help_string(self, action):
        # "(default: None)" carries no information
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def _auto_or_float(text: str):
    if text == "auto":
        return "auto"
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or a number, got {text!r}") from None
    if not np.isfinite(v) or v < 0:
        raise argparse.ArgumentTypeError(f"expected a finite nonnegative number, got {text!r}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smoothitr", formatter_class=_Formatter,
        description="Distributed learning of linear treatment rules with a smoothed hinge loss.")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("simulate", formatter_class=_Formatter,
                       help="generate a synthetic dataset CSV",
                       description="Generate a synthetic dataset plus a sidecar JSON holding "
                                   "the scenario settings and the site manifest.")
    p.add_argument("--config", type=Path, help="JSON file of flag defaults (flags win)")
    p.add_argument("--scenario", choices=["a", "b", "c", "d"], default="a",
                   help="treatment-effect scenario")
    p.add_argument("--design", choices=["rct", "obs"], default="obs", help="assignment design")
    p.add_argument("--N", type=_positive_int, default=1000, help="total number of units")
    p.add_argument("--sites", type=_positive_int, default=1, help="number of sites M")
    p.add_argument("--p", type=_positive_int, default=5, help="number of covariates (>= 5)")
    p.add_argument("--covariates", choices=["uniform", "normal"], default="uniform",
                   help="covariate law: U(-1,1) or N(0,1) per coordinate")
    p.add_argument("--noise-sd", type=float, default=0.5, help="outcome noise standard deviation")
    p.add_argument("--allow-unbalanced", action="store_true",
                   help="allow N not divisible by the number of sites")
    p.add_argument("--no-truth", action="store_true",
                   help="omit the delta_star and prop_true columns")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", type=Path, default=Path("data.csv"), help="output CSV path")

    p = sub.add_parser("fit", formatter_class=_Formatter, help="fit a treatment rule",
                       description="Fit a rule on a dataset CSV and write a model JSON.")
    p.add_argument("--config", type=Path, help="JSON file of flag defaults (flags win)")
    p.add_argument("--method", choices=["fce", "dce", "avg", "initial"], default="dce",
                   help="estimator")
    p.add_argument("--data", type=Path, required=False, help="training CSV")
    p.add_argument("--sites", default="1",
                   help="number of sites, or a JSON manifest listing unit ids per site")
    p.add_argument("--h", type=_auto_or_float, default="auto",
                   help="global bandwidth; auto = N^(-1/3)")
    p.add_argument("--b", type=_auto_or_float, default="auto",
                   help="central-site bandwidth; auto = n^(-1/3)")
    p.add_argument("--lambda", dest="lam", type=_auto_or_float, default="auto",
                   help="ridge penalty on slopes; auto = 1/sqrt(N)")
    p.add_argument("--rounds", type=_positive_int, default=10, help="communication rounds T")
    p.add_argument("--kernel", choices=[k.value for k in KernelKind], default="epanechnikov",
                   help="smoothing kernel")
    p.add_argument("--nuisance", choices=["dnc", "central-only"], default="dnc",
                   help="how site nuisance fits are combined")
    p.add_argument("--seed", type=int, default=0,
                   help="seed of the random site partition when --sites is a number")
    p.add_argument("--out", type=Path, default=Path("model.json"), help="model JSON path")
    p.add_argument("--transcript", type=Path,
                   help="transcript path for dce (default: <out stem>.transcript.jsonl)")

    p = sub.add_parser("eval", formatter_class=_Formatter, help="evaluate a fitted rule",
                       description="Score a model on a test CSV: CCR when the truth column "
                                   "is present, IPW value always.")
    p.add_argument("--config", type=Path, help="JSON file of flag defaults (flags win)")
    p.add_argument("--model", type=Path, required=False, help="model JSON from 'fit'")
    p.add_argument("--data", type=Path, required=False, help="test CSV")
    p.add_argument("--propensity", choices=["auto", "true", "estimated"], default="auto",
                   help="propensity used by the value; auto = true if the CSV has it")
    p.add_argument("--out", type=Path, help="append the result row to this CSV")

    p = sub.add_parser("experiment", formatter_class=_Formatter,
                       help="run a Monte Carlo grid",
                       description="Run the simulation grid in a JSON config and write "
                                   "results and summary CSVs.")
    p.add_argument("--config", type=Path, required=False, help="experiment config JSON")
    p.add_argument("--reps", type=_positive_int, help="override the number of replicates")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--results", type=Path, help="results CSV (default: from config or results.csv)")
    p.add_argument("--summary", type=Path, help="summary CSV (default: from config or summary.csv)")
    p.add_argument("--timing", action="store_true", help="record per-fit seconds")
    return parser


# --- helpers -----------------------------------------------------------------

def _load_json(path: Path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from exc


def _need_input(path, flag):
    if path is None:
        raise UsageError(f"{flag} is required")
    if not Path(path).is_file():
        raise OSError(f"{flag}: no such file {path}")


def _need_output(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise OSError(f"output directory {parent} does not exist")
    if not os.access(parent, os.W_OK):
        raise OSError(f"output directory {parent} is not writable")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _vec(v):
    return [float(x) for x in v]


def _partition_from(sites_arg: str, ds, seed: int):
    """Site index arrays from a count or a manifest of unit ids."""
    if sites_arg.isdigit():
        M = int(sites_arg)
        if M < 1 or M > ds.N:
            raise UsageError(f"--sites must be between 1 and N={ds.N}")
        return partition_sites(ds.N, M, stream(seed, "train", "partition"))
    manifest = _load_json(Path(sites_arg))
    groups = manifest.get("sites") if isinstance(manifest, dict) else manifest
    if not isinstance(groups, list) or not groups:
        raise UsageError(f"{sites_arg}: manifest must hold a nonempty 'sites' list")
    pos = {int(u): i for i, u in enumerate(ds.ids)}
    try:
        parts = [np.array(sorted(pos[int(u)] for u in g), dtype=np.int64) for g in groups]
    except KeyError as exc:
        raise UsageError(f"{sites_arg}: unit id {exc.args[0]} not in the data") from None
    flat = np.concatenate(parts)
    if flat.size != ds.N or np.unique(flat).size != ds.N:
        raise UsageError(f"{sites_arg}: sites must partition all {ds.N} units exactly once")
    return parts


# --- subcommands -------------------------------------------------------------

def cmd_simulate(args) -> int:
    if not args.allow_unbalanced and args.N % args.sites:
        raise UsageError(
            f"N={args.N} is not divisible by --sites {args.sites}; pass --allow-unbalanced "
            f"to give the first {args.N % args.sites} site(s) one extra unit")
    try:
        spec = ScenarioSpec(args.scenario, args.design, args.N, args.sites, args.p, args.seed,
                            args.noise_sd, args.covariates)
    except (BadShape, ItrError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    _need_output(args.out)
    ds = gen_dataset(spec)
    parts = site_partition(spec)
    write_dataset_csv(ds, args.out, truth=not args.no_truth)
    sidecar = args.out.with_suffix(".json")
    _write_json(sidecar, {"spec": spec.to_json(),
                          "sites": [[int(ds.ids[i]) for i in idx] for idx in parts]})
    print(f"wrote {ds.N} rows to {args.out} and settings to {sidecar}")
    return EXIT_OK


def _resolve_fit_config(args, N: int, n: int) -> FitConfig:
    cfg = FitConfig(rounds=args.rounds, kernel=KernelKind(args.kernel),
                    h=None if args.h == "auto" else args.h,
                    b=None if args.b == "auto" else args.b,
                    lam=None if args.lam == "auto" else args.lam)
    h0 = cfg.h if cfg.h is not None else N ** (-1 / 3)
    b0 = cfg.b if cfg.b is not None else n ** (-1 / 3)
    if h0 <= 0:
        raise UsageError("h must be positive")
    if b0 < h0:
        raise UsageError(f"b must be >= h (got b={b0:g}, h={h0:g})")
    return cfg.resolve(N, n)


def cmd_fit(args) -> int:
    _need_input(args.data, "--data")
    if args.transcript is not None and args.method != "dce":
        raise UsageError("--transcript only applies to --method dce")
    if not args.sites.isdigit():
        _need_input(Path(args.sites), "--sites")
    _need_output(args.out)
    transcript = args.transcript or args.out.with_name(args.out.stem + ".transcript.jsonl")
    if args.method == "dce":
        _need_output(transcript)

    ds = read_dataset_csv(args.data)
    parts = _partition_from(args.sites, ds, args.seed)
    n_central = len(parts[0])
    cfg = _resolve_fit_config(args, ds.N, n_central)
    sl_h = SmoothedLoss(cfg.kernel, cfg.h)
    diagnostics = {}

    if args.method == "fce":
        pf, of = fit_nuisance(ds.covariates, ds.treatments, ds.outcomes)
        ws = pseudo_labels(aipwe_contrasts(ds.covariates, ds.treatments, ds.outcomes, pf, of),
                           ds.covariates)
        _, std = standardize(ds.covariates)
        beta = fit_fce(ws, sl_h, cfg.lam, cfg.fce_T_cd, cfg.fce_tol, std)
        diagnostics["kkt"] = kkt_residual(ws, beta, sl_h, cfg.lam)
    else:
        sites = build_sites(ds.covariates, ds.treatments, ds.outcomes, parts, args.nuisance)
        _, std = standardize(sites[0].sample.covariates)
        if args.method == "dce":
            report = fit_dce(sites, cfg)
            beta = report.beta
            transcript.write_text(report.transcript_jsonl(), encoding="utf-8")
            diagnostics.update(rounds=report.rounds, bytes=report.bytes_total,
                               grad_norms=_vec(report.grad_norms),
                               trajectory=[_vec(b) for b in report.trajectory],
                               transcript=str(transcript))
        elif args.method == "avg":
            beta = fit_avg(sites, cfg)
        else:
            beta = fit_initial(sites[0], cfg)

    out = {"method": args.method, "beta": _vec(beta.as_vector()),
           "standardization": std.to_json(),
           "config": dict(cfg.to_json(), N=ds.N, n=n_central, M=len(parts),
                          nuisance=args.nuisance, data=str(args.data)),
           "diagnostics": diagnostics}
    _write_json(args.out, out)
    print(f"{args.method}: beta = {' '.join(format(v, '.6g') for v in beta.as_vector())}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _need_input(args.model, "--model")
    _need_input(args.data, "--data")
    if args.out is not None:
        _need_output(args.out)
    model = _load_json(args.model)
    try:
        beta = RuleCoefficients.from_vector(model["beta"])
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{args.model}: no usable 'beta' entry") from exc
    test = read_dataset_csv(args.data)
    if beta.p != test.p:
        raise UsageError(f"model has {beta.p} slopes but the data has {test.p} covariates")
    source = None if args.propensity == "auto" else PropensitySource(args.propensity)
    res = evaluate(beta, test, model.get("method", ""), "", source)
    row = {"method": res.method, "n_test": res.n_test,
           "ccr": "" if res.ccr is None else format(res.ccr, ".6f"),
           "value": format(res.value, ".6f")}
    header = list(row)
    print(",".join(header))
    print(",".join(str(row[k]) for k in header))
    if args.out is not None:
        new = not args.out.exists() or args.out.stat().st_size == 0
        with open(args.out, "a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(header)
            w.writerow([row[k] for k in header])
    return EXIT_OK


def cmd_experiment(args) -> int:
    _need_input(args.config, "--config")
    raw = _load_json(args.config)
    if not isinstance(raw, dict):
        raise UsageError(f"{args.config}: expected a JSON object")
    for key in ("reps", "seed"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    if args.timing:
        raw["timing"] = True
    try:
        config = ExperimentConfig.from_json(raw)
    except (ValueError, TypeError, ItrError) as exc:
        raise UsageError(f"{args.config}: {exc}") from exc
    results = args.results or Path(config.results or "results.csv")
    summary_path = args.summary or Path(config.summary or "summary.csv")
    _need_output(results)
    _need_output(summary_path)

    rows = run_experiment(config)
    summary = aggregate_table(rows)
    write_results_csv(rows, results)
    write_summary_csv(summary, summary_path)
    failed = sum(1 for r in rows if r.error)
    print("correct classification rate")
    print(format_table(summary, "ccr"))
    print("\nempirical value")
    print(format_table(summary, "value"))
    if failed:
        print(f"\n{failed} fit(s) failed; see the error column of {results}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "eval": cmd_eval,
            "experiment": cmd_experiment}


def _parse(parser, argv):
    """Parse twice so a subcommand's --config JSON supplies defaults under explicit flags."""
    args = parser.parse_args(argv)
    if args.command == "experiment" or getattr(args, "config", None) is None:
        return args
    defaults = _load_json(args.config)
    if not isinstance(defaults, dict):
        raise UsageError(f"{args.config}: expected a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    unknown = set(defaults) - set(known) - {"lambda"}
    if unknown:
        raise UsageError(f"{args.config}: unknown key(s) {sorted(unknown)}")
    converted = {}
    for key, value in defaults.items():
        dest = "lam" if key == "lambda" else key
        action = known[dest]
        if action.type is not None and not isinstance(value, bool):
            try:
                value = action.type(str(value))
            except argparse.ArgumentTypeError as exc:
                raise UsageError(f"{args.config}: {key}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{args.config}: {key} must be one of {list(action.choices)}")
        converted[dest] = value
    sub.set_defaults(**converted)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"smoothitr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"smoothitr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"smoothitr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"smoothitr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except BadShape as exc:
        print(f"smoothitr: bad input: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonFinite as exc:
        print(f"smoothitr: solver produced non-finite values: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (DegenerateDesign, NonConvergence, ConstantColumn) as exc:
        print(f"smoothitr: degenerate nuisance or design: {exc}", file=sys.stderr)
        return EXIT_NUISANCE
    except EmptyIntersection as exc:
        print(f"smoothitr: {exc}", file=sys.stderr)
        return EXIT_EMPTY


if __name__ == "__main__":
    sys.exit(main())
