"""Command-line front end.

Exit codes: 0 success, 1 runtime failure (divergence, infeasible privacy
target, unreadable data), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import secrets
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from travag.accountant import MechanismSpend, account_dpsgd, calibrate_phi, epsilon_table
from travag.config import RunSettings, load_config
from travag.errors import ConfigError, TravagError
from travag.eventlog import (
    DEFAULT_ACTIVITY_COLUMN,
    DEFAULT_CASE_COLUMN,
    DEFAULT_TIMESTAMP_COLUMN,
    log_statistics,
    read_log,
    write_variant_table,
)
from travag.metrics import absolute_log_difference, earth_movers_distance, relative_log_similarity
from travag.pipeline import TrainedBundle, generate, grid_search, run_travag

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flag values that argparse cannot catch on its own."""


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _rate(text: str) -> float:
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1], got {text}")
    return value


def _positive(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _delta(text: str) -> float:
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text}")
    return value


def _resolve_seed(flag: Optional[int], configured: Optional[int] = None) -> int:
    """Flag wins over config; with neither, draw from entropy and say so."""
    if flag is not None:
        return flag
    if configured is not None:
        return configured
    seed = secrets.randbits(63)
    print(f"seed: {seed}", file=sys.stderr)
    return seed


def _add_csv_columns(p: argparse.ArgumentParser) -> None:
    p.add_argument("--case-column", default=DEFAULT_CASE_COLUMN, help="case id column of an event CSV")
    p.add_argument("--activity-column", default=DEFAULT_ACTIVITY_COLUMN, help="activity column of an event CSV")
    p.add_argument("--timestamp-column", default=DEFAULT_TIMESTAMP_COLUMN, help="timestamp column of an event CSV")


def _read(path, fmt=None, **columns):
    if not Path(path).is_file():
        raise UsageError(f"input file not found: {path}")
    fmt = fmt or ("csv" if str(path).lower().endswith(".csv") else "tsv")
    return read_log(path, fmt, **(columns if fmt == "csv" else {}))


def _columns(args) -> dict:
    return {
        "case_column": args.case_column,
        "activity_column": args.activity_column,
        "timestamp_column": args.timestamp_column,
    }


def cmd_convert(args) -> int:
    log = _read(args.input, args.format, **_columns(args))
    write_variant_table(log, args.output)
    print(log_statistics(log).summary())
    return EXIT_OK


def _load_settings(path) -> RunSettings:
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return load_config(path)


def _apply_overrides(settings: RunSettings, args) -> RunSettings:
    cfg = settings.travag
    if args.epsilon is not None:
        cfg = replace(cfg, target_epsilon=args.epsilon)
    if args.delta is not None:
        cfg = replace(cfg, target_delta=args.delta)
    if getattr(args, "calibrate", False):
        cfg = replace(cfg, calibrate=True)
    try:
        cfg = replace(cfg, seed=_resolve_seed(args.seed, settings.seed))
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc
    io = settings.io
    for name in ("input", "output", "bundle", "ledger"):
        value = getattr(args, name, None)
        if value is not None:
            io = replace(io, **{name: value})
    return replace(settings, travag=cfg, io=io)


def _input_log(settings: RunSettings):
    io = settings.io
    if not io.input:
        raise UsageError("no input log given (io.input or --input)")
    return _read(
        io.input,
        io.format,
        case_column=io.case_column,
        activity_column=io.activity_column,
        timestamp_column=io.timestamp_column,
    )


def cmd_run(args) -> int:
    settings = _apply_overrides(_load_settings(args.config), args)
    io = settings.io
    missing = [name for name in ("output", "bundle", "ledger") if not getattr(io, name)]
    if missing:
        raise UsageError(f"missing output paths: {', '.join('io.' + m for m in missing)}")
    log = _input_log(settings)
    report, bundle = run_travag(log, settings.travag)
    write_variant_table(report.log, io.output)
    bundle.save(io.bundle)
    Path(io.ledger).write_text(json.dumps(bundle.ledger(), indent=2) + "\n")
    if bundle.guarantee is not None:
        print(f"guarantee: epsilon={bundle.guarantee.epsilon:.6g} delta={bundle.guarantee.delta:.3g}")
    else:
        print("guarantee: none (a noise multiplier is 0 or no delta was set)")
    print(f"synthetic: {log_statistics(report.log).summary()}")
    return EXIT_OK


def cmd_generate(args) -> int:
    if not Path(args.bundle).is_dir():
        raise UsageError(f"bundle directory not found: {args.bundle}")
    bundle = TrainedBundle.load(args.bundle)
    report = generate(bundle, args.count, seed=_resolve_seed(args.seed))
    write_variant_table(report.log, args.output)
    print(log_statistics(report.log).summary())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    original = _read(args.original, args.format, **_columns(args))
    synthetic = _read(args.synthetic, "tsv")
    emd = earth_movers_distance(original, synthetic)
    print("metric\tvalue")
    print(f"relative_log_similarity\t{relative_log_similarity(original, synthetic):.6f}")
    print(f"earth_movers_distance\t{float(emd):.6f}")
    print(f"absolute_log_difference\t{absolute_log_difference(original, synthetic)}")
    print(f"original_cases\t{original.num_cases}")
    print(f"synthetic_cases\t{synthetic.num_cases}")
    print(f"original_variants\t{original.num_variants}")
    print(f"synthetic_variants\t{synthetic.num_variants}")
    return EXIT_OK


def cmd_account(args) -> int:
    spend = MechanismSpend(args.q, args.phi, args.iterations)
    g = account_dpsgd(spend, args.delta)
    print(f"epsilon\t{g.epsilon:.6f}")
    print(f"alpha_star\t{g.alpha_star}")
    print("alpha\trdp_epsilon\tdp_epsilon")
    for alpha, rdp, dp in epsilon_table(spend, args.delta):
        print(f"{alpha}\t{rdp:.6g}\t{dp:.6g}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    phi = calibrate_phi(args.epsilon, args.delta, args.q, args.iterations, tol=args.tol)
    g = account_dpsgd(MechanismSpend(args.q, phi, args.iterations), args.delta)
    print(f"phi\t{phi:.6f}")
    print(f"epsilon\t{g.epsilon:.6f}")
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    settings = _apply_overrides(_load_settings(args.config), args)
    log = _input_log(settings)
    grid = settings.grid
    result = grid_search(
        log,
        settings.travag,
        grid.sampling_rates,
        grid.iterations,
        grid.noise_multipliers,
        trials=args.trials or grid.trials,
        jobs=args.jobs or grid.jobs,
    )
    print("q\tT\tphi\tepsilon\tadmissible\tmean_similarity\tmean_difference\tnote")
    for p in result.points:
        eps = f"{p.epsilon:.6g}" if p.epsilon is not None else "-"
        sim = f"{p.mean_similarity:.6f}" if p.similarities else "-"
        diff = f"{p.mean_difference:.2f}" if p.differences else "-"
        print(f"{p.sampling_rate}\t{p.iterations}\t{p.noise_multiplier}\t{eps}\t{p.admissible}\t{sim}\t{diff}\t{p.error or ''}")
    b = result.best_point
    print(f"best: q={b.sampling_rate} T={b.iterations} phi={b.noise_multiplier} similarity={b.mean_similarity:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="travag",
        description="Differentially private trace-variant synthesis with an autoencoder and a GAN.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("convert", help="event CSV (or variant TSV) to variant TSV, with log statistics")
    p.add_argument("input", help="event CSV or variant TSV")
    p.add_argument("output", help="variant TSV to write")
    p.add_argument("--format", choices=["csv", "tsv"], help="input format (default: from the suffix)")
    _add_csv_columns(p)
    p.set_defaults(func=cmd_convert)

    def add_run_flags(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--input", help="override io.input")
        p.add_argument("--epsilon", type=_positive, help="override privacy.epsilon")
        p.add_argument("--delta", type=_delta, help="override privacy.delta")
        p.add_argument("--seed", type=int, help="master seed (default: config seed, else random and printed)")

    p = sub.add_parser("run", help="train autoencoder and GAN, then generate a synthetic log")
    add_run_flags(p)
    p.add_argument("--calibrate", action="store_true", help="calibrate both noise multipliers to the target")
    p.add_argument("--output", help="override io.output (synthetic TSV)")
    p.add_argument("--bundle", help="override io.bundle (model directory)")
    p.add_argument("--ledger", help="override io.ledger (privacy ledger JSON)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("generate", help="sample a synthetic log from a saved bundle")
    p.add_argument("bundle", help="bundle directory written by 'run'")
    p.add_argument("output", help="variant TSV to write")
    p.add_argument("--count", type=_positive_int, help="number of cases (default: original case count)")
    p.add_argument("--seed", type=int, help="sampling seed (default: random and printed)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="utility of a synthetic log against the original")
    p.add_argument("--original", required=True, help="original log (event CSV or variant TSV)")
    p.add_argument("--synthetic", required=True, help="synthetic variant TSV")
    p.add_argument("--format", choices=["csv", "tsv"], help="format of the original log")
    _add_csv_columns(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("account", help="epsilon of one DP-SGD run, with the per-order table")
    p.add_argument("--q", type=_rate, required=True, help="sampling rate")
    p.add_argument("--phi", type=_positive, required=True, help="noise multiplier")
    p.add_argument("--iterations", type=_positive_int, required=True, help="iteration count")
    p.add_argument("--delta", type=_delta, required=True, help="target delta")
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("calibrate", help="smallest noise multiplier meeting an epsilon target")
    p.add_argument("--target-eps", "--epsilon", dest="epsilon", type=_positive, required=True, help="target epsilon")
    p.add_argument("--delta", type=_delta, required=True, help="target delta")
    p.add_argument("--q", type=_rate, required=True, help="sampling rate")
    p.add_argument("--iterations", type=_positive_int, required=True, help="iteration count")
    p.add_argument("--tol", type=_positive, default=1e-3, help="bisection tolerance on phi")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("gridsearch", help="pick the best admissible (q, T, phi) grid point")
    add_run_flags(p)
    p.add_argument("--trials", type=_positive_int, help="override gridsearch.trials")
    p.add_argument("--jobs", type=_positive_int, help="parallel worker processes (override gridsearch.jobs)")
    p.set_defaults(func=cmd_gridsearch)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"travag {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TravagError, ValueError, OSError) as exc:
        print(f"travag {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
