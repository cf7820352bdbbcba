"""Command-line surface: generate, evaluate, psych, errors, compare, report.

Exit codes: 0 success, 2 configuration error, 3 stage failure,
4 external-substrate protocol failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from ravenbench import errstats
from ravenbench.inpaint import ExternalProtocolError
from ravenbench.matrixgen import GenerationError, ProfileError, generate_battery, write_battery
from ravenbench.pipeline import (
    BatteryMismatchError,
    ConfigError,
    StageError,
    cmd_compare,
    cmd_evaluate,
    load_config,
    load_run,
)
from ravenbench.psychfit import (
    InsufficientDataError,
    fit,
    threshold_interval,
    trialblocks_from_responses,
)
from ravenbench.svgplot import render_error_grid, render_psych_plot

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_EXTERNAL = 4


def _cmd_generate(args) -> int:
    items = generate_battery(args.seed, args.items)
    manifest = write_battery(items, args.out, args.seed)
    print(f"wrote {len(items)} items to {args.out} (manifest {manifest.name})")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    config, raw = load_config(args.config)
    out_dir = args.out or config.out_dir
    if not out_dir:
        raise ConfigError("no output directory: pass --out or set [run] out")
    cmd_evaluate(config, out_dir, workers=args.workers, config_bytes=raw)
    return EXIT_OK


def _cmd_psych(args) -> int:
    run = load_run(args.run)
    curves = {}
    if args.cohort:
        cohort = errstats.read_cohort_csv(args.cohort)
        groups = sorted(set(cohort.group)) if cohort.group else ["all"]
        for group in groups:
            mask = (
                np.array([g == group for g in cohort.group])
                if cohort.group
                else np.ones(cohort.n_rows, bool)
            )
            blocks = trialblocks_from_responses(
                cohort.responses[mask], run.ranks, run.answer_key
            )
            curves[group] = blocks
    else:
        curves["model"] = run.trials
    payload = {}
    for label, blocks in curves.items():
        try:
            posterior = fit(blocks)
            lo, hi, point = threshold_interval(posterior)
            payload[label] = {
                "threshold": {"lo": lo, "hi": hi, "point": point},
                "map": {
                    "threshold_mid": posterior.map_params.threshold_mid,
                    "width": posterior.map_params.width,
                    "lapse": posterior.map_params.lapse,
                },
                "warnings": list(posterior.warnings),
            }
        except InsufficientDataError as exc:
            payload[label] = {"skipped": str(exc)}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _cmd_errors(args) -> int:
    run = load_run(args.run)
    cohort = errstats.read_cohort_csv(args.cohort)
    out_dir = Path(args.out or run.path)
    out_dir.mkdir(parents=True, exist_ok=True)
    reference_mask = np.array([g == args.reference for g in cohort.group])
    if not reference_mask.any():
        raise ConfigError(f"reference group {args.reference!r} absent from cohort")
    reference = cohort.subset(reference_mask)
    rest = cohort.subset(~reference_mask)
    grid_ref = errstats.build_error_grid(reference, reference, run.answer_key)
    grid_rest = errstats.build_error_grid(rest, reference, run.answer_key)
    with open(out_dir / "error_grid.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["grid", "display_row", "item"] + [f"col_{k}" for k in range(8)])
        for name, grid in (("reference", grid_ref), ("rest", grid_rest)):
            for row, item in enumerate(grid.item_order):
                writer.writerow([name, row, item] + grid.counts[row].tolist())
    if rest.n_rows:
        tests = errstats.grid_cell_tests(rest, reference, alpha=args.alpha)
        with open(out_dir / "cell_tests.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["item", "option", "z", "p", "p_adjusted", "rejected"])
            for t in tests.tests:
                writer.writerow([t.item, t.option, repr(t.z), repr(t.p), repr(t.p_adjusted), int(t.rejected)])
    try:
        overlap = errstats.model_error_overlap(
            run.clean_choices, run.answer_key, cohort, alpha=args.alpha
        )
        (out_dir / "overlap.json").write_text(
            json.dumps(overlap.to_dict(), indent=2, sort_keys=True) + "\n"
        )
        rejected = [t.name for t in overlap.tests if t.rejected]
        print(f"model errors shared by {overlap.n_sharers}/{cohort.n_rows} participants; "
              f"significant covariates after correction: {rejected or 'none'}")
    except errstats.NoModelErrorsError:
        print("model made no errors; overlap analysis skipped")
    return EXIT_OK


def _cmd_compare(args) -> int:
    cohort = errstats.read_cohort_csv(args.cohort) if args.cohort else None
    comparison = cmd_compare(args.run_a, args.run_b, cohort=cohort, alpha=args.alpha)
    text = json.dumps(comparison, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _plot_source(report_or_dir):
    """(label, trial blocks, responses, answer key) from a report or run dir."""
    if isinstance(report_or_dir, (str, Path)):
        run = load_run(report_or_dir)
        return run.report["substrate"], run.trials, run.responses, run.answer_key
    report = report_or_dir
    responses = (
        np.array([[o.choice for o in r.outcomes] for r in report.records]).T
        if report.config.reps
        else None
    )
    answer_key = [r.answer_index for r in report.records]
    return report.config.substrate, report.trial_blocks, responses, answer_key


def emit_plots(report_or_dirs, out=None) -> list[Path]:
    """Static SVG artifacts: fitted psychometric curve(s) plus response grid.

    Accepts one run (RunReport or run directory) or a list of them; every
    run contributes a curve to the same plot, and the first run's
    responses populate the grid.
    """
    many = (
        list(report_or_dirs)
        if isinstance(report_or_dirs, (list, tuple))
        else [report_or_dirs]
    )
    sources = [_plot_source(entry) for entry in many]
    if out is None:
        first = many[0]
        out = first if isinstance(first, (str, Path)) else first.out_dir
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    curves = []
    for label, blocks, _, _ in sources:
        live = [b for b in blocks if b.n > 0]
        if not live:
            continue
        try:
            posterior = fit(live)
        except InsufficientDataError:
            posterior = None
        curves.append((label, live, posterior))
    if not curves:
        print("no trial data; psychometric plot omitted")
    else:
        path = out_dir / "psych_fit.svg"
        path.write_text(render_psych_plot(curves))
        written.append(path)
    label, _, responses, answer_key = sources[0]
    if responses is not None and len(responses):
        table = errstats.ResponseTable(responses)
        grid = errstats.build_error_grid(table, table, answer_key)
        path = out_dir / "error_grid.svg"
        path.write_text(render_error_grid(grid.counts, title=f"{label} response grid"))
        written.append(path)
    return written


def _cmd_report(args) -> int:
    runs = args.run if len(args.run) > 1 else args.run[0]
    written = emit_plots(runs, args.out or None)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ravenbench",
        description="Benchmark in-painting substrates on matrix-completion puzzles",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a battery's manifest and images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--items", type=int, default=12)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("evaluate", help="run the full pipeline from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("psych", help="(re)fit psychometric functions")
    p.add_argument("--run", required=True)
    p.add_argument("--cohort", default="")
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_psych)

    p = sub.add_parser("errors", help="error grids and model-error overlap vs a cohort")
    p.add_argument("--run", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--reference", default="control")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_errors)

    p = sub.add_parser("compare", help="compare two evaluate runs")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--cohort", default="")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("report", help="emit SVG plots for one or more runs")
    p.add_argument("--run", required=True, action="append")
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ProfileError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExternalProtocolError as exc:
        print(f"external substrate protocol failure: {exc}", file=sys.stderr)
        return EXIT_EXTERNAL
    except (StageError, GenerationError, BatteryMismatchError, errstats.ItemMismatchError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
