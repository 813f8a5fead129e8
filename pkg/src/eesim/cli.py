"""Command-line front end.

Commands: gen-trace, validate, simulate, simulate-gen, compare, tune,
report. Every command is deterministic given its manifest: JSON reports
embed the manifest, JSONL/CSV outputs get a `<file>.manifest.json`
sidecar. Wall-clock measurements (controller tuning cost) go to stderr,
never into output files.

Exit codes: 0 success, 2 argument error, 3 validation/structural error,
4 grid-cap refusal, 5 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Mapping, Sequence

from eesim import __version__
from eesim.engine import EEConfig
from eesim.errors import EESimError, GridCapError, ParameterError, ValidationError
from eesim.generative import (
    GenParams,
    load_token_trace,
    run_generative,
    save_token_trace,
    synthesize_token_trace,
)
from eesim.graph import RampBudget, find_feasible_sites, initial_placement, load_profile
from eesim.manifest import (
    RunManifest,
    cdf_rows,
    percentiles,
    write_csv,
    write_json_report,
    write_manifest_sidecar,
)
from eesim.serving import ServingParams, compare_baselines, run
from eesim.trace import load_workload, save_workload, synthesize_workload
from eesim.tuner import TunerParams, grid_oracle, tune

REPORT_SCHEMA = "ee-report/1"

EXIT_OK = 0
EXIT_ARGS = 2
EXIT_VALIDATION = 3
EXIT_GRID_CAP = 4
EXIT_IO = 5


def _manifest_params(args) -> dict:
    return {k: v for k, v in vars(args).items() if not callable(v)}


def _parse_curve(spec: str, positions: Sequence[str]) -> dict[str, float]:
    """Either one value per site ("0.2,0.4,0.9") or a linear span ("0.2:0.9")."""
    if ":" in spec:
        lo, hi = (float(x) for x in spec.split(":", 1))
        m = len(positions)
        if m == 1:
            return {positions[0]: hi}
        return {p: lo + (hi - lo) * i / (m - 1) for i, p in enumerate(positions)}
    values = [float(x) for x in spec.split(",")]
    if len(values) != len(positions):
        raise ParameterError(
            f"agreement curve has {len(values)} values but the profile has "
            f"{len(positions)} feasible sites"
        )
    return dict(zip(positions, values))


def _parse_penalty(spec: str) -> dict[int, float]:
    table = {}
    for part in spec.split(","):
        b, mult = part.split(":", 1)
        table[int(b)] = float(mult)
    return table


def _parse_ramps(specs: Sequence[str], sites) -> EEConfig:
    by_pos = {s.position: s for s in sites}
    active = []
    for spec in specs:
        pos, _, thr = spec.partition("=")
        if pos not in by_pos:
            raise ValidationError(f"--ramp {pos!r}: not a feasible site")
        active.append((by_pos[pos], float(thr) if thr else 0.0))
    active.sort(key=lambda pair: pair[0].topo_index)
    return EEConfig(tuple(active))


def _serving_params(args) -> ServingParams:
    tuner = TunerParams(
        acc_loss_budget=args.acc_constraint,
        init_step=args.init_step,
        min_step=args.min_step,
        accuracy_window=args.acc_window,
        tuning_history=args.history,
    )
    adaptation = "off" if args.no_adapt else args.adaptation
    return ServingParams(
        slo_ms=args.slo,
        max_batch=args.max_batch,
        acc_constraint=1.0 - args.acc_constraint,
        budget=RampBudget(args.budget),
        tuner=tuner,
        ramp_period=args.ramp_period,
        adaptation=adaptation,
        score_k=args.score_k,
        drop_late=args.drop_late,
        max_ramps=args.max_ramps,
    )


def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", required=True, help="model profile JSON")
    p.add_argument("--trace", required=True, help="workload trace JSONL")
    p.add_argument("--slo", type=float, required=True, help="per-request SLO in ms")
    p.add_argument("--max-batch", type=int, default=8)
    p.add_argument(
        "--acc-constraint",
        type=float,
        default=0.01,
        help="max tolerated accuracy loss vs the original model (fraction, default 0.01)",
    )
    p.add_argument("--budget", type=float, default=0.02, help="ramp budget fraction of model latency")
    p.add_argument("--init-step", type=float, default=0.1)
    p.add_argument("--min-step", type=float, default=0.01)
    p.add_argument("--acc-window", type=int, default=16)
    p.add_argument("--history", type=int, default=128, help="tuning history length in requests")
    p.add_argument("--ramp-period", type=int, default=128)
    p.add_argument("--score-k", type=int, default=1, help="average error over the last k active ramps")
    p.add_argument("--adaptation", choices=("continual", "initial-only", "off"), default="continual")
    p.add_argument("--no-adapt", action="store_true", help="shorthand for --adaptation off")
    p.add_argument("--drop-late", action="store_true", help="drop requests already past SLO at drain time")
    p.add_argument("--max-ramps", type=int, default=None)
    p.add_argument("--ramp", action="append", default=[], metavar="SITE[=THRESHOLD]",
                   help="override the initial ramp placement (repeatable)")


def cmd_gen_trace(args, argv) -> int:
    profile = load_profile(args.profile)
    positions = [s.position for s in find_feasible_sites(profile)]
    curve = _parse_curve(args.agreement, positions)
    late = _parse_curve(args.late_agreement, positions) if args.late_agreement else None
    common = dict(
        continuity=args.continuity,
        seed=args.seed,
        interarrival_ms=args.interarrival_ms,
        miscalibration=args.miscalibration,
        late_agreement_curve=late,
        late_miscalibration=args.late_miscalibration,
        n_labels=args.labels,
    )
    if args.generative:
        sequences = synthesize_token_trace(
            profile, args.sequences, args.seq_len, agreement_curve=curve, **common
        )
        save_token_trace(sequences, args.out)
        n = sum(len(s) for s in sequences)
    else:
        workload = synthesize_workload(profile, args.n, agreement_curve=curve, **common)
        save_workload(workload, args.out)
        n = len(workload)
    manifest = RunManifest.build(argv, _manifest_params(args), [args.profile], seed=args.seed)
    write_manifest_sidecar(args.out, manifest)
    print(f"wrote {n} records to {args.out}")
    return EXIT_OK


def cmd_validate(args, argv) -> int:
    profile = load_profile(args.profile)
    if args.generative:
        sequences = load_token_trace(args.trace, profile)
        n = sum(len(s) for s in sequences)
        print(f"OK: {len(sequences)} sequences, {n} tokens, profile {profile.name!r}")
    else:
        workload = load_workload(args.trace, profile)
        print(f"OK: {len(workload)} records, profile {profile.name!r}")
    return EXIT_OK


def _write_rows_csv(path, rows) -> None:
    write_csv(
        path,
        ["id", "arrival_ms", "queue_ms", "serve_ms", "total_ms", "exit_site",
         "correct", "slo_violated", "batch", "dropped"],
        [
            [r.id, r.arrival_ms, r.queue_ms, r.serve_ms, r.total_ms, r.exit_site or "",
             r.correct, r.slo_violated, r.batch, r.dropped]
            for r in rows
        ],
    )


def cmd_simulate(args, argv) -> int:
    profile = load_profile(args.profile)
    workload = load_workload(args.trace, profile)
    params = _serving_params(args)
    initial = _parse_ramps(args.ramp, find_feasible_sites(profile)) if args.ramp else None
    report = run(workload, profile, params, mode=args.mode, initial_config=initial)
    manifest = RunManifest.build(argv, _manifest_params(args), [args.profile, args.trace])
    payload = {"schema": REPORT_SCHEMA, "kind": "simulate", **report.to_dict()}
    write_json_report(args.out, manifest, payload)
    if args.csv:
        _write_rows_csv(args.csv, report.rows)
        write_manifest_sidecar(args.csv, manifest)
    print(
        f"{args.mode}: {len(report.rows)} requests, p50={report.percentiles['p50']:.3f} ms, "
        f"accuracy={report.accuracy:.4f}, throughput={report.throughput_rps:.1f} rps"
    )
    print(f"controller wall time: {report.controller_wall_s * 1e3:.1f} ms", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args, argv) -> int:
    profile = load_profile(args.profile)
    workload = load_workload(args.trace, profile)
    params = _serving_params(args)
    comparison = compare_baselines(workload, profile, params)
    manifest = RunManifest.build(argv, _manifest_params(args), [args.profile, args.trace])
    payload = {"schema": REPORT_SCHEMA, "kind": "compare", **comparison.to_dict()}
    write_json_report(args.out, manifest, payload)
    for mode, entry in comparison.summary().items():
        line = f"{mode:>8}: p25={entry['percentiles']['p25']:.3f} p50={entry['percentiles']['p50']:.3f} " \
               f"p95={entry['percentiles']['p95']:.3f} acc={entry['accuracy']:.4f}"
        print(line)
    return EXIT_OK


def cmd_simulate_gen(args, argv) -> int:
    profile = load_profile(args.profile)
    sequences = load_token_trace(args.trace, profile)
    sites = find_feasible_sites(profile)
    if args.ramp:
        config = _parse_ramps(args.ramp, sites)
    else:
        mid = sites[(len(sites) - 1) // 2]
        config = EEConfig(((mid, 0.0),))
    params = GenParams(
        flush_cap=args.flush_cap,
        batch_penalty=_parse_penalty(args.batch_penalty),
        score_k=args.score_k,
        adaptation="continual" if args.adapt else "off",
        acc_constraint=1.0 - args.acc_constraint,
        tuner=TunerParams(acc_loss_budget=args.acc_constraint),
        max_ramps=args.max_ramps,
    )
    report = run_generative(sequences, profile, config, params)
    manifest = RunManifest.build(argv, _manifest_params(args), [args.profile, args.trace])
    payload = {"schema": REPORT_SCHEMA, "kind": "simulate-gen", **report.to_dict()}
    write_json_report(args.out, manifest, payload)
    print(
        f"{len(report.tokens)} tokens, median TPT={report.percentiles['p50']:.3f} ms "
        f"(vanilla {report.vanilla_tpt_ms:.3f} ms), flushes={len(report.flush_events)}"
    )
    return EXIT_OK


def cmd_tune(args, argv) -> int:
    profile = load_profile(args.profile)
    workload = load_workload(args.trace, profile)
    sites = find_feasible_sites(profile)
    if args.ramp:
        config = _parse_ramps(args.ramp, sites)
    else:
        config = initial_placement(sites, RampBudget(args.budget), profile)
    history = list(workload.records[-args.history:])
    params = TunerParams(
        acc_loss_budget=args.acc_constraint,
        init_step=args.init_step,
        min_step=args.min_step,
        tuning_history=args.history,
    )
    result = tune(history, list(config.sites), params, profile, k=args.score_k)
    payload = {
        "schema": REPORT_SCHEMA,
        "kind": "tune",
        "thresholds": dict(result.thresholds),
        "savings_ms": result.savings_ms,
        "accuracy": result.accuracy,
        "rounds": result.rounds,
        "evals": result.evals,
    }
    if args.grid_step:
        oracle = grid_oracle(
            history, list(config.sites), args.acc_constraint, args.grid_step, profile,
            cap=args.grid_cap, k=args.score_k,
        )
        payload["grid"] = {
            "thresholds": dict(oracle.thresholds),
            "savings_ms": oracle.savings_ms,
            "accuracy": oracle.accuracy,
            "n_points": oracle.n_points,
        }
    manifest = RunManifest.build(argv, _manifest_params(args), [args.profile, args.trace])
    write_json_report(args.out, manifest, payload)
    print(f"tuned savings: {result.savings_ms:.4f} ms/request at accuracy {result.accuracy:.4f}")
    return EXIT_OK


def _load_report(path: str) -> Mapping:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"report {path}: invalid JSON ({exc})") from exc
    report = doc.get("report", doc)
    if report.get("schema") != REPORT_SCHEMA:
        raise ValidationError(f"report {path}: unsupported schema {report.get('schema')!r}")
    return report


def _latency_values(report: Mapping, mode: str | None) -> list[float]:
    if report.get("kind") == "compare":
        if not mode:
            raise ParameterError("--mode is required for compare reports")
        rows = report["modes"][mode]["rows"]
        return [r["total_ms"] for r in rows if not r.get("dropped")]
    if report.get("kind") == "simulate-gen":
        return [t["tpt_ms"] for t in report["tokens"]]
    if report.get("kind") == "simulate":
        return [r["total_ms"] for r in report["rows"] if not r.get("dropped")]
    raise ValidationError(f"report kind {report.get('kind')!r} has no latency rows")


def cmd_report(args, argv) -> int:
    report = _load_report(args.input)
    values = _latency_values(report, args.mode)
    points = [float(p) for p in args.percentiles.split(",")]
    summary = percentiles(values, points)
    manifest = RunManifest.build(argv, _manifest_params(args), [args.input])
    if args.cdf:
        write_csv(args.cdf, ["latency_ms", "cumulative_fraction"], cdf_rows(values))
        write_manifest_sidecar(args.cdf, manifest)
    if args.out:
        payload = {
            "schema": REPORT_SCHEMA,
            "kind": "percentile-summary",
            "count": len(values),
            "percentiles": summary,
        }
        write_json_report(args.out, manifest, payload)
    for key, value in summary.items():
        print(f"{key}: {value}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eesim", description=__doc__)
    parser.add_argument("--version", action="version", version=f"eesim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="synthesize a workload trace")
    p.add_argument("--profile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1024, help="records (classification traces)")
    p.add_argument("--continuity", type=float, default=0.9)
    p.add_argument("--agreement", default="0.5:0.9",
                   help="per-site values '0.2,0.5,...' or linear span 'lo:hi'")
    p.add_argument("--late-agreement", default=None,
                   help="switch to this curve at the trace midpoint (drift)")
    p.add_argument("--miscalibration", type=float, default=0.05)
    p.add_argument("--late-miscalibration", type=float, default=None)
    p.add_argument("--interarrival-ms", type=float, default=1.0)
    p.add_argument("--labels", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--generative", action="store_true", help="emit a token trace")
    p.add_argument("--sequences", type=int, default=32)
    p.add_argument("--seq-len", type=int, default=32)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("validate", help="validate a trace against a profile")
    p.add_argument("--profile", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--generative", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="simulate one serving mode")
    _add_sim_flags(p)
    p.add_argument("--mode", choices=("vanilla", "adaptive", "optimal"), default="adaptive")
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None, help="also write per-request rows as CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="run vanilla, adaptive, and optimal on one trace")
    _add_sim_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("simulate-gen", help="token-level generative simulation")
    p.add_argument("--profile", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--flush-cap", type=int, default=4)
    p.add_argument("--batch-penalty", default="1:1.0,4:1.0", metavar="B:MULT,...")
    p.add_argument("--score-k", type=int, default=1)
    p.add_argument("--acc-constraint", type=float, default=0.01)
    p.add_argument("--adapt", action="store_true", help="enable continual adaptation")
    p.add_argument("--max-ramps", type=int, default=1)
    p.add_argument("--ramp", action="append", default=[], metavar="SITE[=THRESHOLD]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate_gen)

    p = sub.add_parser("tune", help="tune thresholds offline on a trace window")
    p.add_argument("--profile", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--acc-constraint", type=float, default=0.01)
    p.add_argument("--budget", type=float, default=0.02)
    p.add_argument("--history", type=int, default=128)
    p.add_argument("--init-step", type=float, default=0.1)
    p.add_argument("--min-step", type=float, default=0.01)
    p.add_argument("--score-k", type=int, default=1)
    p.add_argument("--ramp", action="append", default=[], metavar="SITE[=THRESHOLD]")
    p.add_argument("--grid-step", type=float, default=None,
                   help="also run the exhaustive grid oracle at this step")
    p.add_argument("--grid-cap", type=int, default=2_000_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("report", help="percentiles and CDF tables from a report")
    p.add_argument("--input", required=True)
    p.add_argument("--percentiles", default="25,50,95")
    p.add_argument("--cdf", default=None, help="write a CDF CSV here")
    p.add_argument("--mode", default=None, help="mode to extract from compare reports")
    p.add_argument("--out", default=None, help="write a percentile-summary JSON here")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    args = parser.parse_args(argv)
    full_argv = ["eesim", *argv]
    try:
        return args.func(args, full_argv)
    except GridCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GRID_CAP
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except EESimError as exc:  # GraphError, ValidationError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
