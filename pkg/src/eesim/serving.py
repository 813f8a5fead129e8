"""Discrete-event simulation of batched serving with early-exit control loops.

One work-conserving server: whenever it is idle and requests are queued, it
drains up to `max_batch` of them. A batch occupies the server for the full
model latency at that batch size plus every active ramp's latency (results
exit early, inputs always run to completion), while each request's response
is released at batch start plus its own exit-dependent serve time. Queuing
is therefore identical to vanilla serving except for the bounded ramp
overhead.

Controller work happens at batch completion, when the original model's
labels become available: the accuracy monitor ingests each response in
release order; a drop below the accuracy constraint triggers threshold
tuning over the recent history, and every `ramp_period` responses the ramp
set is re-scored and adjusted. Tuning is modeled as instantaneous in
simulated time (it runs off the serving path in the modeled system); config
swaps take effect at the next batch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from eesim.engine import EEConfig, ExitOutcome, ServedRecord, evaluate_record, optimal_exit
from eesim.errors import ParameterError
from eesim.graph import ModelProfile, RampBudget, find_feasible_sites, initial_placement
from eesim.ramps import adjust, score_utilities
from eesim.trace import Workload
from eesim.tuner import AccuracyMonitor, TunerParams, should_trigger, tune

MODES = ("vanilla", "adaptive", "optimal")
ADAPTATION_POLICIES = ("continual", "initial-only", "off")


@dataclass
class ServingParams:
    slo_ms: float
    max_batch: int = 8
    acc_constraint: float = 0.99  # retained-accuracy floor (0.99 == 1% loss allowed)
    budget: RampBudget = field(default_factory=lambda: RampBudget(0.02))
    tuner: TunerParams = field(default_factory=TunerParams)
    ramp_period: int = 128
    adaptation: str = "continual"
    score_k: int = 1
    drop_late: bool = False
    max_ramps: int | None = None

    def __post_init__(self):
        if self.slo_ms <= 0:
            raise ParameterError("slo_ms must be positive")
        if self.max_batch < 1:
            raise ParameterError("max_batch must be >= 1")
        if not 0.0 <= self.acc_constraint <= 1.0:
            raise ParameterError("acc_constraint must be in [0, 1]")
        if self.ramp_period < 1:
            raise ParameterError("ramp_period must be >= 1")
        if self.adaptation not in ADAPTATION_POLICIES:
            raise ParameterError(f"adaptation must be one of {ADAPTATION_POLICIES}")

    @property
    def adaptation_enabled(self) -> bool:
        return self.adaptation == "continual"


@dataclass(frozen=True)
class RequestRow:
    id: int
    arrival_ms: float
    queue_ms: float
    serve_ms: float
    total_ms: float
    exit_site: str | None
    correct: bool
    slo_violated: bool
    batch: int
    dropped: bool = False

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "arrival_ms": self.arrival_ms,
            "queue_ms": self.queue_ms,
            "serve_ms": self.serve_ms,
            "total_ms": self.total_ms,
            "exit_site": self.exit_site,
            "correct": self.correct,
            "slo_violated": self.slo_violated,
            "batch": self.batch,
            "dropped": self.dropped,
        }


@dataclass(frozen=True)
class AdaptationEvent:
    time_ms: float
    kind: str  # "threshold_tune" | "ramp_adjust"
    old_config: dict
    new_config: dict
    detail: dict

    def to_dict(self) -> dict:
        return {
            "time_ms": self.time_ms,
            "kind": self.kind,
            "old_config": self.old_config,
            "new_config": self.new_config,
            "detail": self.detail,
        }


def percentile_summary(values: Sequence[float], points=(25, 50, 95)) -> dict[str, float]:
    if not values:
        return {f"p{p}": 0.0 for p in points}
    arr = np.asarray(values, dtype=np.float64)
    return {f"p{p}": float(np.percentile(arr, p, method="linear")) for p in points}


@dataclass
class SimReport:
    mode: str
    rows: list[RequestRow]
    accuracy_windows: list[float]
    window_size: int
    accuracy: float
    throughput_rps: float
    makespan_ms: float
    busy_ms: float
    events: list[AdaptationEvent]
    percentiles: dict[str, float]
    final_config: dict
    counters: dict[str, int]
    # Wall-clock controller cost; excluded from serialized reports so that
    # re-runs stay byte-identical.
    controller_wall_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "requests": len(self.rows),
            "accuracy": self.accuracy,
            "accuracy_windows": self.accuracy_windows,
            "window_size": self.window_size,
            "throughput_rps": self.throughput_rps,
            "makespan_ms": self.makespan_ms,
            "busy_ms": self.busy_ms,
            "percentiles": self.percentiles,
            "final_config": self.final_config,
            "counters": self.counters,
            "events": [e.to_dict() for e in self.events],
            "rows": [r.to_dict() for r in self.rows],
        }


def _empty_report(mode: str, window: int) -> SimReport:
    return SimReport(
        mode=mode,
        rows=[],
        accuracy_windows=[],
        window_size=window,
        accuracy=1.0,
        throughput_rps=0.0,
        makespan_ms=0.0,
        busy_ms=0.0,
        events=[],
        percentiles=percentile_summary([]),
        final_config=EEConfig(()).to_dict(),
        counters={"batches": 0, "tunes_run": 0, "adjusts_run": 0, "dropped": 0},
        controller_wall_s=0.0,
    )


def run(
    workload: Workload,
    profile: ModelProfile,
    params: ServingParams,
    mode: str = "adaptive",
    initial_config: EEConfig | None = None,
) -> SimReport:
    """Simulate one serving mode over the workload.

    Modes: "vanilla" (no ramps), "adaptive" (early exits plus the control
    loops selected by `params.adaptation`), "optimal" (per-input earliest
    agreeing ramp, zero ramp overhead; the upper-bound baseline).
    """
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}")
    if not workload.records:
        return _empty_report(mode, params.tuner.accuracy_window)

    records = workload.records
    sites = find_feasible_sites(profile)
    if mode == "adaptive":
        config = initial_config if initial_config is not None else initial_placement(
            sites, params.budget, profile
        )
    else:
        config = EEConfig(())

    monitor = AccuracyMonitor(params.tuner.accuracy_window)
    history: list = []
    period: list[ServedRecord] = []
    rows: list[RequestRow] = []
    events: list[AdaptationEvent] = []
    tunes = adjusts = dropped_count = batches = 0
    busy_total = 0.0
    controller_wall = 0.0

    i, n = 0, len(records)
    free_at = records[0].arrival_ms
    first_arrival = records[0].arrival_ms
    last_busy_end = first_arrival
    completed = 0

    while i < n:
        start = max(free_at, records[i].arrival_ms)
        batch = []
        while i < n and len(batch) < params.max_batch and records[i].arrival_ms <= start:
            batch.append(records[i])
            i += 1
        if params.drop_late:
            kept = []
            for rec in batch:
                if start - rec.arrival_ms > params.slo_ms:
                    rows.append(
                        RequestRow(
                            rec.id, rec.arrival_ms, start - rec.arrival_ms, 0.0,
                            start - rec.arrival_ms, None, False, True, 0, dropped=True,
                        )
                    )
                    dropped_count += 1
                else:
                    kept.append(rec)
            batch = kept
            if not batch:
                continue

        b = len(batch)
        batches += 1
        if mode == "adaptive":
            busy = profile.model_latency(b) + config.ramp_overhead(b)
        else:
            busy = profile.model_latency(b)

        served: list[tuple[float, ExitOutcome, object]] = []
        for rec in batch:
            if mode == "vanilla":
                outcome = ExitOutcome(None, rec.final_label, True, profile.model_latency(b))
            elif mode == "optimal":
                pos = optimal_exit(rec, sites)
                serve = profile.prefix_latency(pos, b) if pos else profile.model_latency(b)
                outcome = ExitOutcome(pos, rec.final_label, True, serve)
            else:
                outcome = evaluate_record(rec, config, profile, batch=b, k=params.score_k)
            served.append((start + outcome.serve_ms, outcome, rec))

        served.sort(key=lambda item: (item[0], item[2].id))
        free_at = start + busy
        busy_total += busy
        last_busy_end = free_at

        for release, outcome, rec in served:
            queue_ms = start - rec.arrival_ms
            total_ms = queue_ms + outcome.serve_ms
            rows.append(
                RequestRow(
                    rec.id, rec.arrival_ms, queue_ms, outcome.serve_ms, total_ms,
                    outcome.exit_site, outcome.correct, total_ms > params.slo_ms, b,
                )
            )
            completed += 1
            if mode != "adaptive":
                continue
            monitor.push(outcome.correct)
            history.append(rec)
            if len(history) > params.tuner.tuning_history:
                history.pop(0)
            period.append(ServedRecord(rec, outcome, b))

            if params.adaptation == "continual":
                if should_trigger(monitor, params.acc_constraint):
                    t0 = time.perf_counter()
                    res = tune(history, list(config.sites), params.tuner, profile, k=params.score_k)
                    controller_wall += time.perf_counter() - t0
                    tunes += 1
                    new_config = config.with_thresholds(res.thresholds)
                    if new_config != config:
                        events.append(
                            AdaptationEvent(
                                free_at, "threshold_tune", config.to_dict(), new_config.to_dict(),
                                {"savings_ms": res.savings_ms, "accuracy": res.accuracy},
                            )
                        )
                        config = new_config
                if completed % params.ramp_period == 0 and period:
                    report = score_utilities(period, config, profile)
                    t0 = time.perf_counter()
                    adj = adjust(
                        report, config, sites, params.budget, history, params.tuner,
                        profile, k=params.score_k, max_ramps=params.max_ramps,
                    )
                    controller_wall += time.perf_counter() - t0
                    adjusts += 1
                    if adj.config != config:
                        events.append(
                            AdaptationEvent(
                                free_at, "ramp_adjust", config.to_dict(), adj.config.to_dict(),
                                {"adjust": adj.to_dict(), "utilities": report.to_dict()},
                            )
                        )
                        config = adj.config
                    period = []
            elif params.adaptation == "initial-only":
                if completed == params.tuner.tuning_history:
                    t0 = time.perf_counter()
                    res = tune(history, list(config.sites), params.tuner, profile, k=params.score_k)
                    controller_wall += time.perf_counter() - t0
                    tunes += 1
                    new_config = config.with_thresholds(res.thresholds)
                    if new_config != config:
                        events.append(
                            AdaptationEvent(
                                free_at, "threshold_tune", config.to_dict(), new_config.to_dict(),
                                {"savings_ms": res.savings_ms, "accuracy": res.accuracy},
                            )
                        )
                        config = new_config

    served_rows = [r for r in rows if not r.dropped]
    bits = [r.correct for r in served_rows]
    w = params.tuner.accuracy_window
    accuracy_windows = [
        sum(bits[j : j + w]) / w for j in range(0, len(bits) - w + 1, w)
    ]
    makespan = last_busy_end - first_arrival
    throughput = (len(served_rows) / (makespan / 1000.0)) if makespan > 0 else 0.0
    return SimReport(
        mode=mode,
        rows=rows,
        accuracy_windows=accuracy_windows,
        window_size=w,
        accuracy=(sum(bits) / len(bits)) if bits else 1.0,
        throughput_rps=throughput,
        makespan_ms=makespan,
        busy_ms=busy_total,
        events=events,
        percentiles=percentile_summary([r.total_ms for r in served_rows]),
        final_config=config.to_dict(),
        counters={
            "batches": batches,
            "tunes_run": tunes,
            "adjusts_run": adjusts,
            "dropped": dropped_count,
        },
        controller_wall_s=controller_wall,
    )


@dataclass
class ComparisonReport:
    reports: dict[str, SimReport]

    def summary(self) -> dict:
        vanilla = self.reports["vanilla"]
        out = {}
        for mode, rep in self.reports.items():
            entry = {
                "percentiles": rep.percentiles,
                "accuracy": rep.accuracy,
                "throughput_rps": rep.throughput_rps,
            }
            if mode != "vanilla":
                entry["savings_pct"] = {
                    key: (
                        100.0 * (vanilla.percentiles[key] - rep.percentiles[key])
                        / vanilla.percentiles[key]
                        if vanilla.percentiles[key] > 0
                        else 0.0
                    )
                    for key in rep.percentiles
                }
            out[mode] = entry
        return out

    def to_dict(self) -> dict:
        return {
            "summary": self.summary(),
            "modes": {mode: rep.to_dict() for mode, rep in self.reports.items()},
        }


def compare_baselines(
    workload: Workload, profile: ModelProfile, params: ServingParams
) -> ComparisonReport:
    """Run vanilla, adaptive, and optimal modes on identical arrivals."""
    return ComparisonReport(
        {mode: run(workload, profile, params, mode=mode) for mode in MODES}
    )
