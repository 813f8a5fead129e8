"""Workload traces: per-request exit signals for every feasible ramp site.

A trace row stores, for one input, the error score and predicted label that
each ramp *would* produce, plus the original model's final label. With that,
any threshold configuration can be evaluated offline without running a
model. Files are JSON Lines, one record per line:

    {"id": 0, "arrival_ms": 0.0, "ramps": {"layer3": {"err": 0.12, "label": 4}}, "final": 4}

The synthetic generator draws a per-request difficulty from an AR(1)
process (coefficient = `continuity`), so video-like workloads (high
continuity) produce slowly drifting difficulty while text-like workloads
(continuity near 0) look i.i.d. Each site agrees with the final label with
probability at least its `agreement_curve` value; agreeing signals carry
low error scores, disagreeing ones high scores except for a `miscalibration`
fraction that is confidently wrong.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from eesim.errors import ParameterError, ValidationError
from eesim.graph import ModelProfile, RampSite, find_feasible_sites


@dataclass(frozen=True)
class RampSignal:
    err: float
    label: int


@dataclass(frozen=True)
class RequestRecord:
    id: int
    arrival_ms: float
    ramp_signals: Mapping[str, RampSignal]
    final_label: int


@dataclass(frozen=True)
class Workload:
    records: tuple[RequestRecord, ...]
    profile_ref: str

    def __len__(self) -> int:
        return len(self.records)


def _record_from_obj(obj: Mapping, lineno: int) -> RequestRecord:
    try:
        rid = int(obj["id"])
        arrival = float(obj["arrival_ms"])
        final = int(obj["final"])
        ramps = obj["ramps"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"line {lineno}: malformed record ({exc})") from exc
    signals = {}
    for site, sig in ramps.items():
        try:
            signals[str(site)] = RampSignal(float(sig["err"]), int(sig["label"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(
                f"record {rid}: malformed signal for site {site!r} ({exc})"
            ) from exc
    return RequestRecord(rid, arrival, signals, final)


def validate_workload(records: Sequence[RequestRecord], profile: ModelProfile) -> None:
    """Check every record against the profile's feasible sites and invariants."""
    sites = [s.position for s in find_feasible_sites(profile)]
    seen_ids: set[int] = set()
    prev_arrival = None
    for rec in records:
        if rec.id in seen_ids:
            raise ValidationError(f"record {rec.id}: duplicate id")
        seen_ids.add(rec.id)
        if prev_arrival is not None and rec.arrival_ms < prev_arrival:
            raise ValidationError(
                f"record {rec.id}: arrival_ms {rec.arrival_ms} decreases "
                f"(previous {prev_arrival})"
            )
        prev_arrival = rec.arrival_ms
        for site in sites:
            if site not in rec.ramp_signals:
                raise ValidationError(f"record {rec.id}: missing signal for site {site!r}")
        for site, sig in rec.ramp_signals.items():
            if not 0.0 <= sig.err <= 1.0:
                raise ValidationError(
                    f"record {rec.id}: error score {sig.err} at site {site!r} outside [0, 1]"
                )


def load_workload(path: str | Path, profile: ModelProfile) -> Workload:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: invalid JSON ({exc})") from exc
            records.append(_record_from_obj(obj, lineno))
    validate_workload(records, profile)
    return Workload(tuple(records), profile.name)


def _record_to_obj(rec: RequestRecord) -> dict:
    return {
        "id": rec.id,
        "arrival_ms": rec.arrival_ms,
        "ramps": {s: {"err": sig.err, "label": sig.label} for s, sig in rec.ramp_signals.items()},
        "final": rec.final_label,
    }


def save_workload(workload: Workload, path: str | Path) -> None:
    """Write canonical JSONL: sorted keys, compact separators, one record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in workload.records:
            fh.write(json.dumps(_record_to_obj(rec), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def difficulty_series(n: int, continuity: float, seed: int) -> np.ndarray:
    """The AR(1) difficulty sequence the generator uses, in [0, 1].

    d[t] = continuity * d[t-1] + (1 - continuity) * u[t] with u uniform, so
    the lag-1 autocorrelation approaches `continuity`.
    """
    rng = np.random.default_rng(seed)
    eps = rng.random(n)
    d = np.empty(n)
    if n == 0:
        return d
    d[0] = eps[0]
    for t in range(1, n):
        d[t] = continuity * d[t - 1] + (1.0 - continuity) * eps[t]
    return d


def _check_curve(curve: Mapping[str, float], sites: Sequence[RampSite], what: str) -> list[float]:
    vals = []
    for site in sites:
        if site.position not in curve:
            raise ParameterError(f"{what} has no value for site {site.position!r}")
        v = float(curve[site.position])
        if not 0.0 <= v <= 1.0:
            raise ParameterError(f"{what}[{site.position!r}] = {v} outside [0, 1]")
        vals.append(v)
    for a, b in zip(vals, vals[1:]):
        if b < a:
            raise ParameterError(f"{what} must be non-decreasing along topological order")
    return vals


def synthesize_workload(
    profile: ModelProfile,
    n: int,
    continuity: float,
    agreement_curve: Mapping[str, float],
    seed: int,
    *,
    interarrival_ms: float = 1.0,
    miscalibration: float = 0.05,
    late_agreement_curve: Mapping[str, float] | None = None,
    late_miscalibration: float | None = None,
    n_labels: int = 10,
) -> Workload:
    """Deterministic synthetic workload over the profile's feasible sites.

    When `late_agreement_curve` (and optionally `late_miscalibration`) is
    given, the generator switches to it abruptly at the trace midpoint,
    producing a drifting workload.
    """
    if not 0.0 <= continuity <= 1.0:
        raise ParameterError(f"continuity {continuity} outside [0, 1]")
    if not 0.0 <= miscalibration <= 1.0:
        raise ParameterError(f"miscalibration {miscalibration} outside [0, 1]")
    if n_labels < 2:
        raise ParameterError("n_labels must be >= 2")
    sites = find_feasible_sites(profile)
    if not sites:
        raise ParameterError("profile has no feasible sites to synthesize signals for")
    agree_early = _check_curve(agreement_curve, sites, "agreement_curve")
    agree_late = agree_early
    miscal_late = miscalibration
    if late_agreement_curve is not None:
        agree_late = _check_curve(late_agreement_curve, sites, "late_agreement_curve")
    if late_miscalibration is not None:
        if not 0.0 <= late_miscalibration <= 1.0:
            raise ParameterError(f"late_miscalibration {late_miscalibration} outside [0, 1]")
        miscal_late = late_miscalibration

    rng = np.random.default_rng(seed)
    eps = rng.random(n)  # identical stream to difficulty_series(n, continuity, seed)
    d = np.empty(n)
    records = []
    half = n // 2
    for t in range(n):
        d[t] = eps[t] if t == 0 else continuity * d[t - 1] + (1.0 - continuity) * eps[t]
        agree_p = agree_early if t < half or late_agreement_curve is None else agree_late
        miscal = miscalibration if t < half else miscal_late
        final = int(rng.integers(n_labels))
        signals = {}
        for site, a in zip(sites, agree_p):
            p_agree = a + (1.0 - a) * (1.0 - d[t])
            agrees = rng.random() < p_agree
            confident_err = 0.5 * d[t] * rng.random()
            if agrees:
                label, err = final, confident_err
            else:
                label = int((final + 1 + rng.integers(n_labels - 1)) % n_labels)
                if rng.random() < miscal:
                    err = confident_err  # confidently wrong
                else:
                    err = 1.0 - 0.5 * (1.0 - d[t]) * rng.random()
            signals[site.position] = RampSignal(float(err), label)
        records.append(RequestRecord(t, t * interarrival_ms, signals, final))
    return Workload(tuple(records), profile.name)
