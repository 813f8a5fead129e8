"""Exit engine: evaluate exit decisions, accuracy, and latency savings.

Everything here is a pure function of its inputs. A record exits at the
earliest active ramp whose decision score is *strictly* below that ramp's
threshold, so a threshold of 0 means "never exit". The decision score is
the ramp's own error score by default, or a running arithmetic mean of the
last k active-ramp error scores when k > 1 (inactive ramps are invisible
at runtime and contribute nothing).

Latency accounting charges an exiting request the model prefix through its
exit layer plus the cost of every active ramp at or before it; a request
that never exits pays the full model plus every active ramp. Savings are
measured against the no-ramp (vanilla) latency and can be negative.

`WindowEvaluator` precomputes per-window arrays once so that many threshold
configurations can be scored through the compiled kernels; this is the hot
path of both the hill-climbing tuner and the grid-search oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from eesim import _kernels
from eesim.errors import ParameterError, ValidationError
from eesim.graph import ModelProfile, RampSite
from eesim.trace import RequestRecord


@dataclass(frozen=True)
class EEConfig:
    """Active ramps with per-ramp thresholds, ordered by topological position."""

    active: tuple[tuple[RampSite, float], ...]

    def __post_init__(self):
        prev = -1
        for site, threshold in self.active:
            if site.topo_index <= prev:
                raise ValidationError("active ramps must be strictly increasing in topological order")
            prev = site.topo_index
            if not 0.0 <= threshold <= 1.0:
                raise ValidationError(f"threshold {threshold} outside [0, 1]")

    @property
    def sites(self) -> tuple[RampSite, ...]:
        return tuple(s for s, _ in self.active)

    @property
    def thresholds(self) -> tuple[float, ...]:
        return tuple(t for _, t in self.active)

    @property
    def positions(self) -> tuple[str, ...]:
        return tuple(s.position for s, _ in self.active)

    def threshold_at(self, position: str) -> float:
        for site, t in self.active:
            if site.position == position:
                return t
        raise KeyError(position)

    def with_thresholds(self, thresholds: Sequence[float] | Mapping[str, float]) -> EEConfig:
        if isinstance(thresholds, Mapping):
            values = [float(thresholds[s.position]) for s, _ in self.active]
        else:
            if len(thresholds) != len(self.active):
                raise ParameterError("threshold count does not match active ramps")
            values = [float(t) for t in thresholds]
        return EEConfig(tuple((s, t) for (s, _), t in zip(self.active, values)))

    def ramp_overhead(self, batch: int = 1) -> float:
        return sum(s.ramp_ms(batch) for s, _ in self.active)

    def to_dict(self) -> dict:
        return {"ramps": [{"site": s.position, "threshold": t} for s, t in self.active]}


@dataclass(frozen=True)
class ExitOutcome:
    exit_site: str | None
    released_label: int
    correct: bool
    serve_ms: float


@dataclass(frozen=True)
class ServedRecord:
    """One request as served: its trace record, outcome, and batch size."""

    record: RequestRecord
    outcome: ExitOutcome
    batch: int = 1


@dataclass(frozen=True)
class WindowStats:
    accuracy: float
    mean_savings_ms: float
    exit_rates: Mapping[str, float]


def decision_scores(errs: np.ndarray, k: int = 1) -> np.ndarray:
    """Per-record decision scores from raw error scores at the active ramps.

    k = 1 returns the raw scores; k > 1 replaces each entry with the mean of
    the trailing k entries (fewer at the start of the ramp sequence).
    """
    if k <= 1 or errs.shape[1] <= 1:
        return errs
    n, r = errs.shape
    out = np.empty_like(errs)
    csum = np.cumsum(errs, axis=1)
    for j in range(r):
        lo = max(0, j - k + 1)
        width = j - lo + 1
        out[:, j] = (csum[:, j] - (csum[:, lo - 1] if lo > 0 else 0.0)) / width
    return out


def _serve_table(sites: Sequence[RampSite], profile: ModelProfile, batch: int) -> np.ndarray:
    r = len(sites)
    serve = np.empty(r + 1)
    ramp_acc = 0.0
    for j, site in enumerate(sites):
        ramp_acc += site.ramp_ms(batch)
        serve[j] = site.prefix_ms(batch) + ramp_acc
    serve[r] = profile.model_latency(batch) + ramp_acc if r else profile.model_latency(batch)
    return serve


class WindowEvaluator:
    """Precomputed window state for fast re-evaluation of threshold configs."""

    def __init__(
        self,
        records: Sequence[RequestRecord],
        sites: Sequence[RampSite],
        profile: ModelProfile,
        batch: int = 1,
        k: int = 1,
    ):
        if not records:
            raise ParameterError("window is empty")
        self.records = tuple(records)
        self.sites = tuple(sites)
        self.profile = profile
        self.batch = batch
        n, r = len(records), len(sites)
        errs = np.empty((n, r))
        correct_ext = np.ones((n, r + 1))
        for i, rec in enumerate(records):
            for j, site in enumerate(sites):
                sig = rec.ramp_signals[site.position]
                errs[i, j] = sig.err
                correct_ext[i, j] = 1.0 if sig.label == rec.final_label else 0.0
        self.scores = np.ascontiguousarray(decision_scores(errs, k))
        self.correct_ext = correct_ext
        self.serve = _serve_table(sites, profile, batch)
        self.vanilla_ms = profile.model_latency(batch)

    def evaluate_many(self, thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(accuracy, mean savings) for each row of a (C, R) threshold matrix."""
        th = np.ascontiguousarray(thresholds, dtype=np.float64)
        return _kernels.eval_thresholds(
            self.scores, self.correct_ext, self.serve, self.vanilla_ms, th
        )

    def exit_indices(self, thresholds: Sequence[float]) -> np.ndarray:
        """Per-record exit index (len(sites) means no exit) for one config."""
        if len(self.sites) == 0:
            return np.zeros(len(self.records), dtype=np.int64)
        th = np.ascontiguousarray(thresholds, dtype=np.float64)
        return _kernels.exit_sites(self.scores, th)

    def evaluate(self, thresholds: Sequence[float]) -> WindowStats:
        r = len(self.sites)
        th = np.asarray(thresholds, dtype=np.float64).reshape(1, r)
        acc, sav = self.evaluate_many(th)
        idx = self.exit_indices(thresholds)
        counts = np.bincount(idx, minlength=r + 1)
        rates = {site.position: counts[j] / len(self.records) for j, site in enumerate(self.sites)}
        return WindowStats(float(acc[0]), float(sav[0]), rates)


def evaluate_record(
    record: RequestRecord,
    config: EEConfig,
    profile: ModelProfile,
    batch: int = 1,
    k: int = 1,
) -> ExitOutcome:
    """Exit decision and latency for a single record under one config."""
    sites = config.sites
    errs = [record.ramp_signals[s.position].err for s in sites]
    ramp_acc = 0.0
    window: list[float] = []
    for j, (site, threshold) in enumerate(config.active):
        ramp_acc += site.ramp_ms(batch)
        window.append(errs[j])
        if len(window) > k:
            window.pop(0)
        score = errs[j] if k <= 1 else sum(window) / len(window)
        if score < threshold:
            label = record.ramp_signals[site.position].label
            return ExitOutcome(
                exit_site=site.position,
                released_label=label,
                correct=label == record.final_label,
                serve_ms=site.prefix_ms(batch) + ramp_acc,
            )
    return ExitOutcome(
        exit_site=None,
        released_label=record.final_label,
        correct=True,
        serve_ms=profile.model_latency(batch) + ramp_acc,
    )


def evaluate_window(
    records: Sequence[RequestRecord],
    config: EEConfig,
    profile: ModelProfile,
    *,
    batch: int = 1,
    k: int = 1,
) -> WindowStats:
    """Accuracy, mean savings vs vanilla, and per-ramp exit rates over a window."""
    if not records:
        raise ParameterError("evaluate_window requires a nonempty window")
    ev = WindowEvaluator(records, config.sites, profile, batch=batch, k=k)
    return ev.evaluate(config.thresholds)


def optimal_exit(record: RequestRecord, sites: Sequence[RampSite]) -> str | None:
    """Earliest site whose label matches the final label; None when none does.

    This is the upper-bound baseline's rule: it charges no ramp overheads.
    """
    for site in sites:
        if record.ramp_signals[site.position].label == record.final_label:
            return site.position
    return None
