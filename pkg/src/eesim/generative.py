"""Token-level simulation of early exits in generative decoding.

A token that exits at a ramp releases immediately (its time-per-token is
the model prefix through that ramp plus ramp overheads), but its remaining
layers are not computed right away: the suffix is deferred and accumulated
at the ramp. The first later token that passes the ramp without exiting
carries all deferred suffixes with it, batched with its own pass; segments
shared with d deferred tokens are scaled by `batch_penalty(1 + d)`. A ramp
that accumulates `flush_cap` deferred suffixes flushes them immediately as
a standalone batch, and sequence end always flushes.

Per-token attributed compute ("work done on behalf of this token") is
tracked alongside released latency: with a unit penalty the attributed
total equals vanilla decoding exactly, because deferral moves work without
removing it. Several ramps may hold deferred tokens at once (one queue per
ramp).

Truncated feedback: within a sequence, per-token exit feedback is only
trusted up to and including the first token whose released value deviates
from the original model; later tokens may reflect cascading divergence and
are discarded from tuning history.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from eesim.engine import EEConfig, ServedRecord, evaluate_record
from eesim.errors import ParameterError, ValidationError
from eesim.graph import LatencyPairs, ModelProfile, find_feasible_sites, interp_ms
from eesim.ramps import adjust, score_utilities
from eesim.trace import RampSignal, Workload, synthesize_workload
from eesim.tuner import AccuracyMonitor, TunerParams, should_trigger, tune


@dataclass(frozen=True)
class TokenRecord:
    seq_id: int
    index: int
    ramp_signals: Mapping[str, RampSignal]
    final_token: int

    @property
    def final_label(self) -> int:
        # Structural twin of RequestRecord.final_label: token feedback flows
        # through the same monitor/tuner machinery as classification records.
        return self.final_token


def _penalty_pairs(table: Mapping[int, float]) -> LatencyPairs:
    pairs = []
    for b, mult in table.items():
        b = int(b)
        mult = float(mult)
        if b < 1:
            raise ParameterError(f"penalty batch size {b} must be >= 1")
        if mult <= 0:
            raise ParameterError(f"penalty multiplier {mult} must be positive")
        pairs.append((b, mult))
    pairs.sort()
    return tuple(pairs)


@dataclass
class GenParams:
    flush_cap: int = 4
    batch_penalty: Mapping[int, float] = field(default_factory=lambda: {1: 1.0, 4: 1.0})
    score_k: int = 1
    adaptation: str = "off"  # "off" | "continual": swap configs between sequences
    acc_constraint: float = 0.99
    tuner: TunerParams = field(default_factory=TunerParams)
    ramp_period: int = 128
    max_ramps: int | None = 1

    def __post_init__(self):
        if self.flush_cap < 1:
            raise ParameterError("flush_cap must be >= 1")
        if self.adaptation not in ("off", "continual"):
            raise ParameterError("adaptation must be 'off' or 'continual'")
        self._penalty = _penalty_pairs(self.batch_penalty)

    def penalty(self, batch: int) -> float:
        return interp_ms(self._penalty, batch)


@dataclass(frozen=True)
class TokenStat:
    seq_id: int
    index: int
    tpt_ms: float
    compute_ms: float
    exit_site: str | None
    correct: bool

    def to_dict(self) -> dict:
        return {
            "seq_id": self.seq_id,
            "index": self.index,
            "tpt_ms": self.tpt_ms,
            "compute_ms": self.compute_ms,
            "exit_site": self.exit_site,
            "correct": self.correct,
        }


@dataclass(frozen=True)
class FlushEvent:
    seq_id: int
    site: str
    tokens: int
    penalty: float
    duration_ms: float
    kind: str  # "cap" | "carry" | "end"

    def to_dict(self) -> dict:
        return {
            "seq_id": self.seq_id,
            "site": self.site,
            "tokens": self.tokens,
            "penalty": self.penalty,
            "duration_ms": self.duration_ms,
            "kind": self.kind,
        }


@dataclass
class TptReport:
    tokens: list[TokenStat]
    per_sequence_mean: dict[int, float]
    percentiles: dict[str, float]
    flush_events: list[FlushEvent]
    vanilla_tpt_ms: float
    compute_total_ms: float
    vanilla_total_ms: float
    critical_path_ms: float
    events: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "tokens": [t.to_dict() for t in self.tokens],
            "per_sequence_mean": {str(k): v for k, v in self.per_sequence_mean.items()},
            "percentiles": self.percentiles,
            "vanilla_tpt_ms": self.vanilla_tpt_ms,
            "compute_total_ms": self.compute_total_ms,
            "vanilla_total_ms": self.vanilla_total_ms,
            "critical_path_ms": self.critical_path_ms,
            "flush_events": [e.to_dict() for e in self.flush_events],
            "adaptation_events": self.events,
        }


def _exit_index(token: TokenRecord, config: EEConfig, k: int) -> int | None:
    window: list[float] = []
    for j, (site, threshold) in enumerate(config.active):
        err = token.ramp_signals[site.position].err
        window.append(err)
        if len(window) > k:
            window.pop(0)
        score = err if k <= 1 else sum(window) / len(window)
        if score < threshold:
            return j
    return None


class _SequenceSim:
    """Timeline of one decoded sequence under a fixed config."""

    def __init__(self, profile: ModelProfile, config: EEConfig, params: GenParams, seq_id: int):
        self.profile = profile
        self.config = config
        self.params = params
        self.seq_id = seq_id
        self.clock = 0.0
        self.total = profile.model_latency(1)
        self.stats: list[TokenStat] = []
        self.flushes: list[FlushEvent] = []
        self.deferred: dict[str, int] = {}  # site position -> deferred suffix count
        self._owners: dict[str, list[tuple[int, int]]] = {}  # site -> deferred token keys
        self._extra_compute: dict[tuple[int, int], float] = {}

    def _suffix(self, position: str) -> float:
        return self.total - self.profile.prefix_latency(position, 1)

    def _flush(self, position: str, kind: str) -> None:
        count = self.deferred.pop(position, 0)
        if not count:
            return
        mult = self.params.penalty(count)
        per_token = mult * self._suffix(position)
        self.clock += per_token  # one batched pass over the suffix
        self.flushes.append(
            FlushEvent(self.seq_id, position, count, mult, per_token, kind)
        )
        for key in self._owners.pop(position, []):
            self._extra_compute[key] = self._extra_compute.get(key, 0.0) + per_token

    def run(self, tokens: Sequence[TokenRecord]) -> None:
        for token in tokens:
            j = _exit_index(token, self.config, self.params.score_k)
            if j is not None:
                site = self.config.sites[j]
                ramp_cost = sum(s.ramp_ms(1) for s in self.config.sites[: j + 1])
                tpt = site.prefix_ms(1) + ramp_cost
                self.clock += tpt
                label = token.ramp_signals[site.position].label
                self.stats.append(
                    TokenStat(
                        token.seq_id, token.index, tpt, tpt, site.position,
                        label == token.final_token,
                    )
                )
                self.deferred[site.position] = self.deferred.get(site.position, 0) + 1
                self._owners.setdefault(site.position, []).append((token.seq_id, token.index))
                if self.deferred[site.position] >= self.params.flush_cap:
                    self._flush(site.position, "cap")
            else:
                ramp_cost = self.config.ramp_overhead(1)
                if not self.deferred:
                    tpt = self.total + ramp_cost
                    self.stats.append(
                        TokenStat(token.seq_id, token.index, tpt, tpt, None, True)
                    )
                    self.clock += tpt
                    continue
                # Carry every deferred suffix along: segment times scale with
                # the penalty for the batch size active on that segment.
                points = [
                    (s.position, self.profile.prefix_latency(s.position, 1))
                    for s, _ in self.config.active
                    if self.deferred.get(s.position)
                ]
                tpt = points[0][1]
                batch = 1
                shares = {pos: 0.0 for pos, _ in points}
                for idx, (pos, prefix_ms) in enumerate(points):
                    batch += self.deferred[pos]
                    seg_end = points[idx + 1][1] if idx + 1 < len(points) else self.total
                    seg = self.params.penalty(batch) * (seg_end - prefix_ms)
                    tpt += seg
                    for p, _ in points[: idx + 1]:
                        shares[p] += seg
                tpt += ramp_cost
                self.stats.append(
                    TokenStat(token.seq_id, token.index, tpt, tpt, None, True)
                )
                self.clock += tpt
                for pos, _ in points:
                    count = self.deferred.pop(pos)
                    mult = self.params.penalty(1 + count)
                    self.flushes.append(
                        FlushEvent(self.seq_id, pos, count, mult, shares[pos], "carry")
                    )
                    for key in self._owners.pop(pos, []):
                        self._extra_compute[key] = self._extra_compute.get(key, 0.0) + shares[pos]
        for site, _ in self.config.active:
            self._flush(site.position, "end")

    def finalized_stats(self) -> list[TokenStat]:
        out = []
        for st in self.stats:
            extra = self._extra_compute.get((st.seq_id, st.index), 0.0)
            if extra:
                st = TokenStat(
                    st.seq_id, st.index, st.tpt_ms, st.compute_ms + extra,
                    st.exit_site, st.correct,
                )
            out.append(st)
        return out


@dataclass(frozen=True)
class TokenFeedback:
    token: TokenRecord
    exit_site: str | None
    released: int
    correct: bool


def token_feedback(
    tokens: Sequence[TokenRecord], config: EEConfig, k: int = 1
) -> list[TokenFeedback]:
    """Feedback for the prefix ending at the first deviating token.

    A token's released value is its exit ramp's label, or the original
    model's token when it does not exit. Everything after the first
    deviation is discarded (cascading divergence makes it untrustworthy).
    """
    out = []
    for token in tokens:
        j = _exit_index(token, config, k)
        if j is None:
            released = token.final_token
            site = None
        else:
            site = config.sites[j].position
            released = token.ramp_signals[site].label
        correct = released == token.final_token
        out.append(TokenFeedback(token, site, released, correct))
        if not correct:
            break
    return out


def run_generative(
    sequences: Sequence[Sequence[TokenRecord]],
    profile: ModelProfile,
    config: EEConfig,
    params: GenParams,
) -> TptReport:
    """Simulate token-level serving for independent sequences.

    With `params.adaptation == "continual"`, truncated token feedback from
    each sequence drives the same threshold tuner and ramp manager as
    classification serving; configs swap between sequences.
    """
    sites = find_feasible_sites(profile)
    for seq in sequences:
        for token in seq:
            for site in sites:
                if site.position not in token.ramp_signals:
                    raise ValidationError(
                        f"token ({token.seq_id}, {token.index}): missing signal for "
                        f"site {site.position!r}"
                    )

    monitor = AccuracyMonitor(params.tuner.accuracy_window)
    history: list[TokenRecord] = []
    period: list[ServedRecord] = []
    adaptation_events: list[dict] = []
    fed = 0

    stats: list[TokenStat] = []
    flushes: list[FlushEvent] = []
    critical_path = 0.0
    for seq in sequences:
        sim = _SequenceSim(profile, config, params, seq[0].seq_id if seq else -1)
        sim.run(seq)
        stats.extend(sim.finalized_stats())
        flushes.extend(sim.flushes)
        critical_path += sim.clock

        if params.adaptation != "continual":
            continue
        for fb in token_feedback(seq, config, params.score_k):
            monitor.push(fb.correct)
            history.append(fb.token)
            if len(history) > params.tuner.tuning_history:
                history.pop(0)
            outcome = evaluate_record(fb.token, config, profile, batch=1, k=params.score_k)
            period.append(ServedRecord(fb.token, outcome, 1))
            fed += 1
        if should_trigger(monitor, params.acc_constraint) and config.active:
            res = tune(history, list(config.sites), params.tuner, profile, k=params.score_k)
            new_config = config.with_thresholds(res.thresholds)
            if new_config != config:
                adaptation_events.append(
                    {"after_tokens": fed, "kind": "threshold_tune", "config": new_config.to_dict()}
                )
                config = new_config
        if fed >= params.ramp_period and period:
            report = score_utilities(period, config, profile)
            adj = adjust(
                report, config, sites, _unbounded_budget(), history, params.tuner,
                profile, k=params.score_k, max_ramps=params.max_ramps,
            )
            if adj.config != config:
                adaptation_events.append(
                    {"after_tokens": fed, "kind": "ramp_adjust", "config": adj.config.to_dict()}
                )
                config = adj.config
            period = []
            fed = 0

    vanilla_tpt = profile.model_latency(1)
    tpts = [t.tpt_ms for t in stats]
    seq_means: dict[int, list[float]] = {}
    for t in stats:
        seq_means.setdefault(t.seq_id, []).append(t.tpt_ms)
    from eesim.serving import percentile_summary

    return TptReport(
        tokens=stats,
        per_sequence_mean={k: float(np.mean(v)) for k, v in seq_means.items()},
        percentiles=percentile_summary(tpts),
        flush_events=flushes,
        vanilla_tpt_ms=vanilla_tpt,
        compute_total_ms=float(sum(t.compute_ms for t in stats)),
        vanilla_total_ms=vanilla_tpt * len(stats),
        critical_path_ms=critical_path,
        events=adaptation_events,
    )


def _unbounded_budget():
    from eesim.graph import RampBudget

    # Generative mode bounds the ramp set by count (max_ramps), not latency
    # fraction, mirroring single-ramp generative serving.
    return RampBudget(1.0)


def load_token_trace(path: str | Path, profile: ModelProfile) -> list[list[TokenRecord]]:
    """Load a token-trace JSONL file grouped into per-sequence streams."""
    sites = [s.position for s in find_feasible_sites(profile)]
    by_seq: dict[int, list[TokenRecord]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: invalid JSON ({exc})") from exc
            try:
                seq = int(obj["seq"])
                idx = int(obj["idx"])
                final = int(obj["final"])
                ramps = obj["ramps"]
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"line {lineno}: malformed token record ({exc})") from exc
            signals = {}
            for site, sig in ramps.items():
                try:
                    signals[str(site)] = RampSignal(float(sig["err"]), int(sig["label"]))
                except (KeyError, TypeError, ValueError) as exc:
                    raise ValidationError(
                        f"token ({seq}, {idx}): malformed signal for site {site!r} ({exc})"
                    ) from exc
            for site in sites:
                if site not in signals:
                    raise ValidationError(f"token ({seq}, {idx}): missing signal for site {site!r}")
            for site, sig in signals.items():
                if not 0.0 <= sig.err <= 1.0:
                    raise ValidationError(
                        f"token ({seq}, {idx}): error score {sig.err} at {site!r} outside [0, 1]"
                    )
            by_seq.setdefault(seq, []).append(TokenRecord(seq, idx, signals, final))
    sequences = []
    for seq in sorted(by_seq):
        tokens = sorted(by_seq[seq], key=lambda t: t.index)
        for expect, token in enumerate(tokens):
            if token.index != expect:
                raise ValidationError(
                    f"sequence {seq}: token indices not contiguous (saw {token.index}, "
                    f"expected {expect})"
                )
        sequences.append(tokens)
    return sequences


def save_token_trace(sequences: Sequence[Sequence[TokenRecord]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            for t in seq:
                obj = {
                    "seq": t.seq_id,
                    "idx": t.index,
                    "ramps": {
                        s: {"err": sig.err, "label": sig.label}
                        for s, sig in t.ramp_signals.items()
                    },
                    "final": t.final_token,
                }
                fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")))
                fh.write("\n")


def synthesize_token_trace(
    profile: ModelProfile,
    n_sequences: int,
    seq_len: int,
    continuity: float,
    agreement_curve: Mapping[str, float],
    seed: int,
    **kwargs,
) -> list[list[TokenRecord]]:
    """Synthetic token streams built on the classification-trace generator."""
    if n_sequences < 1 or seq_len < 1:
        raise ParameterError("n_sequences and seq_len must be >= 1")
    flat: Workload = synthesize_workload(
        profile, n_sequences * seq_len, continuity, agreement_curve, seed, **kwargs
    )
    sequences = []
    it = iter(flat.records)
    for seq_id in range(n_sequences):
        tokens = []
        for idx in range(seq_len):
            rec = next(it)
            tokens.append(TokenRecord(seq_id, idx, rec.ramp_signals, rec.final_label))
        sequences.append(tokens)
    return sequences
