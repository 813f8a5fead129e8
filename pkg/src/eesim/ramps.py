"""Ramp-set management: utility scoring and periodic adjustment.

Each active ramp is scored once per period as `savings - overheads`:
savings is the raw latency that requests exiting *at that ramp* avoided,
overheads is the latency the ramp added to every request that passed beyond
it (requests that exited earlier never reached it and contribute nothing).

Adjustment is conservative. When any ramp scores negative, one fast
threshold-tuning pass tries to rescue the current set; failing that, all
negative ramps are deactivated and at most one replacement candidate is
trialed at threshold 0. Candidate exit rates are unknown, so they are
bounded optimistically by the profiled exit rates of the deactivated ramps
at or after the candidate position plus all earlier deactivations (later
ramps almost always exit more, so a downstream rate bounds an upstream
one). When every ramp scores positive, a low-risk probe either adds a ramp
immediately before the highest-utility ramp (budget permitting) or shifts
the lowest-utility ramp one feasible position earlier, never touching the
highest-utility ramp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from eesim.engine import EEConfig, ServedRecord, WindowEvaluator
from eesim.errors import ParameterError
from eesim.graph import ModelProfile, RampBudget, RampSite
from eesim.trace import RequestRecord
from eesim.tuner import TunerParams, tune


@dataclass(frozen=True)
class RampUtility:
    site: str
    savings_ms: float
    overheads_ms: float
    exit_rate: float

    @property
    def utility_ms(self) -> float:
        return self.savings_ms - self.overheads_ms


@dataclass(frozen=True)
class UtilityReport:
    ramps: tuple[RampUtility, ...]
    period_len: int
    mean_savings_ms: float

    def utility_of(self, position: str) -> RampUtility:
        for u in self.ramps:
            if u.site == position:
                return u
        raise KeyError(position)

    def to_dict(self) -> dict:
        return {
            "period_len": self.period_len,
            "mean_savings_ms": self.mean_savings_ms,
            "ramps": [
                {
                    "site": u.site,
                    "savings_ms": u.savings_ms,
                    "overheads_ms": u.overheads_ms,
                    "exit_rate": u.exit_rate,
                    "utility_ms": u.utility_ms,
                }
                for u in self.ramps
            ],
        }


@dataclass(frozen=True)
class Deactivation:
    site: RampSite
    exit_rate: float


def score_utilities(
    period: Sequence[ServedRecord], config: EEConfig, profile: ModelProfile
) -> UtilityReport:
    """Per-ramp utility over one period of served requests.

    Latency is charged at each request's served batch size, matching what
    the requests actually experienced.
    """
    if not period:
        raise ParameterError("score_utilities requires a nonempty period")
    order = {site.position: j for j, site in enumerate(config.sites)}
    n = len(config.sites)
    savings = [0.0] * n
    overheads = [0.0] * n
    exits = [0] * n
    total_savings = 0.0
    for served in period:
        vanilla = profile.model_latency(served.batch)
        total_savings += vanilla - served.outcome.serve_ms
        exit_idx = order.get(served.outcome.exit_site, n) if served.outcome.exit_site else n
        if exit_idx < n:
            savings[exit_idx] += vanilla - served.outcome.serve_ms
            exits[exit_idx] += 1
        for j, site in enumerate(config.sites):
            if exit_idx > j:  # request passed beyond ramp j without exiting there
                overheads[j] += site.ramp_ms(served.batch)
    ramps = tuple(
        RampUtility(site.position, savings[j], overheads[j], exits[j] / len(period))
        for j, site in enumerate(config.sites)
    )
    return UtilityReport(ramps, len(period), total_savings / len(period))


def estimate_utilities(
    history: Sequence[RequestRecord],
    config: EEConfig,
    profile: ModelProfile,
    k: int = 1,
) -> UtilityReport:
    """Offline utility estimate: re-evaluate `history` at batch size 1."""
    ev = WindowEvaluator(history, config.sites, profile, batch=1, k=k)
    idx = ev.exit_indices(config.thresholds)
    n = len(config.sites)
    vanilla = ev.vanilla_ms
    savings = [0.0] * n
    overheads = [0.0] * n
    exits = [0] * n
    total = 0.0
    for i in idx:
        total += vanilla - ev.serve[i]
        if i < n:
            savings[i] += vanilla - ev.serve[i]
            exits[i] += 1
        for j in range(n):
            if i > j:  # passed beyond ramp j without exiting there
                overheads[j] += config.sites[j].ramp_ms(1)
    ramps = tuple(
        RampUtility(site.position, savings[j], overheads[j], exits[j] / len(history))
        for j, site in enumerate(config.sites)
    )
    return UtilityReport(ramps, len(history), total / len(history))


def upper_bound_exit_rate(ledger: Sequence[Deactivation], site: RampSite) -> float:
    """Optimistic exit-rate bound for a candidate at `site`.

    The profiled rate of the nearest deactivated ramp at or after the
    candidate, plus the rates of all deactivations before it: inputs that
    would have exited at an earlier deactivated ramp reach the next one and
    might exit there.
    """
    bound = 0.0
    following = None
    for d in ledger:
        if d.site.topo_index < site.topo_index:
            bound += d.exit_rate
        elif following is None:
            following = d.exit_rate
    return bound + (following or 0.0)


def _candidate_bound_utility(
    site: RampSite, ledger: Sequence[Deactivation], period_len: int, profile: ModelProfile
) -> float:
    rate = upper_bound_exit_rate(ledger, site)
    per_exit = profile.model_latency(1) - (site.prefix_ms(1) + site.ramp_ms(1))
    cost = site.ramp_ms(1)
    return rate * period_len * per_exit - (1.0 - rate) * period_len * cost


def propose_candidate(
    ledger: Sequence[Deactivation],
    latest_positive: RampSite | None,
    sites: Sequence[RampSite],
    profile: ModelProfile,
    period_len: int,
    *,
    active_positions: frozenset[str] = frozenset(),
) -> RampSite | None:
    """Pick at most one trial ramp from the range after the last positive ramp.

    The range is partitioned into intervals delimited by this round's
    deactivations; the first probe in each interval is its median feasible
    site, and probes bisect toward the interval's end while every bound
    stays non-positive.
    """
    if not ledger:
        return None
    start_idx = latest_positive.topo_index if latest_positive else sites[0].topo_index
    deact_pos = {d.site.position for d in ledger}
    pool = [
        s
        for s in sites
        if s.topo_index > start_idx
        and s.position not in active_positions
        and s.position not in deact_pos
    ]
    if not pool:
        return None

    # Split the pool into intervals delimited by the deactivated positions.
    bounds = sorted(d.site.topo_index for d in ledger)
    intervals: list[list[RampSite]] = [[] for _ in range(len(bounds) + 1)]
    for s in pool:
        slot = sum(1 for b in bounds if b < s.topo_index)
        intervals[slot].append(s)
    intervals = [iv for iv in intervals if iv]
    if not intervals:
        return None

    max_rounds = max(1, math.ceil(math.log2(max(len(iv) for iv in intervals))) + 1)
    indices = [(len(iv) - 1) // 2 for iv in intervals]
    for _ in range(max_rounds):
        best = None
        best_util = 0.0
        for iv, i in zip(intervals, indices):  # topological interval order, so ties keep the earlier site
            cand = iv[i]
            util = _candidate_bound_utility(cand, ledger, period_len, profile)
            if util > best_util:
                best, best_util = cand, util
        if best is not None:
            return best
        advanced = False
        for slot, iv in enumerate(intervals):
            m = len(iv)
            nxt = (indices[slot] + m) // 2
            if nxt <= indices[slot]:
                nxt = indices[slot] + 1
            if nxt <= m - 1:
                indices[slot] = nxt
                advanced = True
        if not advanced:
            break
    return None


@dataclass(frozen=True)
class AdjustResult:
    config: EEConfig
    action: str
    deactivated: tuple[str, ...] = ()
    added: str | None = None
    shifted: tuple[str, str] | None = None

    def to_dict(self) -> dict:
        return {
            "action": self.action,
            "deactivated": list(self.deactivated),
            "added": self.added,
            "shifted": list(self.shifted) if self.shifted else None,
        }


def _insert_site(
    active: Sequence[tuple[RampSite, float]], site: RampSite, threshold: float
) -> tuple[tuple[RampSite, float], ...]:
    merged = list(active) + [(site, threshold)]
    merged.sort(key=lambda pair: pair[0].topo_index)
    return tuple(merged)


def _site_before(
    target: RampSite, sites: Sequence[RampSite], active_positions: set[str]
) -> RampSite | None:
    """The feasible site immediately preceding `target`, if free."""
    prev = None
    for s in sites:
        if s.topo_index >= target.topo_index:
            break
        prev = s
    if prev is None or prev.position in active_positions:
        return None
    return prev


def adjust(
    report: UtilityReport,
    config: EEConfig,
    sites: Sequence[RampSite],
    budget: RampBudget,
    history: Sequence[RequestRecord],
    params: TunerParams,
    profile: ModelProfile,
    *,
    k: int = 1,
    max_ramps: int | None = None,
) -> AdjustResult:
    """One ramp-adjustment round. Returns the (possibly unchanged) config.

    Changes are bounded per round: deactivations of exactly the
    negative-utility ramps, at most one addition, at most one shift. The
    returned config always satisfies ordering and budget invariants.
    """
    utilities = {u.site: u for u in report.ramps}
    negatives = [s for s, _ in config.active if utilities[s.position].utility_ms < 0]

    if negatives:
        neg_pos = {s.position for s in negatives}
        if history:
            res = tune(history, list(config.sites), params, profile, k=k)
            tuned = config.with_thresholds(res.thresholds)
            est = estimate_utilities(history, tuned, profile, k=k)
            rescued = all(u.utility_ms >= 0 for u in est.ramps)
            if rescued and res.savings_ms >= report.mean_savings_ms - 1e-12:
                return AdjustResult(tuned, "retune")
            # Only ramps still negative after the tuning pass are dropped; a
            # ramp that better thresholds would rescue keeps its place (its
            # thresholds rise at the next successful tune).
            still_negative = {u.site for u in est.ramps if u.utility_ms < 0}
            neg_pos &= still_negative
        if not neg_pos:
            return AdjustResult(config, "none")
        ledger = [
            Deactivation(s, utilities[s.position].exit_rate)
            for s, _ in config.active
            if s.position in neg_pos
        ]
        survivors = tuple((s, t) for s, t in config.active if s.position not in neg_pos)
        latest_positive = None
        for s, _ in survivors:
            if utilities[s.position].utility_ms > 0:
                latest_positive = s
        candidate = propose_candidate(
            ledger,
            latest_positive,
            sites,
            profile,
            report.period_len,
            active_positions=frozenset(s.position for s, _ in survivors),
        )
        added = None
        new_active = survivors
        if candidate is not None and (max_ramps is None or len(survivors) + 1 <= max_ramps):
            trial = _insert_site(survivors, candidate, 0.0)
            if budget.allows([s for s, _ in trial], profile):
                new_active = trial
                added = candidate.position
        return AdjustResult(
            EEConfig(new_active),
            "deactivate+trial" if added else "deactivate",
            deactivated=tuple(sorted(neg_pos)),
            added=added,
        )

    if not config.active:
        return AdjustResult(config, "none")

    ranked = sorted(config.active, key=lambda pair: utilities[pair[0].position].utility_ms)
    highest = ranked[-1][0]
    lowest = ranked[0][0]
    active_positions = {s.position for s, _ in config.active}

    if max_ramps is None or len(config.active) + 1 <= max_ramps:
        target = _site_before(highest, sites, active_positions)
        if target is not None:
            trial = _insert_site(config.active, target, 0.0)
            if budget.allows([s for s, _ in trial], profile):
                return AdjustResult(EEConfig(trial), "add", added=target.position)

    if lowest.position != highest.position:
        target = _site_before(lowest, sites, active_positions)
        if target is not None:
            shifted = tuple(
                (s, t) for s, t in config.active if s.position != lowest.position
            )
            trial = _insert_site(shifted, target, 0.0)
            if budget.allows([s for s, _ in trial], profile):
                return AdjustResult(
                    EEConfig(trial), "shift", shifted=(lowest.position, target.position)
                )
    return AdjustResult(config, "none")
