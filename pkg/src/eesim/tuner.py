"""Threshold tuning: accuracy-triggered hill climbing plus a grid oracle.

Tuning starts from all-zero thresholds (no exiting) and repeatedly tries
raising each active ramp's threshold by that ramp's current step size. The
increment that buys the most additional savings per unit of additional
accuracy loss is applied, subject to the loss budget; zero-loss increments
rank as infinitely cheap. Step sizes follow a multiplicative
increase/decrease policy: the chosen ramp's step doubles, and any ramp
whose tentative increment broke the budget has its step halved (floored at
`min_step`). The search stops when no increment is feasible and every ramp
that could still move is already at the minimum step.

`grid_oracle` exhaustively scores a threshold lattice and is the
independent optimality reference for the hill climber; it refuses lattices
larger than an explosion cap.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from eesim.engine import WindowEvaluator
from eesim.errors import GridCapError, ParameterError
from eesim.graph import ModelProfile, RampSite
from eesim.trace import RequestRecord

# Absolute slack for accuracy-floor comparisons (pure float noise).
_ACC_EPS = 1e-12

DEFAULT_GRID_CAP = 2_000_000


@dataclass
class TunerParams:
    acc_loss_budget: float = 0.01
    init_step: float = 0.1
    min_step: float = 0.01
    accuracy_window: int = 16
    tuning_history: int = 128

    def __post_init__(self):
        if not 0.0 <= self.acc_loss_budget <= 1.0:
            raise ParameterError(f"acc_loss_budget {self.acc_loss_budget} outside [0, 1]")
        if not 0.0 < self.min_step <= self.init_step <= 1.0:
            raise ParameterError(
                f"need 0 < min_step <= init_step <= 1, got {self.min_step}, {self.init_step}"
            )
        if self.accuracy_window < 1 or self.tuning_history < 1:
            raise ParameterError("windows must be >= 1")


class AccuracyMonitor:
    """Sliding window over the last `window` correctness bits."""

    def __init__(self, window: int):
        if window < 1:
            raise ParameterError("monitor window must be >= 1")
        self.window = window
        self._bits: deque[bool] = deque(maxlen=window)

    def push(self, correct: bool) -> None:
        self._bits.append(bool(correct))

    @property
    def full(self) -> bool:
        return len(self._bits) == self.window

    @property
    def accuracy(self) -> float:
        if not self._bits:
            return 1.0
        return sum(self._bits) / len(self._bits)


def should_trigger(monitor: AccuracyMonitor, constraint: float) -> bool:
    """True when the monitor is warm and its accuracy is strictly below the floor."""
    return monitor.full and monitor.accuracy < constraint


@dataclass(frozen=True)
class TuneResult:
    thresholds: Mapping[str, float]
    savings_ms: float
    accuracy: float
    rounds: int
    evals: int
    step_trace: tuple[tuple[float, ...], ...]

    def threshold_vector(self, sites: Sequence[RampSite]) -> list[float]:
        return [self.thresholds[s.position] for s in sites]


def tune(
    history: Sequence[RequestRecord],
    ramps: Sequence[RampSite],
    params: TunerParams,
    profile: ModelProfile,
    *,
    k: int = 1,
) -> TuneResult:
    """Hill-climb thresholds for `ramps` over `history`.

    The returned configuration always keeps accuracy loss within
    `params.acc_loss_budget` on `history` (hard postcondition); savings are
    mean per-request milliseconds versus vanilla serving and may be negative
    when ramps exit nothing.
    """
    if not ramps:
        return TuneResult({}, 0.0, 1.0, 0, 0, ())
    if not history:
        raise ParameterError("tune requires a nonempty history")
    ev = WindowEvaluator(history, ramps, profile, batch=1, k=k)
    r = len(ramps)
    th = np.zeros(r)
    steps = np.full(r, params.init_step)
    floor = 1.0 - params.acc_loss_budget
    accs, savs = ev.evaluate_many(th.reshape(1, r))
    acc_cur, sav_cur = float(accs[0]), float(savs[0])
    rounds = 0
    evals = 1
    trace = [tuple(steps)]

    while True:
        rounds += 1
        eligible = [i for i in range(r) if th[i] < 1.0]
        if not eligible:
            break
        rows = np.repeat(th.reshape(1, r), len(eligible), axis=0)
        for pos, i in enumerate(eligible):
            rows[pos, i] = min(1.0, th[i] + steps[i])
        accs, savs = ev.evaluate_many(rows)
        evals += len(eligible)

        best = None
        best_key = None
        violators = []
        for pos, i in enumerate(eligible):
            if accs[pos] < floor - _ACC_EPS:
                violators.append(i)
                continue
            dsav = float(savs[pos]) - sav_cur
            dloss = acc_cur - float(accs[pos])
            if dloss <= _ACC_EPS:
                key = (1, dsav, -i)
            else:
                key = (0, dsav / dloss, dsav, -i)
            if best_key is None or key > best_key:
                best_key = key
                best = pos

        if best is not None:
            i = eligible[best]
            th[i] = min(1.0, th[i] + steps[i])
            acc_cur, sav_cur = float(accs[best]), float(savs[best])
            steps[i] *= 2.0
        elif all(steps[i] <= params.min_step + _ACC_EPS for i in eligible):
            break
        for i in violators:
            steps[i] = max(params.min_step, steps[i] / 2.0)
        trace.append(tuple(steps))
        if rounds > 200_000:
            raise RuntimeError("threshold search failed to terminate")

    if acc_cur < floor - 1e-9:
        raise AssertionError("tuned config violates the accuracy budget on its history")
    thresholds = {site.position: float(t) for site, t in zip(ramps, th)}
    return TuneResult(thresholds, sav_cur, acc_cur, rounds, evals, tuple(trace))


@dataclass(frozen=True)
class GridResult:
    thresholds: Mapping[str, float]
    savings_ms: float
    accuracy: float
    n_points: int


def threshold_lattice(step: float) -> np.ndarray:
    """Multiples of `step` in [0, 1], with 1.0 always included."""
    if not 0.0 < step <= 1.0:
        raise ParameterError(f"lattice step {step} outside (0, 1]")
    count = int(np.floor(1.0 / step + 1e-9)) + 1
    vals = np.minimum(np.arange(count) * step, 1.0)
    if vals[-1] < 1.0 - 1e-12:
        vals = np.append(vals, 1.0)
    return vals


def grid_oracle(
    history: Sequence[RequestRecord],
    ramps: Sequence[RampSite],
    acc_loss_budget: float,
    step: float,
    profile: ModelProfile,
    *,
    cap: int = DEFAULT_GRID_CAP,
    k: int = 1,
) -> GridResult:
    """Exhaustive search over the threshold lattice {0, step, ..., 1}.

    Returns the feasible lattice point with maximal savings, breaking ties
    toward lexicographically smallest thresholds. Raises `GridCapError`
    when the lattice would exceed `cap` points.
    """
    if not ramps:
        return GridResult({}, 0.0, 1.0, 1)
    if not history:
        raise ParameterError("grid_oracle requires a nonempty history")
    vals = threshold_lattice(step)
    r = len(ramps)
    n_points = len(vals) ** r
    if n_points > cap:
        raise GridCapError(
            f"lattice of {len(vals)}^{r} = {n_points} points exceeds the cap of {cap}"
        )
    grids = np.meshgrid(*([vals] * r), indexing="ij")
    rows = np.stack([g.ravel() for g in grids], axis=1)  # lexicographic row order
    ev = WindowEvaluator(history, ramps, profile, batch=1, k=k)
    accs, savs = ev.evaluate_many(rows)
    feasible = np.flatnonzero(accs >= (1.0 - acc_loss_budget) - _ACC_EPS)
    best = feasible[np.argmax(savs[feasible])]  # first max == lexicographically smallest
    thresholds = {site.position: float(t) for site, t in zip(ramps, rows[best])}
    return GridResult(thresholds, float(savs[best]), float(accs[best]), n_points)


def snap_down(thresholds: Sequence[float], step: float) -> list[float]:
    """Round each threshold down to the lattice {0, step, ..., 1}."""
    return [min(1.0, np.floor(t / step + 1e-9) * step) for t in thresholds]
