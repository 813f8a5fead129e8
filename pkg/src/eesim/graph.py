"""Model graphs: layer DAGs with latency profiles and ramp placement.

A model is a DAG of layers with per-layer, per-batch-size latencies. Ramps
(lightweight exit heads) may only be attached at *cut positions*: layers
through which every path from any source to the output passes. Attaching
anywhere else would let a ramp decide on partial data flows.

Latencies for unprofiled batch sizes are linearly interpolated between the
nearest profiled sizes and clamped beyond the profiled range.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from eesim.errors import GraphError, ParameterError, ValidationError

PROFILE_SCHEMA = "ee-model-profile/1"

# Relative slack for budget comparisons, so that e.g. two 1 ms ramps fit an
# exact 2 ms cap despite float rounding.
_BUDGET_RTOL = 1e-9

LatencyPairs = tuple[tuple[int, float], ...]


def _as_pairs(table: Mapping[int | str, float], what: str) -> LatencyPairs:
    pairs = []
    for batch, ms in table.items():
        b = int(batch)
        if b < 1:
            raise ValidationError(f"{what}: batch size {batch} must be >= 1")
        ms = float(ms)
        if ms < 0:
            raise ValidationError(f"{what}: latency {ms} at batch {b} is negative")
        pairs.append((b, ms))
    pairs.sort()
    if len({b for b, _ in pairs}) != len(pairs):
        raise ValidationError(f"{what}: duplicate batch sizes")
    for (b0, m0), (b1, m1) in zip(pairs, pairs[1:]):
        if m1 < m0:
            raise ValidationError(f"{what}: latency decreases from batch {b0} to {b1}")
    return tuple(pairs)


def interp_ms(pairs: LatencyPairs, batch: int) -> float:
    """Latency at `batch` from sorted (batch, ms) pairs; clamps outside the range."""
    if batch <= pairs[0][0]:
        return pairs[0][1]
    if batch >= pairs[-1][0]:
        return pairs[-1][1]
    for (b0, m0), (b1, m1) in zip(pairs, pairs[1:]):
        if b0 <= batch <= b1:
            if b0 == batch:
                return m0
            frac = (batch - b0) / (b1 - b0)
            return m0 + frac * (m1 - m0)
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class RampSite:
    """A feasible ramp position: a cut layer plus its latency accounting.

    `prefix_latency` holds cumulative model time up to and including the
    position; `ramp_latency` the cost of the ramp itself. Both are sorted
    (batch, ms) pairs over the profile's profiled batch sizes.
    """

    position: str
    topo_index: int
    prefix_latency: LatencyPairs
    ramp_latency: LatencyPairs

    def prefix_ms(self, batch: int = 1) -> float:
        return interp_ms(self.prefix_latency, batch)

    def ramp_ms(self, batch: int = 1) -> float:
        return interp_ms(self.ramp_latency, batch)


@dataclass(frozen=True)
class RampBudget:
    """Cap on total active-ramp latency as a fraction of the no-exit model latency."""

    fraction: float

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ParameterError(f"budget fraction {self.fraction} outside [0, 1]")

    def cap_ms(self, profile: ModelProfile) -> float:
        return self.fraction * profile.model_latency(1)

    def allows(self, sites: Iterable[RampSite], profile: ModelProfile) -> bool:
        total = sum(s.ramp_ms(1) for s in sites)
        cap = self.cap_ms(profile)
        return total <= cap * (1.0 + _BUDGET_RTOL) + 1e-12


class ModelProfile:
    """Immutable layer DAG with latency profiles.

    `nodes` must be listed in topological order; every node must reach the
    single output node. `ramp_latency` supplies the per-site ramp cost model
    and must cover every feasible site.
    """

    def __init__(
        self,
        nodes: Sequence[str],
        edges: Iterable[tuple[str, str] | Sequence[str]],
        layer_latency: Mapping[str, Mapping[int | str, float]],
        ramp_latency: Mapping[str, Mapping[int | str, float]],
        output: str,
        name: str = "model",
    ):
        self.name = str(name)
        self.nodes = tuple(str(n) for n in nodes)
        if not self.nodes:
            raise GraphError("profile has no nodes")
        if len(set(self.nodes)) != len(self.nodes):
            raise GraphError("duplicate node ids")
        self._index = {n: i for i, n in enumerate(self.nodes)}

        norm_edges = []
        for e in edges:
            u, v = str(e[0]), str(e[1])
            if u not in self._index or v not in self._index:
                raise GraphError(f"edge ({u}, {v}) references unknown node")
            if self._index[u] >= self._index[v]:
                raise GraphError(
                    f"edge ({u}, {v}) is not forward in node order: "
                    "node order must be topological and the graph acyclic"
                )
            norm_edges.append((u, v))
        self.edges = tuple(norm_edges)

        self.output = str(output)
        if self.output not in self._index:
            raise GraphError(f"output node {self.output!r} not in nodes")
        self._check_output_reachable()

        self._layer: dict[str, LatencyPairs] = {}
        for node in self.nodes:
            if node not in layer_latency:
                raise ValidationError(f"node {node!r} has no latency entry")
            pairs = _as_pairs(layer_latency[node], f"layer {node!r}")
            if pairs[0][0] != 1:
                raise ValidationError(f"layer {node!r} has no batch-size-1 latency")
            self._layer[node] = pairs

        self._ramp: dict[str, LatencyPairs] = {}
        for node, table in ramp_latency.items():
            if node not in self._index:
                raise ValidationError(f"ramp latency for unknown node {node!r}")
            pairs = _as_pairs(table, f"ramp at {node!r}")
            if pairs[0][0] != 1:
                raise ValidationError(f"ramp at {node!r} has no batch-size-1 latency")
            self._ramp[node] = pairs

        self.batch_sizes = tuple(sorted({b for p in self._layer.values() for b, _ in p}))
        self._site_positions = tuple(self._structural_sites())
        missing = [s for s in self._site_positions if s not in self._ramp]
        if missing:
            raise ValidationError(f"feasible sites without a ramp-cost entry: {missing}")
        self._prefix_cache: dict[int, list[float]] = {}

    def _check_output_reachable(self):
        preds: dict[str, list[str]] = {n: [] for n in self.nodes}
        for u, v in self.edges:
            preds[v].append(u)
        seen = {self.output}
        frontier = deque([self.output])
        while frontier:
            for p in preds[frontier.popleft()]:
                if p not in seen:
                    seen.add(p)
                    frontier.append(p)
        unreachable = [n for n in self.nodes if n not in seen]
        if unreachable:
            raise GraphError(f"output not reachable from nodes: {unreachable}")

    def _structural_sites(self) -> list[str]:
        # A node at topo position i lies on every source-to-output path iff
        # no edge jumps over position i and no source appears after i.
        n = len(self.nodes)
        span = [0] * (n + 1)
        indeg = [0] * n
        for u, v in self.edges:
            iu, iv = self._index[u], self._index[v]
            if iu + 1 < iv:
                span[iu + 1] += 1
                span[iv] -= 1
            indeg[iv] += 1
        last_source = max(i for i in range(n) if indeg[i] == 0)
        out_idx = self._index[self.output]
        sites = []
        crossing = 0
        for i in range(n):
            crossing += span[i]
            if i >= out_idx:
                break
            if crossing == 0 and i >= last_source:
                sites.append(self.nodes[i])
        return sites

    def topo_index(self, node: str) -> int:
        return self._index[node]

    def _prefix(self, batch: int) -> list[float]:
        sums = self._prefix_cache.get(batch)
        if sums is None:
            sums = []
            acc = 0.0
            for node in self.nodes:
                acc += interp_ms(self._layer[node], batch)
                sums.append(acc)
            self._prefix_cache[batch] = sums
        return sums

    def model_latency(self, batch: int = 1) -> float:
        """Full no-exit model latency at the given batch size."""
        return self._prefix(batch)[-1]

    def prefix_latency(self, node: str, batch: int = 1) -> float:
        """Cumulative latency through `node` (inclusive) in execution order."""
        return self._prefix(batch)[self._index[node]]

    def has_ramp_cost(self, node: str) -> bool:
        return node in self._ramp

    def ramp_cost(self, node: str, batch: int = 1) -> float:
        try:
            pairs = self._ramp[node]
        except KeyError:
            raise GraphError(f"node {node!r} has no ramp-cost entry") from None
        return interp_ms(pairs, batch)

    def to_dict(self) -> dict:
        return {
            "schema": PROFILE_SCHEMA,
            "name": self.name,
            "nodes": list(self.nodes),
            "edges": [list(e) for e in self.edges],
            "latencies": {n: {str(b): ms for b, ms in p} for n, p in self._layer.items()},
            "ramp_latency": {n: {str(b): ms for b, ms in p} for n, p in self._ramp.items()},
            "output": self.output,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> ModelProfile:
        schema = doc.get("schema")
        if schema != PROFILE_SCHEMA:
            raise ValidationError(f"unsupported profile schema {schema!r}")
        for key in ("nodes", "edges", "latencies", "ramp_latency", "output"):
            if key not in doc:
                raise ValidationError(f"profile is missing {key!r}")
        return cls(
            nodes=doc["nodes"],
            edges=doc["edges"],
            layer_latency=doc["latencies"],
            ramp_latency=doc["ramp_latency"],
            output=doc["output"],
            name=doc.get("name", "model"),
        )


def load_profile(path: str | Path) -> ModelProfile:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"profile {path}: invalid JSON ({exc})") from exc
    return ModelProfile.from_dict(doc)


def save_profile(profile: ModelProfile, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(profile.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def find_feasible_sites(profile: ModelProfile) -> list[RampSite]:
    """All non-output layers through which every source-to-output path passes.

    Returned in topological order. Ramp costs come from the profile's
    per-site cost tables.
    """
    batches = profile.batch_sizes
    sites = []
    for pos in profile._site_positions:
        prefix = tuple((b, profile.prefix_latency(pos, b)) for b in batches)
        ramp = tuple((b, profile.ramp_cost(pos, b)) for b in batches)
        sites.append(RampSite(pos, profile.topo_index(pos), prefix, ramp))
    return sites


def _even_indices(m: int, k: int) -> list[int]:
    if k == 1:
        return [(m - 1) // 2]
    return [int((i * (m - 1)) / (k - 1) + 0.5) for i in range(k)]


def initial_placement(
    sites: Sequence[RampSite], budget: RampBudget, profile: ModelProfile
) -> "EEConfig":
    """Largest evenly spaced ramp set that fits the budget, all thresholds 0.

    Returns an empty config when the budget admits no ramp at all (valid:
    no exiting happens).
    """
    from eesim.engine import EEConfig

    if not sites:
        raise ParameterError("initial_placement requires a nonempty site list")
    for k in range(len(sites), 0, -1):
        chosen = [sites[i] for i in _even_indices(len(sites), k)]
        if budget.allows(chosen, profile):
            return EEConfig(tuple((s, 0.0) for s in chosen))
    return EEConfig(())
