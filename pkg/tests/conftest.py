"""Shared fixtures and independent oracles.

The oracles here deliberately avoid the library's fast paths: feasibility
is decided by remove-and-retest reachability, window evaluation by a plain
Python walk over ramps. Tests compare library results against these.
"""

from __future__ import annotations

from collections import deque

import numpy as np
import pytest

from eesim.graph import ModelProfile
from eesim.trace import RampSignal, RequestRecord


def make_chain(
    n: int,
    layer_ms: float = 10.0,
    ramp_ms: float = 0.5,
    batches: tuple[int, ...] = (1,),
    name: str = "chain",
    batch_scale: float = 1.0,
) -> ModelProfile:
    """Linear n-node model; every non-output node carries a ramp cost."""
    nodes = [f"n{i}" for i in range(n)]
    lat = {
        node: {b: layer_ms * (1.0 + batch_scale * (b - 1)) for b in batches} for node in nodes
    }
    ramp = {
        node: {b: ramp_ms * (1.0 + batch_scale * (b - 1)) for b in batches}
        for node in nodes[:-1]
    }
    return ModelProfile(nodes, [(nodes[i], nodes[i + 1]) for i in range(n - 1)], lat, ramp, nodes[-1], name=name)


def make_record(rid, arrival, signals: dict[str, tuple[float, int]], final: int) -> RequestRecord:
    return RequestRecord(
        rid, arrival, {s: RampSignal(err, label) for s, (err, label) in signals.items()}, final
    )


def brute_force_sites(nodes, edges, output) -> list[str]:
    """Remove-and-retest oracle: a non-output node is feasible iff removing it
    leaves every source unable to reach the output."""
    nodes = list(nodes)
    in_deg = {n: 0 for n in nodes}
    adj = {n: [] for n in nodes}
    for u, v in edges:
        adj[u].append(v)
        in_deg[v] += 1
    sources = [n for n in nodes if in_deg[n] == 0]
    feasible = []
    for v in nodes:
        if v == output:
            continue
        reached = False
        for s in sources:
            if s == v:
                continue
            seen = {s}
            q = deque([s])
            while q:
                u = q.popleft()
                if u == output:
                    reached = True
                    break
                for w in adj[u]:
                    if w != v and w not in seen:
                        seen.add(w)
                        q.append(w)
            if reached:
                break
        if not reached:
            feasible.append(v)
    return feasible


def random_dag(rng: np.random.Generator, max_nodes: int = 30):
    """Random DAG where every node reaches the last node (the output)."""
    n = int(rng.integers(2, max_nodes + 1))
    nodes = [f"v{i}" for i in range(n)]
    edges = set()
    for i in range(n - 1):
        j = int(rng.integers(i + 1, n))
        edges.add((nodes[i], nodes[j]))
    extra = int(rng.integers(0, max(1, n)))
    for _ in range(extra):
        i = int(rng.integers(0, n - 1))
        j = int(rng.integers(i + 1, n))
        edges.add((nodes[i], nodes[j]))
    return nodes, sorted(edges)


def profile_from_dag(nodes, edges, layer_ms: float = 10.0, ramp_ms: float = 0.5) -> ModelProfile:
    lat = {n: {1: layer_ms} for n in nodes}
    ramp = {n: {1: ramp_ms} for n in nodes}
    return ModelProfile(nodes, edges, lat, ramp, nodes[-1], name="dag")


def brute_force_window(records, active, profile, k: int = 1):
    """Plain-Python window evaluation: (accuracy, mean savings, exit rates).

    `active` is a list of (RampSite, threshold) pairs in topological order.
    """
    vanilla = profile.model_latency(1)
    correct = 0
    savings = 0.0
    exits = {site.position: 0 for site, _ in active}
    for rec in records:
        window = []
        exit_site = None
        ramp_paid = 0.0
        for site, threshold in active:
            err = rec.ramp_signals[site.position].err
            window.append(err)
            if len(window) > k:
                window.pop(0)
            score = err if k <= 1 else sum(window) / len(window)
            ramp_paid += site.ramp_ms(1)
            if score < threshold:
                exit_site = site
                break
        if exit_site is None:
            serve = vanilla + sum(site.ramp_ms(1) for site, _ in active)
            ok = True
        else:
            serve = exit_site.prefix_ms(1) + ramp_paid
            ok = rec.ramp_signals[exit_site.position].label == rec.final_label
            exits[exit_site.position] += 1
        correct += ok
        savings += vanilla - serve
    n = len(records)
    return correct / n, savings / n, {p: c / n for p, c in exits.items()}


@pytest.fixture
def chain4() -> ModelProfile:
    return make_chain(4)


@pytest.fixture
def chain8() -> ModelProfile:
    return make_chain(8)
