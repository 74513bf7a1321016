"""Score-balanced streaming partitioners: Fennel (vertex), HDRF (edge), random.

Both streaming algorithms measure partition load as the cumulative score of
the functions placed there rather than by vertex or edge counts. Call
direction is ignored for locality: two functions that call each other in
either direction count as neighbours.
"""

from __future__ import annotations

import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .callgraph import CallGraph
from .scoring import ScoreTable

FENNEL_GAMMA = 1.5
FENNEL_SLACK = 1.1
HDRF_LAMBDA = 1.1
HDRF_EPSILON = 1e-9

ALGORITHMS = ("fennel", "hdrf", "random")


class PartitionError(ValueError):
    pass


@dataclass
class PartitionPlan:
    mode: str
    k: int
    members: list[set[int]]
    loads: list[float]
    edge_assignment: dict[tuple[int, int], int] = field(default_factory=dict)
    cut_edges: int | None = None
    replication_factor: float | None = None

    def member_names(self, g: CallGraph) -> list[list[str]]:
        return [sorted(g.name(v) for v in part) for part in self.members]

    def owner(self) -> dict[int, int]:
        """Vertex to partition map (vertex and random modes)."""
        return {v: p for p, part in enumerate(self.members) for v in part}


@dataclass(frozen=True)
class PlanMetrics:
    cut_edges: int
    replication_factor: float
    load_imbalance: float


def _scores(g: CallGraph, scores: ScoreTable | Sequence[float] | None) -> np.ndarray:
    if scores is None:
        s = np.array([st.score for st in g.stats], dtype=float)
    elif isinstance(scores, ScoreTable):
        s = np.asarray(scores.scores, dtype=float)
    else:
        s = np.asarray(scores, dtype=float)
    if s.shape != (len(g),):
        raise PartitionError(f"expected {len(g)} scores, got {s.shape}")
    if (s < 0).any():
        raise PartitionError("scores must be non-negative")
    if s.sum() <= 0:
        # no score signal at all: fall back to counting functions
        s = np.ones(len(g))
    return s


def _check_k(k: int) -> None:
    if k < 1:
        raise PartitionError(f"k must be >= 1, got {k}")


def count_cut_edges(g: CallGraph, owner: dict[int, int]) -> int:
    return sum(1 for u, v in g.edges if owner[u] != owner[v])


def fennel_stream_order(g: CallGraph, s: np.ndarray) -> list[int]:
    """BFS from the entry over undirected edges, then the rest by score."""
    order = []
    seen = set()
    if len(g):
        queue = deque([g.entry])
        seen.add(g.entry)
        while queue:
            u = queue.popleft()
            order.append(u)
            for w in g.neighbors(u):
                if w not in seen:
                    seen.add(w)
                    queue.append(w)
    rest = [v for v in range(len(g)) if v not in seen]
    rest.sort(key=lambda v: (-s[v], g.name(v)))
    return order + rest


def fennel_partition(
    g: CallGraph,
    scores: ScoreTable | Sequence[float] | None = None,
    k: int = 2,
    gamma: float = FENNEL_GAMMA,
    balance_slack: float = FENNEL_SLACK,
) -> PartitionPlan:
    """One-pass Fennel vertex partitioning with score-weighted loads.

    A vertex joins the partition maximising
    ``|N(v) & P| - alpha * gamma * (load(P) / mean_score) ** (gamma - 1)``,
    skipping partitions that would exceed ``balance_slack * total / k``.
    """
    _check_k(k)
    n = len(g)
    if k > n:
        raise PartitionError(f"k={k} exceeds the number of functions ({n})")
    s = _scores(g, scores)
    total = float(s.sum())
    mean_score = total / n
    alpha = math.sqrt(k) * g.num_edges() / n**gamma
    capacity = balance_slack * total / k

    owner: dict[int, int] = {}
    loads = [0.0] * k
    members: list[set[int]] = [set() for _ in range(k)]
    order = fennel_stream_order(g, s)
    for pos, v in enumerate(order):
        counts = [0] * k
        for w in g.neighbors(v):
            p = owner.get(w)
            if p is not None:
                counts[p] += 1
        empty = [p for p in range(k) if not members[p]]
        if n - pos <= len(empty):
            # only as many vertices left as empty partitions: fill them
            candidates = empty
        else:
            candidates = [p for p in range(k) if loads[p] + s[v] <= capacity]
            if not candidates:
                candidates = [min(range(k), key=lambda p: (loads[p], p))]
        best = max(
            candidates,
            key=lambda p: (counts[p] - alpha * gamma * (loads[p] / mean_score) ** (gamma - 1), -loads[p], -p),
        )
        owner[v] = best
        members[best].add(v)
        loads[best] += float(s[v])

    return PartitionPlan("vertex", k, members, loads, cut_edges=count_cut_edges(g, owner), replication_factor=1.0)


def hdrf_edge_order(g: CallGraph, s: np.ndarray) -> list[tuple[int, int]]:
    return sorted(g.edges, key=lambda e: (-max(s[e[0]], s[e[1]]), g.name(e[0]), g.name(e[1])))


def hdrf_partition(
    g: CallGraph,
    scores: ScoreTable | Sequence[float] | None = None,
    k: int = 2,
    lam: float = HDRF_LAMBDA,
    epsilon: float = HDRF_EPSILON,
) -> PartitionPlan:
    """One-pass HDRF edge partitioning; loads are summed replica scores.

    Isolated functions are dealt round-robin by descending score afterwards.
    """
    _check_k(k)
    s = _scores(g, scores)
    n = len(g)
    degree = [0] * n
    replicas: list[set[int]] = [set() for _ in range(n)]
    members: list[set[int]] = [set() for _ in range(k)]
    loads = [0.0] * k
    assignment: dict[tuple[int, int], int] = {}

    for u, v in hdrf_edge_order(g, s):
        ends = (u,) if u == v else (u, v)
        for w in ends:
            degree[w] += 1
        du, dv = degree[u], degree[v]
        theta = {u: du / (du + dv), v: dv / (du + dv)}
        max_load, min_load = max(loads), min(loads)
        best, best_key = 0, None
        for p in range(k):
            rep = sum(1.0 + (1.0 - theta[w]) for w in ends if p in replicas[w])
            bal = (max_load - loads[p]) / (epsilon + max_load - min_load)
            key = (rep + lam * bal, -loads[p], -p)
            if best_key is None or key > best_key:
                best, best_key = p, key
        assignment[(u, v)] = best
        for w in ends:
            if best not in replicas[w]:
                replicas[w].add(best)
                members[best].add(w)
                loads[best] += float(s[w])

    isolated = [v for v in range(n) if not replicas[v]]
    isolated.sort(key=lambda v: (-s[v], g.name(v)))
    for i, v in enumerate(isolated):
        p = i % k
        members[p].add(v)
        loads[p] += float(s[v])

    repl = sum(len(m) for m in members) / n if n else 1.0
    return PartitionPlan("edge", k, members, loads, edge_assignment=assignment, replication_factor=repl)


def random_partition(
    g: CallGraph,
    k: int = 2,
    rng_seed: int = 0,
    scores: ScoreTable | Sequence[float] | None = None,
) -> PartitionPlan:
    """Entry to partition 0, the rest shuffled and dealt round-robin.

    The entry is added to every allowlist at emission time, so partition
    sizes are balanced over the non-entry functions only.
    """
    _check_k(k)
    if len(g) < 1:
        raise PartitionError("graph is empty")
    s = _scores(g, scores)
    rest = [v for v in range(len(g)) if v != g.entry]
    random.Random(rng_seed).shuffle(rest)
    members: list[set[int]] = [set() for _ in range(k)]
    members[0].add(g.entry)
    for i, v in enumerate(rest):
        members[i % k].add(v)
    loads = [float(sum(s[v] for v in m)) for m in members]
    owner = {v: p for p, m in enumerate(members) for v in m}
    return PartitionPlan("random", k, members, loads, cut_edges=count_cut_edges(g, owner), replication_factor=1.0)


def random_edge_partition(g: CallGraph, k: int, rng_seed: int = 0) -> PartitionPlan:
    """Baseline: each edge to a uniformly random partition."""
    _check_k(k)
    rng = random.Random(rng_seed)
    members: list[set[int]] = [set() for _ in range(k)]
    assignment = {}
    for u, v in g.edges:
        p = rng.randrange(k)
        assignment[(u, v)] = p
        members[p].update((u, v))
    placed = set().union(*members)
    for i, v in enumerate(v for v in range(len(g)) if v not in placed):
        members[i % k].add(v)
    s = _scores(g, None)
    loads = [float(sum(s[v] for v in m)) for m in members]
    repl = sum(len(m) for m in members) / len(g)
    return PartitionPlan("edge", k, members, loads, edge_assignment=assignment, replication_factor=repl)


def partition(g: CallGraph, algo: str, k: int, scores=None, *, gamma=FENNEL_GAMMA, slack=FENNEL_SLACK,
              lam=HDRF_LAMBDA, rng_seed=0) -> PartitionPlan:
    if algo == "fennel":
        return fennel_partition(g, scores, k, gamma, slack)
    if algo == "hdrf":
        return hdrf_partition(g, scores, k, lam)
    if algo == "random":
        return random_partition(g, k, rng_seed, scores)
    raise PartitionError(f"unknown algorithm {algo!r}")


def plan_metrics(plan: PartitionPlan, g: CallGraph) -> PlanMetrics:
    n = len(g)
    if len(plan.members) != plan.k:
        raise PartitionError("plan has the wrong number of partitions")
    for part in plan.members:
        if any(not 0 <= v < n for v in part):
            raise PartitionError("plan references functions missing from the graph")
    if plan.mode == "edge":
        if set(plan.edge_assignment) != set(g.edges):
            raise PartitionError("edge plan does not assign exactly the graph's edges")
        cut = 0
    else:
        owner = plan.owner()
        if len(owner) != n or sum(len(m) for m in plan.members) != n:
            raise PartitionError("vertex plan is not a disjoint cover of the graph")
        cut = count_cut_edges(g, owner)
    repl = sum(len(m) for m in plan.members) / n if n else 1.0
    mean = sum(plan.loads) / plan.k
    imbalance = max(plan.loads) / mean if mean > 0 else 1.0
    return PlanMetrics(cut, repl, imbalance)
