import itertools
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuzzpart.callgraph import CallGraph, update_katz
from fuzzpart.partitioning import (
    PartitionError,
    PartitionPlan,
    count_cut_edges,
    fennel_partition,
    fennel_stream_order,
    hdrf_partition,
    partition,
    plan_metrics,
    random_edge_partition,
    random_partition,
)
from fuzzpart.scoring import score


def build(names, edges, entry=None):
    g = CallGraph(entry or names[0])
    for n in names:
        g.add_function(n)
    for u, v in edges:
        g.add_edge(g.index(u), g.index(v))
    return g


def triangles(k):
    names, edges = [], []
    for t in range(k):
        a, b, c = f"t{t}a", f"t{t}b", f"t{t}c"
        names += [a, b, c]
        edges += [(a, b), (b, c), (c, a)]
    return build(names, edges)


def random_graph(rng, n, m):
    names = [f"f{i:03d}" for i in range(n)]
    edges = [(rng.choice(names), rng.choice(names)) for _ in range(m)]
    return build(names, edges)


def replication(g, assignment, k):
    reps = [set() for _ in range(len(g))]
    for (u, v), p in assignment.items():
        reps[u].add(p)
        reps[v].add(p)
    return sum(len(r) for r in reps) / len(g)


# -- Fennel -------------------------------------------------------------------


def test_fennel_two_triangles_matches_brute_force():
    g = triangles(2)
    s = [1.0] * 6
    plan = fennel_partition(g, s, 2)
    # enumerate all 2^6 vertex assignments; the zero-cut balanced ones are the two whole-triangle splits
    best = []
    for assign in itertools.product(range(2), repeat=6):
        owner = dict(enumerate(assign))
        sizes = [assign.count(p) for p in range(2)]
        if count_cut_edges(g, owner) == 0 and sizes == [3, 3]:
            best.append({frozenset(v for v in range(6) if assign[v] == p) for p in range(2)})
    assert len(best) == 2
    assert {frozenset(m) for m in plan.members} in best
    assert plan.cut_edges == 0


@pytest.mark.parametrize("k", [2, 3, 5])
def test_fennel_disconnected_components_zero_cut(k):
    plan = fennel_partition(triangles(k), [1.0] * (3 * k), k)
    assert plan.cut_edges == 0
    assert sorted(len(m) for m in plan.members) == [3] * k


def test_fennel_k1():
    g = triangles(2)
    plan = fennel_partition(g, None, 1)
    assert plan.members == [set(range(6))] and plan.cut_edges == 0


def test_fennel_star_respects_capacity():
    names = ["c"] + [f"l{i}" for i in range(8)]
    g = build(names, [("c", n) for n in names[1:]])
    s = [4.0] + [1.0] * 8
    plan = fennel_partition(g, s, 2, balance_slack=1.1)
    total, cap = sum(s), 1.1 * sum(s) / 2
    # brute force: the capacity bound is attainable by some 2-partition
    feasible = [
        a for a in itertools.product(range(2), repeat=9)
        if all(sum(s[v] for v in range(9) if a[v] == p) <= cap + max(s) for p in range(2))
    ]
    assert feasible
    assert all(load <= cap + max(s) for load in plan.loads)
    assert all(plan.members)
    assert sum(plan.loads) == total


def test_fennel_errors():
    g = triangles(1)
    with pytest.raises(PartitionError):
        fennel_partition(g, None, 0)
    with pytest.raises(PartitionError):
        fennel_partition(g, None, 4)


def test_fennel_stream_order_bfs_then_score():
    g = build(["main", "a", "b", "x", "y"], [("main", "a"), ("b", "main"), ("x", "y")])
    order = fennel_stream_order(g, np.array([0.1, 0.1, 0.1, 0.2, 0.5]))
    assert [g.name(v) for v in order] == ["main", "a", "b", "y", "x"]


def test_fennel_fills_empty_partitions():
    # a chain streamed in BFS order would otherwise pile into one partition
    names = [f"v{i}" for i in range(4)]
    g = build(names, list(zip(names, names[1:])))
    plan = fennel_partition(g, [1.0] * 4, 4)
    assert all(len(m) == 1 for m in plan.members)


def test_zero_scores_fall_back_to_unit_loads():
    plan = fennel_partition(triangles(2), [0.0] * 6, 2)
    assert plan.loads == [3.0, 3.0]


# -- HDRF ---------------------------------------------------------------------


def test_hdrf_single_edge():
    plan = hdrf_partition(build(["a", "b"], [("a", "b")]), None, 2)
    assert plan.replication_factor == 1.0
    assert list(plan.edge_assignment.values()) in ([0], [1])


def test_hdrf_two_triangles_matches_brute_force():
    g = triangles(2)
    edges = g.edges
    best = min(replication(g, dict(zip(edges, a)), 2) for a in itertools.product(range(2), repeat=len(edges)))
    assert best == 1.0
    plan = hdrf_partition(g, [1.0] * 6, 2, lam=1.1)
    assert plan.replication_factor == 1.0
    assert sorted(len(m) for m in plan.members) == [3, 3]


@pytest.mark.parametrize("k", [2, 3, 5])
def test_hdrf_disconnected_cliques(k):
    assert hdrf_partition(triangles(k), [1.0] * (3 * k), k).replication_factor == 1.0


def test_hdrf_path_exhaustive_and_lambda():
    g = build(["a", "b", "c"], [("a", "b"), ("b", "c")])
    # both possible assignment shapes: together (1.0) or split (4/3)
    outcomes = {replication(g, dict(zip(g.edges, a)), 2) for a in itertools.product(range(2), repeat=2)}
    assert outcomes == {1.0, 4 / 3}
    # lambda = 1.1: second edge on p0 scores C_REP = 1 + (1 - 2/3) = 4/3 against 1.1 * C_BAL = 1.1 on p1
    assert hdrf_partition(g, [1.0] * 3, 2, lam=1.1).replication_factor == 1.0
    # a strong balance term splits the path and replicates b
    plan = hdrf_partition(g, [1.0] * 3, 2, lam=5.0)
    assert plan.replication_factor == pytest.approx(4 / 3)
    assert all(g.index("b") in m for m in plan.members)


def test_hdrf_isolated_vertices_round_robin():
    g = build(["a", "b", "x", "y", "z"], [("a", "b")])
    plan = hdrf_partition(g, [1.0, 1.0, 0.3, 0.9, 0.5], 2)
    idx = g.index
    # isolated by descending score: y, z, x
    assert idx("y") in plan.members[0] and idx("z") in plan.members[1] and idx("x") in plan.members[0]


def test_hdrf_k0():
    with pytest.raises(PartitionError):
        hdrf_partition(triangles(1), None, 0)


# -- random -------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 7, 123])
def test_random_sizes_nine_functions(seed):
    g = build(["main"] + [f"f{i}" for i in range(8)], [])
    plan = random_partition(g, 2, seed)
    sizes = sorted(len(m - {g.entry}) for m in plan.members)
    assert sizes == [4, 4]
    assert g.entry in plan.members[0]


def test_random_k1_and_determinism():
    g = triangles(3)
    assert random_partition(g, 1, 5).members == [set(range(9))]
    assert random_partition(g, 3, 5) == random_partition(g, 3, 5)
    with pytest.raises(PartitionError):
        random_partition(g, 0, 5)


def test_random_edge_partition_covers_edges():
    g = random_graph(random.Random(1), 30, 60)
    plan = random_edge_partition(g, 3, 4)
    assert set(plan.edge_assignment) == set(g.edges)
    assert plan.replication_factor >= 1


# -- metrics ------------------------------------------------------------------


def test_metrics_single_partition():
    g = triangles(1)
    m = plan_metrics(fennel_partition(g, None, 1), g)
    assert (m.cut_edges, m.load_imbalance) == (0, 1.0)


def test_metrics_cut_counted_once():
    g = build(["a", "b"], [("a", "b"), ("b", "a")])
    plan = PartitionPlan("vertex", 2, [{0}, {1}], [1.0, 1.0])
    assert plan_metrics(plan, g).cut_edges == 2
    g2 = build(["a", "b"], [("a", "b")])
    assert plan_metrics(PartitionPlan("vertex", 2, [{0}, {1}], [1.0, 1.0]), g2).cut_edges == 1


def test_metrics_full_replication():
    g = build(["a", "b", "c"], [("a", "b"), ("b", "c")])
    plan = PartitionPlan("edge", 3, [{0, 1, 2}] * 3, [3.0] * 3, edge_assignment={(0, 1): 0, (1, 2): 1})
    assert plan_metrics(plan, g).replication_factor == 3.0


def test_metrics_rejects_inconsistent_plans():
    g = triangles(1)
    with pytest.raises(PartitionError):
        plan_metrics(PartitionPlan("vertex", 2, [{0}, {1}], [1.0, 1.0]), g)
    with pytest.raises(PartitionError):
        plan_metrics(PartitionPlan("vertex", 1, [{0, 1, 2, 9}], [1.0]), g)
    with pytest.raises(PartitionError):
        plan_metrics(PartitionPlan("edge", 1, [{0, 1, 2}], [1.0], edge_assignment={}), g)


def test_dispatch():
    g = triangles(2)
    assert partition(g, "fennel", 2).mode == "vertex"
    assert partition(g, "hdrf", 2).mode == "edge"
    assert partition(g, "random", 2, rng_seed=3).mode == "random"
    with pytest.raises(PartitionError):
        partition(g, "metis", 2)


# -- properties ---------------------------------------------------------------


@st.composite
def graphs(draw):
    n = draw(st.integers(1, 40))
    edges = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=80))
    g = build([f"f{i:02d}" for i in range(n)], [(f"f{u:02d}", f"f{v:02d}") for u, v in edges])
    scores = draw(st.lists(st.floats(0, 1, allow_nan=False), min_size=n, max_size=n))
    return g, scores


@settings(max_examples=60, deadline=None)
@given(graphs(), st.sampled_from([1, 2, 3, 5]))
def test_partition_invariants(gs, k):
    g, s = gs
    n = len(g)
    if n >= k:
        plan = fennel_partition(g, s, k)
        assert set().union(*plan.members) == set(range(n))
        assert sum(len(m) for m in plan.members) == n
        assert all(plan.members)
        eff = s if sum(s) > 0 else [1.0] * n
        cap = 1.1 * sum(eff) / k + max(eff)
        assert all(load <= cap + 1e-9 for load in plan.loads)
        for m, load in zip(plan.members, plan.loads):
            assert load == pytest.approx(sum(eff[v] for v in m))
        assert plan == fennel_partition(g, s, k)
    hp = hdrf_partition(g, s, k)
    assert set(hp.edge_assignment) == set(g.edges)
    assert set().union(*hp.members) == set(range(n))
    assert hp.replication_factor >= 1
    for (u, v), p in hp.edge_assignment.items():
        assert u in hp.members[p] and v in hp.members[p]
    assert hp == hdrf_partition(g, s, k)
    rp = random_partition(g, k, 9)
    sizes = [len(m - {g.entry}) for m in rp.members]
    assert max(sizes) - min(sizes) <= 1


def test_scored_graph_end_to_end():
    g = random_graph(random.Random(2), 50, 90)
    update_katz(g)
    table = score(g)
    for algo in ("fennel", "hdrf", "random"):
        plan = partition(g, algo, 3, table)
        metrics = plan_metrics(plan, g)
        assert metrics.replication_factor >= 1 and metrics.load_imbalance >= 1
