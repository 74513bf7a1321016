import json
import random
import statistics

import pytest

from fuzzpart.coverage import CoverageMap, replay
from fuzzpart.simharness import (
    FIRST_LINE,
    InstanceState,
    SimBackend,
    SimConfig,
    SimError,
    SimProgram,
    SimSeed,
    _binomial,
    campaign_config,
    generate_program,
    record_seed,
    run_comparison,
    run_simulated_campaign,
    seed_trace,
    sim_fuzz_step,
)
from fuzzpart.orchestrator import WorkerTask, run_campaign


def tiny_program(lines=1, difficulty=1.0):
    return SimProgram(["main", "f"], [1, lines], [1.0, difficulty], [[1], []], [[1.0], []])


def root_instance(program, allowed, depth=1, seed=0):
    inst = InstanceState(program, allowed, depth, random.Random(seed))
    root = SimSeed((program.entry,), (FIRST_LINE,))
    inst.accept(root, None)
    return inst


# -- generator ----------------------------------------------------------------


def test_generate_minimum():
    p = generate_program(2, 2.5, 0)
    assert p.names == ["main", "fn_1"] and p.edges == [(0, 1)]


def test_generate_deterministic():
    assert generate_program(80, 2.2, 5).to_document() == generate_program(80, 2.2, 5).to_document()
    assert generate_program(80, 2.2, 5).to_document() != generate_program(80, 2.2, 6).to_document()


@pytest.mark.parametrize("n,exp", [(1, 2.5), (10, 1.5), (10, 4.0)])
def test_generate_rejects_bad_parameters(n, exp):
    with pytest.raises(SimError):
        generate_program(n, exp, 0)


def test_generate_skewed_out_degree():
    for seed in range(10):
        p = generate_program(500, 2.5, seed)
        out = [len(s) for s in p.succ]
        assert max(out) > 10 * statistics.median(out)
        # the plain median is 0 (most functions are leaves); callers alone are still heavily skewed
        assert max(out) > 10 * statistics.median([d for d in out if d])


def test_generated_program_invariants():
    p = generate_program(200, 2.5, 3)
    assert all(5 <= n <= 200 for n in p.lines)
    assert all(0.01 <= d <= 1 for d in p.difficulty)
    assert all(0 < q <= 1 for probs in p.succ_prob for q in probs)
    # every function reachable from the entry
    seen, stack = {p.entry}, [p.entry]
    while stack:
        for v in p.succ[stack.pop()]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    assert len(seen) == len(p)


def test_program_document_roundtrip(tmp_path):
    p = generate_program(30, 2.5, 1)
    path = tmp_path / "program.json"
    p.save(path)
    q = SimProgram.from_document(json.loads(path.read_text()))
    assert q == p


def test_program_validation():
    with pytest.raises(SimError):
        SimProgram(["main"], [1], [0.0], [[]], [[]])
    with pytest.raises(SimError):
        SimProgram(["main", "f"], [1, 1], [1.0, 1.0], [[1], []], [[1.5], []])


def test_static_graph_hides_edges():
    p = generate_program(50, 2.5, 2)
    hidden = p.hidden_edges(0.3, 0)
    g = p.graph(hidden)
    assert g.num_edges() == len(p.edges) - len(hidden)
    assert g.name(g.entry) == "main"
    assert len(p.graph()) == len(p)


# -- mutation model -----------------------------------------------------------


def test_empty_allowlist_never_emits():
    p = generate_program(40, 2.5, 0)
    inst = root_instance(p, frozenset())
    assert all(sim_fuzz_step(p, inst, t) is None for t in range(300))


def test_fresh_easy_function_is_covered():
    p = tiny_program()
    inst = root_instance(p, None)
    child = sim_fuzz_step(p, inst, 1)
    assert child is not None and child.walk == (0, 1) and child.covered()[1] == (0,)


def test_full_coverage_reachable_on_trivial_program():
    p = tiny_program(lines=6, difficulty=1.0)
    inst = root_instance(p, None)
    for t in range(50):
        sim_fuzz_step(p, inst, t)
    assert inst.credited == sum(p.lines)


def test_step_is_deterministic():
    p = generate_program(60, 2.5, 8)
    a, b = root_instance(p, None, seed=3), root_instance(p, None, seed=3)
    for t in range(500):
        x, y = sim_fuzz_step(p, a, t), sim_fuzz_step(p, b, t)
        assert (x is None) == (y is None)
        if x is not None:
            assert (x.walk, x.lines) == (y.walk, y.lines)
    assert a.cmap.bits == b.cmap.bits


def test_binomial_mean():
    rng = random.Random(1)
    draws = [_binomial(rng, 50, 0.2) for _ in range(4000)]
    assert abs(statistics.mean(draws) - 10) < 0.3
    assert _binomial(rng, 7, 1.0) == 7 and _binomial(rng, 7, 0.0) == 0


def mutate(rng, p, parent):
    """Child built like the fuzz step: shared prefix objects, then extension and new lines."""
    cut = rng.randrange(len(parent.walk)) + 1
    walk, lines = list(parent.walk[:cut]), list(parent.lines[:cut])
    cur = walk[-1]
    while p.succ[cur] and rng.random() < 0.7 and len(walk) < 12:
        v = rng.choice(p.succ[cur])
        if v in walk:
            break
        walk.append(v)
        lines.append(FIRST_LINE)
        cur = v
    for i, f in enumerate(walk):
        if rng.random() < 0.3:
            extra = rng.sample(range(p.lines[f]), min(3, p.lines[f]))
            lines[i] = tuple(sorted(set(lines[i]) | set(extra)))
    return SimSeed(tuple(walk), tuple(lines), parent)


@pytest.mark.parametrize("depth", [0, 1, 2, 5])
@pytest.mark.parametrize("restricted", [False, True])
def test_incremental_record_equals_full_replay(depth, restricted):
    p = generate_program(40, 2.5, depth + 10)
    rng = random.Random(depth)
    allowed = frozenset(f for f in range(len(p)) if rng.random() < 0.5) if restricted else None
    names = frozenset(p.names) if allowed is None else frozenset(p.names[f] for f in allowed)
    fast, full = CoverageMap(names, depth), CoverageMap(names, depth)
    root = SimSeed((0,), (FIRST_LINE,))
    assert record_seed(p, fast, allowed, root) == replay(seed_trace(p, root), full).new_bits
    pool = [root]
    for _ in range(600):
        parent = rng.choice(pool)
        child = mutate(rng, p, parent)
        assert record_seed(p, fast, allowed, child, parent) == replay(seed_trace(p, child), full).new_bits
        assert fast.bits == full.bits
        pool.append(child)


def test_seed_trace_shape():
    p = tiny_program(lines=3)
    s = SimSeed((0, 1), ((0,), (0, 2)))
    kinds = [(e.kind, e.function) for e in seed_trace(p, s)]
    assert kinds == [("E", "main"), ("B", "main"), ("E", "f"), ("B", "f"), ("B", "f"), ("X", "f"), ("X", "main")]
    assert s.encode(p) == b"main:0;f:0,2"


# -- backend and campaigns ----------------------------------------------------


def test_backend_isolation_every_tick():
    p = generate_program(80, 2.5, 1)
    backend = SimBackend(p, 3)
    g = p.graph()
    half = frozenset(g.names[: len(g) // 2])
    tasks = [WorkerTask(half, 1), WorkerTask(frozenset(g.names) - half | {"main"}, 1)]
    backend.launch_workers(tasks, backend.initial_corpus())
    for _ in range(200):
        backend.run_for(1)
        for inst, task in zip(backend.workers, tasks):
            assert inst.functions() <= task.allowlist


def test_profile_and_coverage_of_seed():
    p = tiny_program(lines=4)
    backend = SimBackend(p, 0)
    (root,) = backend.initial_corpus()
    assert backend.coverage_of_seed(root) == {"main": (1, 1)}
    assert [e.kind for e in backend.profile_seed(root)] == ["E", "B", "X"]
    assert backend.function_list() == {"main", "f"}


def small_cfg(**kw):
    base = dict(k=3, ticks=3000, interval_ticks=1000, rng_seed=2, sample_every=250)
    base.update(kw)
    return SimConfig(**base)


def test_comparison_is_deterministic():
    p = generate_program(60, 2.5, 9)
    a = run_comparison(p, small_cfg())
    b = run_comparison(p, small_cfg())
    assert a == b


def test_union_monotone_and_bounded():
    p = generate_program(60, 2.5, 9)
    report = run_simulated_campaign(p, small_cfg(), "partitioned")
    series = [u for _, u in report.union_series()]
    assert series == sorted(series)
    assert series[-1] <= sum(p.lines)


def test_single_worker_modes_coincide():
    p = generate_program(60, 2.5, 4)
    rep = run_comparison(p, small_cfg(k=1))
    part, shared = rep.reports["partitioned"], rep.reports["shared"]
    assert part.samples == shared.samples
    assert part.union_series() == shared.union_series()


def test_disjoint_partitions_have_zero_overlap():
    p = generate_program(80, 2.5, 6)
    cfg = small_cfg(hidden_fraction=0.0)
    backend = SimBackend(p, cfg.rng_seed, cfg.sample_every)
    report = run_campaign(campaign_config(p, cfg, "partitioned"), backend, backend.initial_corpus())
    assert all(c.orphans == 0 for c in report.cycles)
    slices = [o.jaccard for o in report.overlap if not o.warmup]
    assert slices and all(j == 0.0 for j in slices)


def test_comparison_report_files(tmp_path):
    p = generate_program(40, 2.5, 2)
    report = run_comparison(p, small_cfg(ticks=1500), out_dir=tmp_path / "runs")
    report.write(tmp_path)
    cov = (tmp_path / "coverage.csv").read_text().splitlines()
    assert cov[0] == "mode,time,union_covered"
    assert {line.split(",")[0] for line in cov[1:]} == {"partitioned", "shared"}
    assert (tmp_path / "overlap.csv").read_text().startswith("mode,cycle,time,warmup,jaccard\n")
    assert (tmp_path / "partitioned" / "cycles.csv").exists()
