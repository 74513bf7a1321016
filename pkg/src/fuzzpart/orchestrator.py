"""Periodic stop-the-world repartitioning loop over a pluggable fuzzing backend.

After a warmup with full instrumentation, every interval the workers are
stopped, seeds not yet profiled refine the call graph and coverage stats,
functions are rescored and repartitioned, one allowlist per partition is
written and the workers are relaunched on the whole global queue.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import logging
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

from .callgraph import CallGraph, append_orphans, load_graph, merge_dynamic_edges, partition_subgraph, update_katz
from .coverage import ExecutionTrace, call_edges, compute_context_depth
from .partitioning import (
    FENNEL_GAMMA,
    FENNEL_SLACK,
    HDRF_LAMBDA,
    PartitionPlan,
    partition,
    plan_metrics,
)
from .scoring import EPSILON, score

log = logging.getLogger(__name__)


class CampaignError(Exception):
    pass


class BackendError(Exception):
    pass


@dataclass(frozen=True)
class Seed:
    data: bytes
    timestamp: int
    parent: str | None = None

    @cached_property
    def id(self) -> str:
        return hashlib.sha256(self.data).hexdigest()[:16]


@dataclass(frozen=True)
class WorkerTask:
    """What one worker instruments; ``allowlist=None`` means everything."""

    allowlist: frozenset[str] | None
    context_depth: int = 1
    path: Path | None = None


@dataclass(frozen=True)
class CoverageSample:
    time: int
    instance: int
    covered: int
    union: int


class FuzzBackend(ABC):
    """Launches workers and answers profiling/coverage queries about seeds."""

    @abstractmethod
    def launch_workers(self, tasks: Sequence[WorkerTask], corpus: Sequence[Seed]) -> None: ...

    @abstractmethod
    def terminate_workers(self) -> None: ...

    @abstractmethod
    def run_for(self, duration: int) -> None:
        """Let live workers fuzz for ``duration`` time units."""

    @abstractmethod
    def now(self) -> int: ...

    @abstractmethod
    def collect_new_seeds(self) -> list[Seed]:
        """Seeds found since the previous call; never retracts a seed."""

    @abstractmethod
    def profile_seed(self, seed: Seed) -> ExecutionTrace: ...

    @abstractmethod
    def coverage_of_seed(self, seed: Seed) -> dict[str, tuple[int, int]]:
        """Per-function ``(covered_lines, total_lines)``."""

    def function_list(self) -> set[str]:
        return set()

    def coverage_samples(self) -> list[CoverageSample]:
        return []

    def instance_functions(self) -> list[set[str]]:
        """Functions each live worker has credited coverage in (empty if unknown)."""
        return []


@dataclass
class CampaignConfig:
    k_total: int = 5
    interval: int = 7200
    warmup: int = 3600
    duration: int = 86400
    algo: str = "fennel"
    mode: str = "partitioned"  # or "shared"
    gamma: float = FENNEL_GAMMA
    slack: float = FENNEL_SLACK
    lam: float = HDRF_LAMBDA
    epsilon: float = EPSILON
    rng_seed: int = 0
    graph: CallGraph | None = None
    graph_path: Path | None = None
    out_dir: Path | None = None

    def __post_init__(self) -> None:
        if self.k_total < 2:
            raise CampaignError("k_total must be >= 2 (one monitor plus at least one worker)")
        if self.interval <= 0:
            raise CampaignError("interval must be positive")
        if self.mode not in ("partitioned", "shared"):
            raise CampaignError(f"unknown mode {self.mode!r}")


@dataclass
class CampaignState:
    graph: CallGraph
    global_queue: dict[str, Seed] = field(default_factory=dict)
    done_queue: set[str] = field(default_factory=set)
    cycle: int = 0
    orphans: set[int] = field(default_factory=set)
    current_plan: PartitionPlan | None = None
    scoring_seconds: float = 0.0

    def ordered_queue(self) -> list[Seed]:
        return sorted(self.global_queue.values(), key=lambda s: (s.timestamp, s.id))


@dataclass
class CycleRecord:
    cycle: int
    time: int
    new_seeds: int
    functions: int
    edges: int
    orphans: int
    k: int
    cut_edges: int
    replication_factor: float
    load_imbalance: float
    context_depths: tuple[int, ...]


@dataclass
class CycleTiming:
    cycle: int
    repartition_seconds: float
    partition_seconds: float


@dataclass
class OverlapSample:
    cycle: int
    time: int
    warmup: bool
    jaccard: float | None


@dataclass
class CampaignReport:
    samples: list[CoverageSample]
    cycles: list[CycleRecord]
    overlap: list[OverlapSample]
    done_queue: frozenset[str]
    queue_size: int
    timings: list[CycleTiming] = field(default_factory=list, compare=False)
    wall_seconds: float = field(default=0.0, compare=False)

    @property
    def partition_seconds(self) -> float:
        return sum(t.partition_seconds for t in self.timings)

    @property
    def repartition_seconds(self) -> float:
        return sum(t.repartition_seconds for t in self.timings)

    def union_series(self) -> list[tuple[int, int]]:
        series = {}
        for s in self.samples:
            series[s.time] = s.union
        return sorted(series.items())

    def final_union(self) -> int:
        return self.samples[-1].union if self.samples else 0

    def mean_overlap(self) -> float | None:
        vals = [o.jaccard for o in self.overlap if not o.warmup and o.jaccard is not None]
        return sum(vals) / len(vals) if vals else None

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "coverage.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "instance", "branches_or_lines_covered", "union_covered"])
            for s in self.samples:
                w.writerow([s.time, s.instance, s.covered, s.union])
        with open(out / "cycles.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cycle", "time", "new_seeds", "functions", "edges", "orphans", "k",
                        "cut_edges", "replication_factor", "load_imbalance", "context_depths"])
            for c in self.cycles:
                w.writerow([c.cycle, c.time, c.new_seeds, c.functions, c.edges, c.orphans, c.k, c.cut_edges,
                            f"{c.replication_factor:.9g}", f"{c.load_imbalance:.9g}",
                            " ".join(map(str, c.context_depths))])
        with open(out / "overlap.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cycle", "time", "warmup", "jaccard"])
            for o in self.overlap:
                w.writerow([o.cycle, o.time, int(o.warmup), "" if o.jaccard is None else f"{o.jaccard:.9g}"])
        # wall-clock numbers vary run to run; kept apart from the reproducible files
        with open(out / "timing.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cycle", "repartition_seconds", "partition_seconds"])
            for t in self.timings:
                w.writerow([t.cycle, f"{t.repartition_seconds:.9g}", f"{t.partition_seconds:.9g}"])
            w.writerow(["total", f"{self.wall_seconds:.9g}", f"{self.partition_seconds:.9g}"])


# -- allowlists -------------------------------------------------------------


def format_allowlist(names: Iterable[str]) -> str:
    return "".join(f"fun: {name}\n" for name in sorted(set(names)))


def parse_allowlist(text: str) -> set[str]:
    names = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.startswith("fun: ") or len(line) == 5 or line != line.rstrip():
            raise ValueError(f"line {lineno}: expected 'fun: <name>'")
        names.add(line[5:])
    return names


def read_allowlist(path: str | Path) -> set[str]:
    return parse_allowlist(Path(path).read_text(encoding="utf-8"))


def allowlist_sets(plan: PartitionPlan, orphans: Iterable[int], entry: int, g: CallGraph) -> list[frozenset[str]]:
    extra = {g.name(v) for v in orphans} | {g.name(entry)}
    return [frozenset(g.name(v) for v in part) | extra for part in plan.members]


def emit_allowlists(
    plan: PartitionPlan, orphans: Iterable[int], entry: int, out_dir: str | Path, g: CallGraph
) -> list[Path]:
    """Write ``partition_XX.txt`` per partition: members, orphans and the entry."""
    out = Path(out_dir)
    paths = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for p, names in enumerate(allowlist_sets(plan, orphans, entry, g)):
            path = out / f"partition_{p:02d}.txt"
            path.write_text(format_allowlist(names), encoding="utf-8")
            paths.append(path)
    except OSError as exc:
        raise CampaignError(f"cannot write allowlist under {out}: {exc}") from exc
    return paths


# -- loop steps -------------------------------------------------------------


def sync_seeds(state: CampaignState, backend: FuzzBackend) -> list[Seed]:
    """Merge backend-reported seeds into the global queue, deduplicated by content."""
    added = []
    for seed in backend.collect_new_seeds():
        try:
            sid = seed.id
        except Exception as exc:  # unreadable seed
            log.warning("skipping unreadable seed: %s", exc)
            continue
        if sid not in state.global_queue:
            state.global_queue[sid] = seed
            added.append(seed)
    return added


def update_graph(state: CampaignState, backend: FuzzBackend, new_seeds: Sequence[Seed], epsilon: float = EPSILON) -> CallGraph:
    """Fold new seeds' call edges and coverage into the graph, then rescore."""
    g = state.graph
    previous = [st.lines_covered_cur for st in g.stats]
    for seed in new_seeds:
        try:
            trace = backend.profile_seed(seed)
            cov = backend.coverage_of_seed(seed)
        except BackendError as exc:
            log.warning("skipping seed %s: %s", seed.id, exc)
            continue
        merge_dynamic_edges(g, call_edges(trace))
        for name, (covered, total) in sorted(cov.items()):
            idx, _ = g.add_function(name)
            st = g.stats[idx]
            st.lines_covered_cur = max(st.lines_covered_cur, covered)
            st.lines_total = max(st.lines_total, total, st.lines_covered_cur)
    for idx, st in enumerate(g.stats):
        pre = previous[idx] if idx < len(previous) else 0
        st.lines_covered_pre = pre
        st.stagnation_cycles = 0 if st.lines_covered_cur > pre else st.stagnation_cycles + 1

    fresh = append_orphans(g, backend.function_list())
    still_isolated = {v for v in state.orphans if g.degree(v) == 0}
    state.orphans = {v for v in fresh | still_isolated if v != g.entry}

    t0 = time.perf_counter()
    update_katz(g)
    score(g, epsilon)
    state.scoring_seconds = time.perf_counter() - t0
    return g


def _tasks_for_plan(plan: PartitionPlan, state: CampaignState, workers: int, paths: Sequence[Path] | None) -> list[WorkerTask]:
    g = state.graph
    lists = allowlist_sets(plan, state.orphans, g.entry, g)
    depths = [compute_context_depth(partition_subgraph(g, m)) for m in plan.members]
    tasks = []
    for w in range(workers):
        p = w % plan.k
        tasks.append(WorkerTask(lists[p], depths[p], paths[p] if paths else None))
    return tasks


def _shared_tasks(g: CallGraph, workers: int) -> list[WorkerTask]:
    depth = compute_context_depth(g)
    names = frozenset(g.names)
    return [WorkerTask(names, depth) for _ in range(workers)]


def mean_jaccard(sets: Sequence[set[str]], exclude: Iterable[str] = ()) -> float | None:
    skip = set(exclude)
    clean = [s - skip for s in sets]
    if len(clean) < 2:
        return None
    vals = []
    for a, b in itertools.combinations(clean, 2):
        union = a | b
        vals.append(len(a & b) / len(union) if union else 0.0)
    return sum(vals) / len(vals)


def run_campaign(config: CampaignConfig, backend: FuzzBackend, initial_corpus: Sequence[Seed]) -> CampaignReport:
    started = time.perf_counter()
    if config.graph is not None:
        graph = config.graph.copy()
    elif config.graph_path is not None:
        graph = load_graph(config.graph_path)
    else:
        raise CampaignError("no call graph configured")
    if not initial_corpus:
        raise CampaignError("initial corpus is empty")

    state = CampaignState(graph)
    for seed in initial_corpus:
        state.global_queue.setdefault(seed.id, seed)
    workers = config.k_total - 1
    entry_name = graph.name(graph.entry)
    allow_dir = Path(config.out_dir) / "allowlists" if config.out_dir else None

    cycles: list[CycleRecord] = []
    timings: list[CycleTiming] = []
    overlap: list[OverlapSample] = []
    samples: list[CoverageSample] = []

    def launch(tasks: list[WorkerTask]) -> None:
        try:
            backend.launch_workers(tasks, state.ordered_queue())
        except BackendError as exc:
            raise CampaignError(f"worker launch failed: {exc}") from exc

    def fuzz(until: int, warm: bool) -> None:
        backend.run_for(max(0, until - backend.now()))
        samples.extend(backend.coverage_samples())
        inst = backend.instance_functions()
        overlap.append(OverlapSample(state.cycle, backend.now(), warm,
                                     mean_jaccard(inst, exclude=[entry_name]) if inst else None))

    launch(_shared_tasks(graph, workers))
    fuzz(min(config.warmup, config.duration), True)

    while backend.now() < config.duration:
        t_cycle = time.perf_counter()
        state.cycle += 1
        backend.terminate_workers()
        sync_seeds(state, backend)
        new_seeds = [s for s in state.ordered_queue() if s.id not in state.done_queue]
        update_graph(state, backend, new_seeds, config.epsilon)
        state.done_queue.update(s.id for s in new_seeds)

        t_part = time.perf_counter()
        g = state.graph
        if config.mode == "shared":
            plan = partition(g, "random", 1)
            tasks = _shared_tasks(g, workers)
        else:
            k = workers
            if config.algo == "fennel" and k > len(g):
                log.warning("only %d functions for %d workers; using k=%d", len(g), k, len(g))
                k = len(g)
            plan = partition(g, config.algo, k, gamma=config.gamma, slack=config.slack,
                             lam=config.lam, rng_seed=config.rng_seed + state.cycle)
            paths = None
            if allow_dir is not None:
                paths = emit_allowlists(plan, state.orphans, g.entry, allow_dir / f"cycle_{state.cycle:03d}", g)
            tasks = _tasks_for_plan(plan, state, workers, paths)
        state.current_plan = plan
        partition_seconds = time.perf_counter() - t_part + state.scoring_seconds

        metrics = plan_metrics(plan, g)
        cycles.append(CycleRecord(
            state.cycle, backend.now(), len(new_seeds), len(g), g.num_edges(), len(state.orphans), plan.k,
            metrics.cut_edges, metrics.replication_factor, metrics.load_imbalance,
            tuple(t.context_depth for t in tasks),
        ))
        launch(tasks)
        timings.append(CycleTiming(state.cycle, time.perf_counter() - t_cycle, partition_seconds))
        fuzz(min(backend.now() + config.interval, config.duration), False)

    backend.terminate_workers()
    sync_seeds(state, backend)
    report = CampaignReport(samples, cycles, overlap, frozenset(state.done_queue), len(state.global_queue),
                            timings, time.perf_counter() - started)
    if config.out_dir is not None:
        report.write(config.out_dir)
    return report
