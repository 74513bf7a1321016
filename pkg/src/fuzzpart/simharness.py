"""Deterministic desk-scale stand-in for a parallel fuzzing campaign.

A synthetic program is a power-law call graph where each function has a
number of lines and a discovery difficulty. An execution is a call chain
(a simple path from the entry); it covers the first line of every function
it enters plus whatever lines earlier mutations discovered there. One tick is
one mutation per live worker.

Seeds are kept only when they set new bits in the worker's partition-restricted
coverage map. A child seed differs from its parent (already recorded in the
same map) in a few visits only, so :func:`record_seed` checks just those
transitions; ``tests/test_simharness.py`` pins it against a full
:func:`fuzzpart.coverage.replay` of the synthesised trace.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .callgraph import CallGraph
from .coverage import MAP_MASK, CoverageMap, TraceEvent, fnv1a_64, function_hash
from .orchestrator import (
    CampaignConfig,
    CampaignReport,
    CoverageSample,
    FuzzBackend,
    Seed,
    WorkerTask,
    run_campaign,
)

DECAY_RATE = 3.0
MAX_WALK = 24
LINES_RANGE = (5, 200)
DIFFICULTY_RANGE = (0.01, 1.0)
EDGE_PROB_RANGE = (0.2, 1.0)
FIRST_LINE = (0,)


class SimError(ValueError):
    pass


@dataclass
class SimProgram:
    names: list[str]
    lines: list[int]
    difficulty: list[float]
    succ: list[list[int]]
    succ_prob: list[list[float]]
    entry: int = 0
    _blocks: list[list[int]] | None = field(default=None, repr=False, compare=False)
    _fhash: list[int] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        for d in self.difficulty:
            if not 0 < d <= 1:
                raise SimError("difficulty must lie in (0, 1]")
        for probs in self.succ_prob:
            if any(not 0 < p <= 1 for p in probs):
                raise SimError("edge traversal probability must lie in (0, 1]")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(u, v) for u, vs in enumerate(self.succ) for v in vs]

    @property
    def blocks(self) -> list[list[int]]:
        """16-bit block id of every line, derived from ``name:line``."""
        if self._blocks is None:
            self._blocks = [
                [fnv1a_64(f"{name}:{ln}".encode()) & MAP_MASK for ln in range(n)]
                for name, n in zip(self.names, self.lines)
            ]
        return self._blocks

    @property
    def fhash(self) -> list[int]:
        if self._fhash is None:
            self._fhash = [function_hash(n) for n in self.names]
        return self._fhash

    def graph(self, hidden: Iterable[tuple[int, int]] = ()) -> CallGraph:
        """Call graph as a static extractor would see it, minus ``hidden`` edges.

        Functions with no remaining edge (other than the entry) are left out,
        as if the extractor never saw them.
        """
        drop = set(hidden)
        kept = [e for e in self.edges if e not in drop]
        present = {self.entry} | {u for e in kept for u in e}
        g = CallGraph()
        for i in sorted(present):
            g.add_function(self.names[i], self.lines[i])
        g.entry = g.index(self.names[self.entry])
        for u, v in kept:
            g.add_edge(g.index(self.names[u]), g.index(self.names[v]))
        return g

    def hidden_edges(self, fraction: float, rng_seed: int) -> list[tuple[int, int]]:
        """Edges an imprecise static analysis would miss (indirect calls)."""
        rng = random.Random(rng_seed)
        return [e for e in self.edges if rng.random() < fraction]

    def to_document(self) -> dict:
        return {
            "entry": self.names[self.entry],
            "functions": [
                {"name": n, "lines": ln, "difficulty": d}
                for n, ln, d in zip(self.names, self.lines, self.difficulty)
            ],
            "edges": [[self.names[u], self.names[v]] for u, v in self.edges],
            "edge_prob": [p for probs in self.succ_prob for p in probs],
        }

    @classmethod
    def from_document(cls, doc: dict) -> SimProgram:
        names = [f["name"] for f in doc["functions"]]
        index = {n: i for i, n in enumerate(names)}
        succ: list[list[int]] = [[] for _ in names]
        succ_prob: list[list[float]] = [[] for _ in names]
        probs = doc.get("edge_prob") or [0.5] * len(doc["edges"])
        for (u, v), p in zip(doc["edges"], probs):
            succ[index[u]].append(index[v])
            succ_prob[index[u]].append(float(p))
        return cls(
            names,
            [int(f.get("lines", 1)) or 1 for f in doc["functions"]],
            [float(f.get("difficulty", 0.5)) for f in doc["functions"]],
            succ,
            succ_prob,
            index[doc["entry"]],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_document(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def generate_program(n_functions: int, power_law_exponent: float = 2.5, rng_seed: int = 0) -> SimProgram:
    """Preferential-attachment call graph rooted at ``main``.

    Every new function gets one caller chosen with probability proportional
    to ``out_degree + (exponent - 2)`` (Price's model, giving an out-degree
    tail ``~ d^-exponent``); a further ``n // 4`` extra calls are added the
    same way towards random callees. All functions are reachable from main.
    """
    if n_functions < 2:
        raise SimError("need at least two functions")
    if not 2.0 <= power_law_exponent <= 3.5:
        raise SimError("power-law exponent must lie in [2, 3.5]")
    rng = random.Random(rng_seed)
    smoothing = max(power_law_exponent - 2.0, 0.05)
    width = len(str(n_functions - 1))
    names = ["main"] + [f"fn_{i:0{width}d}" for i in range(1, n_functions)]
    succ: list[list[int]] = [[] for _ in range(n_functions)]
    weights = [smoothing] * n_functions  # out_degree + smoothing, per node

    def pick_caller(limit: int) -> int:
        return rng.choices(range(limit), weights=weights[:limit])[0]

    for v in range(1, n_functions):
        u = pick_caller(v) if v > 1 else 0
        succ[u].append(v)
        weights[u] += 1.0
    for _ in range(n_functions // 4):
        u = pick_caller(n_functions)
        v = rng.randrange(1, n_functions)
        if v != u and v not in succ[u]:
            succ[u].append(v)
            weights[u] += 1.0

    lo, hi = DIFFICULTY_RANGE
    lines = [rng.randint(*LINES_RANGE) for _ in range(n_functions)]
    difficulty = [math.exp(rng.uniform(math.log(lo), math.log(hi))) for _ in range(n_functions)]
    succ_prob = [[rng.uniform(*EDGE_PROB_RANGE) for _ in vs] for vs in succ]
    return SimProgram(names, lines, difficulty, succ, succ_prob)


@dataclass(frozen=True, eq=False)
class SimSeed:
    """A call chain plus, per visited function, the sorted covered line ids."""

    walk: tuple[int, ...]
    lines: tuple[tuple[int, ...], ...]
    parent: SimSeed | None = None
    time: int = 0

    def encode(self, program: SimProgram) -> bytes:
        parts = [f"{program.names[f]}:{','.join(map(str, ls))}" for f, ls in zip(self.walk, self.lines)]
        return ";".join(parts).encode()

    def covered(self) -> dict[int, tuple[int, ...]]:
        return dict(zip(self.walk, self.lines))


def seed_trace(program: SimProgram, seed: SimSeed) -> list[TraceEvent]:
    """Enter/block/exit events of the seed's execution."""
    events = []
    blocks = program.blocks
    for f, ls in zip(seed.walk, seed.lines):
        name = program.names[f]
        events.append(TraceEvent("E", name))
        events.extend(TraceEvent("B", name, blocks[f][ln]) for ln in ls)
    for f in reversed(seed.walk):
        events.append(TraceEvent("X", program.names[f]))
    return events


def record_seed(program: SimProgram, cmap: CoverageMap, allowed: frozenset[int] | None,
                seed: SimSeed, parent: SimSeed | None = None) -> int:
    """Set the seed's map bits; returns the number of newly set bits.

    ``parent`` must already be fully recorded in ``cmap``: transitions the
    child shares with it are skipped.
    """
    bits = cmap.bits
    depth = cmap.context_depth
    blocks = program.blocks
    fh = program.fhash
    walk, lines = seed.walk, seed.lines
    if parent is not None:
        pwalk, plines = parent.walk, parent.lines
        same = True
    else:
        pwalk, plines = (), ()
        same = False
    prev = pprev = 0
    ctx = 0
    new = 0
    for i, f in enumerate(walk):
        if depth > 0:
            ctx ^= fh[f]
            if i >= depth:
                ctx ^= fh[walk[i - depth]]
        if same and (i >= len(pwalk) or pwalk[i] != f):
            same = False
        if allowed is not None and f not in allowed:
            continue
        ls = lines[i]
        bl = blocks[f]
        if same and ls is plines[i]:
            if prev != pprev:
                idx = (bl[ls[0]] ^ (prev >> 1) ^ ctx) & MAP_MASK
                if not bits[idx]:
                    bits[idx] = 1
                    new += 1
            prev = pprev = bl[ls[-1]]
            continue
        if same:
            pprev = bl[plines[i][-1]]
        for ln in ls:
            b = bl[ln]
            idx = (b ^ (prev >> 1) ^ ctx) & MAP_MASK
            if not bits[idx]:
                bits[idx] = 1
                new += 1
            prev = b
    return new


def _binomial(rng: random.Random, n: int, p: float) -> int:
    """Successes in ``n`` Bernoulli(p) trials, by geometric skipping."""
    if p >= 1.0:
        return n
    if p <= 0.0 or n <= 0:
        return 0
    log_q = math.log1p(-p)
    pos = 0
    k = 0
    while True:
        pos += int(math.log(1.0 - rng.random()) / log_q) + 1
        if pos > n:
            return k
        k += 1


class InstanceState:
    """One fuzzing worker: its map, retained queue and credited coverage."""

    def __init__(self, program: SimProgram, allowed: frozenset[int] | None, context_depth: int, rng: random.Random):
        self.program = program
        self.allowed = allowed
        names = frozenset(program.names) if allowed is None else frozenset(program.names[f] for f in allowed)
        self.cmap = CoverageMap(names, context_depth)
        self.rng = rng
        self.queue: list[SimSeed] = []
        self.found: list[SimSeed] = []
        self.covered: dict[int, set[int]] = {}
        self._uncovered: dict[int, list[int]] = {}
        self._slot: dict[int, dict[int, int]] = {}
        self.credited = 0

    def allows(self, f: int) -> bool:
        return self.allowed is None or f in self.allowed

    def _ensure(self, f: int) -> None:
        if f not in self.covered:
            self.covered[f] = set()
            self._uncovered[f] = list(range(self.program.lines[f]))
            self._slot[f] = {ln: i for i, ln in enumerate(self._uncovered[f])}

    def credit(self, f: int, lines: Iterable[int]) -> None:
        self._ensure(f)
        cov, unc, slot = self.covered[f], self._uncovered[f], self._slot[f]
        for ln in lines:
            if ln in cov:
                continue
            cov.add(ln)
            i = slot.pop(ln)
            last = unc.pop()
            if i < len(unc):
                unc[i] = last
                slot[last] = i
            self.credited += 1

    def accept(self, seed: SimSeed, parent: SimSeed | None) -> bool:
        """Record ``seed``; on new bits, retain it and credit its lines."""
        if record_seed(self.program, self.cmap, self.allowed, seed, parent) == 0:
            return False
        self.queue.append(seed)
        pl = parent.lines if parent is not None else ()
        for i, (f, ls) in enumerate(zip(seed.walk, seed.lines)):
            if self.allows(f) and (i >= len(pl) or ls is not pl[i]):
                self.credit(f, ls)
        return True

    def functions(self) -> set[str]:
        return {self.program.names[f] for f, cov in self.covered.items() if cov}

    def copy_progress(self, other: InstanceState) -> None:
        """Take over ``other``'s map, queue and credited lines (same allowlist and depth)."""
        self.cmap.bits[:] = other.cmap.bits
        self.queue = list(other.queue)
        self.covered = {f: set(c) for f, c in other.covered.items()}
        self._uncovered = {f: list(u) for f, u in other._uncovered.items()}
        self._slot = {f: dict(sl) for f, sl in other._slot.items()}
        self.credited = other.credited


def sim_fuzz_step(program: SimProgram, inst: InstanceState, now: int = 0,
                  decay_rate: float = DECAY_RATE) -> SimSeed | None:
    """One mutation: truncate a retained seed's call chain, extend it at random,
    roll line discoveries in allowlisted functions, keep it if it sets new bits."""
    if not inst.queue:
        return None
    rng = inst.rng
    parent = inst.queue[rng.randrange(len(inst.queue))]
    cut = rng.randrange(len(parent.walk)) + 1
    walk = list(parent.walk[:cut])
    lines = list(parent.lines[:cut])
    on_walk = set(walk)
    cur = walk[-1]
    succ, succ_prob = program.succ, program.succ_prob
    while len(walk) < MAX_WALK:
        options = succ[cur]
        if not options:
            break
        j = rng.randrange(len(options))
        v = options[j]
        if v in on_walk or rng.random() >= succ_prob[cur][j]:
            break
        walk.append(v)
        lines.append(FIRST_LINE)
        on_walk.add(v)
        cur = v

    allowed = inst.allowed
    for i, f in enumerate(walk):
        if allowed is not None and f not in allowed:
            continue
        inst._ensure(f)
        unc = inst._uncovered[f]
        if not unc:
            continue
        total = program.lines[f]
        p = program.difficulty[f] * math.exp(-decay_rate * (total - len(unc)) / total)
        k = _binomial(rng, len(unc), p)
        if k:
            lines[i] = tuple(sorted(set(lines[i]).union(rng.sample(unc, k))))

    child = SimSeed(tuple(walk), tuple(lines), parent, now)
    if not inst.accept(child, parent):
        return None
    inst.found.append(child)
    return child


class SimBackend(FuzzBackend):
    """Round-robin simulated workers; one tick is one mutation per worker."""

    def __init__(self, program: SimProgram, rng_seed: int = 0, sample_every: int = 500,
                 decay_rate: float = DECAY_RATE):
        self.program = program
        self.rng_seed = rng_seed
        self.sample_every = sample_every
        self.decay_rate = decay_rate
        self.tick = 0
        self.launches = 0
        self.workers: list[InstanceState] = []
        self.seeds: dict[str, SimSeed] = {}
        self._by_obj: dict[int, str] = {}
        self._pending: list[SimSeed] = []
        self._samples: list[CoverageSample] = []
        self.union: list[set[int]] = [set() for _ in program.names]
        self.union_count = 0
        self._index = {n: i for i, n in enumerate(program.names)}
        self.calls: list[str] = []

    def initial_corpus(self) -> list[Seed]:
        root = SimSeed((self.program.entry,), (FIRST_LINE,))
        return [self._register(root)]

    def _register(self, s: SimSeed) -> Seed:
        data = s.encode(self.program)
        seed = Seed(data, s.time, self._by_obj.get(id(s.parent)) if s.parent is not None else None)
        sid = seed.id
        if sid not in self.seeds:
            self.seeds[sid] = s
            self._by_obj[id(s)] = sid
            pl = s.parent.lines if s.parent is not None else ()
            for i, (f, ls) in enumerate(zip(s.walk, s.lines)):
                if i >= len(pl) or ls is not pl[i]:
                    before = len(self.union[f])
                    self.union[f].update(ls)
                    self.union_count += len(self.union[f]) - before
        else:
            self._by_obj[id(s)] = sid
        return seed

    def _lookup(self, seed: Seed) -> SimSeed:
        try:
            return self.seeds[seed.id]
        except KeyError:
            raise SimError(f"unknown seed {seed.id}") from None

    # -- FuzzBackend --------------------------------------------------------

    def launch_workers(self, tasks: Sequence[WorkerTask], corpus: Sequence[Seed]) -> None:
        self.calls.append("launch")
        self.launches += 1
        self.workers = []
        # replaying the corpus does not touch the worker RNG, so identical tasks share one replay
        replayed_for: dict[tuple[frozenset[int] | None, int], InstanceState] = {}
        for w, task in enumerate(tasks):
            allowed = None if task.allowlist is None else frozenset(
                self._index[n] for n in task.allowlist if n in self._index)
            rng = random.Random(f"{self.rng_seed}:{self.launches}:{w}")
            inst = InstanceState(self.program, allowed, task.context_depth, rng)
            key = (allowed, task.context_depth)
            if key in replayed_for:
                inst.copy_progress(replayed_for[key])
            else:
                self._replay_corpus(inst, corpus)
                replayed_for[key] = inst
            self.workers.append(inst)
        self._sample()

    def _replay_corpus(self, inst: InstanceState, corpus: Sequence[Seed]) -> None:
        replayed: set[int] = set()
        for seed in corpus:
            s = self._lookup(seed)
            parent = s.parent if s.parent is not None and id(s.parent) in replayed else None
            kept = record_seed(self.program, inst.cmap, inst.allowed, s, parent) > 0
            replayed.add(id(s))
            if kept:
                inst.queue.append(s)
            pl = parent.lines if parent is not None else ()
            for i, (f, ls) in enumerate(zip(s.walk, s.lines)):
                if inst.allows(f) and (i >= len(pl) or ls is not pl[i]):
                    inst.credit(f, ls)

    def terminate_workers(self) -> None:
        self.calls.append("terminate")
        for inst in self.workers:
            self._pending.extend(inst.found)
            inst.found = []
        self.workers = []

    def run_for(self, duration: int) -> None:
        end = self.tick + int(duration)
        program, decay = self.program, self.decay_rate
        while self.tick < end:
            self.tick += 1
            for inst in self.workers:
                child = sim_fuzz_step(program, inst, self.tick, decay)
                if child is not None:
                    self._register(child)
            if self.tick % self.sample_every == 0:
                self._sample()
        if self.tick % self.sample_every:
            self._sample()

    def _sample(self) -> None:
        for w, inst in enumerate(self.workers):
            self._samples.append(CoverageSample(self.tick, w, inst.credited, self.union_count))
        if not self.workers:
            self._samples.append(CoverageSample(self.tick, -1, 0, self.union_count))

    def now(self) -> int:
        return self.tick

    def collect_new_seeds(self) -> list[Seed]:
        self.calls.append("collect")
        for inst in self.workers:
            self._pending.extend(inst.found)
            inst.found = []
        out = [self._register(s) for s in self._pending]
        self._pending = []
        return out

    def profile_seed(self, seed: Seed) -> list[TraceEvent]:
        self.calls.append("profile")
        return seed_trace(self.program, self._lookup(seed))

    def coverage_of_seed(self, seed: Seed) -> dict[str, tuple[int, int]]:
        s = self._lookup(seed)
        return {self.program.names[f]: (len(ls), self.program.lines[f]) for f, ls in zip(s.walk, s.lines)}

    def function_list(self) -> set[str]:
        return set(self.program.names)

    def coverage_samples(self) -> list[CoverageSample]:
        out, self._samples = self._samples, []
        return out

    def instance_functions(self) -> list[set[str]]:
        return [inst.functions() for inst in self.workers]


@dataclass
class SimConfig:
    k: int = 4  # fuzzing workers; the monitor comes on top
    ticks: int = 50_000
    interval_ticks: int = 10_000
    warmup_ticks: int | None = None  # defaults to half an interval
    algo: str = "fennel"
    rng_seed: int = 0
    hidden_fraction: float = 0.1
    sample_every: int = 500
    decay_rate: float = DECAY_RATE


@dataclass
class ComparisonReport:
    reports: dict[str, CampaignReport]

    def union_series(self) -> dict[str, list[tuple[int, int]]]:
        return {m: r.union_series() for m, r in self.reports.items()}

    def final_union(self) -> dict[str, int]:
        return {m: r.final_union() for m, r in self.reports.items()}

    def mean_overlap(self) -> dict[str, float | None]:
        return {m: r.mean_overlap() for m, r in self.reports.items()}

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["mode,time,union_covered"]
        for mode, series in self.union_series().items():
            lines += [f"{mode},{t},{u}" for t, u in series]
        (out / "coverage.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        lines = ["mode,cycle,time,warmup,jaccard"]
        for mode, rep in self.reports.items():
            for o in rep.overlap:
                j = "" if o.jaccard is None else f"{o.jaccard:.9g}"
                lines.append(f"{mode},{o.cycle},{o.time},{int(o.warmup)},{j}")
        (out / "overlap.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        for mode, rep in self.reports.items():
            rep.write(out / mode)


def campaign_config(program: SimProgram, cfg: SimConfig, mode: str, out_dir: Path | None = None) -> CampaignConfig:
    hidden = program.hidden_edges(cfg.hidden_fraction, cfg.rng_seed)
    warmup = cfg.warmup_ticks if cfg.warmup_ticks is not None else cfg.interval_ticks // 2
    return CampaignConfig(
        k_total=cfg.k + 1,
        interval=cfg.interval_ticks,
        warmup=warmup,
        duration=cfg.ticks,
        algo=cfg.algo,
        mode=mode,
        rng_seed=cfg.rng_seed,
        graph=program.graph(hidden),
        out_dir=out_dir,
    )


def run_simulated_campaign(program: SimProgram, cfg: SimConfig, mode: str = "partitioned",
                           out_dir: Path | None = None) -> CampaignReport:
    backend = SimBackend(program, cfg.rng_seed, cfg.sample_every, cfg.decay_rate)
    return run_campaign(campaign_config(program, cfg, mode, out_dir), backend, backend.initial_corpus())


def run_comparison(program: SimProgram, cfg: SimConfig, modes: Sequence[str] = ("partitioned", "shared"),
                   out_dir: Path | None = None) -> ComparisonReport:
    """Run the same program, seed and tick budget under each mode."""
    reports = {}
    for mode in modes:
        sub = Path(out_dir) / mode if out_dir is not None else None
        reports[mode] = run_simulated_campaign(program, cfg, mode, sub)
    return ComparisonReport(reports)
