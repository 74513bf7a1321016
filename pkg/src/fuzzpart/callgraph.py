"""Function call graph with per-function coverage statistics.

Functions are addressed by dense integer handles assigned in insertion order;
names only matter at the I/O boundary. Vertices and edges only ever grow.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

log = logging.getLogger(__name__)

KATZ_ALPHA = 0.005
KATZ_BETA = 1.0
KATZ_TOL = 1e-8
KATZ_MAX_ITER = 1000


class GraphError(Exception):
    """Base class for call graph failures."""


class GraphFormatError(GraphError):
    """Graph document could not be parsed."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.line = line
        self.column = column


class GraphValidationError(GraphError):
    """Graph document parsed but violates the format contract."""


class KatzConvergenceError(GraphError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(f"Katz iteration did not converge after {iterations} iterations (residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


@dataclass
class FunctionStats:
    lines_total: int = 0
    lines_covered_cur: int = 0
    lines_covered_pre: int = 0
    stagnation_cycles: int = 0
    katz: float | None = None
    score: float = 0.0


@dataclass(frozen=True)
class FunctionId:
    name: str
    index: int


class CallGraph:
    """Directed call graph; edges are an insertion-ordered set of (caller, callee) handles."""

    def __init__(self, entry: str | None = None):
        self._names: list[str] = []
        self._index: dict[str, int] = {}
        self.stats: list[FunctionStats] = []
        self._succ: list[dict[int, None]] = []
        self._pred: list[dict[int, None]] = []
        self._edges: dict[tuple[int, int], None] = {}
        self.warnings: list[str] = []
        self._entry: int | None = None
        if entry is not None:
            self._entry, _ = self.add_function(entry)

    # -- vertices ---------------------------------------------------------

    def add_function(self, name: str, lines_total: int = 0) -> tuple[int, bool]:
        """Insert ``name`` if absent. Returns ``(index, inserted)``."""
        idx = self._index.get(name)
        if idx is not None:
            return idx, False
        if not name:
            raise GraphValidationError("function name must be non-empty")
        idx = len(self._names)
        self._names.append(name)
        self._index[name] = idx
        self.stats.append(FunctionStats(lines_total=lines_total))
        self._succ.append({})
        self._pred.append({})
        return idx, True

    @property
    def entry(self) -> int:
        if self._entry is None:
            raise GraphValidationError("graph has no entry function")
        return self._entry

    @entry.setter
    def entry(self, idx: int) -> None:
        self._check(idx)
        self._entry = idx

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise GraphValidationError(f"unknown function {name!r}") from None

    def name(self, idx: int) -> str:
        return self._names[idx]

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def function_id(self, idx: int) -> FunctionId:
        return FunctionId(self._names[idx], idx)

    def _check(self, idx: int) -> None:
        if not 0 <= idx < len(self._names):
            raise GraphValidationError(f"function handle {idx} out of range")

    # -- edges ------------------------------------------------------------

    def add_edge(self, caller: int, callee: int) -> bool:
        key = (caller, callee)
        if key in self._edges:
            return False
        self._check(caller)
        self._check(callee)
        self._edges[key] = None
        self._succ[caller][callee] = None
        self._pred[callee][caller] = None
        return True

    def has_edge(self, caller: int, callee: int) -> bool:
        return (caller, callee) in self._edges

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(self._edges)

    def num_edges(self) -> int:
        return len(self._edges)

    def successors(self, idx: int) -> Iterator[int]:
        return iter(self._succ[idx])

    def predecessors(self, idx: int) -> Iterator[int]:
        return iter(self._pred[idx])

    def neighbors(self, idx: int) -> list[int]:
        """Undirected neighbours in deterministic order, self excluded."""
        seen = dict.fromkeys(self._succ[idx])
        seen.update(dict.fromkeys(self._pred[idx]))
        seen.pop(idx, None)
        return list(seen)

    def degree(self, idx: int) -> int:
        return len(self.neighbors(idx))

    def copy(self) -> CallGraph:
        g = CallGraph()
        for idx, name in enumerate(self._names):
            g.add_function(name)
            g.stats[idx] = replace(self.stats[idx])
        for u, v in self._edges:
            g.add_edge(u, v)
        g._entry = self._entry
        g.warnings = list(self.warnings)
        return g

    def structure(self) -> tuple[frozenset[str], frozenset[tuple[str, str]]]:
        """Name-level vertex and edge sets, for equality checks."""
        n = self._names
        return frozenset(n), frozenset((n[u], n[v]) for u, v in self._edges)

    def to_document(self) -> dict:
        return {
            "entry": self._names[self.entry],
            "functions": [{"name": n, "lines": s.lines_total} for n, s in zip(self._names, self.stats)],
            "edges": [[self._names[u], self._names[v]] for u, v in self._edges],
        }


def parse_graph(text: str) -> CallGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(exc.msg, exc.lineno, exc.colno) from None
    if not isinstance(doc, dict):
        raise GraphFormatError("top level must be an object")
    entry = doc.get("entry")
    if not isinstance(entry, str) or not entry:
        raise GraphValidationError("'entry' must be a non-empty string")
    functions = doc.get("functions", [])
    edges = doc.get("edges", [])
    if not isinstance(functions, list) or not isinstance(edges, list):
        raise GraphValidationError("'functions' and 'edges' must be arrays")

    g = CallGraph()
    for pos, fn in enumerate(functions):
        if not isinstance(fn, dict) or not isinstance(fn.get("name"), str):
            raise GraphValidationError(f"functions[{pos}] must be an object with a string 'name'")
        lines = fn.get("lines", 0)
        if not isinstance(lines, int) or isinstance(lines, bool) or lines < 0:
            raise GraphValidationError(f"functions[{pos}].lines must be an integer >= 0")
        _, inserted = g.add_function(fn["name"], lines)
        if not inserted:
            raise GraphValidationError(f"duplicate function name {fn['name']!r}")
    if entry not in g:
        raise GraphValidationError(f"entry {entry!r} is not a declared function")
    g.entry = g.index(entry)

    for pos, pair in enumerate(edges):
        if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(x, str) and x for x in pair)):
            raise GraphValidationError(f"edges[{pos}] must be a [caller, callee] pair of names")
        ends = []
        for name in pair:
            idx, inserted = g.add_function(name)
            if inserted:
                msg = f"edges[{pos}] references undeclared function {name!r}; inserted with lines=0"
                log.warning(msg)
                g.warnings.append(msg)
            ends.append(idx)
        g.add_edge(*ends)
    return g


def load_graph(path: str | Path) -> CallGraph:
    return parse_graph(Path(path).read_text(encoding="utf-8"))


def read_profile_trace(path: str | Path) -> list[tuple[str, str]]:
    """Read ``caller<TAB>callee`` lines; ``#`` lines and blank lines are skipped."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not all(parts):
            raise GraphFormatError("expected 'caller<TAB>callee'", lineno, 1)
        pairs.append((parts[0], parts[1]))
    return pairs


def merge_dynamic_edges(g: CallGraph, trace: Iterable[tuple[str, str]]) -> CallGraph:
    """Add every observed call pair to ``g`` in place, inserting unknown endpoints."""
    for caller, callee in trace:
        u, _ = g.add_function(caller)
        v, _ = g.add_function(callee)
        g.add_edge(u, v)
    return g


def append_orphans(g: CallGraph, function_list: Iterable[str]) -> set[int]:
    """Insert listed functions missing from ``g``; returns the new handles."""
    orphans = set()
    for name in sorted(set(function_list)):
        idx, inserted = g.add_function(name)
        if inserted:
            orphans.add(idx)
    return orphans


def katz_centrality(
    g: CallGraph,
    alpha: float = KATZ_ALPHA,
    beta: float = KATZ_BETA,
    tol: float = KATZ_TOL,
    max_iter: int = KATZ_MAX_ITER,
) -> np.ndarray:
    """Power iteration for ``x = alpha * A^T x + beta``, L2-normalised.

    A function's centrality accumulates from its callers. Returns an array
    indexed by function handle.
    """
    n = len(g)
    if n == 0:
        return np.zeros(0)
    edges = np.array(g.edges, dtype=np.int64).reshape(-1, 2)
    src, dst = edges[:, 0], edges[:, 1]
    x = np.zeros(n)
    residual = float("inf")
    for _ in range(max_iter):
        incoming = np.bincount(dst, weights=x[src], minlength=n)
        x_next = alpha * incoming + beta
        residual = float(np.abs(x_next - x).max())
        x = x_next
        if residual < tol:
            norm = float(np.linalg.norm(x))
            return x / norm if norm > 0 else x
    raise KatzConvergenceError(max_iter, residual)


def update_katz(g: CallGraph, **params) -> np.ndarray:
    katz = katz_centrality(g, **params)
    for stats, value in zip(g.stats, katz):
        stats.katz = float(value)
    return katz


def partition_subgraph(g: CallGraph, members: Iterable[int]) -> CallGraph:
    """Induced subgraph on ``members`` (handles are renumbered, names kept)."""
    keep = sorted(set(members))
    for idx in keep:
        g._check(idx)
    sub = CallGraph()
    local = {}
    for idx in keep:
        local[idx], _ = sub.add_function(g.name(idx))
        sub.stats[local[idx]] = replace(g.stats[idx])
    for u, v in g.edges:
        if u in local and v in local:
            sub.add_edge(local[u], local[v])
    if keep:
        sub._entry = local.get(g._entry, 0) if g._entry is not None else 0
    return sub
