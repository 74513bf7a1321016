"""AFL-style coverage bitmap with a bounded call-chain context.

The map index of a block transition is::

    (cur ^ (prev >> 1) ^ hash_callstack(top frames)) & 0xFFFF

where the callstack hash XORs 16-bit folded FNV-1a-64 hashes of the names of
the innermost ``depth`` frames. XOR makes the context hash insensitive to
frame order and cancels frames that appear an even number of times.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

from .callgraph import CallGraph

MAP_BITS = 16
MAP_SIZE = 1 << MAP_BITS
MAP_MASK = MAP_SIZE - 1
MAX_CONTEXT_DEPTH = 16

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


class TraceError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"event {position}: {message}")
        self.position = position


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


def fold16(x: int) -> int:
    x ^= x >> 32
    x ^= x >> 16
    return x & MAP_MASK


@lru_cache(maxsize=None)
def function_hash(name: str) -> int:
    return fold16(fnv1a_64(name.encode("utf-8")))


def edge_index(prev_block: int, cur_block: int) -> int:
    return (cur_block ^ (prev_block >> 1)) & MAP_MASK


def hash_callstack(stack: Sequence[str], depth_bound: int) -> int:
    """XOR of the hashes of the innermost ``depth_bound`` frames (stack top last)."""
    h = 0
    if depth_bound > 0:
        for name in stack[-depth_bound:]:
            h ^= function_hash(name)
    return h


def context_index(prev_block: int, cur_block: int, stack: Sequence[str], depth_bound: int) -> int:
    return (edge_index(prev_block, cur_block) ^ hash_callstack(stack, depth_bound)) & MAP_MASK


def compute_context_depth(subgraph: CallGraph) -> int:
    """Rounded mean directed hop distance over reachable ordered pairs, clamped to [1, 16]."""
    total = 0
    pairs = 0
    for src in range(len(subgraph)):
        dist = {src: 0}
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for w in subgraph.successors(u):
                if w not in dist:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        total += sum(dist.values())
        pairs += len(dist) - 1
    if pairs == 0:
        return 1
    mean = Fraction(total, pairs)
    rounded = int(mean + Fraction(1, 2))
    return max(1, min(MAX_CONTEXT_DEPTH, rounded))


class TraceEvent(NamedTuple):
    kind: str  # "E" enter, "X" exit, "B" block
    function: str
    block: int = 0


ExecutionTrace = Sequence[TraceEvent]


def parse_trace(text: str) -> list[TraceEvent]:
    events = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        kind = parts[0]
        if kind in ("E", "X") and len(parts) == 2:
            events.append(TraceEvent(kind, parts[1]))
        elif kind == "B" and len(parts) == 3 and parts[2].isdigit():
            events.append(TraceEvent(kind, parts[1], int(parts[2])))
        else:
            raise TraceError(f"malformed trace line {line!r}", lineno)
    return events


def load_trace(path: str | Path) -> list[TraceEvent]:
    return parse_trace(Path(path).read_text(encoding="utf-8"))


def format_trace(trace: Iterable[TraceEvent]) -> str:
    out = []
    for ev in trace:
        out.append(f"B {ev.function} {ev.block}" if ev.kind == "B" else f"{ev.kind} {ev.function}")
    return "".join(line + "\n" for line in out)


def call_edges(trace: ExecutionTrace) -> list[tuple[str, str]]:
    """Caller/callee pairs implied by the enter events, in first-seen order."""
    stack: list[str] = []
    pairs: dict[tuple[str, str], None] = {}
    for ev in trace:
        if ev.kind == "E":
            if stack:
                pairs[(stack[-1], ev.function)] = None
            stack.append(ev.function)
        elif ev.kind == "X" and stack:
            stack.pop()
    return list(pairs)


@dataclass
class CoverageMap:
    """Hit flags for one fuzzing instance, restricted to its instrumented functions."""

    instrumented: frozenset[str]
    context_depth: int = 1
    bits: bytearray = field(default_factory=lambda: bytearray(MAP_SIZE))

    def __post_init__(self) -> None:
        self.instrumented = frozenset(self.instrumented)

    def count(self) -> int:
        return MAP_SIZE - self.bits.count(0)

    def indices(self) -> set[int]:
        return {i for i, b in enumerate(self.bits) if b}

    def dump(self) -> bytes:
        """8192-byte bitset; index ``i`` is bit ``i % 8`` (LSB first) of byte ``i // 8``."""
        out = bytearray(MAP_SIZE // 8)
        for i, b in enumerate(self.bits):
            if b:
                out[i >> 3] |= 1 << (i & 7)
        return bytes(out)

    def load(self, data: bytes) -> None:
        if len(data) != MAP_SIZE // 8:
            raise ValueError(f"bitmap dump must be {MAP_SIZE // 8} bytes, got {len(data)}")
        for i in range(MAP_SIZE):
            self.bits[i] = (data[i >> 3] >> (i & 7)) & 1


@dataclass(frozen=True)
class ReplayResult:
    new_bits: int
    indices: frozenset[int]


def replay(trace: ExecutionTrace, cmap: CoverageMap) -> ReplayResult:
    """Record every instrumented block transition of ``trace`` into ``cmap``.

    ``prev`` only advances on instrumented blocks, since uninstrumented code
    carries no coverage probes.
    """
    stack: list[str] = []
    prev = 0
    bits = cmap.bits
    depth = cmap.context_depth
    instrumented = cmap.instrumented
    seen: set[int] = set()
    new_bits = 0
    ctx = 0
    for pos, ev in enumerate(trace):
        kind = ev.kind
        if kind == "E":
            stack.append(ev.function)
            ctx = hash_callstack(stack, depth)
        elif kind == "X":
            if not stack or stack[-1] != ev.function:
                raise TraceError(f"exit from {ev.function!r} does not match the open frame", pos)
            stack.pop()
            ctx = hash_callstack(stack, depth)
        elif kind == "B":
            if not stack or stack[-1] != ev.function:
                raise TraceError(f"block in {ev.function!r} outside its frame", pos)
            if ev.function in instrumented:
                idx = ((ev.block ^ (prev >> 1)) ^ ctx) & MAP_MASK
                if not bits[idx]:
                    bits[idx] = 1
                    new_bits += 1
                seen.add(idx)
                prev = ev.block
        else:
            raise TraceError(f"unknown event kind {kind!r}", pos)
    if stack:
        raise TraceError(f"{len(stack)} frame(s) never exited", len(trace))
    return ReplayResult(new_bits, frozenset(seen))


def retain_decision(result: ReplayResult) -> bool:
    return result.new_bits > 0

