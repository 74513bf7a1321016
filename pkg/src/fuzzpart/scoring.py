"""Entropy-weighted function scoring.

Each function gets four raw signals (uncovered lines, recent coverage gain,
a stagnation penalty and Katz centrality). Columns are min-max scaled, each
column is weighted by its information gain ``1 - H_j`` and the score is the
weighted sum of the scaled row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .callgraph import CallGraph, GraphFormatError

EPSILON = 1e-12
STAGNATION_RATE = 0.3
FEATURES = ("residual", "gain", "penalty", "katz")

# Below this total information gain the columns are indistinguishable from
# uniform and the +epsilon in the weight denominator would skew the simplex.
MIN_TOTAL_GAIN = 1e-3


class ScoringError(Exception):
    pass


class FeatureVector(NamedTuple):
    residual: float
    recent_gain: float
    penalty: float
    katz: float


@dataclass
class ScoreTable:
    names: list[str]
    raw: np.ndarray  # shape (n, 4)
    normalized: np.ndarray  # shape (n, 4)
    entropies: np.ndarray
    weights: np.ndarray
    scores: np.ndarray
    epsilon: float = EPSILON

    def by_name(self) -> dict[str, float]:
        return dict(zip(self.names, self.scores.tolist()))

    def ranked(self) -> list[int]:
        """Row order by descending score, ties broken by name."""
        return sorted(range(len(self.names)), key=lambda i: (-self.scores[i], self.names[i]))


def stagnation_penalty(cycles: int) -> float:
    return math.exp(-STAGNATION_RATE * cycles)


def extract_features(g: CallGraph) -> dict[int, FeatureVector]:
    features = {}
    for idx, st in enumerate(g.stats):
        if st.katz is None:
            raise ScoringError(f"no Katz centrality for {g.name(idx)!r}; run update_katz() first")
        features[idx] = FeatureVector(
            float(st.lines_total - st.lines_covered_cur),
            float(st.lines_covered_cur - st.lines_covered_pre),
            stagnation_penalty(st.stagnation_cycles),
            float(st.katz),
        )
    return features


def _as_matrix(features: Mapping[int, Sequence[float]] | np.ndarray) -> np.ndarray:
    if isinstance(features, Mapping):
        rows = [features[k] for k in sorted(features)]
        return np.array(rows, dtype=float).reshape(len(rows), -1)
    return np.asarray(features, dtype=float)


def normalize(features: Mapping[int, Sequence[float]] | np.ndarray) -> np.ndarray:
    """Per-column min-max scaling; a constant column becomes all zeros."""
    x = _as_matrix(features)
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    out = np.zeros_like(x)
    varying = span > 0
    out[:, varying] = (x[:, varying] - lo[varying]) / span[varying]
    return out


def entropy_weights(normalized: np.ndarray, epsilon: float = EPSILON) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(H, w)`` for a normalised ``(n, m)`` matrix.

    Information gain ``1 - H_j`` is clamped at zero since the ``+epsilon``
    inside the logarithm can push ``H_j`` marginally above one.
    """
    x = np.asarray(normalized, dtype=float)
    n = x.shape[0]
    if n < 2:
        raise ScoringError("entropy weighting needs at least two functions")
    p = x / (x.sum(axis=0) + epsilon)
    h = -(p * np.log(p + epsilon)).sum(axis=0) / math.log(n)
    gain = np.clip(1.0 - h, 0.0, None)
    total = gain.sum()
    if total < MIN_TOTAL_GAIN:
        return h, np.full(x.shape[1], 1.0 / x.shape[1])
    return h, gain / (total + epsilon)


def score(g: CallGraph, epsilon: float = EPSILON) -> ScoreTable:
    """Score every function of ``g`` and store the result in its stats."""
    features = extract_features(g)
    raw = _as_matrix(features)
    names = g.names
    if len(g) == 1:
        table = ScoreTable(names, raw, np.zeros_like(raw), np.ones(4), np.full(4, 0.25), np.ones(1), epsilon)
    else:
        norm = normalize(raw)
        h, w = entropy_weights(norm, epsilon)
        table = ScoreTable(names, raw, norm, h, w, norm @ w, epsilon)
    for st, s in zip(g.stats, table.scores):
        st.score = float(s)
    return table


def read_coverage_report(path: str | Path) -> dict[str, tuple[int, ...]]:
    """Read ``function<TAB>covered<TAB>total[<TAB>covered_pre<TAB>stagnation]`` lines."""
    report = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 5):
            raise GraphFormatError("expected 3 or 5 tab-separated fields", lineno, 1)
        try:
            counts = tuple(int(v) for v in parts[1:])
        except ValueError:
            raise GraphFormatError("coverage counts must be integers", lineno, 1) from None
        if any(c < 0 for c in counts) or counts[0] > counts[1]:
            raise GraphFormatError("counts must satisfy 0 <= covered <= total", lineno, 1)
        report[parts[0]] = counts
    return report


def apply_coverage_report(g: CallGraph, report: Mapping[str, tuple[int, ...]]) -> None:
    for name, counts in report.items():
        idx, _ = g.add_function(name)
        st = g.stats[idx]
        st.lines_covered_cur, st.lines_total = counts[0], counts[1]
        if len(counts) == 4:
            st.lines_covered_pre, st.stagnation_cycles = counts[2], counts[3]
        else:
            st.lines_covered_pre = st.lines_covered_cur


def format_score_tsv(table: ScoreTable) -> str:
    lines = []
    for i in table.ranked():
        row = [table.names[i], *(f"{v:.9g}" for v in table.raw[i]), f"{table.scores[i]:.9g}"]
        lines.append("\t".join(row))
    return "".join(line + "\n" for line in lines)
