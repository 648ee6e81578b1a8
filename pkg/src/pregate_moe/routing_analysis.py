"""Redundancy and locality statistics over expert selections.

Layer-to-layer transition matrices and mutual information quantify how much
a layer's expert choice is already determined by the previous layer. The
temporal-distance histogram measures how often a token reuses the expert of
a recent predecessor in the same sequence.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "SelectionTrace",
    "TransitionMatrix",
    "TemporalDistance",
    "transition_matrix",
    "mutual_information",
    "mutual_information_between",
    "entropy",
    "temporal_distance",
    "state_label",
    "write_transition_csv",
    "write_temporal_csv",
]


def state_label(state: Sequence[int]) -> str:
    return ",".join(str(int(e)) for e in state)


class SelectionTrace:
    """Selected expert sets per token and layer, shape (tokens, layers, K)."""

    def __init__(self, sets, num_experts: int):
        arr = np.sort(np.asarray(sets, dtype=np.int64), axis=-1)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError("selection trace must be (tokens, layers, K)")
        if arr.size and (arr.min() < 0 or arr.max() >= num_experts):
            raise ValueError(f"expert id outside [0, {num_experts})")
        if arr.shape[2] > 1 and np.any(np.diff(arr, axis=-1) == 0):
            raise ValueError("selected expert sets must not repeat an expert")
        self.sets = arr
        self.num_experts = int(num_experts)

    @property
    def num_tokens(self) -> int:
        return self.sets.shape[0]

    @property
    def num_layers(self) -> int:
        return self.sets.shape[1]

    @property
    def k(self) -> int:
        return self.sets.shape[2]

    def states(self) -> list[tuple[int, ...]]:
        return list(combinations(range(self.num_experts), self.k))

    def state_ids(self, layer: int) -> np.ndarray:
        """Index of each token's K-subset in the lexicographic state list."""
        index = {s: i for i, s in enumerate(self.states())}
        return np.array([index[tuple(int(e) for e in row)] for row in self.sets[:, layer]],
                        dtype=np.int64)

    @classmethod
    def layer_constant(cls, expert_sets, num_layers: int, num_experts: int) -> "SelectionTrace":
        """Replicate per-token selections across layers (pre-gated routing)."""
        arr = np.asarray(expert_sets, dtype=np.int64)
        if arr.ndim == 1:
            arr = arr[:, None]
        return cls(np.repeat(arr[:, None, :], num_layers, axis=1), num_experts)


@dataclass(frozen=True)
class TransitionMatrix:
    states: tuple[tuple[int, ...], ...]
    probs: np.ndarray     # rows with zero support are left at 0
    support: np.ndarray   # number of tokens in each source state

    def visited(self) -> list[int]:
        return [i for i, s in enumerate(self.support) if s > 0]

    def row(self, state: Sequence[int]) -> np.ndarray | None:
        i = self.states.index(tuple(state))
        return self.probs[i] if self.support[i] > 0 else None


def _check_layer(trace: SelectionTrace, layer: int) -> None:
    if trace.num_tokens == 0:
        raise ValueError("empty selection trace")
    if not 1 <= layer < trace.num_layers:
        raise ValueError(f"layer {layer} must lie in [1, {trace.num_layers})")


def _joint_counts(trace: SelectionTrace, a: int, b: int) -> np.ndarray:
    n_states = len(trace.states())
    counts = np.zeros((n_states, n_states), dtype=np.int64)
    np.add.at(counts, (trace.state_ids(a), trace.state_ids(b)), 1)
    return counts


def transition_matrix(trace: SelectionTrace, layer: int) -> TransitionMatrix:
    """Empirical P(S_layer | S_{layer-1})."""
    _check_layer(trace, layer)
    counts = _joint_counts(trace, layer - 1, layer)
    support = counts.sum(axis=1)
    probs = np.zeros(counts.shape)
    nz = support > 0
    probs[nz] = counts[nz] / support[nz, None]
    return TransitionMatrix(tuple(trace.states()), probs, support)


def entropy(counts: Iterable[int], base: float = 2.0) -> float:
    """Plug-in entropy of a histogram; summed over sorted counts for reproducibility."""
    c = sorted(int(v) for v in counts if v > 0)
    n = sum(c)
    if n == 0:
        return 0.0
    log = math.log2 if base == 2.0 else (lambda v: math.log(v, base))
    return -sum((v / n) * log(v / n) for v in c) + 0.0


def _mi_from_counts(counts: np.ndarray, base: float) -> float:
    hx = entropy(counts.sum(axis=1), base)
    hy = entropy(counts.sum(axis=0), base)
    hxy = entropy(counts.ravel(), base)
    # H(X)+H(Y)-H(X,Y); rounding can leave a tiny negative residue
    return max(0.0, (hx + hy) - hxy)


def mutual_information_between(trace: SelectionTrace, a: int, b: int,
                               base: float = 2.0) -> float:
    if trace.num_tokens == 0:
        raise ValueError("empty selection trace")
    for layer in (a, b):
        if not 0 <= layer < trace.num_layers:
            raise ValueError(f"layer {layer} out of range [0, {trace.num_layers})")
    return _mi_from_counts(_joint_counts(trace, a, b), base)


def mutual_information(trace: SelectionTrace, layer: int, base: float = 2.0) -> float:
    """I(S_{layer-1}; S_layer), in bits unless ``base`` says otherwise."""
    _check_layer(trace, layer)
    return mutual_information_between(trace, layer - 1, layer, base)


@dataclass(frozen=True)
class TemporalDistance:
    histogram: dict[int, int]
    tokens: int            # tokens seen across all sequences
    followers: int         # tokens that have a predecessor in their sequence

    @property
    def eligible(self) -> int:
        """Tokens whose expert occurred earlier in the same sequence."""
        return sum(self.histogram.values())

    @property
    def distance1_fraction(self) -> float:
        """Share of eligible tokens whose expert matches the immediately preceding token."""
        return self.histogram.get(1, 0) / self.eligible if self.eligible else 0.0

    @property
    def follow_last_fraction(self) -> float:
        """Share of tokens with a predecessor that repeat the predecessor's expert."""
        return self.histogram.get(1, 0) / self.followers if self.followers else 0.0


def temporal_distance(sequences) -> TemporalDistance:
    """Histogram of gaps to the previous token that chose the same expert.

    Accepts one sequence of expert ids or a list of sequences; gaps never
    cross sequence boundaries.
    """
    seqs = list(sequences)
    if not seqs:
        raise ValueError("empty expert sequence")
    if not isinstance(seqs[0], (list, tuple, np.ndarray)):
        seqs = [seqs]
    hist: Counter = Counter()
    tokens = followers = 0
    for seq in seqs:
        last: dict[int, int] = {}
        for t, e in enumerate(seq):
            e = int(e)
            if e in last:
                hist[t - last[e]] += 1
            last[e] = t
        tokens += len(seq)
        followers += max(0, len(seq) - 1)
    return TemporalDistance(dict(sorted(hist.items())), tokens, followers)


def write_transition_csv(path, tm: TransitionMatrix, header_line: str | None = None) -> None:
    labels = [state_label(s) for s in tm.states]
    with open(path, "w", newline="", encoding="utf-8") as f:
        if header_line:
            f.write(header_line + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["from", "support", *labels])
        for i in tm.visited():
            w.writerow([labels[i], int(tm.support[i]), *(f"{p:.6f}" for p in tm.probs[i])])


def write_temporal_csv(path, td: TemporalDistance, header_line: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        if header_line:
            f.write(header_line + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["distance", "count"])
        for dist, count in td.histogram.items():
            w.writerow([dist, count])
        f.write(f"# follow_last_fraction={td.follow_last_fraction:.6f} "
                f"distance1_fraction={td.distance1_fraction:.6f}\n")
