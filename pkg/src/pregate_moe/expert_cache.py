"""Expert cache policies and the layer-wise load/compute pipeline.

Every expert occupies one slot. With pre-gated routing the future expert
reference string is known, so the cache can evict the resident expert whose
next use lies furthest ahead (Belady). LRU and seeded Random are baselines.
"""

from __future__ import annotations

import bisect
import csv
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Iterable, Sequence

__all__ = [
    "Policy",
    "ReferenceString",
    "AccessResult",
    "ExpertCache",
    "hit_ratio",
    "optimal_oracle",
    "Layer",
    "PrefetchPlan",
    "Schedule",
    "simulate_prefetch",
    "write_sweep_csv",
    "MAX_ORACLE_LEN",
]

MAX_ORACLE_LEN = 14


class Policy(str, Enum):
    BELADY = "belady"
    LRU = "lru"
    RANDOM = "random"


class ReferenceString:
    """Ordered expert accesses with next-use queries.

    Times default to access indices 0..n-1.
    """

    def __init__(self, experts: Iterable[int], times: Sequence[int] | None = None):
        self.experts = [int(e) for e in experts]
        self.times = list(range(len(self.experts))) if times is None else [int(t) for t in times]
        if len(self.times) != len(self.experts):
            raise ValueError("need one time per access")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("access times must be strictly increasing")
        self._uses: dict[int, list[int]] = {}
        for t, e in zip(self.times, self.experts):
            self._uses.setdefault(e, []).append(t)

    def __len__(self) -> int:
        return len(self.experts)

    def __iter__(self):
        return iter(zip(self.times, self.experts))

    def next_use(self, expert: int, t: int) -> float:
        """F(e, t): first access time of ``expert`` strictly after ``t``, else inf."""
        uses = self._uses.get(expert)
        if not uses:
            return math.inf
        i = bisect.bisect_right(uses, t)
        return uses[i] if i < len(uses) else math.inf

    def distinct(self) -> int:
        return len(self._uses)


@dataclass(frozen=True)
class AccessResult:
    hit: bool
    evicted: int | None = None


@dataclass
class ExpertCache:
    capacity: int
    policy: Policy = Policy.LRU
    refs: ReferenceString | None = None
    seed: int = 0
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    _resident: dict = field(default_factory=dict)  # expert -> last access time (LRU order)
    _rng: random.Random = field(init=False, repr=False)

    def __post_init__(self):
        self.policy = Policy(self.policy)
        if self.capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        if self.policy is Policy.BELADY and self.refs is None:
            raise ValueError("Belady eviction needs the future reference string")
        self._rng = random.Random(self.seed)

    @property
    def resident(self) -> frozenset[int]:
        return frozenset(self._resident)

    def warm(self, experts: Iterable[int]) -> None:
        for e in experts:
            if len(self._resident) >= self.capacity:
                break
            self._resident[int(e)] = -1

    def _victim(self, t: int) -> int:
        if self.policy is Policy.LRU:
            return next(iter(self._resident))
        if self.policy is Policy.RANDOM:
            return self._rng.choice(sorted(self._resident))
        # furthest next use; never-again counts as inf; ties go to the lowest id
        return max(sorted(self._resident), key=lambda e: (self.refs.next_use(e, t), -e))

    def access(self, expert: int, t: int) -> AccessResult:
        expert = int(expert)
        if expert in self._resident:
            self.hits += 1
            del self._resident[expert]
            self._resident[expert] = t
            return AccessResult(True)
        self.misses += 1
        evicted = None
        if len(self._resident) >= self.capacity:
            evicted = self._victim(t)
            del self._resident[evicted]
            self.evictions += 1
        self._resident[expert] = t
        return AccessResult(False, evicted)

    @property
    def accesses(self) -> int:
        return self.hits + self.misses

    @property
    def hit_ratio(self) -> float:
        return self.hits / self.accesses if self.accesses else 0.0


def hit_ratio(refs: ReferenceString, policy: Policy | str, capacity: int, seed: int = 0) -> float:
    if len(refs) == 0:
        raise ValueError("empty reference string")
    cache = ExpertCache(capacity, Policy(policy), refs, seed)
    for t, e in refs:
        cache.access(e, t)
    return cache.hit_ratio


def optimal_oracle(refs: ReferenceString | Sequence[int], capacity: int) -> int:
    """Maximum hits over every eviction choice, by exhaustive search."""
    seq = tuple(refs.experts if isinstance(refs, ReferenceString) else (int(e) for e in refs))
    if len(seq) > MAX_ORACLE_LEN:
        raise ValueError(f"oracle limited to {MAX_ORACLE_LEN} accesses, got {len(seq)}")
    if capacity < 1:
        raise ValueError("cache capacity must be >= 1")

    @lru_cache(maxsize=None)
    def best(i: int, cache: frozenset) -> int:
        if i == len(seq):
            return 0
        e = seq[i]
        if e in cache:
            return 1 + best(i + 1, cache)
        if len(cache) < capacity:
            return best(i + 1, cache | {e})
        # upper bound: every remaining access hits
        top = 0
        for victim in sorted(cache):
            top = max(top, best(i + 1, (cache - {victim}) | {e}))
            if top == len(seq) - i - 1:
                break
        return top

    return best(0, frozenset())


# --- prefetch pipeline ------------------------------------------------------

@dataclass(frozen=True)
class Layer:
    compute: float
    load: float
    cached: bool = False
    experts: frozenset = frozenset()

    @property
    def effective_load(self) -> float:
        return 0.0 if self.cached else self.load


@dataclass(frozen=True)
class PrefetchPlan:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("plan needs at least one layer")
        for layer in self.layers:
            if layer.compute < 0 or layer.load < 0:
                raise ValueError("durations must be non-negative")

    @classmethod
    def uniform(cls, num_layers: int, compute: float, load: float,
                cached: Iterable[int] = ()) -> "PrefetchPlan":
        cached = set(cached)
        return cls(tuple(Layer(compute, load, i in cached) for i in range(num_layers)))


@dataclass(frozen=True)
class Schedule:
    load_finish: tuple[float, ...]
    compute_start: tuple[float, ...]
    compute_finish: tuple[float, ...]

    @property
    def makespan(self) -> float:
        return self.compute_finish[-1]


def simulate_prefetch(plan: PrefetchPlan, mode: str = "prefetch") -> Schedule:
    """Two-stream schedule.

    ``prefetch``: loads run back to back on their own stream and layer i
    computes once layer i-1 finished and its own load landed.
    ``on-demand``: each layer loads then computes, serially.
    """
    mode = mode.replace("_", "-").lower()
    if mode not in ("prefetch", "on-demand", "ondemand"):
        raise ValueError(f"unknown prefetch mode {mode!r}")
    loads, starts, finishes = [], [], []
    load_clock = 0.0
    prev = 0.0
    for layer in plan.layers:
        if mode == "prefetch":
            load_clock = load_clock + layer.effective_load
            start = max(prev, load_clock)
        else:
            load_clock = prev + layer.effective_load
            start = load_clock
        prev = start + layer.compute
        loads.append(load_clock)
        starts.append(start)
        finishes.append(prev)
    return Schedule(tuple(loads), tuple(starts), tuple(finishes))


def write_sweep_csv(path, rows: Iterable[tuple], header_line: str | None = None) -> None:
    """Rows of (policy, capacity, seed, hit_ratio)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        if header_line:
            f.write(header_line + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["policy", "capacity", "seed", "hit_ratio"])
        for policy, cap, seed, ratio in rows:
            w.writerow([policy, cap, seed, f"{ratio:.6f}"])
