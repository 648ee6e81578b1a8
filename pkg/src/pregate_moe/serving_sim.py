"""Discrete-event simulation of batched MoE serving.

One batch is in flight at a time. Each step admits arrived requests, forms a
batch with the configured scheduler, charges

    overhead + per_expert * |unique experts| + per_token * tokens + unhidden loads

and then advances the clock. Prefill work for a request is its prompt; every
decode step is one token whose expert was fixed by the pre-gating router.

Expert-aware scheduling keeps one FIFO queue per expert and follows the
greedy largest-queue-first batching rule. Baselines keep separate prefill
and decode queues and never look at experts.
"""

from __future__ import annotations

import csv
import io
import math
import os
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Sequence

from .expert_cache import ExpertCache, Layer, Policy, PrefetchPlan, ReferenceString, simulate_prefetch
from .workload import TraceFile

__all__ = [
    "Phase",
    "TokenGroup",
    "ExpertQueueSet",
    "PhaseQueues",
    "BatchPlan",
    "Scheduler",
    "LatencyModel",
    "CacheConfig",
    "SimConfig",
    "SimMetrics",
    "SimResult",
    "schedule_expert_aware",
    "schedule_baseline",
    "run_simulation",
    "percentile",
    "run_sweep",
    "sweep_threads",
    "METRIC_COLUMNS",
    "write_metrics_csv",
]


class Phase(str, Enum):
    PREFILL = "prefill"
    DECODE = "decode"


class Scheduler(str, Enum):
    EXPERT_AWARE = "expert-aware"
    DECODE_PRIORITY = "decode-priority"
    PREFILL_PRIORITY = "prefill-priority"
    FIFO = "fifo"


@dataclass
class TokenGroup:
    """Consecutive schedulable tokens of one request.

    ``tokens`` holds each token's expert set, highest-weight expert first.
    """

    request: int
    phase: Phase
    tokens: list[tuple[int, ...]]
    seq: int = 0
    enqueued_at: float = 0.0

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def primary(self) -> int:
        return self.tokens[0][0]

    def split(self, n: int) -> tuple["TokenGroup", "TokenGroup"]:
        head = replace(self, tokens=self.tokens[:n])
        tail = replace(self, tokens=self.tokens[n:])
        return head, tail


@dataclass
class BatchPlan:
    groups: list[TokenGroup] = field(default_factory=list)
    formed_at: float = 0.0

    @property
    def total_tokens(self) -> int:
        return sum(g.size for g in self.groups)

    @property
    def unique_experts(self) -> frozenset[int]:
        return frozenset(e for g in self.groups for tok in g.tokens for e in tok)

    def expert_order(self) -> list[int]:
        """Distinct experts in the order the batch first touches them."""
        return list(dict.fromkeys(e for g in self.groups for tok in g.tokens for e in tok))

    def __bool__(self) -> bool:
        return self.total_tokens > 0


class ExpertQueueSet:
    """One FIFO of token groups per expert, keyed by each group's primary expert."""

    def __init__(self, num_experts: int):
        self.queues: list[deque[TokenGroup]] = [deque() for _ in range(num_experts)]
        self.lengths = [0] * num_experts
        self._seq = 0

    def push(self, group: TokenGroup) -> None:
        if any(tok[0] != group.primary for tok in group.tokens):
            raise ValueError("all tokens of a group must share their primary expert")
        group.seq = self._seq
        self._seq += 1
        self.queues[group.primary].append(group)
        self.lengths[group.primary] += group.size

    @classmethod
    def from_lengths(cls, lengths: Sequence[int]) -> "ExpertQueueSet":
        q = cls(len(lengths))
        for e, n in enumerate(lengths):
            if n:
                q.push(TokenGroup(-1, Phase.DECODE, [(e,)] * n))
        return q

    def total(self) -> int:
        return sum(self.lengths)

    def take(self, expert: int, n: int) -> list[TokenGroup]:
        """Pop up to ``n`` tokens from the front of one queue, splitting a group if needed."""
        q, out = self.queues[expert], []
        while n > 0 and q:
            g = q[0]
            if g.size <= n:
                q.popleft()
            else:
                g, q[0] = g.split(n)
            out.append(g)
            n -= g.size
            self.lengths[expert] -= g.size
        return out

    def oldest(self) -> TokenGroup | None:
        heads = [q[0] for q in self.queues if q]
        return min(heads, key=lambda g: g.seq) if heads else None


def schedule_expert_aware(queues: ExpertQueueSet, max_tokens: int, now: float = 0.0,
                          max_queue_age: float = math.inf) -> BatchPlan:
    """Largest-queue-first batching.

    Take the longest expert queue whole while it fits strictly inside the
    remaining room; otherwise fill the room with its prefix and stop.
    Queue-length ties go to the lowest expert id.
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    plan = BatchPlan(formed_at=now)
    room = max_tokens
    oldest = queues.oldest()
    if oldest is not None and now - oldest.enqueued_at > max_queue_age:
        forced = queues.take(oldest.primary, min(oldest.size, room))
        plan.groups.extend(forced)
        room -= sum(g.size for g in forced)
    while True:
        lengths = queues.lengths
        longest = max(lengths)
        if longest == 0:
            break
        e = lengths.index(longest)
        if longest < room:
            plan.groups.extend(queues.take(e, longest))
            room -= longest
        elif room >= 0:
            plan.groups.extend(queues.take(e, room))
            break
        else:
            break
    return plan


class PhaseQueues:
    """Separate FIFO queues for prefill and decode work."""

    def __init__(self):
        self.prefill: deque[TokenGroup] = deque()
        self.decode: deque[TokenGroup] = deque()
        self._seq = 0

    def push(self, group: TokenGroup) -> None:
        group.seq = self._seq
        self._seq += 1
        (self.prefill if group.phase is Phase.PREFILL else self.decode).append(group)

    def total(self) -> int:
        return sum(g.size for g in self.prefill) + sum(g.size for g in self.decode)


def _fill_from(q: deque, room: int, out: list) -> int:
    while room > 0 and q:
        g = q[0]
        if g.size <= room:
            q.popleft()
        else:
            g, q[0] = g.split(room)
        out.append(g)
        room -= g.size
    return room


def schedule_baseline(queues: PhaseQueues, policy: Scheduler | str, max_tokens: int,
                      now: float = 0.0) -> BatchPlan:
    """Fill from the favoured phase queue in FIFO order, then the other one.

    A group larger than the remaining room is split (chunked prefill).
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    policy = Scheduler(policy)
    plan = BatchPlan(formed_at=now)
    room = max_tokens
    if policy is Scheduler.DECODE_PRIORITY:
        room = _fill_from(queues.decode, room, plan.groups)
        _fill_from(queues.prefill, room, plan.groups)
    elif policy is Scheduler.PREFILL_PRIORITY:
        room = _fill_from(queues.prefill, room, plan.groups)
        _fill_from(queues.decode, room, plan.groups)
    elif policy is Scheduler.FIFO:
        while room > 0 and (queues.prefill or queues.decode):
            if not queues.decode or (queues.prefill and queues.prefill[0].seq < queues.decode[0].seq):
                q = queues.prefill
            else:
                q = queues.decode
            before = len(plan.groups)
            room = _fill_from_one(q, room, plan.groups)
            assert len(plan.groups) > before
    else:
        raise ValueError(f"{policy.value} is not a baseline scheduler")
    return plan


def _fill_from_one(q: deque, room: int, out: list) -> int:
    g = q[0]
    if g.size <= room:
        q.popleft()
    else:
        g, q[0] = g.split(room)
    out.append(g)
    return room - g.size


# --- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class LatencyModel:
    """Batch cost in ms: overhead + per_expert*unique + per_token*tokens (+ loads)."""

    overhead: float = 0.5
    per_expert: float = 1.0
    per_token: float = 0.02
    miss_penalty: float = 5.0

    def __post_init__(self):
        for name in ("overhead", "per_expert", "per_token", "miss_penalty"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"latency parameter {name} must be finite and >= 0, got {v}")

    def compute_ms(self, unique_experts: int, tokens: int) -> float:
        return self.overhead + self.per_expert * unique_experts + self.per_token * tokens


@dataclass(frozen=True)
class CacheConfig:
    policy: str = "belady"
    capacity: int | None = None   # None: room for every expert
    warm: bool = False            # start with experts 0..capacity-1 resident

    def __post_init__(self):
        Policy(self.policy)
        if self.capacity is not None and self.capacity < 1:
            raise ValueError("cache capacity must be >= 1")


@dataclass(frozen=True)
class SimConfig:
    scheduler: str = Scheduler.EXPERT_AWARE.value
    max_batch_tokens: int = 32
    latency: LatencyModel = LatencyModel()
    cache: CacheConfig | None = CacheConfig()
    prefetch: bool = True
    num_layers: int = 4
    seed: int = 0
    max_queue_age: float = math.inf

    def __post_init__(self):
        Scheduler(self.scheduler)
        if self.max_batch_tokens < 1:
            raise ValueError("max_batch_tokens must be >= 1")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")


@dataclass(frozen=True)
class SimMetrics:
    latencies_ms: tuple[float, ...]
    normalized_ms: tuple[float, ...]
    mean_norm_latency_ms: float
    p95_norm_latency_ms: float
    mean_unique_experts: float
    mean_batch_tokens: float
    hit_ratio: float
    num_batches: int

    def as_row(self) -> list[str]:
        return [f"{self.mean_norm_latency_ms:.6f}", f"{self.p95_norm_latency_ms:.6f}",
                f"{self.mean_unique_experts:.6f}", f"{self.mean_batch_tokens:.6f}",
                f"{self.hit_ratio:.6f}"]


@dataclass
class SimResult:
    metrics: SimMetrics
    references: ReferenceString
    batch_log: list[tuple[float, float, int, int]]   # (start, end, tokens, unique experts)
    admitted_tokens: int
    executed_tokens: int
    queued_tokens: int
    arrivals_ms: list[float]
    finish_ms: list[float]


def percentile(values: Iterable[float], p: float) -> float:
    """Nearest-rank percentile."""
    v = sorted(values)
    if not v:
        raise ValueError("percentile of empty data")
    if not 0 < p <= 100:
        raise ValueError("p must lie in (0, 100]")
    rank = math.ceil(p / 100.0 * len(v))
    return v[max(rank, 1) - 1]


# --- event loop -------------------------------------------------------------

def _batch_duration(cfg: SimConfig, compute: float, misses: int) -> float:
    if misses == 0:
        return compute
    per_layer = compute / cfg.num_layers
    load = misses * cfg.latency.miss_penalty
    plan = PrefetchPlan(tuple(Layer(per_layer, load) for _ in range(cfg.num_layers)))
    mode = "prefetch" if cfg.prefetch else "on-demand"
    return simulate_prefetch(plan, mode).makespan


def _simulate(trace: TraceFile, cfg: SimConfig, cache: ExpertCache | None) -> SimResult:
    n_exp = trace.num_experts
    sched = Scheduler(cfg.scheduler)
    expert_aware = sched is Scheduler.EXPERT_AWARE
    queues = ExpertQueueSet(n_exp) if expert_aware else PhaseQueues()

    reqs = sorted(trace.requests, key=lambda r: (r.arrival_time, r.id))
    arrivals = [r.arrival_time * 1000.0 for r in reqs]
    prompt_left = [r.prompt_len for r in reqs]
    generated = [0] * len(reqs)
    finish = [math.nan] * len(reqs)

    def enqueue_decode(i: int, now: float) -> None:
        r = reqs[i]
        tok = r.expert_path[r.prompt_len + generated[i]]
        queues.push(TokenGroup(i, Phase.DECODE, [tok], enqueued_at=now))

    accesses: list[int] = []
    batch_log = []
    admitted = executed = 0
    clock = 0.0
    nxt = 0
    done = 0
    while done < len(reqs):
        while nxt < len(reqs) and arrivals[nxt] <= clock:
            r = reqs[nxt]
            prompt = list(r.expert_path[:r.prompt_len])
            if expert_aware:
                for e in sorted({tok[0] for tok in prompt}):
                    toks = [tok for tok in prompt if tok[0] == e]
                    queues.push(TokenGroup(nxt, Phase.PREFILL, toks, enqueued_at=clock))
            else:
                queues.push(TokenGroup(nxt, Phase.PREFILL, prompt, enqueued_at=clock))
            admitted += r.prompt_len
            nxt += 1
        if queues.total() == 0:
            clock = max(clock, arrivals[nxt])
            continue

        if expert_aware:
            plan = schedule_expert_aware(queues, cfg.max_batch_tokens, clock, cfg.max_queue_age)
        else:
            plan = schedule_baseline(queues, sched, cfg.max_batch_tokens, clock)
        tokens = plan.total_tokens
        unique = plan.expert_order()
        misses = 0
        for e in unique:
            if cache is not None and not cache.access(e, len(accesses)).hit:
                misses += 1
            accesses.append(e)
        duration = _batch_duration(cfg, cfg.latency.compute_ms(len(unique), tokens), misses)
        start = clock
        clock = clock + duration
        batch_log.append((start, clock, tokens, len(unique)))
        executed += tokens

        for g in plan.groups:
            i = g.request
            if g.phase is Phase.PREFILL:
                prompt_left[i] -= g.size
                if prompt_left[i] == 0:
                    enqueue_decode(i, clock)
                    admitted += 1
            else:
                generated[i] += 1
                if generated[i] == reqs[i].gen_len:
                    finish[i] = clock
                    done += 1
                else:
                    enqueue_decode(i, clock)
                    admitted += 1

    latencies = [f - a for f, a in zip(finish, arrivals)]
    normalized = [lat / r.gen_len for lat, r in zip(latencies, reqs)]
    n_batches = len(batch_log)
    metrics = SimMetrics(
        latencies_ms=tuple(latencies),
        normalized_ms=tuple(normalized),
        mean_norm_latency_ms=sum(normalized) / len(normalized) if normalized else 0.0,
        p95_norm_latency_ms=percentile(normalized, 95) if normalized else 0.0,
        mean_unique_experts=sum(b[3] for b in batch_log) / n_batches if n_batches else 0.0,
        mean_batch_tokens=sum(b[2] for b in batch_log) / n_batches if n_batches else 0.0,
        hit_ratio=cache.hit_ratio if cache is not None else 1.0,
        num_batches=n_batches,
    )
    return SimResult(metrics, ReferenceString(accesses), batch_log, admitted, executed,
                     queues.total(), arrivals, finish)


def run_simulation(trace: TraceFile, config: SimConfig = SimConfig()) -> SimResult:
    """Simulate the whole trace until every request has produced gen_len tokens.

    Belady needs future expert references; they come from a first pass with
    the same scheduler and no cache effects, since scheduling is fixed by the
    pre-gated paths up to timing shifts caused by misses.
    """
    trace.validate()
    for r in trace.requests:
        if any(e >= trace.num_experts for s in r.expert_path for e in s):
            raise ValueError("trace uses an expert id beyond its header's N")
    if config.cache is None:
        return _simulate(trace, config, None)
    capacity = config.cache.capacity or trace.num_experts
    policy = Policy(config.cache.policy)
    refs = None
    if policy is Policy.BELADY:
        refs = _simulate(trace, config, None).references
    cache = ExpertCache(capacity, policy, refs, config.seed)
    if config.cache.warm:
        cache.warm(range(min(capacity, trace.num_experts)))
    return _simulate(trace, config, cache)


# --- sweeps and output ------------------------------------------------------

METRIC_COLUMNS = ["scheduler", "cache_policy", "capacity", "seed", "mean_norm_latency_ms",
                  "p95_norm_latency_ms", "mean_unique_experts", "mean_batch_tokens", "hit_ratio"]


def sweep_threads() -> int:
    try:
        return max(1, int(os.environ.get("PREGATE_SIM_THREADS", "1")))
    except ValueError:
        return 1


def run_sweep(fn: Callable, jobs: Sequence, threads: int | None = None) -> list:
    """Map ``fn`` over ``jobs``; results come back in job order regardless of parallelism."""
    threads = sweep_threads() if threads is None else threads
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def write_metrics_csv(path, rows: Iterable[tuple[str, str, int, int, SimMetrics]],
                      header_line: str | None = None) -> None:
    buf = io.StringIO()
    if header_line:
        buf.write(header_line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for sched, policy, cap, seed, m in rows:
        w.writerow([sched, policy, cap, seed, *m.as_row()])
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())
