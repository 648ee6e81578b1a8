"""Synthetic request traces with pre-gated expert paths.

Trace file layout (text, one request per line)::

    #pregate-trace v1 N=<n> K=<k> seed=<s>
    #params key=value key=value ...          (optional, any number of # lines)
    <id>\t<arrival s, 6 decimals>\t<prompt_len>\t<gen_len>\t<e,e,e,...>

Each entry of the expert list is one token: a single id for top-1 routing or
``a+b`` for a top-k set (highest weight first). The list covers the prompt
followed by every generated token.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Request",
    "TraceFile",
    "TraceFormatError",
    "DEFAULT_LOCALITY",
    "generate_trace",
    "pregate_trace",
    "save_trace",
    "load_trace",
    "dumps_trace",
    "loads_trace",
    "locality_for_follow_fraction",
]

# p solving p + (1 - p)/8 = 2921/4096, the measured follow-last share being modelled
DEFAULT_LOCALITY = 0.672


def locality_for_follow_fraction(fraction: float, num_experts: int) -> float:
    """Invert the Markov kernel's repeat probability p + (1-p)/N."""
    base = 1.0 / num_experts
    return (fraction - base) / (1.0 - base)


class TraceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Request:
    id: int
    arrival_time: float
    prompt_len: int
    gen_len: int
    expert_path: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.prompt_len < 1 or self.gen_len < 1:
            raise ValueError(f"request {self.id}: prompt_len and gen_len must be >= 1")
        if self.arrival_time < 0 or not math.isfinite(self.arrival_time):
            raise ValueError(f"request {self.id}: bad arrival time {self.arrival_time}")
        if len(self.expert_path) != self.prompt_len + self.gen_len:
            raise ValueError(f"request {self.id}: expert path covers {len(self.expert_path)} "
                             f"tokens, expected {self.prompt_len + self.gen_len}")

    @property
    def primary_path(self) -> list[int]:
        return [s[0] for s in self.expert_path]

    @property
    def num_tokens(self) -> int:
        return self.prompt_len + self.gen_len


@dataclass
class TraceFile:
    num_experts: int
    top_k: int = 1
    seed: int = 0
    requests: list[Request] = field(default_factory=list)
    params: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        last = -math.inf
        for r in self.requests:
            if r.arrival_time < last:
                raise ValueError(f"request {r.id} arrives out of order")
            last = r.arrival_time
            for s in r.expert_path:
                if len(s) != self.top_k:
                    raise ValueError(f"request {r.id}: expected {self.top_k} experts per token")
                if any(not 0 <= e < self.num_experts for e in s):
                    raise ValueError(f"request {r.id}: expert id outside [0, {self.num_experts})")


def _lognormal_len(rng: np.random.Generator, median: float, sigma: float, cap: int) -> int:
    return int(min(cap, max(1, round(rng.lognormal(math.log(median), sigma)))))


def _markov_path(rng: np.random.Generator, length: int, num_experts: int, locality: float,
                 top_k: int) -> tuple[tuple[int, ...], ...]:
    keep = rng.random(length) < locality
    fresh = rng.integers(0, num_experts, length)
    primary = np.empty(length, dtype=np.int64)
    primary[0] = fresh[0]
    for t in range(1, length):
        primary[t] = primary[t - 1] if keep[t] else fresh[t]
    if top_k == 1:
        return tuple((int(e),) for e in primary)
    path = []
    for e in primary:
        others = [o for o in range(num_experts) if o != e]
        extra = rng.choice(others, size=top_k - 1, replace=False)
        path.append((int(e), *(int(o) for o in extra)))
    return tuple(path)


def generate_trace(num_requests: int, arrival_rate: float, num_experts: int = 8,
                   locality: float = DEFAULT_LOCALITY, seed: int = 0, top_k: int = 1,
                   prompt_median: float = 64, gen_median: float = 32, length_sigma: float = 0.5,
                   max_prompt: int = 512, max_gen: int = 256) -> TraceFile:
    """Poisson arrivals; per request a Markov chain over experts.

    Token 0 picks an expert uniformly. Each later token keeps its
    predecessor's expert with probability ``locality`` and otherwise draws
    uniformly from all experts (possibly the same one again).
    """
    if num_requests < 0:
        raise ValueError("num_requests must be >= 0")
    if not arrival_rate > 0 or not math.isfinite(arrival_rate):
        raise ValueError("arrival_rate must be positive")
    if num_experts < 1:
        raise ValueError("num_experts must be >= 1")
    if not 0.0 <= locality <= 1.0:
        raise ValueError("locality must lie in [0, 1]")
    if not 1 <= top_k <= num_experts:
        raise ValueError("top_k must lie in [1, num_experts]")
    if prompt_median <= 0 or gen_median <= 0 or length_sigma < 0:
        raise ValueError("length distribution parameters must be positive")

    arrival_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    arrivals = np.round(np.cumsum(arrival_rng.exponential(1.0 / arrival_rate, num_requests)), 6)
    requests = []
    for rid in range(num_requests):
        # independent stream per request, so generation order does not matter
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, rid)))
        prompt = _lognormal_len(rng, prompt_median, length_sigma, max_prompt)
        gen = _lognormal_len(rng, gen_median, length_sigma, max_gen)
        path = _markov_path(rng, prompt + gen, num_experts, locality, top_k)
        requests.append(Request(rid, float(arrivals[rid]), prompt, gen, path))
    params = {
        "arrival_rate": repr(float(arrival_rate)),
        "locality": repr(float(locality)),
        "num_requests": str(num_requests),
        "prompt_median": repr(float(prompt_median)),
        "gen_median": repr(float(gen_median)),
        "length_sigma": repr(float(length_sigma)),
    }
    return TraceFile(num_experts, top_k, seed, requests, params)


def pregate_trace(router, token_id_sequences: Sequence[Sequence[int]], arrivals: Sequence[float],
                  prompt_lens: Sequence[int], num_experts: int | None = None,
                  seed: int = 0) -> TraceFile:
    """Fill expert paths by running the pre-gating router over each request's tokens."""
    from .moe_model import pregate

    n = router.config.num_experts
    if num_experts is not None and num_experts != n:
        raise ValueError(f"router routes over {n} experts, trace expects {num_experts}")
    if not (len(token_id_sequences) == len(arrivals) == len(prompt_lens)):
        raise ValueError("need one arrival time and prompt length per sequence")
    order = sorted(range(len(arrivals)), key=lambda i: (arrivals[i], i))
    requests = []
    for rid, i in enumerate(order):
        ids = token_id_sequences[i]
        gen = len(ids) - prompt_lens[i]
        decisions = pregate(router, ids)
        path = tuple(d.experts for d in decisions)
        requests.append(Request(rid, round(float(arrivals[i]), 6), int(prompt_lens[i]), gen, path))
    return TraceFile(n, router.config.top_k, seed, requests, {"source": "router"})


# --- serialisation ----------------------------------------------------------

_HEADER = re.compile(r"^#pregate-trace v1 N=(\d+) K=(\d+) seed=(\d+)$")


def dumps_trace(trace: TraceFile) -> str:
    lines = [f"#pregate-trace v1 N={trace.num_experts} K={trace.top_k} seed={trace.seed}"]
    if trace.params:
        lines.append("#params " + " ".join(f"{k}={v}" for k, v in sorted(trace.params.items())))
    for r in trace.requests:
        path = ",".join("+".join(str(e) for e in s) for s in r.expert_path)
        lines.append(f"{r.id}\t{r.arrival_time:.6f}\t{r.prompt_len}\t{r.gen_len}\t{path}")
    return "\n".join(lines) + "\n"


def loads_trace(text: str, source: str = "<trace>") -> TraceFile:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise TraceFormatError(f"{source}: missing header")
    m = _HEADER.match(lines[0].rstrip("\r"))
    if not m:
        raise TraceFormatError(f"{source}:1: missing header (got {lines[0][:40]!r})")
    n, k, seed = (int(g) for g in m.groups())
    if n < 1 or not 1 <= k <= n:
        raise TraceFormatError(f"{source}:1: invalid N={n} K={k}")
    trace = TraceFile(n, k, seed)
    last = -math.inf
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("#params "):
                for item in line[len("#params "):].split():
                    key, _, value = item.partition("=")
                    trace.params[key] = value
            continue
        fields = line.split("\t")
        try:
            if len(fields) != 5:
                raise ValueError(f"expected 5 tab-separated fields, got {len(fields)}")
            rid, prompt, gen = int(fields[0]), int(fields[2]), int(fields[3])
            arrival = float(fields[1])
            path = tuple(tuple(int(e) for e in tok.split("+")) for tok in fields[4].split(","))
            for s in path:
                if len(s) != k:
                    raise ValueError(f"token lists {len(s)} experts, header says K={k}")
                for e in s:
                    if not 0 <= e < n:
                        raise ValueError(f"expert id {e} outside [0, {n})")
            if arrival < last:
                raise ValueError("records not sorted by arrival time")
            last = arrival
            trace.requests.append(Request(rid, arrival, prompt, gen, path))
        except ValueError as exc:
            raise TraceFormatError(f"{source}:{lineno}: {exc}") from None
    return trace


def save_trace(trace: TraceFile, path: str | Path) -> None:
    Path(path).write_text(dumps_trace(trace), encoding="utf-8")


def load_trace(path: str | Path) -> TraceFile:
    return loads_trace(Path(path).read_text(encoding="utf-8"), str(path))
