"""Command line experiment runner.

    pregate-sim refactor    build a toy MoE from a dense FFN, check equivalence
    pregate-sim gen-trace   write a synthetic request trace
    pregate-sim simulate    run the serving simulator, write metrics.csv
    pregate-sim cache-bench hit ratios per policy and capacity
    pregate-sim analyze     transition matrices, mutual information, temporal distance
    pregate-sim report      summarise the CSVs found in --out

Settings come from defaults, then ``--config <json>``, then flags. Exit codes:
0 success, 1 invalid configuration or input, 2 runtime or verification failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import sys
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .container import (
    dense_to_arrays,
    experts_to_arrays,
    router_to_arrays,
    save_arrays,
)
from .expert_cache import Policy, write_sweep_csv
from .experiments import (
    analyze_selection,
    cache_bench_job,
    layerwise_selection_trace,
    make_trace,
    refactor_demo,
    simulate_job,
    trace_selection,
    trace_temporal,
)
from .refactor_core import save_masks, save_profiles
from .routing_analysis import write_temporal_csv, write_transition_csv, transition_matrix
from .serving_sim import CacheConfig, LatencyModel, Scheduler, SimConfig, run_sweep, write_metrics_csv
from .workload import DEFAULT_LOCALITY, TraceFile, load_trace, save_trace

log = logging.getLogger("pregate_moe")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "out"
    # model / refactoring
    num_experts: int | None = None   # None: taken from the input trace, else 8
    top_k: int = 1
    num_layers: int = 2
    hidden: int = 32
    expert_hidden: int | None = None
    width: int = 16
    vocab_size: int = 256
    activation: str = "relu"
    samples_per_domain: int = 256
    permanent_fraction: float = 0.5
    use_permanent: bool = True
    post_activation: bool = False
    router_embed_dim: int = 32
    router_feature_dim: int = 32
    router_heads: int = 2
    router_mlp_dim: int = 32
    distill_steps: int = 100
    distill_lr: float = 1.0
    # workload
    trace: str | None = None
    num_requests: int = 300
    arrival_rate: float = 30.0
    locality: float = DEFAULT_LOCALITY
    prompt_median: float = 64.0
    gen_median: float = 32.0
    num_seeds: int = 1
    # serving
    scheduler: str = "expert-aware"
    schedulers: list[str] = field(default_factory=list)
    cache: str = "belady"
    capacity: int | None = None
    prefetch: str = "on"
    max_batch_tokens: int = 32
    sim_layers: int = 4
    overhead_ms: float = 0.5
    per_expert_ms: float = 1.0
    per_token_ms: float = 0.02
    miss_penalty_ms: float = 5.0
    # cache bench
    capacities: list[int] = field(default_factory=lambda: [2, 3, 4, 5])
    # analysis
    analyze_source: str = "trace"
    analyze_layers: int = 4
    analyze_tokens: int = 20000

    def validate(self) -> None:
        if self.num_experts is not None and (not isinstance(self.num_experts, int) or self.num_experts < 1):
            raise ConfigError(f"num_experts: must be a positive integer, got {self.num_experts!r}")
        positive = ("top_k", "num_layers", "hidden", "width", "vocab_size",
                    "samples_per_domain", "router_embed_dim", "router_feature_dim",
                    "router_heads", "router_mlp_dim", "num_requests", "num_seeds",
                    "max_batch_tokens", "sim_layers", "analyze_layers", "analyze_tokens")
        for name in positive:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name}: must be a positive integer, got {v!r}")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed: must fit in an unsigned 64-bit integer")
        if self.top_k > self.experts:
            raise ConfigError(f"top_k: {self.top_k} exceeds num_experts={self.experts}")
        d = self.d
        if not 1 <= d <= self.hidden:
            raise ConfigError(f"expert_hidden: d={d} must lie in [1, hidden={self.hidden}]")
        if self.activation not in ("relu", "silu"):
            raise ConfigError("activation: expected relu or silu")
        if not 0 < self.permanent_fraction <= 1:
            raise ConfigError("permanent_fraction: must lie in (0, 1]")
        if not 0 <= self.locality <= 1:
            raise ConfigError(f"locality: must lie in [0, 1], got {self.locality}")
        if not self.arrival_rate > 0:
            raise ConfigError("arrival_rate: must be positive")
        for name in ("scheduler", *(["schedulers"] if self.schedulers else [])):
            values = self.schedulers if name == "schedulers" else [self.scheduler]
            for v in values:
                if v not in {s.value for s in Scheduler}:
                    raise ConfigError(f"{name}: unknown scheduler {v!r}")
        if self.cache not in {p.value for p in Policy}:
            raise ConfigError(f"cache: unknown policy {self.cache!r}")
        if self.capacity is not None and self.capacity < 1:
            raise ConfigError("capacity: must be >= 1")
        if any(not isinstance(k, int) or k < 1 for k in self.capacities):
            raise ConfigError("capacities: must be positive integers")
        if self.prefetch not in ("on", "off"):
            raise ConfigError("prefetch: expected on or off")
        for name in ("overhead_ms", "per_expert_ms", "per_token_ms", "miss_penalty_ms"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name}: must be finite and >= 0")
        if self.analyze_source not in ("trace", "layerwise"):
            raise ConfigError("analyze_source: expected trace or layerwise")
        if self.router_feature_dim % self.router_heads or (self.router_feature_dim // self.router_heads) % 2:
            raise ConfigError("router_feature_dim: must split into heads of even size")

    @property
    def experts(self) -> int:
        return 8 if self.num_experts is None else self.num_experts

    @property
    def d(self) -> int:
        return self.hidden // 2 if self.expert_hidden is None else self.expert_hidden

    def content_hash(self) -> str:
        data = dataclasses.asdict(self)
        data.pop("out")
        if data["trace"]:
            # inputs are identified by content, not location
            data["trace"] = hashlib.sha256(Path(self.trace).read_bytes()).hexdigest()
        blob = json.dumps(data, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def header(self) -> str:
        return f"# pregate-moe {__version__} config={self.content_hash()} seed={self.seed}"

    def sim_config(self, scheduler: str | None = None, seed: int | None = None) -> SimConfig:
        return SimConfig(
            scheduler=scheduler or self.scheduler,
            max_batch_tokens=self.max_batch_tokens,
            latency=LatencyModel(self.overhead_ms, self.per_expert_ms, self.per_token_ms,
                                 self.miss_penalty_ms),
            cache=CacheConfig(self.cache, self.capacity),
            prefetch=self.prefetch == "on",
            num_layers=self.sim_layers,
            seed=self.seed if seed is None else seed,
        )

    def trace_kwargs(self) -> dict:
        return dict(num_requests=self.num_requests, arrival_rate=self.arrival_rate,
                    num_experts=self.experts, locality=self.locality, top_k=self.top_k,
                    prompt_median=self.prompt_median, gen_median=self.gen_median)


FLAG_FIELDS = {
    "seed": "seed", "out": "out", "scheduler": "scheduler", "cache": "cache",
    "capacity": "capacity", "prefetch": "prefetch", "locality": "locality",
    "num_experts": "num_experts", "max_batch_tokens": "max_batch_tokens", "trace": "trace",
}


class _Parser(argparse.ArgumentParser):
    """Reports usage errors with the validation exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with ExperimentConfig fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--scheduler", choices=[s.value for s in Scheduler])
    common.add_argument("--cache", choices=[p.value for p in Policy])
    common.add_argument("--capacity", type=int)
    common.add_argument("--prefetch", choices=["on", "off"])
    common.add_argument("--locality", type=float)
    common.add_argument("--num-experts", dest="num_experts", type=int)
    common.add_argument("--max-batch-tokens", dest="max_batch_tokens", type=int)
    common.add_argument("--trace", help="input trace file (simulate, cache-bench, analyze)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="pregate-sim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__doc__.splitlines()[0])
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}:{exc.lineno}: {exc.msg}") from None
        known = {f.name for f in dataclasses.fields(ExperimentConfig)}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(f"{key}: unknown config field")
            setattr(cfg, key, value)
    for flag, name in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, name, value)
    cfg.validate()
    if cfg.trace is not None and not Path(cfg.trace).is_file():
        raise ConfigError(f"trace: file not found: {cfg.trace}")
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_text(path: Path, header: str, body: str) -> None:
    path.write_text(header + "\n" + body, encoding="utf-8")


def _input_trace(cfg: ExperimentConfig) -> TraceFile:
    trace = load_trace(cfg.trace)
    if cfg.num_experts is not None and trace.num_experts != cfg.num_experts:
        raise ConfigError(f"num_experts: trace header says N={trace.num_experts}, "
                          f"config says {cfg.num_experts}")
    return trace


def _traces(cfg: ExperimentConfig) -> list[tuple[int, TraceFile]]:
    if cfg.trace:
        return [(cfg.seed, _input_trace(cfg))]
    return [(s, make_trace(s, **cfg.trace_kwargs())) for s in range(cfg.seed, cfg.seed + cfg.num_seeds)]


# --- subcommands ------------------------------------------------------------

def cmd_refactor(cfg: ExperimentConfig) -> int:
    """Refactor a toy dense FFN into a pre-gated MoE and verify dense equivalence."""
    out = _out_dir(cfg)
    art = refactor_demo(
        seed=cfg.seed, num_experts=cfg.experts, top_k=cfg.top_k, num_layers=cfg.num_layers,
        hidden=cfg.hidden, expert_hidden=cfg.d, width=cfg.width, vocab_size=cfg.vocab_size,
        activation=cfg.activation, samples_per_domain=cfg.samples_per_domain,
        permanent_fraction=cfg.permanent_fraction, use_permanent=cfg.use_permanent,
        post_activation=cfg.post_activation,
        router_dims=(cfg.router_embed_dim, cfg.router_feature_dim, cfg.router_heads,
                     cfg.router_mlp_dim),
        distill_steps=cfg.distill_steps, distill_lr=cfg.distill_lr)
    header = cfg.header()
    save_arrays(out / "dense.pgw", dense_to_arrays(art.dense), header)
    save_arrays(out / "experts.pgw", experts_to_arrays(art.experts), header)
    save_arrays(out / "router.pgw", router_to_arrays(art.router), header)
    save_masks(out / "masks.jsonl", art.masks)
    save_profiles(out / "profiles.jsonl", art.profiles)
    for name in ("masks.jsonl", "profiles.jsonl"):
        p = out / name
        _write_text(p, header, p.read_text())
    _write_text(out / "refactor_report.json", header,
                json.dumps(art.report, indent=2, sort_keys=True) + "\n")
    err = art.report["dense_equivalence_max_rel_error"]
    print(f"dense equivalence max relative error: {err:.3e}")
    print(f"distillation loss: {art.report['distill_loss_initial']:.4f} -> "
          f"{art.report['distill_loss_final']:.4f}")
    if not art.report["dense_equivalence_pass"]:
        print("verification failed: full-mask MoE does not match the dense model", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gen_trace(cfg: ExperimentConfig) -> int:
    """Generate a synthetic trace with Poisson arrivals and Markov expert paths."""
    out = _out_dir(cfg)
    trace = make_trace(cfg.seed, **cfg.trace_kwargs())
    trace.params.update({"tool": f"pregate-moe-{__version__}", "config": cfg.content_hash()})
    path = out / "trace.tsv"
    save_trace(trace, path)
    print(f"wrote {len(trace.requests)} requests to {path}")
    return EXIT_OK


def cmd_simulate(cfg: ExperimentConfig) -> int:
    """Simulate batched serving and write per-scheduler metrics."""
    out = _out_dir(cfg)
    schedulers = cfg.schedulers or [cfg.scheduler]
    jobs = [(trace, cfg.sim_config(s, seed), (s, seed))
            for seed, trace in _traces(cfg) for s in schedulers]
    results = sorted(run_sweep(simulate_job, jobs), key=lambda r: r[0])
    capacity = cfg.capacity or (jobs[0][0].num_experts if jobs else cfg.experts)
    rows = [(s, cfg.cache, capacity, seed, m) for (s, seed), m in results]
    write_metrics_csv(out / "metrics.csv", rows, cfg.header())
    for s, _, _, seed, m in rows:
        print(f"{s:>16} seed={seed} mean={m.mean_norm_latency_ms:.3f} ms/token "
              f"p95={m.p95_norm_latency_ms:.3f} unique={m.mean_unique_experts:.2f} "
              f"hit={m.hit_ratio:.3f}")
    return EXIT_OK


def cmd_cache_bench(cfg: ExperimentConfig) -> int:
    """Sweep cache policies and capacities over simulator reference strings."""
    out = _out_dir(cfg)
    policies = [p.value for p in (Policy.RANDOM, Policy.LRU, Policy.BELADY)]
    jobs = [(trace, cfg.sim_config(), seed, list(cfg.capacities), policies)
            for seed, trace in _traces(cfg)]
    rows = sorted(r for chunk in run_sweep(cache_bench_job, jobs) for r in chunk)
    write_sweep_csv(out / "cache_bench.csv", rows, cfg.header())
    for policy, cap, seed, ratio in rows:
        print(f"{policy:>7} k={cap} seed={seed} hit_ratio={ratio:.4f}")
    return EXIT_OK


def cmd_analyze(cfg: ExperimentConfig) -> int:
    """Redundancy (transition matrix, MI) and temporal-distance statistics."""
    out = _out_dir(cfg)
    header = cfg.header()
    if cfg.analyze_source == "layerwise":
        sel = layerwise_selection_trace(seed=cfg.seed, num_experts=cfg.experts, top_k=cfg.top_k,
                                        num_layers=cfg.analyze_layers, width=cfg.width,
                                        hidden=cfg.hidden, tokens=cfg.analyze_tokens)
        td = None
    else:
        trace = _input_trace(cfg) if cfg.trace else make_trace(cfg.seed, **cfg.trace_kwargs())
        sel = trace_selection(trace, cfg.analyze_layers)
        td = trace_temporal(trace)
    rows = analyze_selection(sel)
    for row in rows:
        write_transition_csv(out / f"transition_l{row['layer']}.csv",
                             transition_matrix(sel, row["layer"]), header)
    with open(out / "mutual_information.csv", "w", newline="", encoding="utf-8") as f:
        f.write(header + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "mi_bits", "h_prev_bits", "h_cur_bits", "visited_states"])
        for r in rows:
            w.writerow([r["layer"], f"{r['mi_bits']:.6f}", f"{r['h_prev_bits']:.6f}",
                        f"{r['h_cur_bits']:.6f}", r["visited_states"]])
            print(f"layer {r['layer']}: I = {r['mi_bits']:.4f} bits, "
                  f"H(prev) = {r['h_prev_bits']:.4f} bits")
    if td is not None:
        write_temporal_csv(out / "temporal_distance.csv", td, header)
        print(f"follow-last fraction {td.follow_last_fraction:.4f}, "
              f"distance-1 share of repeats {td.distance1_fraction:.4f}")
    return EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))


def cmd_report(cfg: ExperimentConfig) -> int:
    """Summarise metrics.csv, cache_bench.csv and mutual_information.csv."""
    out = Path(cfg.out)
    if not out.is_dir():
        raise ConfigError(f"out: directory not found: {out}")
    lines = []
    metrics = out / "metrics.csv"
    if metrics.exists():
        by_sched = defaultdict(list)
        for row in _read_csv(metrics):
            by_sched[row["scheduler"]].append(row)
        lines.append("schedulers (mean over seeds)")
        lines.append(f"  {'scheduler':<18}{'mean ms/tok':>12}{'p95 ms/tok':>12}{'unique':>9}{'tokens':>9}")
        for s in sorted(by_sched):
            rs = by_sched[s]
            avg = {k: np.mean([float(r[k]) for r in rs]) for k in
                   ("mean_norm_latency_ms", "p95_norm_latency_ms", "mean_unique_experts",
                    "mean_batch_tokens")}
            lines.append(f"  {s:<18}{avg['mean_norm_latency_ms']:>12.3f}"
                         f"{avg['p95_norm_latency_ms']:>12.3f}{avg['mean_unique_experts']:>9.2f}"
                         f"{avg['mean_batch_tokens']:>9.1f}")
    bench = out / "cache_bench.csv"
    if bench.exists():
        table = defaultdict(list)
        for row in _read_csv(bench):
            table[(int(row["capacity"]), row["policy"])].append(float(row["hit_ratio"]))
        policies = sorted({p for _, p in table})
        lines.append("cache hit ratio (mean over seeds)")
        lines.append("  capacity" + "".join(f"{p:>10}" for p in policies))
        for cap in sorted({c for c, _ in table}):
            lines.append(f"  {cap:>8}" + "".join(f"{100 * np.mean(table[(cap, p)]):>9.2f}%"
                                                 for p in policies))
    mi = out / "mutual_information.csv"
    if mi.exists():
        lines.append("layer redundancy")
        for row in _read_csv(mi):
            lines.append(f"  layer {row['layer']}: I = {float(row['mi_bits']):.4f} bits "
                         f"of H = {float(row['h_cur_bits']):.4f} bits")
    if not lines:
        raise ConfigError(f"out: no CSV results found in {out}")
    body = "\n".join(lines) + "\n"
    _write_text(out / "report.txt", cfg.header(), body)
    print(body, end="")
    return EXIT_OK


COMMANDS = {
    "refactor": cmd_refactor,
    "gen-trace": cmd_gen_trace,
    "simulate": cmd_simulate,
    "cache-bench": cmd_cache_bench,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # usage errors, --help, --version
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID if isinstance(exc, (FileNotFoundError, ValueError)) else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled failure", exc_info=True)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
