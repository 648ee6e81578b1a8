"""End-to-end experiment drivers used by the command line tool."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import expert_cache as ec
from .ffn import DenseFFN, ExpertMask, ExpertWeights
from .moe_model import (
    LayerwiseRouter,
    PreGateRouter,
    RouterConfig,
    RoutingDecision,
    dense_forward,
    layerwise_moe_forward,
    pregate,
    pregated_moe_forward,
    teacher_distribution,
    top50_mask_from_dense,
    train_gating_head,
)
from .refactor_core import (
    ActivationProfile,
    PermanentChannelSet,
    build_expert,
    compute_activation_profile,
    detect_permanent_channels,
    solve_expert_mask,
)
from .routing_analysis import (
    SelectionTrace,
    entropy,
    mutual_information,
    temporal_distance,
    transition_matrix,
)
from .serving_sim import SimConfig, run_simulation
from .workload import TraceFile, generate_trace


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Largest per-row ||a - b|| / ||b||."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    num = np.linalg.norm(a - b, axis=1)
    den = np.maximum(np.linalg.norm(b, axis=1), 1e-300)
    return float(np.max(num / den))


@dataclass
class RefactorArtifacts:
    dense: DenseFFN
    embeddings: np.ndarray
    profiles: list[ActivationProfile]
    masks: list[list[ExpertMask]]
    permanent: PermanentChannelSet
    experts: list[ExpertWeights]
    router: PreGateRouter
    report: dict = field(default_factory=dict)


def refactor_demo(*, seed: int, num_experts: int, top_k: int, num_layers: int, hidden: int,
                  expert_hidden: int, width: int, vocab_size: int, activation: str,
                  samples_per_domain: int, permanent_fraction: float, use_permanent: bool,
                  post_activation: bool, router_dims: tuple[int, int, int, int],
                  distill_steps: int, distill_lr: float) -> RefactorArtifacts:
    """Dense model -> domain profiles -> masks -> experts -> tuned router.

    Domains are contiguous blocks of the vocabulary whose embeddings cluster
    around a per-domain centre.
    """
    rng = np.random.default_rng(seed)
    dense = DenseFFN.random(rng, num_layers, hidden, width, activation)
    centres = rng.normal(0.0, 1.5, (num_experts, width))
    domain_of = np.arange(vocab_size) * num_experts // vocab_size
    embeddings = centres[domain_of] + 0.5 * rng.normal(0.0, 1.0, (vocab_size, width))

    profiles = []
    for dom in range(num_experts):
        tokens = rng.choice(np.flatnonzero(domain_of == dom), samples_per_domain)
        profiles.append(compute_activation_profile(dense, embeddings[tokens], dom,
                                                   post_activation=post_activation))
    masks = [[solve_expert_mask(p, l, expert_hidden) for l in range(num_layers)] for p in profiles]
    permanent = detect_permanent_channels(profiles, permanent_fraction)
    experts = [build_expert(dense, m, permanent if use_permanent else None) for m in masks]

    # full-width experts with top-1 routing must reproduce the dense model
    full = [build_expert(dense, [ExpertMask.full(l, hidden) for l in range(num_layers)])
            for _ in range(num_experts)]
    probe = embeddings[rng.integers(0, vocab_size, 64)]
    decisions = [RoutingDecision.from_logits(z, 1) for z in rng.normal(size=(64, num_experts))]
    equiv_err = max_relative_error(pregated_moe_forward(full, decisions, probe),
                                   dense_forward(dense, probe))

    # pruned expert error, in-domain vs out-of-domain
    in_err, out_err = [], []
    for dom, ex in enumerate(experts):
        for other in range(num_experts):
            x = embeddings[domain_of == other][:16]
            err = max_relative_error(ex.forward(x), dense_forward(dense, x))
            (in_err if other == dom else out_err).append(err)

    embed_dim, feature_dim, heads, mlp_dim = router_dims
    rcfg = RouterConfig(vocab_size, embed_dim, feature_dim, heads, mlp_dim, num_experts, top_k)
    router = PreGateRouter.random(rcfg, rng)
    layer0 = [m[0] for m in masks]
    teacher = np.array([teacher_distribution(top50_mask_from_dense(dense, embeddings[v])[0], layer0)
                        for v in range(vocab_size)])
    seqs = []
    for _ in range(2 * num_experts):
        dom = int(rng.integers(0, num_experts))
        seqs.append(rng.choice(np.flatnonzero(domain_of == dom), 16).tolist())
    tuned, history = train_gating_head(router, seqs, [teacher[s] for s in seqs],
                                       lr=distill_lr, steps=distill_steps)
    agree = [d.primary == int(np.argmax(teacher[t]))
             for s in seqs for d, t in zip(pregate(tuned, s, 1), s)]

    report = {
        "dense_equivalence_max_rel_error": equiv_err,
        "dense_equivalence_pass": equiv_err < 1e-6,
        "expert_hidden": expert_hidden,
        "expert_widths": [len(ex.channels[0]) for ex in experts],
        "permanent_channels": [list(c) for c in permanent.channels],
        "pruned_in_domain_rel_error": float(np.mean(in_err)),
        "pruned_out_of_domain_rel_error": float(np.mean(out_err)) if out_err else 0.0,
        "distill_loss_initial": history[0],
        "distill_loss_final": history[-1],
        "router_teacher_argmax_agreement": float(np.mean(agree)),
        "router_params": tuned.num_params(),
    }
    return RefactorArtifacts(dense, embeddings, profiles, masks, permanent, experts, tuned, report)


def layerwise_selection_trace(*, seed: int, num_experts: int, top_k: int, num_layers: int,
                              width: int, hidden: int, tokens: int) -> SelectionTrace:
    """Route random inputs through a toy layer-wise MoE and record its selections."""
    rng = np.random.default_rng(seed)
    dense = DenseFFN.random(rng, num_layers, hidden, width)
    experts = []
    for _ in range(num_experts):
        masks = [ExpertMask(l, hidden, tuple(sorted(rng.choice(hidden, hidden // 2, replace=False))))
                 for l in range(num_layers)]
        experts.append(build_expert(dense, masks))
    router = LayerwiseRouter.random(rng, num_layers, num_experts, width)
    _, trace = layerwise_moe_forward(experts, router, top_k, rng.normal(size=(tokens, width)))
    return trace


def analyze_selection(trace: SelectionTrace) -> list[dict]:
    rows = []
    for l in range(1, trace.num_layers):
        rows.append({
            "layer": l,
            "mi_bits": mutual_information(trace, l),
            "h_prev_bits": entropy(np.bincount(trace.state_ids(l - 1))),
            "h_cur_bits": entropy(np.bincount(trace.state_ids(l))),
            "visited_states": len(transition_matrix(trace, l).visited()),
        })
    return rows


def trace_selection(trace: TraceFile, num_layers: int) -> SelectionTrace:
    sets = [s for r in trace.requests for s in r.expert_path]
    return SelectionTrace.layer_constant(sets, num_layers, trace.num_experts)


def trace_temporal(trace: TraceFile):
    return temporal_distance([r.primary_path for r in trace.requests])


# --- sweeps (top-level functions so they pickle for process pools) ----------

def simulate_job(job: tuple) -> tuple:
    trace, sim_cfg, label = job
    return label, run_simulation(trace, sim_cfg).metrics


def cache_bench_job(job: tuple) -> list[tuple]:
    trace, sim_cfg, seed, capacities, policies = job
    refs = run_simulation(trace, SimConfig(
        scheduler=sim_cfg.scheduler, max_batch_tokens=sim_cfg.max_batch_tokens,
        latency=sim_cfg.latency, cache=None, prefetch=sim_cfg.prefetch,
        num_layers=sim_cfg.num_layers, seed=seed)).references
    return [(p, k, seed, ec.hit_ratio(refs, p, k, seed)) for p in policies for k in capacities]


def make_trace(seed: int, *, num_requests: int, arrival_rate: float, num_experts: int,
               locality: float, top_k: int, prompt_median: float, gen_median: float) -> TraceFile:
    return generate_trace(num_requests, arrival_rate, num_experts, locality, seed, top_k,
                          prompt_median, gen_median)
