"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (also collected in the pytest
terminal summary) and asserts its criterion at the stated tolerance and
runtime budget.
"""

import math
import time
from itertools import combinations

import numpy as np

from pregate_moe.cli import ExperimentConfig, main
from pregate_moe.expert_cache import (
    ExpertCache,
    Layer,
    Policy,
    PrefetchPlan,
    ReferenceString,
    hit_ratio,
    optimal_oracle,
    simulate_prefetch,
)
from pregate_moe.ffn import DenseFFN, ExpertMask
from pregate_moe.moe_model import (
    RoutingDecision,
    dense_forward,
    kl_divergence,
    loss_gradient_wrt_logits,
    pregated_moe_forward,
    softmax,
)
from pregate_moe.refactor_core import ActivationProfile, build_expert, solve_expert_mask
from pregate_moe.routing_analysis import (
    SelectionTrace,
    entropy,
    mutual_information,
    mutual_information_between,
    temporal_distance,
    transition_matrix,
)
from pregate_moe.serving_sim import ExpertQueueSet, SimConfig, run_simulation, schedule_expert_aware
from pregate_moe.workload import DEFAULT_LOCALITY, generate_trace

SEEDS = range(20)


def timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def test_c01_mask_optimality(criterion):
    line = criterion(1, "mask optimality vs exhaustive subsets")

    def check():
        rng = np.random.default_rng(101)
        bad = pairs = 0
        for i in range(200):
            D = int(rng.integers(1, 13))
            # half the instances use small integers so ties occur
            scores = rng.integers(0, 4, D).astype(float) if i % 2 else rng.random(D)
            prof = ActivationProfile(0, scores[None, :])
            for d in range(1, D + 1):
                got = sum(scores[c] for c in solve_expert_mask(prof, 0, d).selected)
                best = max(sum(scores[c] for c in s) for s in combinations(range(D), d))
                bad += got != best
                pairs += 1
        return bad, pairs

    (bad, pairs), secs = timed(check)
    ok = line.done(bad == 0 and secs < 10, f"{pairs} (instance, d) pairs, {bad} mismatches, {secs:.2f} s")
    assert ok


def test_c02_dense_equivalence(criterion):
    line = criterion(2, "full-mask pre-gated MoE equals dense forward")

    def check():
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            D, L = int(rng.integers(1, 65)), int(rng.integers(1, 5))
            width, n_exp = int(rng.integers(2, 17)), int(rng.integers(1, 9))
            model = DenseFFN.random(rng, L, D, width, "relu" if seed % 2 else "silu")
            experts = [build_expert(model, [ExpertMask.full(l, D) for l in range(L)])
                       for _ in range(n_exp)]
            x = rng.normal(size=(8, width))
            decisions = [RoutingDecision.from_logits(z, 1) for z in rng.normal(size=(8, n_exp))]
            got = pregated_moe_forward(experts, decisions, x)
            want = dense_forward(model, x)
            den = np.maximum(np.linalg.norm(want, axis=1), 1e-300)
            worst = max(worst, float(np.max(np.linalg.norm(got - want, axis=1) / den)))
        return worst

    worst, secs = timed(check)
    ok = line.done(worst < 1e-6 and secs < 30, f"max relative error {worst:.2e} over 100 models, {secs:.2f} s")
    assert ok


def test_c03_distillation_loss(criterion):
    line = criterion(3, "distillation loss sign, zero set and gradient")

    def check():
        rng = np.random.default_rng(303)
        min_loss, zero_max, distinct_min, grad_err = math.inf, 0.0, math.inf, 0.0
        for _ in range(100):
            n = int(rng.integers(2, 9))
            z = rng.normal(0, 2, n)
            q = softmax(rng.normal(0, 2, n))
            p = softmax(z)
            loss = kl_divergence(p, q)
            min_loss = min(min_loss, loss)
            if np.max(np.abs(p - q)) > 1e-3:
                distinct_min = min(distinct_min, loss)
            zero_max = max(zero_max, kl_divergence(softmax(np.log(q) + rng.normal()), q))
            g = loss_gradient_wrt_logits(z, q)
            h = 1e-5
            fd = np.array([(kl_divergence(softmax(z + h * e), q) - kl_divergence(softmax(z - h * e), q))
                           / (2 * h) for e in np.eye(n)])
            grad_err = max(grad_err, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
        return min_loss, zero_max, distinct_min, grad_err

    (min_loss, zero_max, distinct_min, grad_err), secs = timed(check)
    ok = min_loss >= 0 and zero_max <= 1e-9 and distinct_min > 0 and grad_err < 1e-4 and secs < 5
    line.done(ok, f"min loss {min_loss:.2e}, loss at equality {zero_max:.1e}, "
                  f"gradient rel. error {grad_err:.1e}, {secs:.2f} s")
    assert ok


def test_c04_belady_optimality(criterion):
    line = criterion(4, "Belady hits equal the exhaustive optimum")

    def check():
        rng = np.random.default_rng(404)
        bad = 0
        for _ in range(500):
            refs = rng.integers(0, int(rng.integers(1, 5)), int(rng.integers(1, 13))).tolist()
            k = int(rng.integers(1, 4))
            r = ReferenceString(refs)
            cache = ExpertCache(k, Policy.BELADY, r)
            for t, e in r:
                cache.access(e, t)
            bad += cache.hits != optimal_oracle(refs, k)
        return bad

    bad, secs = timed(check)
    ok = line.done(bad == 0 and secs < 60, f"500 strings, {bad} mismatches, {secs:.2f} s")
    assert ok


def test_c05_cache_policy_ordering(criterion):
    line = criterion(5, "hit ratio ordering Belady >= LRU, Random")

    def check():
        ratios = {(p, k): [] for p in Policy for k in (2, 3, 4, 5)}
        sizes = []
        for seed in SEEDS:
            trace = generate_trace(360, 30.0, num_experts=8, locality=DEFAULT_LOCALITY, seed=seed)
            refs = run_simulation(trace, SimConfig(cache=None, seed=seed)).references
            sizes.append(len(refs))
            for (p, k), acc in ratios.items():
                acc.append(hit_ratio(refs, p, k, seed))
        return {key: float(np.mean(v)) for key, v in ratios.items()}, sizes

    (mean, sizes), secs = timed(check)
    ok = secs < 60
    for k in (2, 3, 4, 5):
        ok &= mean[(Policy.BELADY, k)] >= mean[(Policy.LRU, k)]
        ok &= mean[(Policy.BELADY, k)] >= mean[(Policy.RANDOM, k)]
    gap = mean[(Policy.BELADY, 2)] - mean[(Policy.LRU, 2)]
    ok &= gap >= 0.02
    table = ", ".join(f"k={k} {100 * mean[(Policy.BELADY, k)]:.1f}/{100 * mean[(Policy.LRU, k)]:.1f}/"
                      f"{100 * mean[(Policy.RANDOM, k)]:.1f}%" for k in (2, 3, 4, 5))
    line.done(ok, f"Belady/LRU/Random {table}; k=2 gap {100 * gap:.1f} pp; "
                  f"~{int(np.mean(sizes))} accesses per trace, {secs:.1f} s")
    assert ok


def test_c06_batching_benefit(criterion):
    line = criterion(6, "expert-aware batching beats both baselines")
    cfg = ExperimentConfig()

    def check():
        out = {}
        for sched in ("expert-aware", "decode-priority", "prefill-priority"):
            ms = []
            for seed in SEEDS:
                trace = generate_trace(cfg.num_requests, cfg.arrival_rate, seed=seed)
                ms.append(run_simulation(trace, cfg.sim_config(sched, seed)).metrics)
            out[sched] = {
                "unique": np.mean([m.mean_unique_experts for m in ms]),
                "mean": np.mean([m.mean_norm_latency_ms for m in ms]),
                "p95": np.mean([m.p95_norm_latency_ms for m in ms]),
            }
        return out

    res, secs = timed(check)
    ea = res["expert-aware"]
    ok = secs < 120
    for base in ("decode-priority", "prefill-priority"):
        b = res[base]
        ok &= ea["unique"] <= 0.8 * b["unique"]
        ok &= ea["mean"] < b["mean"]
        ok &= ea["p95"] < b["p95"]
    detail = "; ".join(f"{s} unique {r['unique']:.2f} mean {r['mean']:.2f} p95 {r['p95']:.2f} ms/token"
                       for s, r in res.items())
    line.done(ok, f"{detail}; {secs:.1f} s")
    assert ok


def test_c07_prefetch_pipeline(criterion):
    line = criterion(7, "prefetch never slower, exact when loads hide")

    def check():
        rng = np.random.default_rng(707)
        worse = inexact = hidden = 0
        for i in range(1000):
            L = int(rng.integers(1, 9))
            compute = rng.integers(0, 10, L).astype(float)
            load = rng.integers(0, 10, L).astype(float)
            cached = rng.random(L) < 0.3
            if i % 2:
                # every load fits under the compute before it
                load[1:] = np.minimum(load[1:], compute[:-1])
            plan = PrefetchPlan(tuple(Layer(c, l, bool(h)) for c, l, h in zip(compute, load, cached)))
            pre = simulate_prefetch(plan, "prefetch").makespan
            worse += pre > simulate_prefetch(plan, "on-demand").makespan
            eff = [x.effective_load for x in plan.layers]
            if all(eff[j] <= compute[j - 1] for j in range(1, L)):
                hidden += 1
                inexact += pre != eff[0] + compute.sum()
        hand = PrefetchPlan.uniform(3, 2.0, 1.0)
        return worse, inexact, hidden, (simulate_prefetch(hand, "prefetch").makespan,
                                        simulate_prefetch(hand, "on-demand").makespan)

    (worse, inexact, hidden, hand), secs = timed(check)
    ok = worse == 0 and inexact == 0 and hand == (7.0, 9.0) and secs < 5
    line.done(ok, f"1000 plans, {worse} slower, {inexact}/{hidden} inexact, "
                  f"hand example {hand[0]:g} vs {hand[1]:g}, {secs:.2f} s")
    assert ok


def test_c08_redundancy_analytics(criterion):
    line = criterion(8, "transition matrix and mutual information sanity")

    def check():
        rng = np.random.default_rng(808)
        sets = np.array([np.sort(rng.choice(8, 2, replace=False)) for _ in range(2000)])
        copy = SelectionTrace.layer_constant(sets, 3, 8)
        tm = transition_matrix(copy, 1)
        identity = all(tm.probs[i][i] == 1.0 and tm.probs[i].sum() == 1.0 for i in tm.visited())
        exact = mutual_information(copy, 2) == entropy(np.bincount(copy.state_ids(1)))
        pairs = rng.integers(0, 8, (100_000, 2))
        indep = SelectionTrace(pairs[:, :, None], 8)
        mi_indep = mutual_information(indep, 1)
        asym = 0.0
        for _ in range(50):
            t = SelectionTrace(rng.integers(0, 5, (int(rng.integers(1, 300)), 2))[:, :, None], 5)
            asym = max(asym, abs(mutual_information_between(t, 0, 1) - mutual_information_between(t, 1, 0)))
        return identity, exact, mi_indep, asym

    (identity, exact, mi_indep, asym), secs = timed(check)
    ok = identity and exact and abs(mi_indep) < 0.01 and asym < 1e-9 and secs < 10
    line.done(ok, f"identity {identity}, I(copy) = H(S) {exact}, independent I {mi_indep:.4f} bits, "
                  f"max asymmetry {asym:.1e}, {secs:.2f} s")
    assert ok


def test_c09_locality_calibration(criterion):
    line = criterion(9, "follow-last fraction matches p + (1-p)/N")

    def fraction(p, seed):
        trace = generate_trace(1100, 50.0, num_experts=8, locality=p, seed=seed)
        tokens = sum(r.num_tokens for r in trace.requests)
        return temporal_distance([r.primary_path for r in trace.requests]).follow_last_fraction, tokens

    def check():
        errs = {}
        for p in (0.0, 0.25, 0.5, 0.7, 0.9):
            f, tokens = fraction(p, 90)
            assert tokens >= 100_000
            errs[p] = f - (p + (1 - p) / 8)
        default, _ = fraction(DEFAULT_LOCALITY, 91)
        return errs, default

    (errs, default), secs = timed(check)
    worst = max(abs(e) for e in errs.values())
    ok = worst <= 0.02 and abs(default - 0.713) <= 0.02 and secs < 10
    line.done(ok, f"max deviation {worst:.4f} over p in {sorted(errs)}, "
                  f"default locality gives {default:.4f}, {secs:.2f} s")
    assert ok


def test_c10_algorithm_conformance(criterion):
    line = criterion(10, "largest-queue-first batching conformance")

    def check():
        q = ExpertQueueSet.from_lengths([3, 2, 5])
        plan = schedule_expert_aware(q, 7)
        taken = [(g.primary, g.size) for g in plan.groups]
        example = taken == [(2, 5), (0, 2)] and q.lengths == [1, 2, 0]
        rng = np.random.default_rng(1010)
        over = 0
        for _ in range(100_000):
            lengths = rng.integers(0, 20, int(rng.integers(1, 9))).tolist()
            m = int(rng.integers(1, 64))
            over += schedule_expert_aware(ExpertQueueSet.from_lengths(lengths), m).total_tokens > m
        return example, taken, over

    (example, taken, over), secs = timed(check)
    ok = example and over == 0 and secs < 10
    line.done(ok, f"worked example took {taken}, {over} of 100000 states over budget, {secs:.2f} s")
    assert ok


def test_c11_cli_determinism(criterion, tmp_path):
    line = criterion(11, "every CLI subcommand is byte-for-byte deterministic")
    commands = ["refactor", "gen-trace", "simulate", "cache-bench", "analyze", "report"]

    def check():
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            codes = [main([c, "--out", str(out), "--seed", "11"]) for c in commands]
            assert codes == [0] * len(commands), codes
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        return outs

    (a, b), secs = timed(check)
    differ = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = not differ and len(a) > 0
    line.done(ok, f"{len(a)} output files, {len(differ)} differ{' ' + str(differ) if differ else ''}, "
                  f"{secs:.1f} s")
    assert ok
