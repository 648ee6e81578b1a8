import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pregate_moe.expert_cache import (
    ExpertCache,
    Layer,
    Policy,
    PrefetchPlan,
    ReferenceString,
    hit_ratio,
    optimal_oracle,
    simulate_prefetch,
    write_sweep_csv,
)

refs_strategy = st.lists(st.integers(0, 3), min_size=1, max_size=12)
durations = st.floats(0, 10, allow_nan=False)
layers = st.builds(Layer, durations, durations, st.booleans())


def run(refs, policy, k, seed=0):
    r = ReferenceString(refs)
    cache = ExpertCache(k, policy, r, seed)
    events = [cache.access(e, t) for t, e in r]
    return cache, events


class TestReferenceString:
    def test_next_use(self):
        r = ReferenceString([0, 1, 2, 0, 1])
        assert r.next_use(0, 0) == 3
        assert r.next_use(1, 2) == 4
        assert r.next_use(2, 2) == math.inf
        assert r.next_use(9, 0) == math.inf
        assert r.distinct() == 3

    def test_times_must_increase(self):
        with pytest.raises(ValueError):
            ReferenceString([0, 1], [3, 3])


class TestPolicies:
    def test_belady_hand_example(self):
        cache, events = run([0, 1, 2, 0, 1], Policy.BELADY, 2)
        assert cache.hits == 1 and events[3].hit
        # next uses at t=2: A at 3, B at 4, so B goes
        assert events[2].evicted == 1

    def test_lru_hand_example(self):
        cache, events = run([0, 1, 2, 0, 1], Policy.LRU, 2)
        assert cache.hits == 0
        assert [e.evicted for e in events[2:]] == [0, 1, 2]

    def test_hit_ratios(self):
        r = ReferenceString([0, 1, 2, 0, 1])
        assert hit_ratio(r, "belady", 2) == 0.2
        assert hit_ratio(r, "lru", 2) == 0.0

    @pytest.mark.parametrize("policy", list(Policy))
    @pytest.mark.parametrize("k", [1, 3])
    def test_single_expert(self, policy, k):
        assert hit_ratio(ReferenceString([5] * 8), policy, k) == 7 / 8

    @settings(max_examples=60, deadline=None)
    @given(refs_strategy, st.sampled_from(list(Policy)))
    def test_large_cache_only_cold_misses(self, refs, policy):
        cache, _ = run(refs, policy, 4)
        assert cache.misses == len(set(refs))

    def test_never_used_again_goes_first(self):
        # at t=3 expert 2 is never used again, 0 and 1 are
        _, events = run([0, 1, 2, 3, 0, 1], Policy.BELADY, 3)
        assert events[3].evicted == 2

    def test_belady_ties_to_lowest_id(self):
        _, events = run([3, 1, 2], Policy.BELADY, 2)
        assert events[2].evicted == 1

    def test_random_is_seeded(self):
        refs = [0, 1, 2, 3, 0, 2, 1, 3, 0, 1, 2, 3] * 5
        a = [e.evicted for e in run(refs, Policy.RANDOM, 2, seed=7)[1]]
        b = [e.evicted for e in run(refs, Policy.RANDOM, 2, seed=7)[1]]
        assert a == b

    def test_belady_needs_future(self):
        with pytest.raises(ValueError, match="future"):
            ExpertCache(2, Policy.BELADY)

    def test_bad_capacity(self):
        with pytest.raises(ValueError):
            ExpertCache(0, Policy.LRU)

    def test_empty_reference_string(self):
        with pytest.raises(ValueError, match="empty"):
            hit_ratio(ReferenceString([]), "lru", 2)

    def test_warm_start(self):
        cache = ExpertCache(2, Policy.LRU)
        cache.warm([4, 5, 6])
        assert cache.resident == {4, 5}
        assert cache.access(5, 0).hit


class TestOracle:
    def test_hand_example(self):
        assert optimal_oracle([0, 1, 2, 0, 1], 2) == 1

    def test_empty(self):
        assert optimal_oracle([], 2) == 0

    @settings(max_examples=40, deadline=None)
    @given(refs_strategy)
    def test_large_cache(self, refs):
        assert optimal_oracle(refs, 4) == len(refs) - len(set(refs))

    def test_length_limit(self):
        with pytest.raises(ValueError, match="limited"):
            optimal_oracle([0] * 15, 2)

    @settings(max_examples=150, deadline=None)
    @given(refs_strategy, st.integers(1, 3))
    def test_belady_is_optimal(self, refs, k):
        cache, _ = run(refs, Policy.BELADY, k)
        assert cache.hits == optimal_oracle(refs, k)

    @settings(max_examples=80, deadline=None)
    @given(refs_strategy, st.integers(1, 3), st.sampled_from([Policy.LRU, Policy.RANDOM]))
    def test_no_policy_beats_oracle(self, refs, k, policy):
        assert run(refs, policy, k)[0].hits <= optimal_oracle(refs, k)


class TestCapacityMonotonicity:
    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 6), min_size=1, max_size=60), st.integers(1, 6),
           st.sampled_from([Policy.BELADY, Policy.LRU]))
    def test_hits_non_decreasing(self, refs, k, policy):
        assert run(refs, policy, k)[0].hits <= run(refs, policy, k + 1)[0].hits


class TestPrefetch:
    def test_hand_example(self):
        plan = PrefetchPlan.uniform(3, compute=2, load=1)
        pre = simulate_prefetch(plan, "prefetch")
        assert pre.load_finish == (1, 2, 3)
        assert list(zip(pre.compute_start, pre.compute_finish)) == [(1, 3), (3, 5), (5, 7)]
        assert pre.makespan == 7
        assert simulate_prefetch(plan, "on-demand").makespan == 9

    def test_first_layer_cached(self):
        pre = simulate_prefetch(PrefetchPlan.uniform(3, 2, 1, cached=[0]), "prefetch")
        assert list(zip(pre.compute_start, pre.compute_finish)) == [(0, 2), (2, 4), (4, 6)]
        assert pre.makespan == 6

    @pytest.mark.parametrize("mode", ["prefetch", "on-demand"])
    def test_all_cached(self, mode):
        plan = PrefetchPlan.uniform(4, 1.5, 9.0, cached=range(4))
        assert simulate_prefetch(plan, mode).makespan == 6.0

    @settings(max_examples=200, deadline=None)
    @given(st.lists(layers, min_size=1, max_size=8))
    def test_prefetch_never_worse(self, ls):
        plan = PrefetchPlan(tuple(ls))
        assert simulate_prefetch(plan, "prefetch").makespan <= simulate_prefetch(plan, "on-demand").makespan

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20), st.booleans()),
                    min_size=1, max_size=8))
    def test_exact_when_loads_hide(self, raw):
        ls = [Layer(c, l, cached) for c, l, cached in raw]
        # force every load to fit under the previous compute
        ls = [ls[0]] + [Layer(cur.compute, min(cur.load, prev.compute), cur.cached)
                        for prev, cur in zip(ls, ls[1:])]
        plan = PrefetchPlan(tuple(ls))
        want = ls[0].effective_load + sum(x.compute for x in ls)
        assert simulate_prefetch(plan, "prefetch").makespan == want

    def test_bad_mode(self):
        with pytest.raises(ValueError, match="mode"):
            simulate_prefetch(PrefetchPlan.uniform(1, 1, 1), "eager")

    def test_negative_durations(self):
        with pytest.raises(ValueError):
            PrefetchPlan((Layer(-1, 0),))


def test_sweep_csv(tmp_path):
    path = tmp_path / "s.csv"
    write_sweep_csv(path, [("lru", 2, 0, 0.25)], "# h")
    assert path.read_text().splitlines() == ["# h", "policy,capacity,seed,hit_ratio", "lru,2,0,0.250000"]
