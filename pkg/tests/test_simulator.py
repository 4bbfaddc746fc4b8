import dataclasses

import numpy as np
import pytest
from scipy.stats import beta as beta_dist
from scipy.stats import kstest, norm

from ridegym.config import ScenarioConfig
from ridegym.simulator import (
    RideGym,
    apply_price_adjustments,
    branch_outcomes,
    dispatch_and_complete,
    draw_slot_orders,
    generate_slot_orders,
    passenger_select,
    price_density,
    quote_sigma_for,
    rank_and_autoselect,
    run_logged_episode,
    slot_rng,
    write_episode_csv,
)

COUPONS = np.array([0.0, 0.05, 0.10, 0.15, 0.20])


def small_config(**kw):
    base = dict(
        num_rsps=5,
        change_probability=0.1,
        adjustment_bounds=(-0.02, 0.02),
        topk_base=2,
        passenger_select_base=1.05,
        orders_per_slot=2000,
        slots_pretrain=24,
        slots_train=24,
        slots_test=24,
        seed=99,
    )
    base.update(kw)
    return ScenarioConfig(**base)


class TestGenerateSlotOrders:
    def test_uniform_mixture_splits_one_per_slot(self):
        config = small_config(
            orders_per_slot=24, order_count_mixture=((1.0, 12.0, 1e6),)
        )
        for slot in range(24):
            rng = slot_rng(config.seed, (0, 0, 0), 2, slot)
            orders = generate_slot_orders(config, slot, rng)
            assert len(orders) == 1

    def test_determinism_same_seed(self):
        config = small_config()
        a = generate_slot_orders(config, 7, slot_rng(config.seed, (0, 0, 0), 2, 7))
        b = generate_slot_orders(config, 7, slot_rng(config.seed, (0, 0, 0), 2, 7))
        assert len(a) == len(b)
        for oa, ob in zip(a, b):
            assert np.array_equal(oa.features, ob.features)
            assert oa.base_price == ob.base_price
            assert np.array_equal(oa.competitor_quotes, ob.competitor_quotes)

    def test_daily_counts_sum_to_order_mass(self):
        config = small_config(orders_per_slot=40_000)
        counts = config.hourly_order_counts()
        assert abs(counts.sum() - 40_000) <= 12  # rounding only

    def test_invalid_mixture_rejected(self):
        with pytest.raises(ValueError):
            small_config(order_count_mixture=((0.5, 8.0, 2.0), (0.4, 18.0, 2.0)))

    def test_negative_slot_rejected(self):
        config = small_config()
        with pytest.raises(ValueError):
            generate_slot_orders(config, -1, np.random.default_rng(0))


class TestApplyPriceAdjustments:
    def test_zero_probability_never_changes(self):
        config = small_config(change_probability=0.0)
        mult = np.ones(5)
        for slot in range(50):
            mult, events = apply_price_adjustments(config, slot, mult, np.random.default_rng(slot))
            assert events == []
        assert np.array_equal(mult, np.ones(5))

    def test_degenerate_uniform_scales_exactly(self):
        config = small_config(change_probability=1.0, adjustment_bounds=(0.1, 0.1))
        mult, events = apply_price_adjustments(config, 0, np.ones(5), np.random.default_rng(1))
        assert np.allclose(mult[1:], 1.1)
        assert mult[0] == 1.0
        assert len(events) == 4

    def test_our_rsp_never_adjusts(self):
        config = small_config(change_probability=1.0)
        mult = np.ones(5)
        for slot in range(20):
            mult, _ = apply_price_adjustments(config, slot, mult, np.random.default_rng(slot))
        assert mult[0] == 1.0

    def test_empirical_change_frequency(self):
        # scene-3 change probability, tolerance from binomial spread
        config = small_config(change_probability=0.4)
        changes = np.zeros(5)
        mult = np.ones(5)
        for slot in range(336):
            rng = slot_rng(config.seed, (0, 0, 0), 1, slot)
            mult, events = apply_price_adjustments(config, slot, mult, rng)
            for _, rsp, _ in events:
                changes[rsp] += 1
        freqs = changes[1:] / 336.0
        assert np.all(np.abs(freqs - 0.4) <= 0.05)

    def test_rejects_nonpositive_multipliers(self):
        config = small_config()
        with pytest.raises(ValueError):
            apply_price_adjustments(config, 0, np.array([1.0, -1.0, 1, 1, 1]), np.random.default_rng(0))


class TestRankAndAutoselect:
    def test_unique_minimum(self):
        flags = rank_and_autoselect(np.array([10.0, 8.0, 12.0]), 1)
        assert flags.tolist() == [False, True, False]

    def test_tie_broken_by_lower_index(self):
        flags = rank_and_autoselect(np.array([5.0, 5.0, 9.0]), 1)
        assert flags.tolist() == [True, False, False]

    def test_exactly_k_selected_and_threshold(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            quotes = rng.lognormal(0.0, 0.3, size=6)
            k = int(rng.integers(1, 7))
            flags = rank_and_autoselect(quotes, k)
            assert flags.sum() == k
            if 0 < k < 6:
                assert quotes[flags].max() <= quotes[~flags].min()

    def test_symmetric_inclusion_rate(self):
        # iid quotes: our flag is true with probability K/M
        rng = np.random.default_rng(6)
        hits = 0
        n = 100_000
        for _ in range(n):
            hits += rank_and_autoselect(rng.lognormal(0.0, 0.2, size=5), 2)[0]
        se = np.sqrt(0.4 * 0.6 / n)
        assert abs(hits / n - 0.4) <= 3 * se

    def test_rejects_bad_k(self):
        with pytest.raises(ValueError):
            rank_and_autoselect(np.array([1.0, 2.0]), 0)
        with pytest.raises(ValueError):
            rank_and_autoselect(np.array([1.0, 2.0]), 3)


class TestPassengerSelect:
    def test_zero_density_clips_to_one(self):
        quotes = np.array([1.0, 1.0, 1.0, 1.0, 3.0])  # wide spread
        assert price_density(quotes, 2, 1.05, 5) == 0.0
        assert passenger_select(quotes, 2, 1.05, 5) == 1

    def test_unit_density_sum_gives_k(self):
        # find a spread whose density + b^-K lands on 1; then K' = K exactly
        b, k, m = 1.05, 2, 5
        lo, hi = 0.0, 0.5
        for _ in range(200):
            mid = (lo + hi) / 2
            quotes = np.array([1.0 - mid, 1.0, 1.0, 1.0, 1.0 + mid])
            if price_density(quotes, k, b, m) + b ** (-k) > 1.0:
                lo = mid
            else:
                hi = mid
        quotes = np.array([1.0 - lo, 1.0, 1.0, 1.0, 1.0 + lo])
        assert price_density(quotes, k, b, m) + b ** (-k) == pytest.approx(1.0, abs=1e-9)
        assert passenger_select(quotes, k, b, m) == k

    def test_identical_quotes_select_everyone(self):
        assert passenger_select(np.full(5, 7.5), 2, 1.05, 5) == 5

    def test_result_always_in_range(self):
        rng = np.random.default_rng(8)
        for _ in range(500):
            quotes = rng.lognormal(0.0, rng.uniform(0.01, 1.0), size=5)
            kp = passenger_select(quotes, 2, 1.05, 5)
            assert 1 <= kp <= 5

    def test_rejects_empty_and_bad_base(self):
        with pytest.raises(ValueError):
            passenger_select(np.array([]), 2, 1.05, 5)
        with pytest.raises(ValueError):
            passenger_select(np.ones(5), 2, 1.0, 5)


class TestDispatchAndComplete:
    def test_zero_supply_never_answers(self):
        for trial in range(50):
            answer, completed = dispatch_and_complete(
                np.array([0, 1, 2]), 0.0, np.ones(5), np.random.default_rng(trial)
            )
            assert answer == -1 and not completed

    def test_certain_supply_single_rsp(self):
        answer, completed = dispatch_and_complete(
            np.array([3]), 1.0, np.ones(5), np.random.default_rng(0), cancellation=(-10.0, 0.01)
        )
        assert answer == 3 and completed

    def test_empirical_shares_match_closed_form(self):
        rng = np.random.default_rng(9)
        n = 100_000
        counts = {0: 0, 1: 0, -1: 0}
        for _ in range(n):
            answer, _ = dispatch_and_complete(np.array([0, 1]), 0.5, np.ones(2), rng)
            counts[answer] += 1
        for idx, expected in ((0, 0.25), (1, 0.25), (-1, 0.5)):
            se = np.sqrt(expected * (1 - expected) / n)
            assert abs(counts[idx] / n - expected) <= 3 * se

    def test_rejects_empty_selection(self):
        with pytest.raises(ValueError):
            dispatch_and_complete(np.array([], dtype=int), 0.5, np.ones(3), np.random.default_rng(0))


class TestStep:
    def make_env(self, **kw):
        return RideGym(small_config(**kw), COUPONS, context=(0, 0, 0))

    def test_zero_coupons_cost_nothing(self):
        env = self.make_env()
        staged = env.begin_slot(0)
        outcome = env.complete_slot(staged, np.zeros(staged.n, dtype=int))
        assert outcome.total_cost == 0.0

    def test_strictly_lowest_quote_always_in_range(self):
        config = small_config(quote_sigma=1e-6, change_probability=0.0)
        env = RideGym(config, np.array([0.0, 0.9]), context=(0, 0, 0))
        staged = env.begin_slot(0)
        outcome = env.complete_slot(staged, np.ones(staged.n, dtype=int))
        assert outcome.in_range.all()

    def test_bit_identical_replay(self):
        for _ in range(2):
            outcomes = []
            for run in range(2):
                env = self.make_env()
                staged = env.begin_slot(0)
                rng = np.random.default_rng(0)
                assignment = rng.integers(0, 5, size=staged.n)
                outcomes.append(env.complete_slot(staged, assignment))
            a, b = outcomes
            assert np.array_equal(a.completed, b.completed)
            assert np.array_equal(a.cost, b.cost)
            assert np.array_equal(a.n_in, b.n_in)

    def test_conservation_and_flag_implications(self):
        env = self.make_env()
        rng = np.random.default_rng(1)
        for t in range(3):
            staged = env.begin_slot(t)
            assignment = rng.integers(0, 5, size=staged.n)
            clusters = rng.integers(0, 4, size=staged.n)
            outcome = env.complete_slot(staged, assignment, clusters, n_clusters=4)
            assert outcome.completed[outcome.completed].size <= outcome.sent.sum()
            assert np.all(~outcome.completed | outcome.sent)  # completed => sent
            assert outcome.total_cost == pytest.approx(outcome.cost.sum())
            assert np.all(outcome.cost <= outcome.gmv + 1e-12)
            assert outcome.cost[~outcome.completed].sum() == 0.0
            assert outcome.n.sum() == staged.n
            assert outcome.n_in.sum() == outcome.in_range.sum()

    def test_topk_correctness_against_op(self):
        env = self.make_env()
        staged = env.begin_slot(0)
        assignment = np.random.default_rng(2).integers(0, 5, size=staged.n)
        outcome = env.complete_slot(staged, assignment)
        k = staged.orders.topk
        for i in range(min(staged.n, 200)):
            ours = staged.truth.our_quote[i, assignment[i]]
            quotes = np.concatenate([[ours], staged.orders.comp_quotes[i]])
            flags = rank_and_autoselect(quotes, k)
            assert flags.sum() == k
            assert flags[0] == outcome.in_range[i]
            assert quotes[flags].max() <= quotes[~flags].min()

    def test_missing_assignment_rejected(self):
        env = self.make_env()
        staged = env.begin_slot(0)
        with pytest.raises(ValueError):
            env.complete_slot(staged, np.zeros(staged.n - 1, dtype=int))
        with pytest.raises(ValueError):
            env.complete_slot(staged, np.full(staged.n, 7))

    def test_slots_must_advance_sequentially(self):
        env = self.make_env()
        env.begin_slot(0)
        with pytest.raises(ValueError):
            env.begin_slot(2)


class TestOrderStatisticLaw:
    def test_kth_lowest_percentile_is_beta(self):
        # homogeneous world: constant K, no price changes, no coupon
        config = small_config(
            change_probability=0.0, topk_base=2, orders_per_slot=12_000
        )
        samples = []
        env = RideGym(config, COUPONS, context=(0, 0, 0))
        t = 0
        while len(samples) < 10_000:
            staged = env.begin_slot(t)
            orders = staged.orders
            ours = staged.truth.our_quote[:, 0]  # d = 0 branch
            all_q = np.column_stack([ours, orders.comp_quotes])
            kth = np.sort(all_q, axis=1)[:, 1]  # K=2 -> second lowest
            u = norm.cdf((np.log(kth) - np.log(orders.base_price)) / orders.sigma)
            samples.extend(u.tolist())
            t += 1
        samples = np.asarray(samples[:10_000])
        result = kstest(samples, lambda q: beta_dist.cdf(q, 2, 4))
        assert result.pvalue > 0.01


class TestEpisodeCsv:
    def test_trace_columns_and_determinism(self, tmp_path):
        config = small_config(orders_per_slot=200)
        paths = []
        for run in range(2):
            log = run_logged_episode(config, COUPONS, 5)
            path = tmp_path / f"episode{run}.csv"
            write_episode_csv(log.outcomes, path)
            paths.append(path)
        a, b = (p.read_bytes() for p in paths)
        assert a == b
        header = a.decode().splitlines()[0]
        assert header == "slot,orders,in_range_rate,completions,cost,gmv"


class TestQuoteSigma:
    def test_sigma_positive_and_monotone_in_supply(self):
        config = small_config()
        s = np.array([0.0, 0.5, 1.0])
        sig = quote_sigma_for(config, s)
        assert (sig > 0).all()
        assert sig[0] < sig[1] < sig[2]
