"""Aggregator market simulator.

One episode walks hourly slots. Per slot: competitors may adjust their price
multipliers, a batch of ride opportunities is generated, every RSP quotes a
price, the aggregator auto-selects the cheapest K, the passenger sends the
order to the cheapest K', one selected RSP answers (or none), and a
cancellation draw decides completion.

Outcomes for *all* coupon levels of an opportunity are realized with common
random numbers (same quote noise, supply, dispatch and cancellation draws),
so the environment trajectory is independent of the strategy's assignment
and exact counterfactuals (ground-truth labels, paired no-coupon runs) come
for free.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import HOURS_PER_DAY, ConfigError, ScenarioConfig

# rng stream contexts: (kind, a, b) identifies an episode family
CTX_TIMELINE = (0, 0, 0)

# phase salts inside a slot
_PHASE_ADJUST = 1
_PHASE_ORDERS = 2
_PHASE_OUTCOME = 3


def slot_rng(seed: int, context: tuple[int, int, int], phase: int, slot: int) -> np.random.Generator:
    """Independent generator for one (episode context, phase, slot) cell."""
    kind, a, b = context
    entropy = [seed & 0xFFFFFFFFFFFFFFFF, kind, a & 0xFFFFFFFFFFFFFFFF, b, phase, slot]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def quote_sigma_for(config: ScenarioConfig, supply: np.ndarray) -> np.ndarray:
    """Per-order log-scale quote dispersion; rich supply quotes more aggressively."""
    return config.quote_sigma * (0.35 + 1.3 * np.asarray(supply, dtype=float))


@dataclass
class Opportunity:
    """One ride request with its realization draws.

    features = (order distance in miles, supply factor, hour-of-day / 23,
    demand intensity relative to a uniform day).
    """

    id: int
    features: np.ndarray
    base_price: float
    competitor_quotes: np.ndarray  # RSPs 1..M-1; our RSP is index 0
    our_noise: float  # multiplicative quote noise on our own quote
    quote_sigma: float
    dispatch_draw: float
    cancel_draw: float

    @property
    def supply(self) -> float:
        return float(self.features[1])


@dataclass
class SlotOrders:
    """Array-of-struct view of one slot's opportunities."""

    slot_index: int
    hour: int
    topk: int
    features: np.ndarray  # (N, 4)
    base_price: np.ndarray  # (N,)
    sigma: np.ndarray  # (N,)
    comp_quotes: np.ndarray  # (N, M-1)
    our_noise: np.ndarray  # (N,)
    dispatch_u: np.ndarray  # (N,)
    cancel: np.ndarray  # (N,)

    @property
    def n(self) -> int:
        return self.base_price.size

    def to_opportunities(self) -> list[Opportunity]:
        return [
            Opportunity(
                id=i,
                features=self.features[i],
                base_price=float(self.base_price[i]),
                competitor_quotes=self.comp_quotes[i],
                our_noise=float(self.our_noise[i]),
                quote_sigma=float(self.sigma[i]),
                dispatch_draw=float(self.dispatch_u[i]),
                cancel_draw=float(self.cancel[i]),
            )
            for i in range(self.n)
        ]


@dataclass
class SlotTruth:
    """Per-coupon potential outcomes (common random numbers across branches)."""

    our_quote: np.ndarray  # (N, H)
    in_range: np.ndarray  # (N, H) bool
    sent: np.ndarray  # (N, H) bool
    complete: np.ndarray  # (N, H) bool


@dataclass
class SlotOutcome:
    """Realized results of one slot under one coupon assignment."""

    slot_index: int
    coupon_index: np.ndarray  # (N,)
    in_range: np.ndarray  # (N,) bool
    sent: np.ndarray  # (N,) bool
    completed: np.ndarray  # (N,) bool
    cost: np.ndarray  # (N,)
    gmv: np.ndarray  # (N,)
    n_in: np.ndarray  # (S, H) in-range tallies per cluster x coupon
    n: np.ndarray  # (S, H) order tallies per cluster x coupon

    @property
    def orders(self) -> int:
        return self.coupon_index.size

    @property
    def completions(self) -> int:
        return int(self.completed.sum())

    @property
    def total_cost(self) -> float:
        return float(self.cost.sum())

    @property
    def total_gmv(self) -> float:
        return float(self.gmv.sum())

    @property
    def in_range_rate(self) -> float:
        return float(self.in_range.mean()) if self.orders else 0.0


def generate_slot_orders(
    config: ScenarioConfig,
    slot_index: int,
    rng: np.random.Generator,
    multipliers: np.ndarray | None = None,
) -> list[Opportunity]:
    """Opportunities for one slot; count follows the hourly mixture density."""
    return draw_slot_orders(config, slot_index, rng, multipliers).to_opportunities()


def draw_slot_orders(
    config: ScenarioConfig,
    slot_index: int,
    rng: np.random.Generator,
    multipliers: np.ndarray | None = None,
) -> SlotOrders:
    if slot_index < 0:
        raise ValueError("slot_index must be nonnegative")
    if multipliers is None:
        multipliers = np.ones(config.num_rsps)
    hour = slot_index % HOURS_PER_DAY
    density = config.hourly_density()
    count = int(np.rint(config.orders_per_slot * density[hour]))

    distance = rng.gamma(shape=2.2, scale=2.4, size=count) + 0.8
    supply = rng.beta(1.3, 1.1, size=count)
    sigma = quote_sigma_for(config, supply)
    base_price = config.price_per_mile * distance
    demand = HOURS_PER_DAY * density[hour]
    features = np.column_stack(
        [distance, supply, np.full(count, hour / 23.0), np.full(count, demand)]
    )

    noise = np.exp(sigma[:, None] * rng.standard_normal((count, config.num_rsps)))
    comp_quotes = base_price[:, None] * multipliers[None, 1:] * noise[:, 1:]
    dispatch_u = rng.uniform(size=count)
    c_mean, c_std = config.cancellation
    cancel = rng.normal(c_mean, c_std, size=count)

    return SlotOrders(
        slot_index=slot_index,
        hour=hour,
        topk=config.topk_for_hour(hour),
        features=features,
        base_price=base_price,
        sigma=sigma,
        comp_quotes=comp_quotes,
        our_noise=noise[:, 0],
        dispatch_u=dispatch_u,
        cancel=cancel,
    )


def apply_price_adjustments(
    config: ScenarioConfig,
    slot_index: int,
    multipliers: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[tuple[int, int, float]]]:
    """Independent per-competitor price changes; our RSP (index 0) never moves."""
    if (np.asarray(multipliers) <= 0).any():
        raise ValueError("multipliers must be positive")
    lo, hi = config.adjustment_bounds
    updated = np.array(multipliers, dtype=float, copy=True)
    events: list[tuple[int, int, float]] = []
    for m in range(1, config.num_rsps):
        if rng.uniform() < config.change_probability:
            a = rng.uniform(lo, hi)
            updated[m] *= 1.0 + a
            events.append((slot_index, m, float(a)))
    return updated, events


def rank_and_autoselect(quotes: np.ndarray, k_of_x: int) -> np.ndarray:
    """Flags for the K cheapest quotes; ties broken toward the lower index."""
    quotes = np.asarray(quotes, dtype=float)
    if not 1 <= k_of_x <= quotes.size:
        raise ValueError("K must satisfy 1 <= K <= M")
    if (quotes <= 0).any():
        raise ValueError("quotes must be positive")
    order = np.argsort(quotes, kind="stable")
    flags = np.zeros(quotes.size, dtype=bool)
    flags[order[:k_of_x]] = True
    return flags


def price_density(quotes: np.ndarray, k: int, b: float, m: int) -> float:
    """Concentration of the price list, scaled so zero spread saturates K'=M."""
    quotes = np.asarray(quotes, dtype=float)
    cv = float(quotes.std() / quotes.mean())
    return max(np.exp(-cv) * b ** (m - k) - b ** (-k), 0.0)


def passenger_select(quotes: np.ndarray, k: int, b: float, m: int) -> int:
    """Number of RSPs a passenger keeps selected when sending the order."""
    quotes = np.asarray(quotes, dtype=float)
    if quotes.size == 0:
        raise ValueError("quotes must be nonempty")
    if b <= 1.0:
        raise ValueError("base b must exceed 1")
    dens = price_density(quotes, k, b, m)
    raw = k + np.log(dens + b ** (-k)) / np.log(b)
    return int(np.clip(np.rint(raw), 1, m))


def dispatch_and_complete(
    selected: np.ndarray,
    supply: float,
    tp: np.ndarray,
    rng: np.random.Generator,
    cancellation: tuple[float, float] = (0.0, 0.35),
) -> tuple[int, bool]:
    """(answering RSP index or -1 for no answer, completed flag).

    Answer probability of a selected RSP is supply * tp_i / sum(tp over the
    selected set); the leftover mass 1 - supply is no-answer.
    """
    selected = np.sort(np.asarray(selected, dtype=int))
    if selected.size == 0:
        raise ValueError("selected set must be nonempty")
    if not 0.0 <= supply <= 1.0:
        raise ValueError("supply factor must lie in [0, 1]")
    tp = np.asarray(tp, dtype=float)
    shares = supply * tp[selected] / tp[selected].sum()
    u = rng.uniform()
    cancel_draw = rng.normal(*cancellation)
    cum = np.cumsum(shares)
    hit = np.searchsorted(cum, u, side="right")
    if hit >= selected.size:
        return -1, False
    return int(selected[hit]), bool(cancel_draw <= 0.5)


def branch_outcomes(
    config: ScenarioConfig, coupons: np.ndarray, orders: SlotOrders
) -> SlotTruth:
    """Potential outcomes of every coupon branch for one slot."""
    n = orders.n
    m = config.num_rsps
    h = len(coupons)
    tp = np.asarray(config.service_capabilities, dtype=float)
    b = config.passenger_select_base
    k = orders.topk

    our_quote = np.empty((n, h))
    in_range = np.zeros((n, h), dtype=bool)
    sent = np.zeros((n, h), dtype=bool)
    complete = np.zeros((n, h), dtype=bool)
    if n == 0:
        return SlotTruth(our_quote, in_range, sent, complete)

    supply = orders.features[:, 1]
    all_q = np.empty((n, m))
    all_q[:, 1:] = orders.comp_quotes
    for j, dj in enumerate(coupons):
        ours = orders.base_price * (1.0 - dj) * orders.our_noise
        our_quote[:, j] = ours
        all_q[:, 0] = ours
        rank0 = 1 + (orders.comp_quotes < ours[:, None]).sum(axis=1)
        in_range[:, j] = rank0 <= k

        mean = all_q.mean(axis=1)
        cv = all_q.std(axis=1) / mean
        dens = np.maximum(np.exp(-cv) * b ** (m - k) - b ** (-k), 0.0)
        kprime = np.clip(
            np.rint(k + np.log(dens + b ** (-k)) / np.log(b)), 1, m
        ).astype(int)
        sent[:, j] = rank0 <= kprime

        order_idx = np.argsort(all_q, axis=1, kind="stable")
        tp_cum = np.cumsum(tp[order_idx], axis=1)
        t_sel = tp_cum[np.arange(n), kprime - 1]
        p_answer = supply * tp[0] / t_sel
        complete[:, j] = sent[:, j] & (orders.dispatch_u < p_answer) & (orders.cancel <= 0.5)
    return SlotTruth(our_quote, in_range, sent, complete)


@dataclass
class StagedSlot:
    """A slot whose market side has been realized but not yet assigned."""

    orders: SlotOrders
    truth: SlotTruth
    adjustments: list[tuple[int, int, float]]

    @property
    def n(self) -> int:
        return self.orders.n


class RideGym:
    """Sequential episode of the aggregator market.

    Slots must be advanced in order: ``begin_slot`` realizes the market side
    (price adjustments, orders, per-coupon potential outcomes), then
    ``complete_slot`` applies a coupon assignment and returns the realized
    :class:`SlotOutcome`. Episodes with the same (config, coupons, context,
    start multipliers) replay identically.
    """

    def __init__(
        self,
        config: ScenarioConfig,
        coupons,
        context: tuple[int, int, int] = CTX_TIMELINE,
        start_multipliers: np.ndarray | None = None,
        slot_offset: int = 0,
    ):
        self.config = config
        self.coupons = np.asarray(coupons, dtype=float)
        if self.coupons[0] != 0.0 or (np.diff(self.coupons) <= 0).any():
            raise ConfigError("coupon set must be strictly increasing with d[0] = 0")
        self.context = tuple(context)
        self.slot_offset = slot_offset
        if start_multipliers is None:
            self.multipliers = np.ones(config.num_rsps)
        else:
            self.multipliers = np.array(start_multipliers, dtype=float, copy=True)
        self._next_slot = 0

    def begin_slot(self, t: int) -> StagedSlot:
        if t != self._next_slot:
            raise ValueError(f"slots must be advanced sequentially (expected {self._next_slot})")
        g_slot = self.slot_offset + t
        seed = self.config.seed
        adj_rng = slot_rng(seed, self.context, _PHASE_ADJUST, g_slot)
        self.multipliers, events = apply_price_adjustments(
            self.config, g_slot, self.multipliers, adj_rng
        )
        order_rng = slot_rng(seed, self.context, _PHASE_ORDERS, g_slot)
        orders = draw_slot_orders(self.config, g_slot, order_rng, self.multipliers)
        truth = branch_outcomes(self.config, self.coupons, orders)
        self._next_slot = t + 1
        return StagedSlot(orders=orders, truth=truth, adjustments=events)

    def complete_slot(
        self,
        staged: StagedSlot,
        assignment: np.ndarray,
        cluster_ids: np.ndarray | None = None,
        n_clusters: int = 1,
    ) -> SlotOutcome:
        n = staged.n
        h = self.coupons.size
        assignment = np.asarray(assignment, dtype=int)
        if assignment.shape != (n,):
            raise ValueError("assignment must cover every opportunity of the slot")
        if n and (assignment.min() < 0 or assignment.max() >= h):
            raise ValueError("assignment contains an unknown coupon index")
        if cluster_ids is None:
            cluster_ids = np.zeros(n, dtype=int)
        else:
            cluster_ids = np.asarray(cluster_ids, dtype=int)
            if cluster_ids.shape != (n,):
                raise ValueError("cluster_ids must cover every opportunity")

        rows = np.arange(n)
        in_range = staged.truth.in_range[rows, assignment]
        sent = staged.truth.sent[rows, assignment]
        completed = staged.truth.complete[rows, assignment]
        d = self.coupons[assignment]
        cost = np.where(completed, staged.orders.base_price * d, 0.0)
        gmv = np.where(completed, staged.orders.base_price, 0.0)

        flat = cluster_ids * h + assignment
        n_tally = np.bincount(flat, minlength=n_clusters * h).reshape(n_clusters, h)
        n_in_tally = np.bincount(
            flat[in_range], minlength=n_clusters * h
        ).reshape(n_clusters, h)
        return SlotOutcome(
            slot_index=staged.orders.slot_index,
            coupon_index=assignment,
            in_range=in_range,
            sent=sent,
            completed=completed,
            cost=cost,
            gmv=gmv,
            n_in=n_in_tally,
            n=n_tally,
        )


@dataclass
class LoggedData:
    """Observational log of an episode ran under some assignment policy."""

    features: np.ndarray  # (N, 4)
    base_price: np.ndarray  # (N,)
    coupon_index: np.ndarray  # (N,)
    y_in: np.ndarray  # (N,) bool
    y_complete: np.ndarray  # (N,) bool
    slot: np.ndarray  # (N,)
    truth_complete: np.ndarray | None  # (N, H) when ground truth was kept
    truth_in_range: np.ndarray | None  # (N, H) when ground truth was kept
    end_multipliers: np.ndarray
    outcomes: list[SlotOutcome] = field(default_factory=list)


def run_logged_episode(
    config: ScenarioConfig,
    coupons,
    n_slots: int,
    context: tuple[int, int, int] = CTX_TIMELINE,
    start_multipliers: np.ndarray | None = None,
    slot_offset: int = 0,
    keep_truth: bool = False,
    assignment: str = "uniform",
) -> LoggedData:
    """Run slots under a logging policy (uniform random coupons or all-d0)."""
    env = RideGym(config, coupons, context, start_multipliers, slot_offset)
    h = env.coupons.size
    feats, prices, d_idx, y_in, y_comp, slots = [], [], [], [], [], []
    truths = [] if keep_truth else None
    truths_in = [] if keep_truth else None
    outcomes = []
    for t in range(n_slots):
        staged = env.begin_slot(t)
        if assignment == "uniform":
            rng = slot_rng(config.seed, context, 90, slot_offset + t)
            assign = rng.integers(0, h, size=staged.n)
        elif assignment == "zero":
            assign = np.zeros(staged.n, dtype=int)
        else:
            raise ValueError(f"unknown logging policy {assignment!r}")
        outcome = env.complete_slot(staged, assign)
        outcomes.append(outcome)
        feats.append(staged.orders.features)
        prices.append(staged.orders.base_price)
        d_idx.append(assign)
        y_in.append(outcome.in_range)
        y_comp.append(outcome.completed)
        slots.append(np.full(staged.n, slot_offset + t))
        if keep_truth:
            truths.append(staged.truth.complete)
            truths_in.append(staged.truth.in_range)
    return LoggedData(
        features=np.concatenate(feats) if feats else np.empty((0, 4)),
        base_price=np.concatenate(prices) if prices else np.empty(0),
        coupon_index=np.concatenate(d_idx) if d_idx else np.empty(0, dtype=int),
        y_in=np.concatenate(y_in) if y_in else np.empty(0, dtype=bool),
        y_complete=np.concatenate(y_comp) if y_comp else np.empty(0, dtype=bool),
        slot=np.concatenate(slots) if slots else np.empty(0, dtype=int),
        truth_complete=np.concatenate(truths) if keep_truth else None,
        truth_in_range=np.concatenate(truths_in) if keep_truth else None,
        end_multipliers=env.multipliers.copy(),
        outcomes=outcomes,
    )


def write_episode_csv(outcomes: list[SlotOutcome], path: str | Path) -> None:
    """One row per slot: slot, orders, in_range_rate, completions, cost, gmv."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "orders", "in_range_rate", "completions", "cost", "gmv"])
        for out in outcomes:
            writer.writerow(
                [
                    out.slot_index,
                    out.orders,
                    format(out.in_range_rate, ".10g"),
                    out.completions,
                    format(out.total_cost, ".10g"),
                    format(out.total_gmv, ".10g"),
                ]
            )
