"""Scenario configuration: the knobs of the simulated aggregator market.

A scenario is normally loaded from one of the shipped ``scenes/sceneN.json``
files and optionally shrunk to desk scale for fast experiment matrices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

HOURS_PER_DAY = 24


class ConfigError(ValueError):
    """A scenario configuration violates one of its invariants."""


@dataclass(frozen=True)
class ScenarioConfig:
    """Static description of one market scene.

    ``orders_per_slot`` is the order mass of a 24-slot day; it is spread over
    the hourly slots according to the normalized ``order_count_mixture``
    density, so a uniform mixture with ``orders_per_slot=24`` yields one
    order per hourly slot.
    """

    num_rsps: int = 5
    change_probability: float = 0.1
    adjustment_bounds: tuple[float, float] = (-0.05, 0.05)
    price_per_mile: float = 2.4
    topk_base: int = 2
    passenger_select_base: float = 1.25
    service_capabilities: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    cancellation: tuple[float, float] = (0.0, 0.35)
    slots_pretrain: int = 168
    slots_train: int = 720
    slots_test: int = 336
    orders_per_slot: int = 40_000
    order_count_mixture: tuple[tuple[float, float, float], ...] = (
        (0.42, 8.3, 2.0),
        (0.40, 18.2, 2.6),
        (0.18, 13.0, 6.0),
    )
    seed: int = 20240
    # Per-order quote dispersion (log scale); see simulator.quote_sigma.
    quote_sigma: float = 0.12
    # Optional hour -> K table; None keeps topk_base for every slot.
    topk_by_hour: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        m = self.num_rsps
        if m < 2:
            raise ConfigError("need at least 2 RSPs")
        lo, hi = self.adjustment_bounds
        if lo > hi:
            raise ConfigError("adjustment lower bound exceeds upper bound")
        if not 0.0 <= self.change_probability <= 1.0:
            raise ConfigError("change_probability must be in [0, 1]")
        if not 1 <= self.topk_base <= m:
            raise ConfigError("topk_base must satisfy 1 <= K <= M")
        if self.passenger_select_base <= 1.0:
            raise ConfigError("passenger_select_base must exceed 1")
        tp = np.asarray(self.service_capabilities, dtype=float)
        if tp.shape != (m,) or (tp < 0).any() or tp.sum() <= 0:
            raise ConfigError("service_capabilities must be M nonnegative reals with positive sum")
        if self.price_per_mile <= 0:
            raise ConfigError("price_per_mile must be positive")
        if self.orders_per_slot <= 0:
            raise ConfigError("orders_per_slot must be positive")
        weights = [w for w, _, _ in self.order_count_mixture]
        if not weights or abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigError("order_count_mixture weights must sum to 1")
        if any(s <= 0 for _, _, s in self.order_count_mixture):
            raise ConfigError("order_count_mixture stddevs must be positive")
        if min(self.slots_pretrain, self.slots_train, self.slots_test) <= 0:
            raise ConfigError("all split slot counts must be positive")
        if self.quote_sigma <= 0:
            raise ConfigError("quote_sigma must be positive")
        if self.topk_by_hour is not None:
            tbl = self.topk_by_hour
            if len(tbl) != HOURS_PER_DAY or any(not 1 <= k <= m for k in tbl):
                raise ConfigError("topk_by_hour must give 24 values in [1, M]")

    # -- derived quantities -------------------------------------------------

    def topk_for_hour(self, hour: int) -> int:
        if self.topk_by_hour is None:
            return self.topk_base
        return self.topk_by_hour[hour % HOURS_PER_DAY]

    def hourly_density(self) -> np.ndarray:
        """Normalized order density over the 24 hourly slots."""
        hours = np.arange(HOURS_PER_DAY, dtype=float)
        dens = np.zeros(HOURS_PER_DAY)
        for w, mu, sd in self.order_count_mixture:
            dens += w * np.exp(-0.5 * ((hours - mu) / sd) ** 2) / sd
        total = dens.sum()
        if total <= 0:
            raise ConfigError("order_count_mixture has no mass on the 24 hours")
        return dens / total

    def hourly_order_counts(self) -> np.ndarray:
        """Orders generated in each hourly slot of a day."""
        return np.rint(self.orders_per_slot * self.hourly_density()).astype(int)

    @property
    def total_slots(self) -> int:
        return self.slots_pretrain + self.slots_train + self.slots_test

    # -- (de)serialization --------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        kwargs = dict(raw)
        for key in ("adjustment_bounds", "cancellation", "service_capabilities", "topk_by_hour"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        if "order_count_mixture" in kwargs:
            kwargs["order_count_mixture"] = tuple(tuple(c) for c in kwargs["order_count_mixture"])
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path: str | Path) -> "ScenarioConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def load_scene(scene: int) -> ScenarioConfig:
    """Load one of the shipped scene files (1..4)."""
    if scene not in (1, 2, 3, 4):
        raise ConfigError(f"unknown scene {scene}; expected 1..4")
    ref = resources.files("ridegym.scenes") / f"scene{scene}.json"
    return ScenarioConfig.from_dict(json.loads(ref.read_text(encoding="utf-8")))


def desk_scale(config: ScenarioConfig) -> ScenarioConfig:
    """Shrink a paper-scale scene to the fast desk-scale defaults."""
    return replace(
        config,
        orders_per_slot=2_000,
        slots_pretrain=72,
        slots_train=96,
        slots_test=48,
    )
