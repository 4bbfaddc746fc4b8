"""RideGym: aggregator market simulator plus a budget-paced coupon engine."""

from .config import ScenarioConfig, desk_scale, load_scene

__version__ = "0.1.0"

__all__ = ["ScenarioConfig", "desk_scale", "load_scene", "__version__"]
