"""Multi-scale CNN features, recursively calibrated and aggregated by
transformer blocks under multi-granularity supervision, for metric-learning
based image retrieval (person re-identification)."""

__version__ = "0.1.0"

from .backbone import BackboneConfig, MultiScaleBackbone
from .aggregation import AggregationConfig, ReIDNet
from .config import RunConfig, load_config

__all__ = [
    "BackboneConfig",
    "MultiScaleBackbone",
    "AggregationConfig",
    "ReIDNet",
    "RunConfig",
    "load_config",
]
