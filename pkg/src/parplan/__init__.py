"""Search and cost estimation for hybrid parallel training plans of decoder-only transformers."""

from .cluster import BandwidthProfile, ClusterConfig, load_profile, place_groups
from .config import RunConfig, load_config
from .cost import ComputeModel, CostBreakdown, EstimatorOptions, OverlapModel, memory, step_time
from .model import ModelConfig, preset, unsharded_footprint
from .search import PlanReport, explain, search
from .strategy import SearchBounds, Strategy, enumerate_strategies, validate

__version__ = "0.1.0"

__all__ = [
    "BandwidthProfile", "ClusterConfig", "ComputeModel", "CostBreakdown", "EstimatorOptions",
    "ModelConfig", "OverlapModel", "PlanReport", "RunConfig", "SearchBounds", "Strategy",
    "enumerate_strategies", "explain", "load_config", "load_profile", "memory", "place_groups",
    "preset", "search", "step_time", "unsharded_footprint", "validate",
]
