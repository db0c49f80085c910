"""Training-free hierarchical routing over pools of LoRA adapters."""

from .lora_pool import LoraLayer, LoraModule, PoolManifest, PoolSpec, load_manifest, save_manifest, synthesize_pool
from .numerics import RngStream
from .router import RouterConfig, RoutingPlan, forward, make_plan, route_tokens
from .task_model import GaussianTaskModel, fit_gaussian, score

__version__ = "0.1.0"
