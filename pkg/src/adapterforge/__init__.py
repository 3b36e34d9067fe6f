"""adapterforge: a desk-scale laboratory for multi-task low-rank adapters.

A minimal reverse-mode autodiff core drives five adapter variants over a
frozen synthetic backbone, with optional cross-task representation
alignment (symmetric KL or multi-kernel MMD) on the shared down-projection
features, plus training, analysis, and CLI tooling.
"""

from . import adapters, alignment, analysis, autodiff, harness, trainer
from .adapters import AdapterSpec, AdapterState, init_adapter, merge, trainable_param_count
from .autodiff import Tensor, backward, grad_check, no_grad
from .trainer import RunReport, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AdapterSpec",
    "AdapterState",
    "RunReport",
    "Tensor",
    "TrainConfig",
    "adapters",
    "alignment",
    "analysis",
    "autodiff",
    "backward",
    "grad_check",
    "harness",
    "init_adapter",
    "merge",
    "no_grad",
    "train",
    "trainable_param_count",
    "trainer",
]
