"""msrkit: normalization-free convnet training via mean-shift rejection.

A small, fully deterministic numpy training engine built around four
mechanisms that together replace batch normalization: channel-wise
zero-mean kernel initialization, weighted zero-mean gradient shaping, an
exponentiated per-filter scale (W = exp(g) * V), and an L2 unity-magnitude
anchor on the kernel directions, plus train-time multiplicative noise.
"""

from .config import ExperimentConfig, make_config, parse_config_file
from .data import Dataset, gen_synthetic, parse_cifar10
from .errors import (
    ConfigError,
    DataError,
    DegenerateFilterError,
    DivergenceError,
    MsrkitError,
)
from .harness import evaluate_model, inspect_checkpoint, train
from .layers import ConvFilterParams
from .models import Model, build_model
from .msr import (
    MsrConfig,
    czm_project,
    czmg_transform,
    czmi_init,
    effective_lr,
    export_inference_weights,
    luma_loss_and_grad,
    shift_diagnostics,
    unit_uniform_init,
)
from .optim import LrSchedule, SgdMomentum, lr_at
from .tensor import Prng

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConvFilterParams",
    "DataError",
    "Dataset",
    "DegenerateFilterError",
    "DivergenceError",
    "ExperimentConfig",
    "LrSchedule",
    "Model",
    "MsrConfig",
    "MsrkitError",
    "Prng",
    "SgdMomentum",
    "build_model",
    "czm_project",
    "czmg_transform",
    "czmi_init",
    "effective_lr",
    "evaluate_model",
    "export_inference_weights",
    "gen_synthetic",
    "inspect_checkpoint",
    "lr_at",
    "luma_loss_and_grad",
    "make_config",
    "parse_cifar10",
    "parse_config_file",
    "shift_diagnostics",
    "train",
    "unit_uniform_init",
    "__version__",
]
