"""Transformer blocks whose residual updates follow optimizer templates.

Submodules: ``blocks`` (the eleven block variants and the language model),
``paramopt`` (parameter-space training), ``harness`` (corpora, training,
checkpoints, forgetting), ``diagnostics`` (Jacobian spectra, sharpness,
perplexity), ``filterlab`` (quadratic-sandbox theory checks) and ``cli``.
"""

from .blocks import BlockVariant, ModelConfig, init_params, loss_and_grads, model_forward
from .core import Tensor
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    NumericError,
    OptformerError,
    SizeGuardError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "BlockVariant", "ConfigError", "ContractError", "DimensionError", "DivergenceError",
    "ModelConfig", "NumericError", "OptformerError", "SizeGuardError", "Tensor",
    "ValidationError", "init_params", "loss_and_grads", "model_forward",
]
