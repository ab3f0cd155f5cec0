from .ops import (
    ADAM_EPS,
    LN_EPS,
    NS_COEFFS,
    ScalarParam,
    attention_oracle,
    ema,
    inv_sqrt_newton,
    layernorm,
    materialize,
    materialize_tensor,
    mlp_oracle,
    newton_schulz_polar,
    raw_for,
)
from .autograd import Tensor, cross_entropy, grad, tensor

__all__ = [
    "ADAM_EPS", "LN_EPS", "NS_COEFFS", "ScalarParam", "Tensor", "attention_oracle",
    "cross_entropy", "ema", "grad", "inv_sqrt_newton", "layernorm", "materialize",
    "materialize_tensor", "mlp_oracle", "newton_schulz_polar", "raw_for", "tensor",
]
