from . import ops
from .gradcheck import GradCheckReport, grad_check, numerical_gradient
from .ops import bilinear_upsample, forward_op
from .tensor import LOG_EPS, NonFiniteError, ShapeError, Tensor, as_tensor, backward

__all__ = [
    "LOG_EPS",
    "GradCheckReport",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "bilinear_upsample",
    "forward_op",
    "grad_check",
    "numerical_gradient",
    "ops",
]
