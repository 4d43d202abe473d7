from . import ops
from .gradcheck import check_gradient, numerical_gradient
from .nn import Conv2d, Dense, Module
from .optim import Adam, AdamState, adam_step
from .tensor import (AutodiffError, NonFiniteError, ShapeError, Tensor, as_tensor, backward,
                     grad_enabled, no_grad)

__all__ = [
    "ops", "check_gradient", "numerical_gradient", "Conv2d", "Dense", "Module", "Adam",
    "AdamState", "adam_step", "AutodiffError", "NonFiniteError", "ShapeError", "Tensor",
    "as_tensor", "backward", "grad_enabled", "no_grad",
]
