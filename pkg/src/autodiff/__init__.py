# Tensor library with reverse-mode automatic differentiation
from src.autodiff.tensor import Function, Tensor, get_default_dtype, no_grad, parameter, set_default_dtype
from src.autodiff import functional
from src.autodiff.gradcheck import GradCheckReport, grad_check
from src.autodiff.serialization import read_tensor, write_tensor

__all__ = [
    "Function",
    "Tensor",
    "GradCheckReport",
    "functional",
    "get_default_dtype",
    "grad_check",
    "no_grad",
    "parameter",
    "read_tensor",
    "set_default_dtype",
    "write_tensor",
]
