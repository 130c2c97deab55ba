"""attredit: arbitrary image attribute editing with gated selective
feature transfer, trained adversarially on a self-contained autodiff core."""

__version__ = "0.1.0"

from .tensor import Tensor, Parameter, no_grad  # noqa: F401
