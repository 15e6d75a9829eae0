"""Monolithic multimodal decoder LM with per-modality FFN experts."""

from .tensor import Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "grad_check", "no_grad", "__version__"]
