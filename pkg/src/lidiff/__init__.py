"""Lateral-inhibition spiking transformer on a small numpy autodiff core."""

from .model import ModelConfig, SpiLiFormer, load_checkpoint, save_checkpoint
from .tensor import Tensor, grad_check, no_grad

__all__ = ["ModelConfig", "SpiLiFormer", "Tensor", "grad_check", "load_checkpoint", "no_grad", "save_checkpoint"]
__version__ = "0.1.0"
