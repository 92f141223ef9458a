"""Symmetric-view lipreading model on a small numpy reverse-mode autodiff core."""

from .errors import (ContractError, DimensionError, FormatError, LabelError, ManifestError,
                     NumericError, RalError)
from .model import RalConfig, RalModel, load_checkpoint, save_checkpoint
from .tensor import Parameter, Tensor, backward, no_grad, precision

__all__ = [
    "ContractError", "DimensionError", "FormatError", "LabelError", "ManifestError",
    "NumericError", "RalError", "RalConfig", "RalModel", "load_checkpoint", "save_checkpoint",
    "Parameter", "Tensor", "backward", "no_grad", "precision",
]
