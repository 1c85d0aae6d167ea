"""Dense float64 numerics: reverse-mode tape, AdamW, one-cycle rate, matrix I/O."""

from . import autodiff as ad
from .autodiff import Tape, Var, finite_diff_check, grad_eval, param
from .matio import load_matrix, load_params, save_matrix, save_params
from .optim import LrSchedule, OptimState, adamw_update, onecycle_rate

__all__ = [
    "ad", "Tape", "Var", "param", "grad_eval", "finite_diff_check",
    "OptimState", "LrSchedule", "adamw_update", "onecycle_rate",
    "save_matrix", "load_matrix", "save_params", "load_params",
]
