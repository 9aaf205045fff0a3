"""Minimal dense-network substrate: reverse-mode tape, dense nets, optimizers."""
from . import autodiff
from .autodiff import ShapeError, Tape, TapeError, Var
from .dense import DenseNet, DenseSpec, GradTape, apply_dense, backward, forward, glorot_init
from .optim import NonFiniteGradient, OptimizerState, step
from .params import Bound, ParamLayout

__all__ = [
    "autodiff",
    "Bound",
    "DenseNet",
    "DenseSpec",
    "GradTape",
    "NonFiniteGradient",
    "OptimizerState",
    "ParamLayout",
    "ShapeError",
    "Tape",
    "TapeError",
    "Var",
    "apply_dense",
    "backward",
    "forward",
    "glorot_init",
    "step",
]
