"""First-order optimizers operating on flat parameter vectors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class NonFiniteGradient(FloatingPointError):
    """Gradient contained NaN/inf; the step was not applied."""


@dataclass
class OptimizerState:
    kind: str
    lr: float
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step_count: int = 0
    grad_clip: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    @classmethod
    def create(cls, kind: str, lr: float, n_params: int, grad_clip: float | None = None):
        st = cls(kind, lr, grad_clip=grad_clip)
        if kind == "adam":
            st.m = np.zeros(n_params)
            st.v = np.zeros(n_params)
        return st


def step(opt: OptimizerState, params: np.ndarray, grads: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Return updated parameters; ``opt`` moments and counter advance in place.

    ``mask`` restricts the update to a subset of parameters (frozen entries
    keep their value and their moments).
    """
    if params.shape != grads.shape:
        raise ValueError(f"params {params.shape} and grads {grads.shape} differ")
    if not np.all(np.isfinite(grads)):
        bad = int(np.sum(~np.isfinite(grads)))
        raise NonFiniteGradient(f"{bad} non-finite gradient entries at step {opt.step_count}")
    g = grads
    if mask is not None:
        g = np.where(mask, g, 0.0)
    if opt.grad_clip is not None:
        norm = float(np.sqrt(np.dot(g, g)))
        if norm > opt.grad_clip:
            g = g * (opt.grad_clip / norm)
    opt.step_count += 1
    if opt.kind == "sgd":
        return params - opt.lr * g
    m = BETA1 * opt.m + (1.0 - BETA1) * g
    v = BETA2 * opt.v + (1.0 - BETA2) * g * g
    if mask is not None:
        m = np.where(mask, m, opt.m)
        v = np.where(mask, v, opt.v)
    opt.m, opt.v = m, v
    mhat = m / (1.0 - BETA1**opt.step_count)
    vhat = v / (1.0 - BETA2**opt.step_count)
    upd = opt.lr * mhat / (np.sqrt(vhat) + EPS)
    if mask is not None:
        upd = np.where(mask, upd, 0.0)
    return params - upd
