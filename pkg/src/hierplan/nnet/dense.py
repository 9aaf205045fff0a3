"""Dense networks whose parameters live in one flat float64 vector.

Flat layout of a network with layer sizes ``[n0, n1, ..., nL]``::

    W0 (n0 x n1, row-major), b0 (n1), W1 (n1 x n2), b1 (n2), ...

so a layer computes ``x @ W + b``. Hidden layers use the chosen activation;
the last layer is always linear.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Var

ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}


def n_params(sizes) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


@dataclass(frozen=True)
class DenseSpec:
    """Architecture of one dense net: layer sizes and hidden activation."""

    sizes: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 2 or any(s < 1 for s in self.sizes):
            raise ShapeError(f"bad layer sizes {self.sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return n_params(self.sizes)

    def blocks(self):
        """Yield (name, shape) pairs in flat-layout order."""
        for k, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            yield f"W{k}", (a, b)
            yield f"b{k}", (b,)


def glorot_init(spec: DenseSpec, rng: np.random.Generator, zero_last=False) -> np.ndarray:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    parts = []
    n_layers = len(spec.sizes) - 1
    for k, (a, b) in enumerate(zip(spec.sizes[:-1], spec.sizes[1:])):
        if zero_last and k == n_layers - 1:
            parts.append(np.zeros(a * b))
        else:
            lim = np.sqrt(6.0 / (a + b))
            parts.append(rng.uniform(-lim, lim, size=a * b))
        parts.append(np.zeros(b))
    return np.concatenate(parts)


def apply_dense(spec: DenseSpec, weights: list[Var], x: Var) -> Var:
    """Run ``x`` (shape (n_in,) or (batch, n_in)) through the net on x's tape."""
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    if x.shape[-1] != spec.sizes[0]:
        raise ShapeError(f"input width {x.shape[-1]} != first layer {spec.sizes[0]}")
    act = ACTIVATIONS[spec.activation]
    n_layers = len(spec.sizes) - 1
    h = x
    for k in range(n_layers):
        h = h @ weights[2 * k] + weights[2 * k + 1]
        if k < n_layers - 1:
            h = act(h)
    return h.reshape(-1) if squeeze else h


def bind_dense(spec: DenseSpec, flat: Var, offset: int = 0) -> list[Var]:
    """Slice per-layer weight Vars out of a flat parameter Var."""
    out = []
    for _, shape in spec.blocks():
        n = int(np.prod(shape))
        out.append(flat[offset : offset + n].reshape(shape))
        offset += n
    return out


class DenseNet:
    """A standalone dense net: architecture plus its flat parameter vector."""

    def __init__(self, spec: DenseSpec, params: np.ndarray | None = None):
        self.spec = spec
        if params is None:
            params = np.zeros(spec.n_params)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (spec.n_params,):
            raise ShapeError(f"expected {spec.n_params} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("non-finite parameters")
        self.params = params

    @classmethod
    def init(cls, sizes, activation="tanh", seed=0, zero_last=False):
        spec = DenseSpec(tuple(sizes), activation)
        return cls(spec, glorot_init(spec, np.random.default_rng(seed), zero_last))

    def unflatten(self) -> list[np.ndarray]:
        out, off = [], 0
        for _, shape in self.spec.blocks():
            n = int(np.prod(shape))
            out.append(self.params[off : off + n].reshape(shape))
            off += n
        return out

    @classmethod
    def from_arrays(cls, spec: DenseSpec, arrays) -> "DenseNet":
        return cls(spec, np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays]))

    def flatten(self) -> np.ndarray:
        return self.params.copy()

    def __eq__(self, other):
        return (
            isinstance(other, DenseNet)
            and self.spec == other.spec
            and np.array_equal(self.params, other.params)
        )

    __hash__ = None


class GradTape:
    """Forward record of one :func:`forward` call; supports one backward."""

    def __init__(self, tape: Tape, theta: Var, x: Var, out: Var):
        self._tape = tape
        self._theta = theta
        self._x = x
        self._out = out

    @property
    def used(self):
        return self._tape.used


def forward(net: DenseNet, x) -> tuple[np.ndarray, GradTape]:
    tape = Tape()
    theta = tape.leaf(net.params)
    xv = tape.leaf(np.asarray(x, dtype=np.float64))
    out = apply_dense(net.spec, bind_dense(net.spec, theta), xv)
    return out.value.copy(), GradTape(tape, theta, xv, out)


def backward(gt: GradTape, output_grad) -> tuple[np.ndarray, np.ndarray]:
    """Reverse pass; returns (parameter gradients, input gradients)."""
    gt._tape.backward(gt._out, np.asarray(output_grad, dtype=np.float64))
    pg = gt._theta.grad if gt._theta.grad is not None else np.zeros_like(gt._theta.value)
    xg = gt._x.grad if gt._x.grad is not None else np.zeros_like(gt._x.value)
    return pg, xg
