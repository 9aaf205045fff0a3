"""Named parameter groups packed into a single flat vector."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Var
from .dense import DenseSpec, bind_dense, glorot_init


@dataclass
class ParamLayout:
    """Ordered registry of dense nets and raw arrays sharing one flat vector."""

    entries: dict = field(default_factory=dict)  # name -> (kind, spec_or_shape, offset, size)
    size: int = 0

    def add_dense(self, name: str, spec: DenseSpec):
        self._add(name, "dense", spec, spec.n_params)

    def add_array(self, name: str, shape):
        shape = tuple(int(s) for s in shape)
        self._add(name, "array", shape, int(np.prod(shape)))

    def _add(self, name, kind, spec, n):
        if name in self.entries:
            raise ValueError(f"duplicate parameter group {name!r}")
        self.entries[name] = (kind, spec, self.size, n)
        self.size += n

    def slice(self, name) -> slice:
        _, _, off, n = self.entries[name]
        return slice(off, off + n)

    def group_of(self, prefix: str) -> np.ndarray:
        """Boolean mask over the flat vector selecting groups whose name starts with prefix."""
        mask = np.zeros(self.size, dtype=bool)
        for name in self.entries:
            if name.startswith(prefix):
                mask[self.slice(name)] = True
        return mask

    def describe(self) -> list:
        out = []
        for name, (kind, spec, off, n) in self.entries.items():
            if kind == "dense":
                out.append([name, kind, list(spec.sizes), spec.activation, n])
            else:
                out.append([name, kind, list(spec), None, n])
        return out

    def init(self, rng: np.random.Generator, zero_last=(), zero=()) -> np.ndarray:
        flat = np.zeros(self.size)
        for name, (kind, spec, off, n) in self.entries.items():
            if name in zero:
                continue
            if kind == "dense":
                flat[off : off + n] = glorot_init(spec, rng, zero_last=name in zero_last)
            else:
                flat[off : off + n] = rng.normal(0.0, 1.0 / np.sqrt(max(spec[-1], 1)), size=n)
        return flat

    def bind(self, tape: Tape, flat: np.ndarray, requires_grad=True) -> "Bound":
        theta = tape.leaf(flat, requires_grad=requires_grad)
        return Bound(self, theta)


class Bound:
    """Lazily sliced view of a flat parameter Var on one tape."""

    def __init__(self, layout: ParamLayout, theta: Var):
        self.layout = layout
        self.theta = theta
        self._cache = {}

    def __getitem__(self, name):
        if name not in self._cache:
            kind, spec, off, n = self.layout.entries[name]
            if kind == "dense":
                self._cache[name] = bind_dense(spec, self.theta, off)
            else:
                self._cache[name] = self.theta[off : off + n].reshape(spec)
        return self._cache[name]

    def spec(self, name) -> DenseSpec:
        return self.layout.entries[name][1]

    def grad(self) -> np.ndarray:
        g = self.theta.grad
        return np.zeros_like(self.theta.value) if g is None else g
