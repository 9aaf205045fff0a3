"""The full trainable model: world model, planner and variance head in one flat vector."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .nnet import autodiff as ad
from .nnet.dense import DenseSpec
from .nnet.params import ParamLayout
from .planner import ZERO_LAST, plan_tape, register_planner, to_plan_output
from .world import WorldModelParams, encode_tape, grid_spec, rasterize, register_world, stencil_features

VAR_HEAD = "rft/var"


def build_layout(cfg: ExperimentConfig) -> ParamLayout:
    layout = ParamLayout()
    register_world(layout, cfg.world)
    register_planner(layout, cfg.world, cfg.planner)
    p = cfg.planner
    layout.add_dense(VAR_HEAD, DenseSpec((p.fusion_dim, p.hidden, 2 * cfg.world.horizon)))
    return layout


def inverse_softplus(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


@dataclass
class PolicySnapshot:
    """Immutable-by-convention parameter vector plus the config that shapes it."""

    cfg: ExperimentConfig
    flat: np.ndarray

    @property
    def layout(self) -> ParamLayout:
        return build_layout(self.cfg)

    @classmethod
    def init(cls, cfg: ExperimentConfig, seed: int | None = None) -> "PolicySnapshot":
        seed = cfg.seed if seed is None else seed
        layout = build_layout(cfg)
        rng = np.random.default_rng([seed, 7])
        flat = layout.init(rng, zero_last=ZERO_LAST + (VAR_HEAD,))
        reset_variance_head(layout, flat, cfg)
        return cls(cfg, flat)

    def copy(self) -> "PolicySnapshot":
        return PolicySnapshot(self.cfg, self.flat.copy())

    def world_params(self) -> WorldModelParams:
        wp_layout = WorldModelParams(self.cfg.world, np.empty(0)).layout
        return WorldModelParams(self.cfg.world, self.flat[: wp_layout.size].copy())

    def __eq__(self, other):
        return (
            isinstance(other, PolicySnapshot)
            and self.cfg.to_dict() == other.cfg.to_dict()
            and np.array_equal(self.flat, other.flat)
        )


def reset_variance_head(layout: ParamLayout, flat: np.ndarray, cfg: ExperimentConfig) -> None:
    """Zero the head's last layer and set its bias so sigma starts at sigma_init."""
    spec = layout.entries[VAR_HEAD][1]
    sl = layout.slice(VAR_HEAD)
    n_in, n_out = spec.sizes[-2], spec.sizes[-1]
    last = n_in * n_out + n_out
    end = sl.stop
    flat[end - last : end] = 0.0
    flat[end - n_out : end] = inverse_softplus(cfg.rft.sigma_init - cfg.rft.sigma_floor)


def predict(snapshot: PolicySnapshot, s, cache=None, K: int | None = None):
    """Plan for one scenario; returns a PlanOutput."""
    cfg = snapshot.cfg
    if cache is not None:
        feats = cache.features(s, 0)
    else:
        feats = stencil_features(rasterize(s, grid_spec(cfg.world), 0, cfg.world.occupancy_subsamples), cfg.world.stencil)
    tape = ad.Tape()
    bound = snapshot.layout.bind(tape, snapshot.flat, requires_grad=False)
    w = encode_tape(bound, feats, cfg.world, tape)
    tp = plan_tape(bound, w, s.command, cfg.world, cfg.planner, tape, K=K)
    return to_plan_output(tp, cfg.world.dt, cfg.planner.shared_b)


PlannerParams = PolicySnapshot  # planner weights live in the shared flat vector
