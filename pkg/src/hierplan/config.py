"""Experiment configuration, serializable to and from JSON."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


@dataclass
class WorldConfig:
    grid_width: int = 64
    grid_height: int = 64
    cell_size: float = 1.0
    grid_origin: tuple[float, float] = (-16.0, -32.0)
    channels: int = 16
    stencil: int = 3
    enc_hidden: int = 32
    dec_hidden: int = 32
    horizon: int = 6
    dt: float = 0.5
    ego_half_extents: tuple[float, float] = (2.0, 0.9)
    max_turn_rate: float = 0.8  # rad/s
    occupancy_subsamples: int = 3
    # "predicted": decoder sees the planner trajectory (detached); "expert": ground truth
    decoder_traj_source: str = "predicted"


@dataclass
class PlannerConfig:
    query_dim: int = 64
    n_path: int = 30
    path_spacing: float = 2.0
    K: int = 3
    alpha: float = 0.1
    hidden: int = 64
    state_dim: int = 64
    b_dim: int = 16
    fusion_dim: int = 64
    pos_freqs: int = 2
    # per-axis Laplace scales; True collapses them into one shared scale
    shared_b: bool = False


@dataclass
class PretrainConfig:
    alpha_sem: float = 0.0  # semantic loss slot, no semantic head here
    beta_rec: float = 0.2
    gamma_target: float = 0.001
    eta_traj: float = 1.0
    aux_weight: float = 0.3  # weight of the loss on the pre-refinement decode
    epochs: int = 12
    lr: float = 1e-3
    batch_size: int = 8
    grad_clip: float | None = 10.0
    train_world_encoder: bool = True
    seed: int = 0


@dataclass
class RftConfig:
    G: int = 10
    epsilon: float = 0.2
    beta_kl: float = 0.0
    lambda_kl: float = 0.1
    c_ref: float = 0.12
    c_ent: float = 0.1
    lr: float = 3e-4
    epochs: int = 4
    batch_size: int = 8
    inner_steps: int = 1
    sigma_init: float = 0.25
    sigma_floor: float = 1e-4
    time_matched_agents: bool = True
    grad_clip: float | None = 10.0
    train_scope: str = "planner"  # "planner": every planner group; "refine": refinement heads only
    lr_schedule: str = "constant"  # or "cosine": decay to zero over the run
    seed: int = 0


@dataclass
class EvalConfig:
    horizons: tuple[float, ...] = (1.0, 2.0, 3.0)
    accel_max: float = 3.0
    jerk_max: float = 5.0
    ttc_window: float = 1.0
    ep_horizon: float = 4.0


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    rft: RftConfig = field(default_factory=RftConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    train_corpus: str | None = None
    val_corpus: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def validate(self) -> None:
        w, p = self.world, self.planner
        if w.horizon < 1 or p.n_path < 1 or p.K < 0:
            raise ValueError("horizon and path length must be >= 1, K >= 0")
        if w.stencil % 2 != 1:
            raise ValueError("stencil must be odd")
        if self.rft.G < 2 or not 0 < self.rft.epsilon < 1:
            raise ValueError("RFT needs G >= 2 and epsilon in (0, 1)")
        for name in ("beta_rec", "gamma_target", "eta_traj", "aux_weight"):
            if getattr(self.pretrain, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.rft.train_scope not in ("planner", "refine"):
            raise ValueError(f"unknown RFT train_scope {self.rft.train_scope!r}")
        if self.rft.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown RFT lr_schedule {self.rft.lr_schedule!r}")
        for name in ("beta_kl", "lambda_kl", "c_ref", "c_ent"):
            if getattr(self.rft, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _build(cls, d):
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in d.items():
        if key not in hints:
            raise ValueError(f"unknown config key {cls.__name__}.{key}")
        f = hints[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value)
        elif isinstance(default, tuple) and value is not None:
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def desk_config(seed: int = 0) -> ExperimentConfig:
    """Compact preset used by the ablation suites and acceptance runs."""
    cfg = ExperimentConfig(seed=seed)
    cfg.world = WorldConfig(grid_width=32, grid_height=24, grid_origin=(-4.0, -12.0), channels=12,
                            enc_hidden=24, dec_hidden=24)
    cfg.planner = PlannerConfig(query_dim=32, n_path=15, hidden=48, state_dim=32, b_dim=8, fusion_dim=48)
    cfg.pretrain.seed = seed
    cfg.rft = RftConfig(lr=2e-3, epochs=20, train_scope="refine", lr_schedule="cosine", seed=seed)
    return cfg
