"""Imitation pretraining: Laplace target NLL, L1 path/trajectory losses, latent prediction loss."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import planner
from .config import ExperimentConfig
from .geom import Point2, Trajectory
from .harness.metrics import evaluate
from .nnet import ShapeError, autodiff as ad
from .nnet.checkpoint import TrainState
from .nnet.optim import OptimizerState, step as optim_step
from .planner import PlanOutput, SpatialPath, TargetRegion
from .policy import VAR_HEAD, PolicySnapshot, predict
from .world import RasterCache, WorldModelParams, decode_tape, encode_latent, encode_tape, predict_next_latent, reconstruction_loss


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


def laplace_nll(y: Point2, region: TargetRegion) -> float:
    """Sum over axes of log(2 b) + |y - mu| / b."""
    b = np.asarray(region.b, dtype=np.float64)
    if np.any(b <= 0) or not np.all(np.isfinite(b)):
        raise ValueError(f"Laplace scale must be positive and finite, got {region.b}")
    d = np.abs(np.asarray(y, dtype=np.float64) - np.asarray(region.mu, dtype=np.float64))
    return float(np.sum(np.log(2.0 * b) + d / b))


def traj_l1(pred, gt) -> float:
    """Mean absolute error over every coordinate of two equal-length point sequences."""
    a, b = _points(pred), _points(gt)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def _points(x) -> np.ndarray:
    if isinstance(x, (Trajectory, SpatialPath)):
        return x.points
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class LossBreakdown:
    rec: float
    target: float
    path_l1: float
    traj_l1: float
    total: float
    aux: float = 0.0  # weighted loss on the pre-refinement decode, outside ``total``

    @property
    def objective(self) -> float:
        return self.total + self.aux


def combine(rec, target, path_l1, traj_l1, cfg: ExperimentConfig):
    pc = cfg.pretrain
    return pc.beta_rec * rec + pc.gamma_target * target + pc.eta_traj * (path_l1 + traj_l1)


def compute_losses(s, plan: PlanOutput, wm: WorldModelParams, cfg: ExperimentConfig) -> LossBreakdown:
    """Loss terms for one scenario given a finished plan (no gradients)."""
    expert = s.expert.points
    gt_path = planner.path_ground_truth(expert, cfg.planner.n_path, cfg.planner.path_spacing)
    target = laplace_nll(Point2(*expert[-1]), plan.target)
    p_l1 = traj_l1(plan.path.points, gt_path)
    pred_traj = plan.trajectory()
    t_l1 = traj_l1(pred_traj, s.expert)
    w0 = encode_latent(s, wm, 0)
    w1 = encode_latent(s, wm, 1)
    source = s.expert if cfg.world.decoder_traj_source == "expert" else pred_traj
    rec = reconstruction_loss(predict_next_latent(w0, source, wm), w1)
    return LossBreakdown(rec, target, p_l1, t_l1, combine(rec, target, p_l1, t_l1, cfg))


# --- differentiable losses --------------------------------------------------

def laplace_nll_tape(y: np.ndarray, mu, b):
    return (ad.log(b * 2.0) + ad.vabs(mu - y) / b).sum()


def state_losses_tape(state, expert: np.ndarray, gt_path: np.ndarray, shared_b: bool):
    """(target, path_l1, traj_l1) Vars for one plan iterate."""
    mu, b_raw, path, inc = state
    b = planner._b_from_raw(b_raw, shared_b)
    target = laplace_nll_tape(expert[-1], mu, b)
    path_l1 = ad.vabs(path - gt_path).mean()
    traj_l1 = ad.vabs(planner.cumsum_tape(inc) - expert).mean()
    return target, path_l1, traj_l1


def scenario_loss_tape(bound, s, cfg: ExperimentConfig, cache: RasterCache, tape, gt_path=None):
    """Objective Var and float breakdown for one scenario on ``tape``."""
    wc, pc = cfg.world, cfg.pretrain
    expert = s.expert.points
    if gt_path is None:
        gt_path = planner.path_ground_truth(expert, cfg.planner.n_path, cfg.planner.path_spacing)
    w = encode_tape(bound, cache.features(s, 0), wc, tape)
    if not pc.train_world_encoder:
        w = ad.detach(w)
    tp = planner.plan_tape(bound, w, s.command, wc, cfg.planner, tape)
    target, path_l1, traj_l1 = state_losses_tape(tp.final, expert, gt_path, cfg.planner.shared_b)

    w_next = ad.detach(encode_tape(bound, cache.features(s, 1), wc, tape))
    if wc.decoder_traj_source == "expert":
        src = expert
    else:
        src = np.cumsum(tp.final[3].value, axis=0)
    pred = decode_tape(bound, w, src, wc)
    rec = ad.square(pred - w_next).mean()

    total = rec * pc.beta_rec + target * pc.gamma_target + (path_l1 + traj_l1) * pc.eta_traj
    objective = total
    aux_val = 0.0
    if pc.aux_weight > 0 and len(tp.states) > 1:
        t0, p0, j0 = state_losses_tape(tp.states[0], expert, gt_path, cfg.planner.shared_b)
        aux = (t0 * pc.gamma_target + (p0 + j0) * pc.eta_traj) * pc.aux_weight
        objective = total + aux
        aux_val = float(aux.value)
    vals = [float(v.value) for v in (rec, target, path_l1, traj_l1)]
    lb = LossBreakdown(*vals, combine(*vals, cfg), aux_val)
    return objective, lb


def pretrain_mask(layout, cfg: ExperimentConfig) -> np.ndarray:
    mask = ~layout.group_of(VAR_HEAD)
    if not cfg.pretrain.train_world_encoder:
        mask &= ~layout.group_of("world/enc")
    return mask


def _check_finite(value, what, context):
    if not np.all(np.isfinite(value)):
        raise TrainingDiverged(f"non-finite {what} ({context})")


def batch_gradient(snapshot: PolicySnapshot, batch, cfg, cache, layout, gt_paths):
    """Mean gradient and mean breakdown over a batch, reduced in batch order."""
    grad = np.zeros(layout.size)
    parts = np.zeros(6)
    for s in batch:
        tape = ad.Tape()
        bound = layout.bind(tape, snapshot.flat)
        obj, lb = scenario_loss_tape(bound, s, cfg, cache, tape, gt_paths.get(s.key()))
        _check_finite(obj.value, "loss", f"scenario {s.key()}")
        tape.backward(obj)
        grad += bound.grad()
        parts += [lb.rec, lb.target, lb.path_l1, lb.traj_l1, lb.total, lb.aux]
    return grad / len(batch), parts / len(batch)


LOG_COLUMNS = ("epoch", "rec", "target", "path_l1", "traj_l1", "total", "val_ade", "val_cr")


def validate(snapshot: PolicySnapshot, scenarios, cache=None):
    """(horizon-averaged L2, collision rate %) on a corpus."""
    if not scenarios:
        return math.nan, math.nan
    cfg = snapshot.cfg
    trajs = [predict(snapshot, s, cache).trajectory() for s in scenarios]
    rep = evaluate(trajs, scenarios, cfg.eval, cfg.world.ego_half_extents)
    return rep.ade_avg, rep.collision_rate


def pretrain(corpus, params: PolicySnapshot, cfg: ExperimentConfig | None = None, val=None, log_path=None, cache=None,
             state: TrainState | None = None):
    """Adam on the imitation objective; returns (snapshot, per-epoch log rows).

    Deterministic given ``cfg.pretrain.seed``. Raises TrainingDiverged on
    a non-finite loss or gradient. When ``state`` is given it receives the
    final optimizer, RNG state and step count.
    """
    cfg = cfg or params.cfg
    corpus = list(corpus)
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    pc = cfg.pretrain
    snap = params.copy()
    layout = snap.layout
    cache = cache or RasterCache(cfg.world)
    gt_paths = {
        s.key(): planner.path_ground_truth(s.expert.points, cfg.planner.n_path, cfg.planner.path_spacing) for s in corpus
    }
    mask = pretrain_mask(layout, cfg)
    opt = OptimizerState.create("adam", pc.lr, layout.size, pc.grad_clip)
    rng = np.random.default_rng([pc.seed, 11])
    n_steps = 0
    log = []
    writer = None
    fh = open(log_path, "w", newline="") if log_path else None
    try:
        if fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
        for epoch in range(pc.epochs):
            order = rng.permutation(len(corpus))
            sums = np.zeros(6)
            n_batches = 0
            for start in range(0, len(order), pc.batch_size):
                batch = [corpus[i] for i in order[start : start + pc.batch_size]]
                grad, parts = batch_gradient(snap, batch, cfg, cache, layout, gt_paths)
                _check_finite(grad, "gradient", f"epoch {epoch}")
                snap.flat = optim_step(opt, snap.flat, grad, mask)
                sums += parts
                n_batches += 1
                n_steps += 1
            avg = sums / max(n_batches, 1)
            val_ade, val_cr = validate(snap, val, cache) if val else (math.nan, math.nan)
            row = dict(zip(LOG_COLUMNS, [epoch, *avg[:5], val_ade, val_cr]))
            log.append(row)
            if writer:
                writer.writerow([row[c] if c == "epoch" else repr(float(row[c])) for c in LOG_COLUMNS])
                fh.flush()
    finally:
        if fh:
            fh.close()
    if state is not None:
        state.optimizer, state.rng_state, state.step = opt, rng.bit_generator.state, n_steps
    return snap, log
