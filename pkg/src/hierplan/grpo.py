"""Reinforcement fine-tuning with group-relative advantages and collision rewards.

The planner's trajectory increments become the mean of a diagonal Gaussian
policy; a small variance head supplies per-point scales. Each scenario
yields a group of sampled rollouts whose per-point collision rewards are
normalized within the group and turned into suffix-sum advantages that
drive a clipped surrogate objective.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import planner
from .config import ExperimentConfig, RftConfig
from .geom import IncrementSeq, Trajectory
from .harness.metrics import collision_flags
from .imitation import TrainingDiverged
from .nnet import ShapeError, autodiff as ad
from .nnet.checkpoint import TrainState
from .nnet.optim import OptimizerState, step as optim_step
from .policy import VAR_HEAD, PolicySnapshot, reset_variance_head
from .world import RasterCache, encode_tape, grid_spec

LOG_2PI = math.log(2.0 * math.pi)
NORM_EPS = 1e-8


@dataclass(frozen=True)
class GaussianPolicyOutput:
    mu: IncrementSeq
    sigma: np.ndarray  # (T, 2)

    def __post_init__(self):
        sig = np.asarray(self.sigma, dtype=np.float64)
        if sig.shape != self.mu.deltas.shape:
            raise ShapeError(f"sigma shape {sig.shape} != mean shape {self.mu.deltas.shape}")
        if np.any(sig <= 0) or not np.all(np.isfinite(sig)):
            raise ValueError("sigma must be positive and finite")
        object.__setattr__(self, "sigma", sig)


@dataclass
class RolloutGroup:
    samples: np.ndarray  # (G, T, 2) increments
    rewards: np.ndarray  # (G, T)
    rtilde: np.ndarray
    adv: np.ndarray
    logp_old: np.ndarray


# --- pure functions -----------------------------------------------------------

def collision_rewards(traj: Trajectory, s, ego_half_extents=(2.0, 0.9), time_matched=True) -> np.ndarray:
    """-1 at points where the ego box overlaps an agent box at the same step, else 0."""
    pts = traj.points if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
    return -collision_flags(pts, s, ego_half_extents, time_matched).astype(np.float64)


def sample_group(pol: GaussianPolicyOutput, G: int, rng: np.random.Generator) -> list[IncrementSeq]:
    if G < 2:
        raise ValueError("group size must be >= 2")
    mu = pol.mu.deltas
    eps = rng.standard_normal((G,) + mu.shape)
    return [IncrementSeq(mu + pol.sigma * e, pol.mu.dt) for e in eps]


def normalize_rewards(raw: np.ndarray) -> np.ndarray:
    """Column-wise (r - mean) / (population std + 1e-8) over the group axis."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] < 2:
        raise ShapeError("rewards must be a G x T matrix with G >= 2")
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    return (raw - mean) / (std + NORM_EPS)


def advantages(rtilde: np.ndarray) -> np.ndarray:
    """Suffix sums along time: adv[i, j] = sum_{t >= j} rtilde[i, t]."""
    r = np.asarray(rtilde, dtype=np.float64)
    out = np.empty_like(r)
    acc = np.zeros(r.shape[0])
    for j in range(r.shape[1] - 1, -1, -1):
        acc = r[:, j] + acc
        out[:, j] = acc
    return out


def log_prob(traj: IncrementSeq, pol: GaussianPolicyOutput) -> np.ndarray:
    """Per-point diagonal Gaussian log density of the increments."""
    x = traj.deltas if isinstance(traj, IncrementSeq) else np.asarray(traj, dtype=np.float64)
    if x.shape != pol.mu.deltas.shape:
        raise ShapeError("sample and policy shapes differ")
    var = pol.sigma**2
    return -0.5 * np.sum(LOG_2PI + np.log(var) + (x - pol.mu.deltas) ** 2 / var, axis=-1)


def surrogate(logp_new: np.ndarray, logp_old: np.ndarray, adv: np.ndarray, epsilon: float) -> float:
    """(1/G) sum over group and points of min(ratio * A, clip(ratio) * A)."""
    if not (np.shape(logp_new) == np.shape(logp_old) == np.shape(adv)):
        raise ShapeError("surrogate inputs must share a shape")
    ratio = np.exp(np.asarray(logp_new) - np.asarray(logp_old))
    clipped = np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon)
    G = np.shape(adv)[0]
    return float(np.sum(np.minimum(ratio * adv, clipped * adv)) / G)


def gaussian_kl(mu_ref: IncrementSeq, pol: GaussianPolicyOutput) -> float:
    """0.5 * [log|S| + (m_ref - m)^T S^-1 (m_ref - m) + 2 log 2pi] per point, summed.

    This is the negative log-likelihood of the reference mean under the
    current policy, not a divergence between two Gaussians.
    """
    ref = mu_ref.deltas if isinstance(mu_ref, IncrementSeq) else np.asarray(mu_ref, dtype=np.float64)
    var = pol.sigma**2
    d = ref - pol.mu.deltas
    per_point = 0.5 * (np.sum(np.log(var), axis=-1) + np.sum(d * d / var, axis=-1) + 2.0 * LOG_2PI)
    return float(np.sum(per_point))


def entropy(pol: GaussianPolicyOutput) -> float:
    return float(np.sum(0.5 * (1.0 + LOG_2PI + np.log(pol.sigma**2))))


def reference_loss(mu_theta, mu_ref) -> float:
    """Mean over batch and time of the Euclidean distance between means."""
    a = _batch_points(mu_theta)
    b = _batch_points(mu_ref)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.sqrt(np.sum((a - b) ** 2, axis=-1))))


def _batch_points(x) -> np.ndarray:
    if isinstance(x, IncrementSeq):
        return x.deltas[None]
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], IncrementSeq):
        return np.stack([i.deltas for i in x])
    arr = np.asarray(x, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


# --- tape versions ----------------------------------------------------------

def log_prob_tape(x: np.ndarray, mu, sigma):
    """(G, T) per-point log densities; x is (G, T, 2), mu and sigma are (T, 2) Vars."""
    G = x.shape[0]
    var = sigma * sigma
    logvar = ad.log(var)
    terms = []
    for i in range(G):
        d = mu * -1.0 + x[i]
        terms.append(((logvar + d * d / var + LOG_2PI) * -0.5).sum(axis=1))
    return ad.stack(terms, axis=0)


def surrogate_tape(logp_new, logp_old: np.ndarray, adv: np.ndarray, epsilon: float):
    ratio = ad.exp(logp_new - logp_old)
    unclipped = ratio * adv
    clipped = ad.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * adv
    return ad.minimum(unclipped, clipped).sum() * (1.0 / adv.shape[0])


def gaussian_kl_tape(mu_ref: np.ndarray, mu, sigma):
    var = sigma * sigma
    d = mu * -1.0 + mu_ref
    return ((ad.log(var) + d * d / var).sum() + 2.0 * LOG_2PI * mu_ref.shape[0]) * 0.5


def entropy_tape(sigma):
    return ((ad.log(sigma * sigma) + (1.0 + LOG_2PI)) * 0.5).sum()


def reference_loss_tape(mu, mu_ref: np.ndarray):
    return ad.row_norm(mu * -1.0 + mu_ref).mean()


# --- policy evaluation ------------------------------------------------------

class LatentCache:
    """Latent grids of a frozen world encoder, computed once per scenario."""

    def __init__(self, snapshot: PolicySnapshot, rasters: RasterCache | None = None):
        self.snapshot = snapshot
        self.rasters = rasters or RasterCache(snapshot.cfg.world)
        self._grids = {}

    def grid(self, s) -> np.ndarray:
        key = s.key()
        if key not in self._grids:
            tape = ad.Tape()
            bound = self.snapshot.layout.bind(tape, self.snapshot.flat, requires_grad=False)
            self._grids[key] = encode_tape(bound, self.rasters.features(s, 0), self.snapshot.cfg.world, tape).value
        return self._grids[key]


def policy_tape(bound, w: np.ndarray, s, cfg: ExperimentConfig, tape):
    """(mu, sigma) Vars of shape (T, 2) for one scenario on ``tape``."""
    wv = tape.const(w)
    tp = planner.plan_tape(bound, wv, s.command, cfg.world, cfg.planner, tape)
    spec = grid_spec(cfg.world)
    feat = planner.traj_fusion_tape(bound, tp.final, tp.q2, wv, spec, cfg.planner)
    raw = planner._dense(bound, VAR_HEAD, ad.detach(feat)).reshape(cfg.world.horizon, 2)
    sigma = ad.softplus(raw) + cfg.rft.sigma_floor
    return tp.final[3], sigma


def gaussianize(snapshot: PolicySnapshot, s, latents: LatentCache | None = None) -> GaussianPolicyOutput:
    cfg = snapshot.cfg
    latents = latents or LatentCache(snapshot)
    tape = ad.Tape()
    bound = snapshot.layout.bind(tape, snapshot.flat, requires_grad=False)
    mu, sigma = policy_tape(bound, latents.grid(s), s, cfg, tape)
    return GaussianPolicyOutput(IncrementSeq(mu.value.copy(), cfg.world.dt), sigma.value.copy())


def rollout_group(pol: GaussianPolicyOutput, s, cfg: ExperimentConfig, rng) -> RolloutGroup:
    rc = cfg.rft
    samples = sample_group(pol, rc.G, rng)
    rewards = np.stack([
        collision_rewards(np.cumsum(x.deltas, axis=0), s, cfg.world.ego_half_extents, rc.time_matched_agents)
        for x in samples
    ])
    rt = normalize_rewards(rewards)
    return RolloutGroup(
        np.stack([x.deltas for x in samples]), rewards, rt, advantages(rt), np.stack([log_prob(x, pol) for x in samples])
    )


def rft_mask(layout, scope: str = "planner") -> np.ndarray:
    """Trainable entries during RFT: the planner (or only its refinement heads) and the variance head."""
    prefix = "planner/ref_" if scope == "refine" else "planner/"
    return layout.group_of(prefix) | layout.group_of(VAR_HEAD)


def scenario_rl_loss(bound, s, w, group: RolloutGroup, mu_ref: np.ndarray, cfg: ExperimentConfig, tape):
    """L = -J + lambda*KL + c_ref*L_ref - c_ent*H with J = J_surr - beta*KL; returns (Var, diagnostics)."""
    rc = cfg.rft
    mu, sigma = policy_tape(bound, w, s, cfg, tape)
    logp = log_prob_tape(group.samples, mu, sigma)
    j_surr = surrogate_tape(logp, group.logp_old, group.adv, rc.epsilon)
    kl = gaussian_kl_tape(mu_ref, mu, sigma)
    ent = entropy_tape(sigma)
    ref = reference_loss_tape(mu, mu_ref)
    loss = j_surr * -1.0 + kl * (rc.beta_kl + rc.lambda_kl) + ref * rc.c_ref - ent * rc.c_ent
    ratio = np.exp(logp.value - group.logp_old)
    diag = {
        "mean_reward": float(group.rewards.mean()),
        "collision_frac": float((group.rewards < 0).any(axis=1).mean()),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > rc.epsilon)),
        "kl": float(kl.value),
        "entropy": float(ent.value),
        "ref_loss": float(ref.value),
        "surrogate": float(j_surr.value),
    }
    return loss, diag


DIAG_COLUMNS = ("step", "mean_reward", "collision_frac", "clip_frac", "kl", "entropy", "ref_loss", "surrogate")


def rft_step(batch, params: PolicySnapshot, ref_means: dict, old: PolicySnapshot, cfg: ExperimentConfig,
             opt: OptimizerState, rng: np.random.Generator, latents: LatentCache, inner_steps: int | None = None):
    """One batch: roll out groups under ``old``, then optimizer step(s) on the RL loss.

    ``ref_means`` maps scenario keys to the reference policy's increments.
    Returns (updated snapshot, diagnostics dict averaged over the batch).
    """
    layout = params.layout
    mask = rft_mask(layout, cfg.rft.train_scope)
    groups = []
    for s in batch:
        pol_old = gaussianize(old, s, latents)
        groups.append(rollout_group(pol_old, s, cfg, rng))
    snap = params.copy()
    inner = cfg.rft.inner_steps if inner_steps is None else inner_steps
    diag_sum = None
    for _ in range(inner):
        grad = np.zeros(layout.size)
        diag_sum = dict.fromkeys(DIAG_COLUMNS[1:], 0.0)
        for s, g in zip(batch, groups):
            tape = ad.Tape()
            bound = layout.bind(tape, snap.flat)
            loss, diag = scenario_rl_loss(bound, s, latents.grid(s), g, ref_means[s.key()], cfg, tape)
            if not np.isfinite(loss.value):
                raise TrainingDiverged(f"non-finite RL loss on scenario {s.key()}: {diag}")
            tape.backward(loss)
            grad += bound.grad()
            for k, v in diag.items():
                diag_sum[k] += v
        grad /= len(batch)
        if not np.all(np.isfinite(grad)):
            raise TrainingDiverged("non-finite RL gradient")
        snap.flat = optim_step(opt, snap.flat, grad, mask)
    return snap, {k: v / len(batch) for k, v in diag_sum.items()}


def scheduled_lr(rc: RftConfig, step: int, total: int) -> float:
    """Learning rate for a 0-based step; cosine decay ends one step short of zero."""
    if rc.lr_schedule == "constant":
        return rc.lr
    return rc.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))


def reference_means(ref: PolicySnapshot, scenarios, latents: LatentCache) -> dict:
    return {s.key(): gaussianize(ref, s, latents).mu.deltas for s in scenarios}


def rft(corpus, ref: PolicySnapshot, cfg: ExperimentConfig | None = None, log_path=None, cache=None, epochs=None,
        on_epoch=None, state: TrainState | None = None):
    """Fine-tune from the reference snapshot; returns (snapshot, diagnostics rows).

    ``on_epoch(epoch, snapshot)`` is called after every epoch when given;
    ``state`` receives the final optimizer, RNG state and step count.
    """
    cfg = cfg or ref.cfg
    corpus = list(corpus)
    if not corpus:
        raise ValueError("RFT corpus is empty")
    rc = cfg.rft
    latents = LatentCache(ref, cache)
    ref_means = reference_means(ref, corpus, latents)
    snap = PolicySnapshot(cfg, ref.flat.copy())
    reset_variance_head(snap.layout, snap.flat, cfg)
    opt = OptimizerState.create("adam", rc.lr, snap.flat.size, rc.grad_clip)
    rng = np.random.default_rng([rc.seed, 23])
    rows = []
    fh = open(log_path, "w", newline="") if log_path else None
    try:
        writer = csv.writer(fh, lineterminator="\n") if fh else None
        if writer:
            writer.writerow(DIAG_COLUMNS)
        step = 0
        n_epochs = rc.epochs if epochs is None else epochs
        total = n_epochs * math.ceil(len(corpus) / rc.batch_size)
        for epoch in range(n_epochs):
            order = rng.permutation(len(corpus))
            for start in range(0, len(order), rc.batch_size):
                batch = [corpus[i] for i in order[start : start + rc.batch_size]]
                opt.lr = scheduled_lr(rc, step, total)
                old = snap  # refreshed once per batch
                snap, diag = rft_step(batch, snap, ref_means, old, cfg, opt, rng, latents)
                row = {"step": step, **diag}
                rows.append(row)
                if writer:
                    writer.writerow([step] + [repr(float(row[c])) for c in DIAG_COLUMNS[1:]])
                step += 1
            if on_epoch is not None:
                on_epoch(epoch, snap)
    finally:
        if fh:
            fh.close()
    if state is not None:
        state.optimizer, state.rng_state, state.step = opt, rng.bit_generator.state, step
    return snap, rows


# --- supervised fine-tuning baseline ------------------------------------------

def sft(corpus, ref: PolicySnapshot, cfg: ExperimentConfig | None = None, cache=None, epochs=None, penalty: float = 4.0):
    """Supervised counterpart to :func:`rft` with a matched step budget.

    L1 regression of the planner increments' integrated points onto the
    expert, with each point's weight raised by ``penalty`` where the current
    plan collides (the same collision signal used as the RL reward).
    """
    cfg = cfg or ref.cfg
    corpus = list(corpus)
    rc = cfg.rft
    latents = LatentCache(ref, cache)
    snap = PolicySnapshot(cfg, ref.flat.copy())
    layout = snap.layout
    mask = rft_mask(layout, rc.train_scope)  # same trainable set as RFT; the variance head gets no gradient here
    opt = OptimizerState.create("adam", rc.lr, layout.size, rc.grad_clip)
    rng = np.random.default_rng([rc.seed, 29])
    for _ in range(rc.epochs if epochs is None else epochs):
        order = rng.permutation(len(corpus))
        for start in range(0, len(order), rc.batch_size):
            batch = [corpus[i] for i in order[start : start + rc.batch_size]]
            grad = np.zeros(layout.size)
            for s in batch:
                tape = ad.Tape()
                bound = layout.bind(tape, snap.flat)
                wv = tape.const(latents.grid(s))
                tp = planner.plan_tape(bound, wv, s.command, cfg.world, cfg.planner, tape)
                pts = planner.cumsum_tape(tp.final[3])
                hit = collision_flags(pts.value, s, cfg.world.ego_half_extents, rc.time_matched_agents)
                weight = (1.0 + penalty * hit.astype(np.float64))[:, None]
                loss = (ad.vabs(pts - s.expert.points) * weight).mean()
                if not np.isfinite(loss.value):
                    raise TrainingDiverged(f"non-finite SFT loss on scenario {s.key()}")
                tape.backward(loss)
                grad += bound.grad()
            snap.flat = optim_step(opt, snap.flat, grad / len(batch), mask)
    return snap
