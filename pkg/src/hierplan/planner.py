"""Hierarchical planning head.

Three queries (target, path, trajectory) read the latent grid through
single-head cross-attention, talk to each other through self-attention, and
are decoded into a Laplace target region, a spatial path and per-step
trajectory increments. A K-step refinement loop then samples the latent
grid around the current plan and applies residual corrections.

All network code runs on an autodiff tape (``*_tape`` functions); the plain
functions wrap them for inference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import geom
from .config import ExperimentConfig, PlannerConfig, WorldConfig
from .geom import GridSpec, IncrementSeq, Point2, Trajectory
from .nnet import ShapeError, autodiff as ad
from .nnet.dense import DenseSpec, apply_dense
from .nnet.params import ParamLayout
from .world import COMMANDS, LatentGrid, grid_spec

B_FLOOR = 1e-3
TRAJ_SCALE = 2.0  # meters per unit of trajectory-head output
POS_SCALE = 10.0  # meters per unit of path / target-head output
SUBTASKS = ("target", "path", "traj")


@dataclass(frozen=True)
class QuerySet:
    q_target: np.ndarray
    q_path: np.ndarray
    q_traj: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.stack([self.q_target, self.q_path, self.q_traj])


@dataclass(frozen=True)
class TargetRegion:
    mu: Point2
    b: tuple[float, float]

    def __post_init__(self):
        if min(self.b) <= 0:
            raise ValueError(f"Laplace scales must be positive, got {self.b}")


@dataclass(frozen=True)
class SpatialPath:
    points: np.ndarray

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class PlanState:
    """One iterate of the plan."""

    mu: np.ndarray  # (2,)
    b: np.ndarray  # (2,)
    path: np.ndarray  # (N, 2)
    increments: np.ndarray  # (T, 2)

    def trajectory(self) -> np.ndarray:
        return np.cumsum(self.increments, axis=0)

    def __eq__(self, other):
        if not isinstance(other, PlanState):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("mu", "b", "path", "increments"))

    __hash__ = None


@dataclass(frozen=True)
class PlanOutput:
    target: TargetRegion
    path: SpatialPath
    increments: IncrementSeq
    history: tuple[PlanState, ...] = field(repr=False)

    def trajectory(self) -> Trajectory:
        return geom.integrate_increments(self.increments)


# --- parameters ---------------------------------------------------------------

def register_planner(layout: ParamLayout, wcfg: WorldConfig, pcfg: PlannerConfig) -> None:
    D, C, H = pcfg.query_dim, wcfg.channels, pcfg.hidden
    N, T = pcfg.n_path, wcfg.horizon
    pe = pos_dim(pcfg)
    nb = 1 if pcfg.shared_b else 2
    S, Bd, F = pcfg.state_dim, pcfg.b_dim, pcfg.fusion_dim
    layout.add_array("planner/q_init", (3, D))
    layout.add_dense("planner/ca_q", DenseSpec((D + len(COMMANDS), D)))
    layout.add_dense("planner/ca_k", DenseSpec((C + pe, D)))
    layout.add_dense("planner/ca_v", DenseSpec((C, D)))
    layout.add_dense("planner/sa_q", DenseSpec((D, D)))
    layout.add_dense("planner/sa_k", DenseSpec((D, D)))
    layout.add_dense("planner/sa_v", DenseSpec((D, D)))
    layout.add_dense("planner/head_target", DenseSpec((D, H, 2 + nb)))
    layout.add_dense("planner/head_path", DenseSpec((D, H, 2 * N)))
    layout.add_dense("planner/head_traj", DenseSpec((D, H, 2 * T)))
    layout.add_dense("planner/ref_state", DenseSpec((2 + nb + 2 * N + 2 * T, S, S)))
    layout.add_dense("planner/ref_b", DenseSpec((nb, Bd)))
    for name, P in (("target", 1), ("path", N), ("traj", T)):
        extra = nb if name == "target" else 0
        layout.add_dense(f"planner/ref_off_{name}", DenseSpec((D + S, 2 * P)))
        layout.add_dense(f"planner/ref_fuse_{name}", DenseSpec((P * C + D + S + Bd, F, F)))
        layout.add_dense(f"planner/ref_delta_{name}", DenseSpec((F, 2 * P + extra)))


ZERO_LAST = tuple(f"planner/ref_{kind}_{name}" for kind in ("off", "delta") for name in SUBTASKS)


def pos_dim(pcfg: PlannerConfig) -> int:
    return 2 + 4 * pcfg.pos_freqs


def positional_encoding(spec: GridSpec, pcfg: PlannerConfig) -> np.ndarray:
    """(H*W, pos_dim) cell-center coordinates plus sinusoids, row-major over (j, i)."""
    centers = spec.cell_centers().reshape(-1, 2)
    ext = np.array([spec.width, spec.height]) * spec.cell_size
    z = (centers - np.array(spec.origin)) / ext * 2.0 - 1.0
    feats = [z]
    for k in range(pcfg.pos_freqs):
        f = math.pi * (2**k)
        feats += [np.sin(f * z), np.cos(f * z)]
    return np.concatenate(feats, axis=1)


def command_onehot(command: str) -> np.ndarray:
    v = np.zeros(len(COMMANDS))
    v[COMMANDS.index(command)] = 1.0
    return v


# --- query interaction ----------------------------------------------------

def _dense(bound, name, x):
    return apply_dense(bound.spec(name), bound[name], x)


def cross_attention_tape(bound, queries, cells, pe, D):
    """Stage 1: each query attends over all cells. Returns (Q', weights)."""
    qp = _dense(bound, "planner/ca_q", queries)
    keys = _dense(bound, "planner/ca_k", ad.concat([cells, pe], axis=1))
    vals = _dense(bound, "planner/ca_v", cells)
    attn = ad.softmax((qp @ keys.T) * (1.0 / math.sqrt(D)), axis=1)
    return qp + attn @ vals, attn


def self_attention_tape(bound, q1, D):
    qs = _dense(bound, "planner/sa_q", q1)
    ks = _dense(bound, "planner/sa_k", q1)
    vs = _dense(bound, "planner/sa_v", q1)
    attn = ad.softmax((qs @ ks.T) * (1.0 / math.sqrt(D)), axis=1)
    return q1 + attn @ vs, attn


def query_interact_tape(bound, w, command: str, wcfg: WorldConfig, pcfg: PlannerConfig, tape, pe=None):
    """Returns (Q'' as (3, D) Var, stage-1 weights, stage-2 weights)."""
    h, wd, c = wcfg.grid_height, wcfg.grid_width, wcfg.channels
    if w.shape != (h, wd, c):
        raise ShapeError(f"latent grid shape {w.shape} != configured {(h, wd, c)}")
    if pe is None:
        pe = positional_encoding(grid_spec(wcfg), pcfg)
    cmd = np.broadcast_to(command_onehot(command), (3, len(COMMANDS)))
    queries = ad.concat([bound["planner/q_init"], tape.const(cmd)], axis=1)
    cells = w.reshape(h * wd, c)
    q1, a1 = cross_attention_tape(bound, queries, cells, tape.const(pe), pcfg.query_dim)
    q2, a2 = self_attention_tape(bound, q1, pcfg.query_dim)
    return q2, a1, a2


# --- decoding -----------------------------------------------------------------

def _b_from_raw(raw, shared: bool):
    b = ad.softplus(raw) + B_FLOOR
    if shared:
        b = ad.concat([b, b], axis=0)
    return b


def decode_tape(bound, q2, wcfg: WorldConfig, pcfg: PlannerConfig):
    """Decode (mu, b_raw, path, increments) Vars from Q''."""
    nb = 1 if pcfg.shared_b else 2
    tgt = _dense(bound, "planner/head_target", q2[0])
    mu = tgt[0:2] * POS_SCALE
    b_raw = tgt[2 : 2 + nb]
    path = (_dense(bound, "planner/head_path", q2[1]) * POS_SCALE).reshape(pcfg.n_path, 2)
    inc = (_dense(bound, "planner/head_traj", q2[2]) * TRAJ_SCALE).reshape(wcfg.horizon, 2)
    return mu, b_raw, path, inc


def cumsum_tape(inc):
    """Prefix sums along axis 0 as a lower-triangular matmul."""
    T = inc.shape[0]
    return ad.matmul(np.tril(np.ones((T, T))), inc)


# --- refinement ---------------------------------------------------------------

def sample_local(w, points, spec: GridSpec):
    """Bilinear samples of the (H, W, C) grid at world points (P, 2); cell-centered convention."""
    u = (points[:, 0] - spec.origin.x) * (1.0 / spec.cell_size) - 0.5
    v = (points[:, 1] - spec.origin.y) * (1.0 / spec.cell_size) - 0.5
    return ad.bilinear(w, u, v)


def _state_features(bound, mu, b, path, pts):
    x = ad.concat([mu * (1.0 / POS_SCALE), b, path.reshape(-1) * (1.0 / POS_SCALE), pts.reshape(-1) * (1.0 / POS_SCALE)], axis=0)
    return _dense(bound, "planner/ref_state", x)


def fused_feature_tape(bound, name, q_sub, fs, fb, points, w, spec):
    """Offset sampling + fusion for one subtask; returns F_fusion."""
    P = points.shape[0]
    off = _dense(bound, f"planner/ref_off_{name}", ad.concat([q_sub, fs], axis=0)).reshape(P, 2)
    local = sample_local(w, points + off, spec)
    return _dense(bound, f"planner/ref_fuse_{name}", ad.concat([local.reshape(-1), q_sub, fs, fb], axis=0))


def refine_step_tape(bound, state, q2, w, spec, pcfg: PlannerConfig):
    """One refinement iteration; every subtask reads the same pre-iteration state."""
    mu, b_raw, path, inc = state
    nb = 1 if pcfg.shared_b else 2
    b = _b_from_raw(b_raw, False)
    pts = cumsum_tape(inc)
    fs = _state_features(bound, mu, b, path, pts)
    fb = _dense(bound, "planner/ref_b", b)
    alpha = pcfg.alpha

    f_t = fused_feature_tape(bound, "target", q2[0], fs, fb, mu.reshape(1, 2), w, spec)
    d_t = _dense(bound, "planner/ref_delta_target", f_t)
    new_mu = mu + d_t[0:2] * alpha
    new_b_raw = b_raw + d_t[2 : 2 + nb]

    f_p = fused_feature_tape(bound, "path", q2[1], fs, fb, path, w, spec)
    d_p = _dense(bound, "planner/ref_delta_path", f_p).reshape(pcfg.n_path, 2)
    new_path = path + d_p * alpha

    f_j = fused_feature_tape(bound, "traj", q2[2], fs, fb, pts, w, spec)
    d_j = _dense(bound, "planner/ref_delta_traj", f_j).reshape(inc.shape[0], 2)
    new_inc = inc + d_j * alpha
    return (new_mu, new_b_raw, new_path, new_inc), f_j


def traj_fusion_tape(bound, state, q2, w, spec, pcfg: PlannerConfig):
    """Trajectory F_fusion evaluated at ``state`` (feeds the variance head)."""
    mu, b_raw, path, inc = state
    b = _b_from_raw(b_raw, False)
    pts = cumsum_tape(inc)
    fs = _state_features(bound, mu, b, path, pts)
    fb = _dense(bound, "planner/ref_b", b)
    return fused_feature_tape(bound, "traj", q2[2], fs, fb, pts, w, spec)


@dataclass
class TapePlan:
    """Vars produced by :func:`plan_tape`."""

    states: list  # K+1 tuples (mu, b_raw, path, inc)
    q2: object
    attn1: object
    attn2: object

    @property
    def final(self):
        return self.states[-1]


def plan_tape(bound, w, command: str, wcfg: WorldConfig, pcfg: PlannerConfig, tape, K=None, pe=None) -> TapePlan:
    K = pcfg.K if K is None else K
    if K < 0:
        raise ValueError("K must be >= 0")
    spec = grid_spec(wcfg)
    q2, a1, a2 = query_interact_tape(bound, w, command, wcfg, pcfg, tape, pe)
    state = decode_tape(bound, q2, wcfg, pcfg)
    states = [state]
    for _ in range(K):
        state, _ = refine_step_tape(bound, state, q2, w, spec, pcfg)
        states.append(state)
    return TapePlan(states, q2, a1, a2)


def b_value(b_raw: np.ndarray, shared: bool) -> np.ndarray:
    b = np.logaddexp(0.0, b_raw) + B_FLOOR
    return np.repeat(b, 2) if shared else b


def to_plan_state(state, shared_b: bool) -> PlanState:
    mu, b_raw, path, inc = state
    return PlanState(mu.value.copy(), b_value(b_raw.value, shared_b), path.value.copy(), inc.value.copy())


def to_plan_output(tp: TapePlan, dt: float, shared_b: bool) -> PlanOutput:
    hist = tuple(to_plan_state(s, shared_b) for s in tp.states)
    last = hist[-1]
    return PlanOutput(
        TargetRegion(Point2(*last.mu), (float(last.b[0]), float(last.b[1]))),
        SpatialPath(last.path),
        IncrementSeq(last.increments, dt),
        hist,
    )


# --- inference API ------------------------------------------------------------

def _bind(snapshot, tape):
    return snapshot.layout.bind(tape, snapshot.flat, requires_grad=False)


def query_interact(q: QuerySet | None, w: LatentGrid, p, command: str = "straight") -> tuple[QuerySet, np.ndarray]:
    """Cross- then self-attention of the three queries over the grid.

    ``q`` overrides the learned initial queries when given. Returns Q'' and
    the stage-1 attention weights (3, H*W).
    """
    tape = ad.Tape()
    bound = _bind(p, tape)
    if q is not None:
        bound._cache["planner/q_init"] = tape.const(q.stacked())
    q2, a1, _ = query_interact_tape(bound, tape.const(w.channels), command, p.cfg.world, p.cfg.planner, tape)
    v = q2.value
    return QuerySet(v[0].copy(), v[1].copy(), v[2].copy()), a1.value


def decode_target(q_target: np.ndarray, p) -> TargetRegion:
    tape = ad.Tape()
    bound = _bind(p, tape)
    out = _dense(bound, "planner/head_target", tape.const(q_target)).value
    b = b_value(out[2:], p.cfg.planner.shared_b)
    return TargetRegion(Point2(*(out[:2] * POS_SCALE)), (float(b[0]), float(b[1])))


def decode_path(q_path: np.ndarray, p) -> SpatialPath:
    tape = ad.Tape()
    bound = _bind(p, tape)
    out = _dense(bound, "planner/head_path", tape.const(q_path)).value
    return SpatialPath((out * POS_SCALE).reshape(p.cfg.planner.n_path, 2))


def decode_traj(q_traj: np.ndarray, p) -> IncrementSeq:
    tape = ad.Tape()
    bound = _bind(p, tape)
    out = _dense(bound, "planner/head_traj", tape.const(q_traj)).value
    return IncrementSeq((out * TRAJ_SCALE).reshape(p.cfg.world.horizon, 2), p.cfg.world.dt)


def _state_vars(tape, st: PlanState, shared_b: bool):
    b = np.asarray(st.b, dtype=np.float64)
    raw = np.log(np.expm1(b - B_FLOOR))  # softplus inverse
    if shared_b:
        raw = raw[:1]
    return (tape.const(st.mu), tape.const(raw), tape.const(st.path), tape.const(st.increments))


def refine(plan: PlanOutput, q2: QuerySet, w: LatentGrid, p, K: int, alpha: float | None = None) -> PlanOutput:
    """Run K refinement iterations starting from the final state of ``plan``."""
    if K < 0:
        raise ValueError("K must be >= 0")
    pcfg = p.cfg.planner
    if alpha is not None and alpha != pcfg.alpha:
        pcfg = replace(pcfg, alpha=alpha)
    tape = ad.Tape()
    bound = _bind(p, tape)
    start = plan.history[-1]
    state = _state_vars(tape, start, pcfg.shared_b)
    wv = tape.const(w.channels)
    q2v = tape.const(q2.stacked())
    hist = [start]
    for _ in range(K):
        state, _ = refine_step_tape(bound, state, q2v, wv, w.spec, pcfg)
        hist.append(to_plan_state(state, pcfg.shared_b))
    last = hist[-1]
    return PlanOutput(
        TargetRegion(Point2(*last.mu), (float(last.b[0]), float(last.b[1]))),
        SpatialPath(last.path),
        IncrementSeq(last.increments, plan.increments.dt),
        tuple(hist),
    )


def plan(s, w: LatentGrid, p, cfg: ExperimentConfig | None = None) -> PlanOutput:
    """Full pipeline: query interaction, three decodes, K refinement steps."""
    cfg = cfg or p.cfg
    tape = ad.Tape()
    bound = _bind(p, tape)
    tp = plan_tape(bound, tape.const(w.channels), s.command, cfg.world, cfg.planner, tape)
    return to_plan_output(tp, cfg.world.dt, cfg.planner.shared_b)


# --- supervision targets ----------------------------------------------------

def path_ground_truth(expert: np.ndarray, n: int, spacing: float = 2.0, origin=(0.0, 0.0)) -> np.ndarray:
    """Walk the polyline origin -> expert points placing points exactly ``spacing`` apart.

    Each point is the first intersection ahead of the previous one with a
    circle of radius ``spacing``. Past the last vertex the polyline continues
    straight along its last non-degenerate direction.
    """
    poly = np.vstack([np.asarray(origin, dtype=np.float64), np.asarray(expert, dtype=np.float64).reshape(-1, 2)])
    keep = [0]
    for k in range(1, len(poly)):
        if np.hypot(*(poly[k] - poly[keep[-1]])) > 1e-9:
            keep.append(k)
    poly = poly[keep]
    if len(poly) >= 2:
        direction = (poly[-1] - poly[-2]) / np.hypot(*(poly[-1] - poly[-2]))
    else:
        direction = np.array([1.0, 0.0])
    poly = np.vstack([poly, poly[-1] + direction * spacing * (n + 1)])

    out = np.empty((n, 2))
    cur = poly[0]
    seg, t_min = 0, 0.0
    for k in range(n):
        while True:
            a, d = poly[seg], poly[seg + 1] - poly[seg]
            f = a - cur
            qa, qb, qc = d @ d, 2.0 * (f @ d), f @ f - spacing * spacing
            disc = qb * qb - 4.0 * qa * qc
            if disc >= 0.0:
                t = (-qb + math.sqrt(disc)) / (2.0 * qa)
                if t >= t_min and (t <= 1.0 or seg == len(poly) - 2):
                    break
            seg, t_min = seg + 1, 0.0
        cur = a + t * d
        t_min = t
        out[k] = cur
    return out
