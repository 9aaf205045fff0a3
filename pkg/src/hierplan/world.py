"""Synthetic driving scenarios, bird's-eye latent encoder and world decoder.

A scenario is expressed in the ego frame at t=0 (ego at the origin facing
+x). Agents carry scripted poses for steps 0..T, where step k is time
k*dt; expert point j (0-based) is the ego position at step j+1.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import geom, kernels
from .config import WorldConfig
from .geom import GridSpec, OrientedBox, Polygon2, Trajectory
from .nnet import ShapeError, autodiff as ad
from .nnet.dense import DenseSpec, apply_dense
from .nnet.params import ParamLayout

DIFFICULTIES = ("easy", "medium", "hard")
COMMANDS = ("left", "straight", "right")
N_PLANES = 8  # occupancy, agent vx, agent vy, drivable, route dir x, route dir y, route proximity, ego speed
MAX_RETRIES = 64

LANE_HALF = 1.75
RIGHT_EDGE = -4.25
LEFT_EDGE = 6.25
AGENT_HALF = (2.2, 0.9)

_MARGINS = {"easy": 2.0, "medium": 0.5, "hard": 0.3}


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EgoStart:
    x: float
    y: float
    heading: float
    speed: float


@dataclass(frozen=True)
class Agent:
    half_extents: tuple[float, float]
    poses: np.ndarray  # (T+1, 3): x, y, heading per step

    def box(self, step: int) -> OrientedBox:
        x, y, h = self.poses[step]
        return OrientedBox(geom.Point2(x, y), self.half_extents, h)

    def rows(self) -> np.ndarray:
        """(T+1, 5) kernel rows."""
        n = len(self.poses)
        he = np.broadcast_to(np.array(self.half_extents), (n, 2))
        return np.column_stack([self.poses[:, :2], he, self.poses[:, 2]])


@dataclass(frozen=True)
class Scenario:
    seed: int
    difficulty: str
    ego_start: EgoStart
    agents: tuple[Agent, ...]
    drivable: Polygon2
    route: np.ndarray
    expert: Trajectory
    command: str

    @property
    def horizon(self) -> int:
        return len(self.expert)

    def agent_rows(self, time_matched: bool = True) -> np.ndarray:
        """(T, n_agents, 5) agent boxes aligned with expert/trajectory points."""
        T = self.horizon
        if not self.agents:
            return np.zeros((T, 0, 5))
        rows = np.stack([a.rows() for a in self.agents], axis=1)  # (T+1, n, 5)
        if time_matched:
            return np.ascontiguousarray(rows[1 : T + 1])
        return np.ascontiguousarray(np.broadcast_to(rows[0], (T,) + rows.shape[1:]))

    def key(self):
        return (self.seed, self.difficulty)


# --- corpus serialization ---------------------------------------------------

def scenario_to_dict(s: Scenario) -> dict:
    return {
        "seed": s.seed,
        "difficulty": s.difficulty,
        "command": s.command,
        "ego_start": [s.ego_start.x, s.ego_start.y, s.ego_start.heading, s.ego_start.speed],
        "agents": [
            {"half_extents": list(a.half_extents), "poses": a.poses.tolist()} for a in s.agents
        ],
        "drivable": s.drivable.vertices.tolist(),
        "route": s.route.tolist(),
        "expert": s.expert.points.tolist(),
        "dt": s.expert.dt,
    }


def scenario_from_dict(d: dict) -> Scenario:
    ex, ey, eh, ev = d["ego_start"]
    return Scenario(
        seed=int(d["seed"]),
        difficulty=d["difficulty"],
        ego_start=EgoStart(ex, ey, eh, ev),
        agents=tuple(
            Agent(tuple(a["half_extents"]), np.array(a["poses"], dtype=np.float64)) for a in d["agents"]
        ),
        drivable=Polygon2(np.array(d["drivable"], dtype=np.float64)),
        route=np.array(d["route"], dtype=np.float64),
        expert=Trajectory(np.array(d["expert"], dtype=np.float64), d["dt"]),
        command=d["command"],
    )


def scenario_to_json(s: Scenario) -> str:
    return json.dumps(scenario_to_dict(s), separators=(",", ":"))


def write_corpus(path, scenarios) -> None:
    with open(path, "w") as fh:
        for s in scenarios:
            fh.write(scenario_to_json(s))
            fh.write("\n")


def read_corpus(path) -> list[Scenario]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(scenario_from_dict(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad scenario record: {exc}") from exc
    return out


# --- generation -------------------------------------------------------------

def _centerline(s, kappa):
    s = np.asarray(s, dtype=np.float64)
    if abs(kappa) < 1e-9:
        return np.column_stack([s, np.zeros_like(s)]), np.zeros_like(s)
    th = kappa * s
    return np.column_stack([np.sin(th) / kappa, (1.0 - np.cos(th)) / kappa]), th


def _frenet(s, lat, kappa):
    base, th = _centerline(s, kappa)
    normal = np.column_stack([-np.sin(th), np.cos(th)])
    return base + normal * np.asarray(lat)[:, None], th


def _bump(s, lo, hi, ramp):
    """1 on [lo, hi], raised-cosine ramps of length ``ramp`` on both sides."""
    s = np.asarray(s)
    out = np.zeros_like(s)
    out[(s >= lo) & (s <= hi)] = 1.0
    left = (s > lo - ramp) & (s < lo)
    out[left] = 0.5 - 0.5 * np.cos(math.pi * (s[left] - (lo - ramp)) / ramp)
    right = (s > hi) & (s < hi + ramp)
    out[right] = 0.5 + 0.5 * np.cos(math.pi * (s[right] - hi) / ramp)
    return out


def headings_along(points: np.ndarray, origin=(0.0, 0.0), initial=0.0, eps=1e-6) -> np.ndarray:
    """Heading at each point from the finite difference to its predecessor.

    Near-zero steps reuse the previous heading (``initial`` before the first).
    """
    prev = np.asarray(origin, dtype=np.float64)
    h = initial
    out = np.empty(len(points))
    for j, p in enumerate(points):
        dx, dy = p[0] - prev[0], p[1] - prev[1]
        if dx * dx + dy * dy > eps * eps:
            h = math.atan2(dy, dx)
        out[j] = h
        prev = p
    return out


def ego_rows(points: np.ndarray, half_extents, origin=(0.0, 0.0), initial=0.0) -> np.ndarray:
    hd = headings_along(points, origin, initial)
    n = len(points)
    return np.column_stack([points, np.full(n, half_extents[0]), np.full(n, half_extents[1]), hd])


def _corridor(kappa):
    s = np.arange(-8.0, 72.0 + 1e-9, 2.0)
    right, _ = _frenet(s, np.full(len(s), RIGHT_EDGE), kappa)
    left, _ = _frenet(s, np.full(len(s), LEFT_EDGE), kappa)
    verts = np.vstack([right, left[::-1]])
    if geom.signed_area(verts) < 0:
        verts = verts[::-1]
    return Polygon2(verts)


def _draw(rng: np.random.Generator, difficulty: str, cfg: WorldConfig):
    T, dt = cfg.horizon, cfg.dt
    speed = float(rng.uniform(3.0, 7.0))
    command = COMMANDS[int(rng.choice(3, p=[0.25, 0.5, 0.25]))]
    kappa = {"left": 1.0, "straight": 0.0, "right": -1.0}[command] * float(rng.uniform(0.02, 0.055))
    margin = _MARGINS[difficulty]

    n_block = {"easy": 0, "medium": int(rng.integers(1, 3)), "hard": int(rng.integers(2, 4))}[difficulty]
    horizon_len = speed * T * dt
    obstacles = []  # (s, lateral, heading offset)
    for _ in range(n_block):
        s_o = float(rng.uniform(5.0, horizon_len + 4.0))
        side = -1.0 if rng.random() < 0.7 else 1.0
        depth = float(rng.uniform(1.45, 3.1)) if difficulty == "medium" else float(rng.uniform(1.4, 2.6))
        obstacles.append((s_o, side * depth, float(rng.normal(0.0, 0.08))))

    # expert lateral offset: nudge away from intruding obstacles
    s_dense = speed * dt * np.arange(1, T + 1)
    lat = np.zeros(T)
    for s_o, y_o, _ in obstacles:
        clearance = margin + float(rng.uniform(0.25, 0.6))
        need = abs(y_o) - AGENT_HALF[1] - cfg.ego_half_extents[1] - clearance
        shift = -math.copysign(max(0.0, -need), y_o) if need < 0 else 0.0
        bump = _bump(s_dense, s_o - AGENT_HALF[0] - 2.5, s_o + AGENT_HALF[0] + 2.5, 7.0)
        lat = lat + shift * bump
    expert_pts, _ = _frenet(s_dense, lat, kappa)

    agents = []
    for s_o, y_o, dh in obstacles:
        (pos,), (th,) = _frenet(np.array([s_o]), np.array([y_o]), kappa)
        pose = np.array([pos[0], pos[1], geom.normalize_angle(th + dh)])
        agents.append(Agent(AGENT_HALF, np.tile(pose, (T + 1, 1))))

    # background traffic
    n_bg = {"easy": int(rng.integers(0, 3)), "medium": int(rng.integers(0, 3)), "hard": int(rng.integers(1, 3))}[difficulty]
    for _ in range(n_bg):
        kind = rng.choice(["oncoming", "lead", "parked"])
        steps = np.arange(T + 1) * dt
        if kind == "oncoming":
            v = float(rng.uniform(3.0, 8.0))
            s0 = float(rng.uniform(10.0, 50.0))
            s_t = s0 - v * steps
            y = np.full(T + 1, 2 * LANE_HALF + float(rng.normal(0, 0.2)))
            heading_flip = math.pi
        elif kind == "lead":
            v = speed + float(rng.uniform(0.0, 2.0))
            s_t = float(rng.uniform(12.0, 25.0)) + v * steps
            y = np.full(T + 1, float(rng.normal(0, 0.15)))
            heading_flip = 0.0
        else:
            s_t = np.full(T + 1, float(rng.uniform(0.0, 40.0)))
            y = np.full(T + 1, -float(rng.uniform(3.3, 4.0)) if rng.random() < 0.5 else float(rng.uniform(5.0, 5.8)))
            heading_flip = 0.0
        pts, th = _frenet(s_t, y, kappa)
        heads = np.array([geom.normalize_angle(h + heading_flip) for h in th])
        agents.append(Agent(AGENT_HALF, np.column_stack([pts, heads])))

    route_s = np.arange(0.0, 70.0 + 1e-9, 2.0)
    route, _ = _centerline(route_s, kappa)
    drivable = _corridor(kappa)
    expert = Trajectory(expert_pts, dt)
    return speed, command, agents, drivable, route, expert, obstacles, margin


def _valid(expert, agents, drivable, margin, cfg, difficulty) -> bool:
    pts = expert.points
    ego = ego_rows(pts, cfg.ego_half_extents)
    hd = ego[:, 4]
    turn = np.abs(np.diff(np.concatenate([[0.0], hd])))
    turn = np.minimum(turn, 2 * math.pi - turn)
    if np.any(turn > cfg.max_turn_rate * cfg.dt):
        return False
    if not np.all(geom.points_in_polygon(np.vstack([[0.0, 0.0], pts]), drivable)):
        return False
    if agents:
        rows = np.stack([a.rows() for a in agents], axis=1)[1:]  # (T, n, 5)
        n = rows.shape[1]
        sep = kernels.obb_separation_pairs(np.repeat(ego, n, axis=0), rows.reshape(-1, 5))
        if np.any(sep < margin):
            return False
        start = np.array([[0.0, 0.0, *cfg.ego_half_extents, 0.0]])
        if np.any(kernels.obb_separation_pairs(np.repeat(start, n, axis=0), np.stack([a.rows()[0] for a in agents])) < margin):
            return False
        if difficulty == "hard":
            d = np.linalg.norm(rows[:, :, :2] - pts[:, None, :], axis=-1)
            if not np.any(d <= 5.0):
                return False
    return True


def generate_scenario(seed: int, difficulty: str = "medium", cfg: WorldConfig | None = None) -> Scenario:
    """Deterministic scenario for (seed, difficulty)."""
    cfg = cfg or WorldConfig()
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}")
    for attempt in range(MAX_RETRIES):
        rng = np.random.default_rng([int(seed), DIFFICULTIES.index(difficulty), attempt])
        speed, command, agents, drivable, route, expert, _, margin = _draw(rng, difficulty, cfg)
        if _valid(expert, agents, drivable, margin, cfg, difficulty):
            return Scenario(
                seed=int(seed),
                difficulty=difficulty,
                ego_start=EgoStart(0.0, 0.0, 0.0, speed),
                agents=tuple(agents),
                drivable=drivable,
                route=route,
                expert=expert,
                command=command,
            )
    raise GenerationError(f"scenario generation failed after {MAX_RETRIES} attempts (seed={seed}, difficulty={difficulty})")


def generate_corpus(count: int, difficulty: str = "medium", seed: int = 0, cfg: WorldConfig | None = None):
    return [generate_scenario(seed * 100003 + k, difficulty, cfg) for k in range(count)]


# --- rasterization ----------------------------------------------------------

def grid_spec(cfg: WorldConfig) -> GridSpec:
    return GridSpec(geom.Point2(*cfg.grid_origin), cfg.cell_size, cfg.grid_width, cfg.grid_height)


def _advanced_frame(s: Scenario):
    """Ego pose (x, y, heading, speed) one step ahead along the expert."""
    p = s.expert.points[0]
    hd = headings_along(s.expert.points[:1], initial=s.ego_start.heading)[0]
    speed = float(np.hypot(p[0], p[1]) / s.expert.dt)
    return float(p[0]), float(p[1]), float(hd), speed


def rasterize(s: Scenario, spec: GridSpec, step: int = 0, subsamples: int = 3) -> np.ndarray:
    """Input planes (height, width, N_PLANES) for scenario time ``step`` (0 or 1).

    Step 1 is drawn in the ego frame after following the expert one step.
    """
    if step == 0:
        fx, fy, fh, speed = 0.0, 0.0, 0.0, s.ego_start.speed
    elif step == 1:
        fx, fy, fh, speed = _advanced_frame(s)
    else:
        raise ValueError("rasterize supports step 0 or 1")
    c, sn = math.cos(fh), math.sin(fh)
    rot = np.array([[c, -sn], [sn, c]])  # frame -> scenario

    def to_scn(local):
        return local @ rot.T + np.array([fx, fy])

    h, w = spec.height, spec.width
    centers = spec.cell_centers().reshape(-1, 2)
    centers_scn = to_scn(centers)
    planes = np.zeros((h * w, N_PLANES))

    if s.agents:
        rows = np.stack([a.rows()[step] for a in s.agents])
        nxt = min(step + 1, len(s.agents[0].poses) - 1)
        vel = np.stack([a.poses[nxt, :2] - a.poses[nxt - 1, :2] for a in s.agents]) / s.expert.dt
        vel_local = vel @ rot  # scenario -> frame
        k = subsamples
        offs = (np.arange(k) + 0.5) / k - 0.5
        ox, oy = np.meshgrid(offs * spec.cell_size, offs * spec.cell_size)
        sub = np.column_stack([ox.ravel(), oy.ravel()])
        pts = (centers[:, None, :] + sub[None]).reshape(-1, 2)
        hit = kernels.points_in_obbs(to_scn(pts), rows).reshape(h * w, k * k)
        planes[:, 0] = (hit >= 0).mean(axis=1)
        first = np.where(hit >= 0, hit, np.iinfo(np.int64).max).min(axis=1)
        occ = first < len(rows)
        planes[occ, 1] = vel_local[first[occ], 0] / 10.0
        planes[occ, 2] = vel_local[first[occ], 1] / 10.0

    planes[:, 3] = geom.points_in_polygon(centers_scn, s.drivable)

    r = s.route
    a, b = r[:-1], r[1:]
    seg = b - a
    seg_len2 = np.maximum((seg * seg).sum(axis=1), 1e-12)
    rel = centers_scn[:, None, :] - a[None]
    t = np.clip((rel * seg[None]).sum(axis=2) / seg_len2, 0.0, 1.0)
    closest = a[None] + t[..., None] * seg[None]
    d2 = ((centers_scn[:, None, :] - closest) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)
    tangent = seg[nearest] / np.sqrt(seg_len2[nearest])[:, None]
    tangent_local = tangent @ rot
    planes[:, 4:6] = tangent_local
    planes[:, 6] = np.maximum(0.0, 1.0 - np.sqrt(d2[np.arange(len(nearest)), nearest]) / 4.0)
    planes[:, 7] = speed / 10.0
    return planes.reshape(h, w, N_PLANES)


def stencil_features(planes: np.ndarray, size: int = 3) -> np.ndarray:
    """(H, W, P) -> (H*W, size*size*P) zero-padded neighbourhoods, row-major offsets."""
    h, w, p = planes.shape
    r = size // 2
    padded = np.zeros((h + 2 * r, w + 2 * r, p))
    padded[r : r + h, r : r + w] = planes
    parts = [padded[dy : dy + h, dx : dx + w] for dy in range(size) for dx in range(size)]
    return np.concatenate(parts, axis=-1).reshape(h * w, size * size * p)


# --- latent world model -----------------------------------------------------

@dataclass(frozen=True)
class LatentGrid:
    spec: GridSpec
    channels: np.ndarray  # (height, width, C)

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float64)
        if ch.ndim != 3 or ch.shape[:2] != (self.spec.height, self.spec.width):
            raise ShapeError(f"latent shape {ch.shape} does not match grid {self.spec.height}x{self.spec.width}")
        if not np.all(np.isfinite(ch)):
            raise ValueError("latent grid contains non-finite values")
        object.__setattr__(self, "channels", ch)


def register_world(layout: ParamLayout, cfg: WorldConfig) -> None:
    st = cfg.stencil * cfg.stencil
    layout.add_dense("world/enc", DenseSpec((st * N_PLANES, cfg.enc_hidden, cfg.channels), "tanh"))
    layout.add_dense("world/dec", DenseSpec((st * cfg.channels + 2 * cfg.horizon, cfg.dec_hidden, cfg.channels), "tanh"))


@dataclass
class WorldModelParams:
    """Encoder and decoder nets held in a flat vector (see :func:`register_world`)."""

    cfg: WorldConfig
    flat: np.ndarray

    @property
    def layout(self) -> ParamLayout:
        layout = ParamLayout()
        register_world(layout, self.cfg)
        return layout

    @classmethod
    def init(cls, cfg: WorldConfig, seed: int = 0, zero_decoder=False) -> "WorldModelParams":
        layout = ParamLayout()
        register_world(layout, cfg)
        rng = np.random.default_rng([seed, 101])
        flat = layout.init(rng, zero=("world/dec",) if zero_decoder else ())
        return cls(cfg, flat)


class RasterCache:
    """Memoizes the constant raster planes of each scenario."""

    def __init__(self, cfg: WorldConfig, maxsize: int = 4096):
        self.cfg = cfg
        self.spec = grid_spec(cfg)
        self._get = lru_cache(maxsize=maxsize)(self._compute)
        self._by_key = {}

    def _compute(self, key, step):
        s = self._by_key[key]
        return stencil_features(rasterize(s, self.spec, step, self.cfg.occupancy_subsamples), self.cfg.stencil)

    def features(self, s: Scenario, step: int = 0) -> np.ndarray:
        self._by_key[s.key()] = s
        return self._get(s.key(), step)


def encode_tape(bound, feats: np.ndarray, cfg: WorldConfig, tape) -> "ad.Var":
    """Per-cell encoder on a tape; returns an (H, W, C) Var."""
    enc = bound["world/enc"]
    x = tape.const(feats)
    out = apply_dense(bound.spec("world/enc"), enc, x)
    return out.reshape(cfg.grid_height, cfg.grid_width, cfg.channels)


def encode_latent(s: Scenario, p: WorldModelParams, step: int = 0, cache: RasterCache | None = None) -> LatentGrid:
    cfg = p.cfg
    spec = grid_spec(cfg)
    if cache is not None:
        feats = cache.features(s, step)
    else:
        feats = stencil_features(rasterize(s, spec, step, cfg.occupancy_subsamples), cfg.stencil)
    tape = ad.Tape()
    bound = p.layout.bind(tape, p.flat, requires_grad=False)
    return LatentGrid(spec, encode_tape(bound, feats, cfg, tape).value)


def traj_code(points: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=np.float64).reshape(-1) / 10.0


def decode_tape(bound, w, traj_points: np.ndarray, cfg: WorldConfig):
    """Decoder on a tape: (H, W, C) Var + trajectory -> predicted next (H, W, C) Var."""
    h, wd, c = cfg.grid_height, cfg.grid_width, cfg.channels
    if cfg.stencil == 3:
        neigh = ad.stencil3x3(w).reshape(h * wd, 9 * c)
    elif cfg.stencil == 1:
        neigh = w.reshape(h * wd, c)
    else:
        raise ValueError("decoder stencil must be 1 or 3")
    code = np.broadcast_to(traj_code(traj_points), (h * wd, 2 * cfg.horizon))
    x = ad.concat([neigh, code], axis=1)
    out = apply_dense(bound.spec("world/dec"), bound["world/dec"], x)
    return out.reshape(h, wd, c)


def predict_next_latent(w: LatentGrid, traj: Trajectory, p: WorldModelParams) -> LatentGrid:
    cfg = p.cfg
    spec = grid_spec(cfg)
    if w.spec != spec or w.channels.shape[2] != cfg.channels:
        raise ShapeError("latent grid does not match world model configuration")
    if len(traj) != cfg.horizon:
        raise ShapeError(f"trajectory length {len(traj)} != horizon {cfg.horizon}")
    tape = ad.Tape()
    bound = p.layout.bind(tape, p.flat, requires_grad=False)
    out = decode_tape(bound, tape.const(w.channels), traj.points, cfg)
    return LatentGrid(spec, out.value)


def reconstruction_loss(pred: LatentGrid, actual: LatentGrid) -> float:
    """Mean squared error over all cells and channels."""
    if pred.spec != actual.spec or pred.channels.shape != actual.channels.shape:
        raise ShapeError("latent grids differ in spec or channel count")
    d = pred.channels - actual.channels
    return float(np.mean(d * d))
