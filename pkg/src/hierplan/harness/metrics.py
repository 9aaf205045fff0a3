"""Open-loop metrics: horizon L2, collision rate and the PDM composite score."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..config import EvalConfig
from ..geom import Trajectory, points_in_polygon
from ..nnet import ShapeError
from ..world import Scenario, ego_rows


def horizon_index(h: float, dt: float) -> int:
    """Point index for horizon ``h`` seconds: point j sits at time (j + 1) * dt."""
    return int(round(h / dt)) - 1


def ade(pred: Trajectory, gt: Trajectory, horizons=(1.0, 2.0, 3.0)):
    """L2 distance at each horizon point and their mean.

    Horizons beyond the trajectory are reported as NaN and left out of the mean.
    """
    if len(pred) != len(gt):
        raise ShapeError(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")
    d = np.hypot(*(pred.points - gt.points).T)
    per = []
    for h in horizons:
        j = horizon_index(h, gt.dt)
        per.append(float(d[j]) if 0 <= j < len(d) else math.nan)
    avail = [v for v in per if not math.isnan(v)]
    return per, float(np.mean(avail)) if avail else math.nan


def collision_flags(points: np.ndarray, s: Scenario, half_extents, time_matched=True) -> np.ndarray:
    """Per-point ego/agent overlap for a trajectory of T points."""
    pts = np.asarray(points, dtype=np.float64)
    agents = s.agent_rows(time_matched)
    if len(pts) != agents.shape[0]:
        raise ShapeError(f"trajectory has {len(pts)} points, agent scripts cover {agents.shape[0]}")
    if agents.shape[1] == 0:
        return np.zeros(len(pts), dtype=bool)
    ego = ego_rows(pts, half_extents, (s.ego_start.x, s.ego_start.y), s.ego_start.heading)
    return kernels.obb_overlap_any(ego, agents)


def collision_rate(plans, scenarios, half_extents=(2.0, 0.9), horizons=(1.0, 2.0, 3.0), dt=0.5) -> float:
    """Percent of (scenario, horizon point) pairs in collision, averaged over horizons."""
    plans, scenarios = list(plans), list(scenarios)
    if len(plans) != len(scenarios):
        raise ShapeError("plans and scenarios must align")
    if not plans:
        return 0.0
    idx = [horizon_index(h, dt) for h in horizons]
    hits = np.zeros(len(idx))
    for pts, s in zip(plans, scenarios):
        pts = pts.points if isinstance(pts, Trajectory) else pts
        flags = collision_flags(pts, s, half_extents)
        hits += [flags[j] for j in idx]
    return float(np.mean(hits / len(plans)) * 100.0)


@dataclass(frozen=True)
class PdmsScore:
    nc: float
    dac: float
    ttc: float
    comf: float
    ep: float

    def __post_init__(self):
        for name in ("nc", "dac", "ttc", "comf", "ep"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def pdms(self) -> float:
        return self.nc * self.dac * (5.0 * self.ep + 5.0 * self.ttc + 2.0 * self.comf) / 12.0


def route_progress(points: np.ndarray, route: np.ndarray) -> np.ndarray:
    """Arc length of the closest-point projection of each point onto the route polyline."""
    a, b = route[:-1], route[1:]
    seg = b - a
    seg_len = np.hypot(*seg.T)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    out = np.empty(len(points))
    for k, p in enumerate(np.atleast_2d(points)):
        t = np.clip(np.einsum("ij,ij->i", p - a, seg) / np.maximum(seg_len**2, 1e-18), 0.0, 1.0)
        proj = a + t[:, None] * seg
        d = np.hypot(*(proj - p).T)
        i = int(np.argmin(d))
        out[k] = cum[i] + t[i] * seg_len[i]
    return out


def _ttc_ok(pts, s: Scenario, half_extents, window, dt) -> bool:
    if not s.agents:
        return True
    agent_all = np.stack([a.rows() for a in s.agents], axis=1)  # (T+1, n, 5): poses 0..T
    origin = np.array([s.ego_start.x, s.ego_start.y])
    full = np.vstack([origin, pts])
    ego = ego_rows(pts, half_extents, origin, s.ego_start.heading)
    taus = np.arange(1, int(round(window / (dt / 2))) + 1) * (dt / 2)
    for j in range(len(pts)):
        v = (full[j + 1] - full[j]) / dt
        va = (agent_all[j + 1, :, :2] - agent_all[j, :, :2]) / dt
        for tau in taus:
            e = ego[j].copy()
            e[:2] += v * tau
            ag = agent_all[j + 1].copy()
            ag[:, :2] += va * tau
            if kernels.obb_overlap_any(e[None], ag[None])[0]:
                return False
    return True


def _comfort_ok(pts, s: Scenario, cfg: EvalConfig, dt) -> bool:
    full = np.vstack([[s.ego_start.x, s.ego_start.y], pts])
    v = np.diff(full, axis=0) / dt
    v0 = s.ego_start.speed * np.array([math.cos(s.ego_start.heading), math.sin(s.ego_start.heading)])
    v = np.vstack([v0, v])
    acc = np.diff(v, axis=0) / dt
    jerk = np.diff(acc, axis=0) / dt
    amax = float(np.max(np.hypot(*acc.T)))
    jmax = float(np.max(np.hypot(*jerk.T))) if len(jerk) else 0.0
    return amax <= cfg.accel_max and jmax <= cfg.jerk_max


def pdms(traj, s: Scenario, cfg: EvalConfig | None = None, half_extents=(2.0, 0.9)) -> PdmsScore:
    """Binary NC/DAC/TTC/Comf gates and fractional route progress."""
    cfg = cfg or EvalConfig()
    if hasattr(traj, "trajectory"):
        traj = traj.trajectory()
    pts = traj.points
    dt = traj.dt
    nc = 0.0 if collision_flags(pts, s, half_extents).any() else 1.0
    dac = 1.0 if points_in_polygon(pts, s.drivable).all() else 0.0
    j = min(horizon_index(cfg.ep_horizon, dt), len(pts) - 1)
    expert_prog = route_progress(s.expert.points[j : j + 1], s.route)[0]
    pred_prog = route_progress(pts[j : j + 1], s.route)[0]
    ep = 1.0 if expert_prog <= 1e-9 else float(np.clip(pred_prog / expert_prog, 0.0, 1.0))
    ttc = 1.0 if _ttc_ok(pts, s, half_extents, cfg.ttc_window, dt) else 0.0
    comf = 1.0 if _comfort_ok(pts, s, cfg, dt) else 0.0
    return PdmsScore(nc=nc, dac=dac, ttc=ttc, comf=comf, ep=ep)


REPORT_COLUMNS = (
    "seed", "difficulty", "ade_1s", "ade_2s", "ade_3s", "ade_avg",
    "collide_1s", "collide_2s", "collide_3s", "nc", "dac", "ttc", "comf", "ep", "pdms",
)


@dataclass
class EvalReport:
    ade_1s: float
    ade_2s: float
    ade_3s: float
    ade_avg: float
    collision_rate: float
    pdms_scores: list = field(default_factory=list)
    rows: list = field(default_factory=list, repr=False)

    @property
    def pdms(self) -> float:
        if not self.pdms_scores:
            return math.nan
        return float(np.mean([p.pdms for p in self.pdms_scores]))

    def write_csv(self, path) -> None:
        """Per-scenario rows followed by one ``mean`` row, columns in REPORT_COLUMNS order."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(REPORT_COLUMNS)
            for r in self.rows:
                wr.writerow([_fmt(r.get(c, "")) for c in REPORT_COLUMNS])
            summary = {"seed": "mean", "difficulty": "", "ade_1s": self.ade_1s, "ade_2s": self.ade_2s,
                       "ade_3s": self.ade_3s, "ade_avg": self.ade_avg, "pdms": self.pdms if self.pdms_scores else ""}
            for c in ("collide_1s", "collide_2s", "collide_3s"):
                summary[c] = float(np.mean([r[c] for r in self.rows])) * 100.0 if self.rows else 0.0
            wr.writerow([_fmt(summary.get(c, "")) for c in REPORT_COLUMNS])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def evaluate(trajectories, scenarios, cfg: EvalConfig | None = None, half_extents=(2.0, 0.9), with_pdms=False) -> EvalReport:
    """Aggregate report over aligned predicted trajectories and scenarios."""
    cfg = cfg or EvalConfig()
    trajectories, scenarios = list(trajectories), list(scenarios)
    if len(trajectories) != len(scenarios):
        raise ShapeError("trajectories and scenarios must align")
    rows, scores = [], []
    for tr, s in zip(trajectories, scenarios):
        per, avg = ade(tr, s.expert, cfg.horizons)
        flags = collision_flags(tr.points, s, half_extents)
        row = {"seed": s.seed, "difficulty": s.difficulty, "ade_avg": avg}
        for k, h in enumerate(cfg.horizons[:3]):
            row[f"ade_{k + 1}s"] = per[k]
            j = horizon_index(h, tr.dt)
            row[f"collide_{k + 1}s"] = int(flags[j]) if 0 <= j < len(flags) else 0
        if with_pdms:
            sc = pdms(tr, s, cfg, half_extents)
            scores.append(sc)
            row.update(nc=sc.nc, dac=sc.dac, ttc=sc.ttc, comf=sc.comf, ep=sc.ep, pdms=sc.pdms)
        rows.append(row)
    mean = lambda key: float(np.nanmean([r[key] for r in rows])) if rows else math.nan  # noqa: E731
    cr = collision_rate(trajectories, scenarios, half_extents, cfg.horizons, trajectories[0].dt if trajectories else 0.5)
    return EvalReport(mean("ade_1s"), mean("ade_2s"), mean("ade_3s"), mean("ade_avg"), cr, scores, rows)
