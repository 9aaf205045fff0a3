"""Desk-scale ablation grids.

Each suite pretrains (and, where relevant, fine-tunes) on a seeded
training corpus and scores the result on a disjoint held-out corpus. The
rows are written to ``<out>/<suite>.csv`` with the fixed column orders in
:data:`COLUMNS`.
"""
from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import grpo, imitation, world
from ..config import ExperimentConfig
from ..policy import PolicySnapshot

SUITES = ("refine-k", "rft-vs-sft", "group-size", "path-config")
REFINE_KS = (0, 1, 3, 6)
GROUP_SIZES = (5, 10, 15)
# point counts scaled to the short desk horizon; spacings as in the full-size grid
PATH_GRID = ((9, 1.0), (9, 2.0), (15, 1.0), (15, 2.0), (24, 1.0), (24, 2.0))
HELD_OUT_OFFSET = 1000

COLUMNS = {
    "refine-k": ("K", "ade", "collision_rate"),
    "rft-vs-sft": ("method", "ade", "collision_rate"),
    "group-size": ("G", "ade", "collision_rate", "finite", "mean_reward"),
    "path-config": ("n_path", "path_spacing", "ade", "collision_rate"),
}


@dataclass
class Budget:
    train_count: int = 200
    val_count: int = 300
    difficulty: str = "medium"


@dataclass
class Corpora:
    train: list
    val: list
    cache: world.RasterCache


def make_corpora(cfg: ExperimentConfig, seed: int, budget: Budget) -> Corpora:
    """Training scenarios from ``seed``; held-out ones from a seed range that never overlaps it."""
    train = world.generate_corpus(budget.train_count, budget.difficulty, seed, cfg.world)
    val = world.generate_corpus(budget.val_count, budget.difficulty, HELD_OUT_OFFSET + seed, cfg.world)
    return Corpora(train, val, world.RasterCache(cfg.world))


def pretrained(cfg: ExperimentConfig, data: Corpora) -> PolicySnapshot:
    snap, _ = imitation.pretrain(data.train, PolicySnapshot.init(cfg), cfg, cache=data.cache)
    return snap


def held_out(snap: PolicySnapshot, data: Corpora) -> tuple[float, float]:
    return imitation.validate(snap, data.val, data.cache)


def refine_k(cfg, data, ref=None, log=print):
    rows = []
    for k in REFINE_KS:
        c = copy.deepcopy(cfg)
        c.planner.K = k
        ade, cr = held_out(pretrained(c, data), data)
        rows.append({"K": k, "ade": ade, "collision_rate": cr})
        log(f"refine-k K={k}: ade {ade:.4f} cr {cr:.2f}")
    return rows


def path_config(cfg, data, ref=None, log=print):
    rows = []
    for n, spacing in PATH_GRID:
        c = copy.deepcopy(cfg)
        c.planner.n_path, c.planner.path_spacing = n, spacing
        ade, cr = held_out(pretrained(c, data), data)
        rows.append({"n_path": n, "path_spacing": spacing, "ade": ade, "collision_rate": cr})
        log(f"path-config {n}x{spacing:g} m: ade {ade:.4f} cr {cr:.2f}")
    return rows


def rft_vs_sft(cfg, data, ref=None, log=print):
    ref = ref or pretrained(cfg, data)
    tuned = {
        "pretrained": ref,
        "sft": grpo.sft(data.train, ref, cfg, cache=data.cache),
        "rft": grpo.rft(data.train, ref, cfg, cache=data.cache)[0],
    }
    rows = []
    for method, snap in tuned.items():
        ade, cr = held_out(snap, data)
        rows.append({"method": method, "ade": ade, "collision_rate": cr})
        log(f"rft-vs-sft {method}: ade {ade:.4f} cr {cr:.2f}")
    return rows


def group_size(cfg, data, ref=None, log=print):
    ref = ref or pretrained(cfg, data)
    rows = []
    for g in GROUP_SIZES:
        c = copy.deepcopy(cfg)
        c.rft.G = g
        try:
            snap, diag = grpo.rft(data.train, ref, c, cache=data.cache)
        except (imitation.TrainingDiverged, FloatingPointError) as exc:
            log(f"group-size G={g}: diverged ({exc})")
            rows.append({"G": g, "ade": math.nan, "collision_rate": math.nan, "finite": False, "mean_reward": math.nan})
            continue
        ade, cr = held_out(snap, data)
        finite = bool(np.all(np.isfinite(snap.flat))) and all(
            math.isfinite(v) for row in diag for v in row.values()
        )
        reward = float(np.mean([r["mean_reward"] for r in diag])) if diag else math.nan
        rows.append({"G": g, "ade": ade, "collision_rate": cr, "finite": finite, "mean_reward": reward})
        log(f"group-size G={g}: ade {ade:.4f} cr {cr:.2f} finite {finite}")
    return rows


RUNNERS = {"refine-k": refine_k, "rft-vs-sft": rft_vs_sft, "group-size": group_size, "path-config": path_config}


def _cell(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_rows(path, suite: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS[suite])
        for row in rows:
            w.writerow([_cell(row[c]) for c in COLUMNS[suite]])


def run_suite(suite: str, cfg: ExperimentConfig, out_dir, budget: Budget | None = None, log=print):
    """Run one suite for ``cfg.seed`` and write its CSV; returns the rows."""
    if suite not in RUNNERS:
        raise ValueError(f"unknown ablation suite {suite!r}; choose from {', '.join(SUITES)}")
    data = make_corpora(cfg, cfg.seed, budget or Budget())
    rows = RUNNERS[suite](cfg, data, log=log)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / f"{suite}.csv", suite, rows)
    return rows
