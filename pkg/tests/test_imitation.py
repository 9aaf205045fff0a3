import copy
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hierplan import imitation, planner, world
from hierplan.geom import Point2, Trajectory, differentiate
from hierplan.imitation import LossBreakdown, combine, compute_losses, laplace_nll, traj_l1
from hierplan.nnet import ShapeError, autodiff as ad
from hierplan.planner import SpatialPath, TargetRegion
from hierplan.policy import PolicySnapshot, predict

import gradcheck
import oracles


# --- Laplace NLL --------------------------------------------------------------

def test_laplace_at_center_with_half_scale_is_zero():
    assert laplace_nll(Point2(1.5, -2.0), TargetRegion(Point2(1.5, -2.0), (0.5, 0.5))) == pytest.approx(0.0, abs=1e-12)


def test_laplace_hand_example():
    v = laplace_nll(Point2(2.0, 0.0), TargetRegion(Point2(0.0, 0.0), (1.0, 1.0)))
    assert abs(v - (2 * math.log(2.0) + 2.0)) <= 1e-9
    assert v == pytest.approx(3.3863, abs=1e-4)


@pytest.mark.parametrize("d", [0.3, 1.0, 2.7])
def test_laplace_minimized_at_scale_equal_to_distance(d):
    grid = np.linspace(0.05, 6.0, 20001)
    vals = [laplace_nll(Point2(d, d), TargetRegion(Point2(0, 0), (b, b))) for b in grid]
    assert grid[int(np.argmin(vals))] == pytest.approx(d, abs=1e-3)


def test_laplace_rejects_bad_scale():
    region = TargetRegion(Point2(0, 0), (1.0, 1.0))
    object.__setattr__(region, "b", (1.0, 0.0))
    with pytest.raises(ValueError):
        laplace_nll(Point2(0, 0), region)


coord = st.floats(-20, 20)


@given(coord, coord, coord, coord, coord, coord, coord, coord, st.floats(0.01, 5), st.floats(0.01, 5))
def test_laplace_is_convex_in_center(ax, ay, bx, by, yx, yy, _u, _v, b1, b2):
    y = Point2(yx, yy)
    fa = laplace_nll(y, TargetRegion(Point2(ax, ay), (b1, b2)))
    fb = laplace_nll(y, TargetRegion(Point2(bx, by), (b1, b2)))
    fm = laplace_nll(y, TargetRegion(Point2((ax + bx) / 2, (ay + by) / 2), (b1, b2)))
    assert fm <= (fa + fb) / 2 + 1e-9


def test_laplace_tape_matches_plain_value(rng):
    for _ in range(20):
        y, mu, b = rng.normal(size=2), rng.normal(size=2), rng.uniform(0.1, 3, 2)
        tape = ad.Tape()
        v = imitation.laplace_nll_tape(y, tape.const(mu), tape.const(b)).value
        assert v == pytest.approx(laplace_nll(Point2(*y), TargetRegion(Point2(*mu), tuple(b))), abs=1e-12)


# --- L1 -------------------------------------------------------------------------

def test_l1_examples(rng):
    a = rng.normal(size=(6, 2))
    assert traj_l1(Trajectory(a), Trajectory(a)) == 0.0
    assert traj_l1(a + 1.0, a) == pytest.approx(1.0, abs=1e-12)
    b = rng.normal(size=(6, 2))
    assert traj_l1(SpatialPath(a), SpatialPath(b)) == pytest.approx(oracles.l1_loops(a, b), abs=1e-12)
    with pytest.raises(ShapeError):
        traj_l1(a, b[:5])


# --- breakdown ----------------------------------------------------------------

@given(st.floats(0, 10), st.floats(0, 50), st.floats(0, 10), st.floats(0, 10))
def test_total_recomposes_from_parts(rec, target, p, t):
    from hierplan.config import ExperimentConfig

    cfg = ExperimentConfig()
    pc = cfg.pretrain
    total = combine(rec, target, p, t, cfg)
    assert abs(total - (pc.beta_rec * rec + pc.gamma_target * target + pc.eta_traj * (p + t))) <= 1e-12


def _fixture(cfg):
    snap = PolicySnapshot.init(cfg, seed=0)
    s = world.generate_scenario(0, "medium")
    return snap, s, predict(snap, s)


def test_trajectory_only_weights(tiny_cfg):
    cfg = copy.deepcopy(tiny_cfg)
    cfg.pretrain.beta_rec, cfg.pretrain.gamma_target, cfg.pretrain.eta_traj = 0.0, 0.0, 1.0
    snap, s, plan = _fixture(cfg)
    lb = compute_losses(s, plan, snap.world_params(), cfg)
    assert lb.total == pytest.approx(lb.path_l1 + lb.traj_l1, abs=1e-12)


def test_perfect_plan_and_decoder_give_zero(tiny_cfg, monkeypatch):
    cfg = copy.deepcopy(tiny_cfg)
    cfg.pretrain.gamma_target = 0.0  # the Laplace term is never zero at finite scale
    snap, s, _ = _fixture(cfg)
    expert = s.expert.points
    gt_path = planner.path_ground_truth(expert, cfg.planner.n_path)
    inc = np.diff(np.vstack([[0.0, 0.0], expert]), axis=0)
    st_ = planner.PlanState(expert[-1], np.array([0.5, 0.5]), gt_path, inc)
    perfect = planner.PlanOutput(TargetRegion(Point2(*expert[-1]), (0.5, 0.5)), SpatialPath(gt_path), differentiate(s.expert), (st_,))
    wm = snap.world_params()
    w1 = world.encode_latent(s, wm, 1)
    monkeypatch.setattr(imitation, "predict_next_latent", lambda w, traj, p: w1)
    lb = compute_losses(s, perfect, wm, cfg)
    assert lb.rec == 0.0 and lb.path_l1 == 0.0 and lb.traj_l1 == pytest.approx(0.0, abs=1e-12)
    assert lb.total == pytest.approx(0.0, abs=1e-12)


GOLDEN = LossBreakdown(
    rec=0.17369245456781798,
    target=30.051249551927484,
    path_l1=5.103676113318587,
    traj_l1=6.752190374280762,
    total=11.92065622806484,
)


def test_default_weights_reproduce_frozen_breakdown(tiny_cfg):
    snap, s, plan = _fixture(tiny_cfg)
    lb = compute_losses(s, plan, snap.world_params(), tiny_cfg)
    for f in ("rec", "target", "path_l1", "traj_l1", "total"):
        assert getattr(lb, f) == pytest.approx(getattr(GOLDEN, f), rel=1e-10), f


def test_tape_breakdown_matches_plain_losses(tiny_cfg):
    snap, s, plan = _fixture(tiny_cfg)
    tape = ad.Tape()
    bound = snap.layout.bind(tape, snap.flat)
    obj, lb = imitation.scenario_loss_tape(bound, s, tiny_cfg, world.RasterCache(tiny_cfg.world), tape)
    ref = compute_losses(s, plan, snap.world_params(), tiny_cfg)
    for f in ("rec", "target", "path_l1", "traj_l1", "total"):
        assert getattr(lb, f) == pytest.approx(getattr(ref, f), rel=1e-10)
    assert obj.value == pytest.approx(lb.objective, rel=1e-12)


# --- gradients of every loss term ------------------------------------------------

@pytest.mark.parametrize("term", list(gradcheck.IMITATION_HEADS))
@pytest.mark.parametrize("seed", range(3))
def test_loss_term_gradients_match_finite_differences(tiny_cfg, term, seed):
    assert not gradcheck.imitation_term(tiny_cfg, term, seed)


# --- training loop ----------------------------------------------------------------

def _small(cfg, epochs):
    cfg = copy.deepcopy(cfg)
    cfg.pretrain.epochs = epochs
    cfg.pretrain.batch_size = 4
    return cfg


def test_zero_epochs_leave_params_unchanged(tiny_cfg):
    cfg = _small(tiny_cfg, 0)
    p = PolicySnapshot.init(cfg)
    out, log = imitation.pretrain(world.generate_corpus(4, "medium", 0), p, cfg)
    assert out == p and log == []


def test_empty_corpus_rejected(tiny_cfg):
    with pytest.raises(ValueError):
        imitation.pretrain([], PolicySnapshot.init(tiny_cfg), tiny_cfg)


def test_training_reduces_held_out_loss_and_is_deterministic(tiny_cfg, tmp_path):
    cfg = _small(tiny_cfg, 4)
    cfg.pretrain.lr = 3e-3
    train = world.generate_corpus(24, "medium", 0)
    held = world.generate_corpus(8, "medium", 500)
    p = PolicySnapshot.init(cfg)
    cache = world.RasterCache(cfg.world)

    def held_loss(snap):
        return np.mean([compute_losses(s, predict(snap, s, cache), snap.world_params(), cfg).total for s in held])

    a, log = imitation.pretrain(train, p, cfg, val=held, log_path=tmp_path / "a.csv", cache=cache)
    b, _ = imitation.pretrain(train, p, cfg, val=held, log_path=tmp_path / "b.csv")
    assert held_loss(a) < held_loss(p)
    assert a.flat.tobytes() == b.flat.tobytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert len(log) == 4 and list(log[0]) == list(imitation.LOG_COLUMNS)
    assert np.isfinite(log[-1]["val_ade"])


def test_divergence_is_reported(tiny_cfg):
    cfg = _small(tiny_cfg, 1)
    p = PolicySnapshot.init(cfg)
    p.flat[:] = np.nan
    with np.errstate(invalid="ignore"), pytest.raises(imitation.TrainingDiverged, match="non-finite"):
        imitation.pretrain(world.generate_corpus(4, "medium", 0), p, cfg)


def test_variance_head_is_frozen_during_pretraining(tiny_cfg):
    cfg = _small(tiny_cfg, 1)
    p = PolicySnapshot.init(cfg)
    out, _ = imitation.pretrain(world.generate_corpus(8, "medium", 0), p, cfg)
    sl = p.layout.slice("rft/var")
    assert np.array_equal(out.flat[sl], p.flat[sl])
    assert not np.array_equal(out.flat, p.flat)
