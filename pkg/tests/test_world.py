import dataclasses

import numpy as np
import pytest

from hierplan import geom, world
from hierplan.config import WorldConfig
from hierplan.geom import Polygon2, Trajectory
from hierplan.nnet import ShapeError, Tape
from hierplan.world import (
    COMMANDS,
    LatentGrid,
    WorldModelParams,
    encode_latent,
    generate_scenario,
    predict_next_latent,
    rasterize,
    reconstruction_loss,
)

import oracles

CFG = WorldConfig(grid_width=20, grid_height=16, grid_origin=(-4.0, -8.0), channels=4, enc_hidden=6, dec_hidden=6)


def test_generation_is_deterministic():
    a = generate_scenario(42, "hard")
    b = generate_scenario(42, "hard")
    assert world.scenario_to_json(a) == world.scenario_to_json(b)
    assert world.scenario_to_json(a) != world.scenario_to_json(generate_scenario(43, "hard"))


def test_bad_difficulty():
    with pytest.raises(ValueError):
        generate_scenario(0, "extreme")


def _min_corner_distance(s):
    """Brute-force minimum distance between sampled ego and agent outlines."""
    ego = world.ego_rows(s.expert.points, WorldConfig().ego_half_extents)
    rows = s.agent_rows(True)
    best = np.inf
    for j in range(len(ego)):
        e = oracles.box_boundary_samples(ego[j], spacing=0.05)
        for k in range(rows.shape[1]):
            a = oracles.box_boundary_samples(rows[j, k], spacing=0.05)
            d = np.sqrt(((e[:, None, :] - a[None]) ** 2).sum(-1)).min()
            best = min(best, d)
    return best


def test_easy_scenarios_keep_two_metres_clearance():
    for seed in range(15):
        s = generate_scenario(seed, "easy")
        if s.agents:
            assert _min_corner_distance(s) >= 2.0 - 1e-9


def test_hard_scenarios_have_a_close_agent():
    for seed in range(15):
        s = generate_scenario(seed, "hard")
        rows = s.agent_rows(True)
        d = np.linalg.norm(rows[:, :, :2] - s.expert.points[:, None, :], axis=-1)
        assert (d <= 5.0).any()


@pytest.mark.parametrize("difficulty", world.DIFFICULTIES)
def test_experts_are_collision_free_feasible_and_drivable(difficulty):
    cfg = WorldConfig()
    for seed in range(25):
        s = generate_scenario(seed, difficulty)
        assert len(s.expert) == cfg.horizon and s.expert.dt == 0.5
        assert s.command in COMMANDS
        for a in s.agents:
            assert a.poses.shape == (cfg.horizon + 1, 3)
        for j, row in enumerate(world.ego_rows(s.expert.points, cfg.ego_half_extents)):
            ego = geom.OrientedBox(geom.Point2(*row[:2]), tuple(row[2:4]), row[4])
            for a in s.agents:
                assert not geom.obb_overlap(ego, a.box(j + 1))
        assert geom.point_in_polygon(geom.Point2(0.0, 0.0), s.drivable)
        assert geom.points_in_polygon(s.expert.points, s.drivable).all()
        hd = world.headings_along(s.expert.points)
        turn = np.abs(np.diff(np.concatenate([[0.0], hd])))
        assert (turn <= cfg.max_turn_rate * cfg.dt + 1e-12).all()


def test_corpus_round_trip_is_bit_exact(tmp_path):
    corpus = world.generate_corpus(12, "medium", seed=3)
    path = tmp_path / "c.jsonl"
    world.write_corpus(path, corpus)
    back = world.read_corpus(path)
    path2 = tmp_path / "c2.jsonl"
    world.write_corpus(path2, back)
    assert path.read_bytes() == path2.read_bytes()
    for a, b in zip(corpus, back):
        assert np.array_equal(a.expert.points, b.expert.points)
        for x, y in zip(a.agents, b.agents):
            assert np.array_equal(x.poses, y.poses)


def test_bad_corpus_line_reports_location(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"seed": 1}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        world.read_corpus(p)


def test_headings_fall_back_on_zero_steps():
    pts = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 1.0], [1.0, 1.0 + 1e-9]])
    hd = world.headings_along(pts, initial=0.3)
    assert hd[0] == 0.0 and hd[1] == 0.0
    assert hd[2] == pytest.approx(np.pi / 2) and hd[3] == hd[2]
    assert world.headings_along(np.zeros((2, 2)), initial=0.3).tolist() == [0.3, 0.3]


# --- rasters and the latent model -----------------------------------------------

def _agent_free(s):
    return dataclasses.replace(s, agents=())


def test_empty_scenario_has_empty_occupancy():
    s = _agent_free(generate_scenario(5, "medium"))
    planes = rasterize(s, world.grid_spec(CFG))
    assert not planes[..., 0].any() and not planes[..., 1:3].any()
    assert planes[..., 3].any()


def _shift(s, dx):
    agents = tuple(world.Agent(a.half_extents, a.poses + np.array([dx, 0.0, 0.0])) for a in s.agents)
    return dataclasses.replace(
        s, agents=agents, drivable=Polygon2(s.drivable.vertices + np.array([dx, 0.0])), route=s.route + np.array([dx, 0.0])
    )


def test_translating_content_by_one_cell_shifts_planes():
    cfg = WorldConfig(grid_width=24, grid_height=20, grid_origin=(-6.0, -10.0), cell_size=1.0)
    spec = world.grid_spec(cfg)
    s = generate_scenario(11, "hard")
    base = rasterize(s, spec)
    moved = rasterize(_shift(s, cfg.cell_size), spec)
    np.testing.assert_allclose(moved[:, 1:], base[:, :-1], atol=1e-9)
    assert base[..., 0].any()


def test_step_one_raster_differs_and_is_validated():
    s = generate_scenario(2, "medium")
    spec = world.grid_spec(CFG)
    assert not np.array_equal(rasterize(s, spec, 0), rasterize(s, spec, 1))
    with pytest.raises(ValueError):
        rasterize(s, spec, 2)


def test_encode_is_deterministic_and_finite():
    p = WorldModelParams.init(CFG, seed=1)
    s = generate_scenario(3, "medium")
    a, b = encode_latent(s, p), encode_latent(s, p)
    assert a.channels.shape == (16, 20, 4)
    assert np.array_equal(a.channels, b.channels) and np.isfinite(a.channels).all()


def test_predicted_latent_keeps_spec():
    p = WorldModelParams.init(CFG, seed=1)
    s = generate_scenario(3, "medium")
    w = encode_latent(s, p)
    nxt = predict_next_latent(w, s.expert, p)
    assert nxt.spec == w.spec and nxt.channels.shape == w.channels.shape


def test_zero_decoder_predicts_zero_grid():
    p = WorldModelParams.init(CFG, seed=1, zero_decoder=True)
    s = generate_scenario(3, "medium")
    assert not predict_next_latent(encode_latent(s, p), s.expert, p).channels.any()


def test_prediction_rejects_mismatched_inputs():
    p = WorldModelParams.init(CFG, seed=1)
    s = generate_scenario(3, "medium")
    w = encode_latent(s, p)
    with pytest.raises(ShapeError):
        predict_next_latent(w, Trajectory(s.expert.points[:3]), p)
    other = LatentGrid(geom.GridSpec(geom.Point2(0, 0), 1.0, 20, 16), w.channels)
    with pytest.raises(ShapeError):
        predict_next_latent(other, s.expert, p)


def test_reconstruction_loss_examples(rng):
    spec = geom.GridSpec(geom.Point2(0, 0), 1.0, 5, 4)
    a = LatentGrid(spec, rng.normal(size=(4, 5, 3)))
    assert reconstruction_loss(a, a) == 0.0
    assert reconstruction_loss(LatentGrid(spec, a.channels + 1.0), a) == pytest.approx(1.0, abs=1e-12)
    b = LatentGrid(spec, rng.normal(size=(4, 5, 3)))
    assert reconstruction_loss(a, b) == pytest.approx(oracles.mse_loops(a.channels, b.channels), rel=1e-12)
    assert reconstruction_loss(a, b) > 0
    with pytest.raises(ShapeError):
        reconstruction_loss(a, LatentGrid(spec, np.zeros((4, 5, 2))))


def test_latent_grid_validation():
    spec = geom.GridSpec(geom.Point2(0, 0), 1.0, 5, 4)
    with pytest.raises(ShapeError):
        LatentGrid(spec, np.zeros((5, 4, 2)))
    with pytest.raises(ValueError):
        LatentGrid(spec, np.full((4, 5, 2), np.nan))


@pytest.mark.parametrize("seed", range(5))
def test_decoder_gradient_matches_finite_differences(seed):
    cfg = WorldConfig(grid_width=5, grid_height=4, grid_origin=(-2.0, -2.0), channels=2, enc_hidden=3, dec_hidden=3)
    p = WorldModelParams.init(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    p.flat = p.flat + rng.normal(0, 0.1, p.flat.size)
    s = generate_scenario(seed, "medium")
    w = encode_latent(s, p)
    target = rng.normal(size=w.channels.shape)
    lay = p.layout
    sl = lay.slice("world/dec")

    def loss(flat):
        t = Tape()
        b = lay.bind(t, flat)
        pred = world.decode_tape(b, t.const(w.channels), s.expert.points, cfg)
        return ((pred - target) * (pred - target)).mean(), t, b

    out, t, b = loss(p.flat)
    t.backward(out)
    g = b.grad()
    fd = oracles.central_diff(lambda f: float(loss(f)[0].value), p.flat, idx=range(sl.start, sl.stop))
    for i, v in fd.items():
        assert oracles.rel_err(g[i], v) <= 1e-4
