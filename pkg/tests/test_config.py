import copy
import json

import pytest

from hierplan.config import ExperimentConfig, desk_config


def test_json_round_trip_restores_tuples(tmp_path):
    cfg = desk_config(4)
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    back = ExperimentConfig.load(path)
    assert back == cfg
    assert isinstance(back.world.grid_origin, tuple) and isinstance(back.eval.horizons, tuple)


def test_partial_json_fills_defaults():
    cfg = ExperimentConfig.from_json(json.dumps({"rft": {"G": 5}, "seed": 9}))
    assert cfg.rft.G == 5 and cfg.seed == 9 and cfg.rft.epsilon == ExperimentConfig().rft.epsilon


def test_unknown_key_is_named():
    with pytest.raises(ValueError, match="RftConfig.group_size"):
        ExperimentConfig.from_dict({"rft": {"group_size": 10}})


def test_defaults_validate():
    ExperimentConfig().validate()
    desk_config(0).validate()


def test_desk_config_seeds_every_stream():
    cfg = desk_config(3)
    assert cfg.seed == cfg.pretrain.seed == cfg.rft.seed == 3


@pytest.mark.parametrize(
    "section, name, value",
    [
        ("planner", "K", -1),
        ("world", "stencil", 4),
        ("world", "horizon", 0),
        ("rft", "G", 1),
        ("rft", "epsilon", 1.0),
        ("rft", "c_ent", -0.1),
        ("rft", "train_scope", "world"),
        ("pretrain", "beta_rec", -1.0),
    ],
)
def test_invalid_values_are_rejected(section, name, value):
    cfg = copy.deepcopy(ExperimentConfig())
    setattr(getattr(cfg, section), name, value)
    with pytest.raises(ValueError):
        cfg.validate()
