import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hierplan.config import RftConfig, desk_config

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_cfg():
    """A very small model so gradient checks stay fast."""
    cfg = desk_config(0)
    cfg.rft = RftConfig()  # plain defaults: unit tests pin the constant-lr, whole-planner behavior
    cfg.world.grid_width, cfg.world.grid_height = 10, 8
    cfg.world.grid_origin = (-2.0, -4.0)
    cfg.world.cell_size = 2.0
    cfg.world.channels = 3
    cfg.world.enc_hidden = 4
    cfg.world.dec_hidden = 4
    p = cfg.planner
    p.query_dim, p.n_path, p.hidden, p.state_dim, p.b_dim, p.fusion_dim, p.pos_freqs = 6, 4, 5, 5, 3, 5, 1
    return cfg


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    report = getattr(acceptance, "REPORT", None)
    if not report:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(report):
        terminalreporter.write_line(report[n])
