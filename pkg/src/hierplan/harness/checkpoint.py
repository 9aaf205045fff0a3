"""Save and restore a policy snapshot together with its training state."""
from __future__ import annotations

from ..config import ExperimentConfig
from ..nnet.checkpoint import (
    ArchitectureMismatch,
    Checkpoint,
    CheckpointError,
    CorruptCheckpoint,
    TrainState,
    VersionMismatch,
    read,
    write,
)
from ..policy import PolicySnapshot, build_layout

__all__ = [
    "ArchitectureMismatch",
    "CheckpointError",
    "CorruptCheckpoint",
    "TrainState",
    "VersionMismatch",
    "load_checkpoint",
    "save_checkpoint",
]


def save_checkpoint(path, snapshot: PolicySnapshot, state: TrainState | None = None) -> None:
    ck = Checkpoint(snapshot.layout.describe(), snapshot.cfg.to_dict(), snapshot.flat, state or TrainState())
    write(path, ck)


def load_checkpoint(path, expect: PolicySnapshot | ExperimentConfig | None = None):
    """Return ``(snapshot, train_state)``.

    With ``expect`` given, the stored architecture must match that model's
    layout exactly; otherwise :class:`ArchitectureMismatch` names the first
    differing parameter group.
    """
    expected = None
    if expect is not None:
        cfg = expect.cfg if isinstance(expect, PolicySnapshot) else expect
        expected = build_layout(cfg).describe()
    ck = read(path, expected)
    cfg = ExperimentConfig.from_dict(ck.config)
    layout = build_layout(cfg)
    if layout.describe() != ck.architecture:
        raise ArchitectureMismatch("stored config does not rebuild the stored architecture")
    if ck.params.size != layout.size:
        raise CorruptCheckpoint(f"parameter vector has {ck.params.size} entries, layout needs {layout.size}")
    return PolicySnapshot(cfg, ck.params), ck.state
