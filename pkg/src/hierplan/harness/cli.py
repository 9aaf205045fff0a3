"""Command-line entry point: corpus generation, training, evaluation and ablations.

Exit codes: 0 on success, 1 when a run fails, 2 for bad flags or missing inputs.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .. import grpo, imitation, world
from ..config import ExperimentConfig, desk_config
from ..nnet.checkpoint import CheckpointError, TrainState
from ..policy import PolicySnapshot, predict
from . import ablation
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import evaluate

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def _writable(path: str) -> Path:
    p = Path(path)
    if not p.parent.exists():
        raise UsageError(f"output directory does not exist: {p.parent}")
    return p


def _config_file(args) -> ExperimentConfig | None:
    return ExperimentConfig.load(_existing(args.config)) if getattr(args, "config", None) else None


def _resolve(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Config from --config, else ``base``, else the desk preset; --seed overrides every stream."""
    cfg = _config_file(args) or base or desk_config(args.seed)
    cfg.seed = cfg.pretrain.seed = cfg.rft.seed = args.seed
    cfg.validate()
    print("resolved config: " + cfg.to_json(), flush=True)
    return cfg


def _corpus(path: str):
    scenarios = world.read_corpus(_existing(path))
    if not scenarios:
        raise UsageError(f"corpus {path} is empty")
    return scenarios


def cmd_gen(args) -> None:
    out = _writable(args.out)
    cfg = _resolve(args)
    scenarios = world.generate_corpus(args.count, args.difficulty, args.seed, cfg.world)
    world.write_corpus(out, scenarios)
    print(f"wrote {len(scenarios)} {args.difficulty} scenarios to {out}")


def cmd_pretrain(args) -> None:
    out = _writable(args.out)
    train = _corpus(args.corpus)
    val = _corpus(args.val) if args.val else None
    cfg = _resolve(args)
    state = TrainState()
    snap, log = imitation.pretrain(train, PolicySnapshot.init(cfg), cfg, val=val, log_path=args.log, state=state)
    save_checkpoint(out, snap, state)
    last = log[-1] if log else {}
    print(f"pretrained {len(log)} epochs, final loss {last.get('total', float('nan')):.4f}; checkpoint {out}")


def cmd_rft(args) -> None:
    out = _writable(args.out)
    train = _corpus(args.corpus)
    ref, _ = load_checkpoint(_existing(args.ckpt), _config_file(args))
    cfg = _resolve(args, ref.cfg)
    state = TrainState()
    snap, rows = grpo.rft(train, PolicySnapshot(cfg, ref.flat), cfg, log_path=args.log, state=state)
    save_checkpoint(out, snap, state)
    print(f"fine-tuned {len(rows)} steps; checkpoint {out}")


def cmd_eval(args) -> None:
    report = _writable(args.report)
    scenarios = _corpus(args.corpus)
    snap, _ = load_checkpoint(_existing(args.ckpt))
    cfg = _resolve(args, snap.cfg)
    cache = world.RasterCache(cfg.world)
    trajs = [predict(snap, s, cache).trajectory() for s in scenarios]
    rep = evaluate(trajs, scenarios, cfg.eval, cfg.world.ego_half_extents, with_pdms=args.pdms)
    rep.write_csv(report)
    print(f"ade {rep.ade_avg:.4f} m, collision rate {rep.collision_rate:.2f} %; report {report}")


def cmd_ablate(args) -> None:
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out must be a directory: {out}")
    cfg = _resolve(args)
    budget = ablation.Budget(args.train_count, args.val_count)
    ablation.run_suite(args.suite, cfg, out, budget)
    print(f"wrote {out / (args.suite + '.csv')}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hierplan", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(fn=fn)
        return p

    p = add("gen", cmd_gen, "generate a scenario corpus (JSONL)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--difficulty", choices=("easy", "medium", "hard"), default="medium")
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = add("pretrain", cmd_pretrain, "imitation pretraining from scratch")
    p.add_argument("--corpus", required=True)
    p.add_argument("--val", help="held-out corpus scored after each epoch")
    p.add_argument("--config")
    p.add_argument("--log", help="per-epoch CSV")
    p.add_argument("--out", required=True)

    p = add("rft", cmd_rft, "reinforcement fine-tuning from a pretrained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--config")
    p.add_argument("--log", help="per-step diagnostics CSV")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "score a checkpoint on a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--pdms", action="store_true", help="also compute the PDMS subscores")

    p = add("ablate", cmd_ablate, "run an ablation grid")
    p.add_argument("--suite", choices=ablation.SUITES, required=True)
    p.add_argument("--config")
    p.add_argument("--train-count", type=int, default=200)
    p.add_argument("--val-count", type=int, default=300)
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        args.fn(args)
    except UsageError as exc:
        print(f"hierplan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, world.GenerationError, imitation.TrainingDiverged, FloatingPointError,
            ValueError, OSError) as exc:
        print(f"hierplan {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
