"""Command-line entry point: ``laekit {init,train,edit,sweep,eval,inspect}``.

Exit codes: 0 success, 1 bad invocation or config, 2 runtime failure
(including a missing or corrupt checkpoint).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .backbones import KINDS, stream
from .checkpoint import MANIFEST, load_checkpoint, read_manifest
from .core import CameraPose, pose_grid, save_png, write_pose_sweep
from .errors import BackboneUnavailableError, CheckpointError, ConfigError
from .evaluation import OracleDepthEstimator, evaluate
from .trainer import TrainConfig, TrainState, train_attribute_set

log = logging.getLogger("laekit")

LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING, "warning": logging.WARNING}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; we want 1 and a chance to print usage ourselves
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--backbone", choices=KINDS)
    common.add_argument("--checkpoint", help="checkpoint directory (or a run directory containing one)")
    common.add_argument("--attr", help="attribute name")
    common.add_argument("--yaw", type=float, default=0.0)
    common.add_argument("--pitch", type=float, default=0.0)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--steps", type=int)
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, repeatable; nested keys use dots (weights.sc=0)")

    parser = _Parser(prog="laekit", description="Text-driven latent attribute editing on multiplane-image generators.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("init", parents=[common], help="write a default config")
    sub.add_parser("train", parents=[common], help="train style tokens, mapper and alpha branch")
    sub.add_parser("edit", parents=[common], help="render one attribute edit at one pose")
    sub.add_parser("sweep", parents=[common], help="render the 3x3 pose grid for every attribute")
    sub.add_parser("eval", parents=[common], help="compute the metric report for a checkpoint")
    ins = sub.add_parser("inspect", parents=[common], help="print a checkpoint manifest")
    ins.add_argument("path", nargs="?", help="checkpoint directory")
    return parser


def resolve_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.steps is not None:
        overrides.append(f"steps={args.steps}")
    if args.backbone is not None:
        overrides.append(f"backbone={json.dumps(args.backbone)}")
    return cfg.with_overrides(overrides).validate()


def _checkpoint_dir(path: str | None) -> Path:
    if not path:
        raise FileNotFoundError("no --checkpoint given")
    p = Path(path)
    if not (p / MANIFEST).is_file() and (p / "checkpoint" / MANIFEST).is_file():
        p = p / "checkpoint"
    if not (p / MANIFEST).is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return p


def _load_state(args) -> TrainState:
    ckpt = load_checkpoint(_checkpoint_dir(args.checkpoint))
    return TrainState.from_checkpoint(ckpt)


def _sample_latent(state: TrainState, seed: int | None) -> torch.Tensor:
    return state.sample_latents(stream(state.config.seed if seed is None else seed, "cli_latent"), 1)


def _attribute_indices(state: TrainState, attr: str | None) -> list[int]:
    if attr is None:
        return list(range(len(state.attributes)))
    names = [a.name for a in state.attributes]
    if attr not in names:
        raise ConfigError(f"unknown attribute {attr!r}; checkpoint has {names}")
    return [names.index(attr)]


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_") or "attr"


def cmd_init(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out or "laekit_config.json")
    cfg.to_json(out)
    print(out)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out or "laekit_run")
    out.mkdir(parents=True, exist_ok=True)
    cfg.to_json(out / "config.json")
    ckpt = train_attribute_set(cfg, out)
    print(f"trained {ckpt.step} steps -> {out / 'checkpoint'}")
    return 0


def cmd_edit(args) -> int:
    state = _load_state(args)
    i = _attribute_indices(state, args.attr)[0]
    pose = CameraPose(args.yaw, args.pitch)
    with torch.no_grad():
        w = _sample_latent(state, args.seed)
        pixels = state.backbone.render_codes(state.edit(w, i), pose)[0]
    out = Path(args.out or f"edit_{_slug(state.attributes[i].name)}_{pose.filename}")
    save_png(pixels, out)
    print(out)
    return 0


def cmd_sweep(args) -> int:
    state = _load_state(args)
    cfg = state.config
    indices = _attribute_indices(state, args.attr)
    out = Path(args.out or "sweep")
    poses = pose_grid(cfg.yaw_range, cfg.pitch_range, 9)
    with torch.no_grad():
        w = _sample_latent(state, args.seed)
        for i in indices:
            codes = state.edit(w, i)
            renders = [state.backbone.render(state.backbone.generate(codes), p) for p in poses]
            renders = [type(r)(r.pixels[0], r.pose, None if r.depth is None else r.depth[0]) for r in renders]
            target = out if args.attr is not None else out / _slug(state.attributes[i].name)
            write_pose_sweep(renders, target, attribute=state.attributes[i].name)
            print(target / "index.json")
    return 0


def cmd_eval(args) -> int:
    state = _load_state(args)
    seed = state.config.seed if args.seed is None else args.seed
    # a blurred oracle stands in for a monocular depth network on the toy backbone
    report = evaluate(state, n_samples=32, seed=seed, depth_estimator=OracleDepthEstimator(blur=1))
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        report.to_json(args.out)
    print(text)
    return 0


def cmd_inspect(args) -> int:
    path = _checkpoint_dir(args.path or args.checkpoint)
    manifest = read_manifest(path)
    load_checkpoint(path)  # verify sizes and CRCs before reporting
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "init": cmd_init,
    "train": cmd_train,
    "edit": cmd_edit,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def run_cli(argv: list[str] | None = None) -> int:
    level = os.environ.get("LAEKIT_LOG", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"laekit: error: {e}", file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"laekit: config error: {e}", file=sys.stderr)
        return 1
    except (OSError, CheckpointError, BackboneUnavailableError, RuntimeError, ArithmeticError, ValueError, KeyError) as e:
        print(f"laekit: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())
