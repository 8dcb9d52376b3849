"""``ctxface`` command line.

Every command accepts ``--config`` (YAML of flat dotted keys), ``--seed``,
``--out`` and repeated ``--set key=value`` overrides, applied in that order.
"""
from __future__ import annotations

import argparse
import logging
import sys

import torch

from . import commands as C
from .config import ABLATION_MODES, load_config
from .errors import EXIT_OK, ConfigurationError, exit_code_for

log = logging.getLogger("ctxface")

COMMANDS = (
    "synth-data",
    "pretrain-face",
    "pretrain-context",
    "init-head",
    "train",
    "ablate",
    "eval-confusion",
    "embed",
    "generate",
)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML file of dotted keys")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory (paths.out)")
    p.add_argument("--manifest", help="dataset manifest (paths.manifest)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxface", description="Context-shifted face latents: training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _common(p)
        if name == "train":
            p.add_argument("--mode", choices=ABLATION_MODES, help="ablation_mode override")
        if name == "ablate":
            p.add_argument("--modes", default=",".join(ABLATION_MODES), help="comma-separated subset")
        if name in ("embed", "generate"):
            p.add_argument("--fold", type=int, default=0, help="which fold's model to use")
        if name == "embed":
            p.add_argument("--identities", help="comma-separated identities (default: the fold's test set)")
        if name == "generate":
            p.add_argument("--steps", type=int, default=11, help="gamma values from 0 to 1 inclusive")
            p.add_argument("--clip", help="clip id supplying the face (and default context)")
            p.add_argument("--context-clip", action="append", default=[], help="context clip per grid row, repeatable")
            p.add_argument("--frame", type=int, help="index among the sampled frames (default: middle)")
            p.add_argument("--face-image", help="face image file instead of a manifest clip")
            p.add_argument("--audio", help="22050 Hz WAV supplying the context")
            p.add_argument("--timestamp", type=float, default=0.0, help="centre of the audio window, seconds")
    return parser


def _overrides(args) -> dict:
    ov = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        ov[key.strip()] = value.strip()
    if args.seed is not None:
        ov["seed"] = args.seed
    if args.out is not None:
        ov["paths.out"] = args.out
    if args.manifest is not None:
        ov["paths.manifest"] = args.manifest
    if getattr(args, "mode", None):
        ov["ablation_mode"] = args.mode
    return ov


def _deterministic(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def run(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    _deterministic(cfg.seed)
    cmd = args.command
    if cmd == "synth-data":
        path = C.cmd_synth_data(cfg)
        print(path)
    elif cmd == "pretrain-face":
        print(C.cmd_pretrain(cfg, "face"))
    elif cmd == "pretrain-context":
        print(C.cmd_pretrain(cfg, "context"))
    elif cmd == "init-head":
        print(f"face_only mean accuracy {C.cmd_init_head(cfg).mean_accuracy:.2f}%")
    elif cmd == "train":
        print(f"{cfg.ablation_mode} mean accuracy {C.cmd_train(cfg).mean_accuracy:.2f}%")
    elif cmd == "ablate":
        modes = [m.strip() for m in args.modes.split(",") if m.strip()]
        for mode, rep in C.cmd_ablate(cfg, modes).items():
            print(f"{mode:14s} {rep.mean_accuracy:6.2f}%")
    elif cmd == "eval-confusion":
        print(f"mean accuracy {C.cmd_eval_confusion(cfg).mean_accuracy:.2f}%")
    elif cmd == "embed":
        ids = None if args.identities is None else [s.strip() for s in args.identities.split(",") if s.strip()]
        for p in C.cmd_embed(cfg, ids, args.fold):
            print(p)
    elif cmd == "generate":
        print(
            C.cmd_generate(
                cfg,
                steps=args.steps,
                fold=args.fold,
                clip=args.clip,
                context_clips=args.context_clip,
                frame=args.frame,
                face_image=args.face_image,
                audio=args.audio,
                timestamp=args.timestamp,
            )
        )
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except Exception as e:  # noqa: BLE001 - every failure maps to a documented exit code
        code = exit_code_for(e)
        print(f"error: {e}", file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return code


if __name__ == "__main__":
    sys.exit(main())
