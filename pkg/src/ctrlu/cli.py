"""Command-line entry point: ``ctrlu <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import training as tr
from .checkpoint import CheckpointError
from .config import SWEEP_AXES, ConfigError, TrainConfig
from .nets import RewardTrainingError


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; unknown keys are rejected")
    p.add_argument("--seed", type=int, help="run this single seed instead of the config's seeds")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--no-svg", action="store_true", help="skip SVG charts")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctrlu", description="Uncertainty-aware reward fine-tuning on toy diffusion tasks.")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("gen-data", help="generate and split the toy dataset"))
    _common(sub.add_parser("pretrain", help="pretrain denoiser, reward and evaluation models"))
    p = sub.add_parser("finetune", help="reward fine-tuning from the pretrained denoiser")
    _common(p)
    p.add_argument("--mode", choices=tr.MODES, default="ctrl_u")
    p = sub.add_parser("evaluate", help="sample test conditions and score them")
    _common(p)
    p.add_argument("--mode", choices=(*tr.MODES, "pretrained"), default="ctrl_u")
    p.add_argument("--checkpoint", help="evaluate this denoiser checkpoint instead of the mode's")
    p = sub.add_parser("sweep", help="fine-tune + evaluate over one hyperparameter axis")
    _common(p)
    p.add_argument("--mode", choices=tr.MODES, default="ctrl_u")
    p.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 0.05,0.1,1")
    _common(sub.add_parser("fig1", help="reward error of one-step recoveries versus timestep"))
    return parser


def load_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig().validate()
    changes = {}
    if args.seed is not None:
        changes["seeds"] = (args.seed,)
    if args.out:
        changes["out_dir"] = args.out
    return cfg.override(**changes) if changes else cfg


def run(args) -> None:
    cfg = load_config(args)
    svg = not args.no_svg
    if args.command == "gen-data":
        print(tr.cmd_gen_data(cfg))
    elif args.command == "pretrain":
        for row in tr.cmd_pretrain(cfg):
            print(",".join(tr.fmt(v) for v in row))
    elif args.command == "finetune":
        for path in tr.cmd_finetune(cfg, args.mode):
            print(path)
    elif args.command == "evaluate":
        path = tr.cmd_evaluate(cfg, args.mode, checkpoint_path=args.checkpoint)
        print(path.read_text(), end="")
    elif args.command == "sweep":
        values = [v for v in args.values.split(",") if v.strip()]
        print(tr.cmd_sweep(cfg, args.axis, values, svg=svg, mode=args.mode))
    elif args.command == "fig1":
        path, rho = tr.cmd_fig1(cfg, svg=svg)
        print(f"{path}\nspearman_rho={tr.fmt(rho)}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CheckpointError, tr.TrainingDivergence, RewardTrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
