"""Command-line runner.

    refinelab attack   --config cfg.yaml
    refinelab defend   --config cfg.yaml [--lambda 0.5 --tau 0.1 --no-hrf --no-scl]
    refinelab eval     --config cfg.yaml --defense none|refine|shrinkpad
    refinelab ablate | adaptive | blackbox | report --config cfg.yaml
    refinelab sweep    --config cfg.yaml --pad-sizes 0,2,4,6
    refinelab serve    --model out/classifier.ckpt [--defense-ckpt out/defense.ckpt]

Exit status: 0 ok, 2 invalid config, 3 missing upstream artifact, 1 other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import ConfigError, flag_overrides, load_config

log = logging.getLogger("refinelab")

COMMANDS = ("attack", "defend", "eval", "ablate", "adaptive", "blackbox", "sweep", "report")


def _pad_sizes(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"pad sizes must be comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int, help="set every seed in the config")
    common.add_argument("--out", help="output directory")
    common.add_argument("--attack", choices=("badnets", "blended", "rotation"))
    common.add_argument("--defense", choices=pipeline.DEFENSES, default="refine", help="defense to evaluate (eval)")
    common.add_argument("--pad-sizes", type=_pad_sizes, help="ShrinkPad sizes, e.g. 0,2,4,6")
    common.add_argument("--lambda", dest="lam", type=float, help="contrastive loss weight")
    common.add_argument("--tau", type=float, help="contrastive temperature")
    common.add_argument("--no-hrf", action="store_true", help="identity output mapping")
    common.add_argument("--no-scl", action="store_true", help="drop the contrastive term")
    common.add_argument("--epochs", type=int, help="epochs for every training stage the command runs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="refinelab", description=__doc__.splitlines()[0] if __doc__ else None)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    serve = sub.add_parser("serve", help="expose a classifier as an HTTP scoring oracle")
    serve.add_argument("--model", required=True)
    serve.add_argument("--defense-ckpt")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--batch-limit", type=int, default=256)
    return parser


def _serve(args) -> int:
    import uvicorn

    from .service import app_from_paths

    uvicorn.run(app_from_paths(args.model, args.defense_ckpt, args.batch_limit), host=args.host, port=args.port)
    return 0


def run(command: str, config_path=None, overrides: dict | None = None, defense: str = "refine"):
    """Load the config, apply overrides, run one stage. Returns the stage result."""
    cfg = load_config(config_path, overrides)
    stages = {
        "attack": lambda: pipeline.run_attack(cfg),
        "defend": lambda: pipeline.run_defend(cfg),
        "eval": lambda: pipeline.run_eval(cfg, defense),
        "ablate": lambda: pipeline.run_ablate(cfg),
        "adaptive": lambda: pipeline.run_adaptive(cfg),
        "blackbox": lambda: pipeline.run_blackbox(cfg),
        "sweep": lambda: pipeline.run_sweep(cfg),
        "report": lambda: pipeline.run_report(cfg),
    }
    return stages[command]()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "serve":
        return _serve(args)
    overrides = flag_overrides(args.seed, args.out, args.attack, args.pad_sizes, args.lam, args.tau,
                               args.no_hrf, args.no_scl, args.epochs)
    try:
        result = run(args.command, args.config, overrides, args.defense)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except pipeline.DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if isinstance(result, list):
        for row in result:
            print(json.dumps({k: row[k] for k in ("attack", "defense", "BA", "ASR") if k in row}))
    else:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
