"""``translearn`` command line: generate-synthetic, train, translate, learn, evaluate.

Every command exits 0 on success and nonzero with a one-line message on
standard error otherwise. ``TRANSLEARN_DEVICE`` picks the torch device
(default ``cpu``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace

from .datamodel import DatasetError
from .experiment import (ExperimentError, cmd_evaluate, cmd_generate_synthetic, cmd_learn, cmd_train, cmd_translate,
                         load_config)
from .losses import ConfigError
from .networks import ShapeError
from .training import PreconditionError

log = logging.getLogger("translearn")

MODES = ("cyclegan", "spgan", "espgan", "naive_espgan")


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", help="YAML experiment config (defaults are used for missing keys)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=out_required, help="output directory (overrides config 'out')")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="translearn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-synthetic", help="write the two-domain synthetic dataset")
    _common(p)

    p = sub.add_parser("train", help="train a translator (cyclegan/spgan) or the joint model (espgan)")
    _common(p)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--pretrained", help="learner checkpoint for espgan modes (overrides pretrain.checkpoint)")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--max-iterations", type=int, help="stop after this many iterations in this invocation")

    p = sub.add_parser("translate", help="translate a dataset directory with a trained generator")
    p.add_argument("--checkpoint", help="translator checkpoint (train output translator.pt)")
    p.add_argument("--direction", choices=("s2t", "t2s"), default="s2t", help="s2t uses G, t2s uses F")
    p.add_argument("--in", dest="in_root", required=True, help="dataset root with the three split folders")
    p.add_argument("--out", required=True, help="where translated images are written (PNG)")
    p.add_argument("--identity", action="store_true", help="use an untrained identity-initialised generator")
    p.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"))

    p = sub.add_parser("learn", help="pretrain on the source, then fine-tune on translated images")
    _common(p)
    p.add_argument("--translated", required=True, help="root of the translated source dataset")
    p.add_argument("--pretrained", help="skip pretraining and start from this learner checkpoint")

    p = sub.add_parser("evaluate", help="retrieval on the target query/gallery split")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="learner or translator checkpoint")
    p.add_argument("--target", help="target dataset root (overrides config)")
    p.add_argument("--lmp-parts", type=int, help="horizontal bands P")
    p.add_argument("--lmp-mode", choices=("avg", "max"))
    p.add_argument("--protocol", choices=("sq", "mq"))
    p.add_argument("--normalize", action="store_true", help="L2-normalise descriptors")
    return parser


def _config(args, **extra):
    return load_config(args.config, seed=args.seed, out=args.out, **extra)


def run(args) -> int:
    if args.command == "generate-synthetic":
        cfg = _config(args)
        if args.seed is not None:
            cfg.synthetic = replace(cfg.synthetic, rng_seed=args.seed)
        res = cmd_generate_synthetic(cfg)
        print(f"wrote {res['images']} images to {res['root']} (digest {res['digest'][:16]})")
    elif args.command == "train":
        cfg = _config(args, mode=args.mode)
        if args.pretrained:
            cfg.pretrain.checkpoint = args.pretrained
        res = cmd_train(cfg, resume=args.resume, stop_after=args.max_iterations)
        print(f"{cfg.train.mode.value}: {res['iterations']} iterations, checkpoint {res['translator']}")
        if "learner" in res:
            print(f"learner checkpoint {res['learner']}")
    elif args.command == "translate":
        n = cmd_translate(args.checkpoint, args.in_root, args.out, args.direction, identity=args.identity,
                          image_size=args.image_size)
        print(f"translated {n} images into {args.out}")
    elif args.command == "learn":
        cfg = _config(args)
        if args.pretrained:
            cfg.pretrain.checkpoint = args.pretrained
        res = cmd_learn(cfg, args.translated)
        print(f"learner checkpoint {res['learner']}")
    elif args.command == "evaluate":
        cfg = _config(args, lmp_parts=args.lmp_parts, lmp_mode=args.lmp_mode,
                      protocol=args.protocol)
        if args.target:
            cfg.target.root = args.target
        if args.normalize:
            cfg.eval.normalize = True
        report = cmd_evaluate(cfg, args.checkpoint)
        print(json.dumps(report.summary(), sort_keys=True))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    warnings.filterwarnings("ignore", category=UserWarning, module="torch")
    try:
        return run(args)
    except (ExperimentError, DatasetError, PreconditionError, ShapeError, ConfigError) as err:
        print(f"translearn {args.command}: error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, RuntimeError) as err:
        print(f"translearn {args.command}: error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
