"""Command line entry point.

Exit codes: 0 success, 1 input/validation problems, 2 runtime failures.
Errors print one JSON line on stderr so scripts can parse them.
"""
import argparse
import dataclasses
import json
import logging
import sys

from .config import load_config
from .errors import RuntimeFailure, ValidationError
from .pipeline import cmd_init, cmd_render, cmd_train


def build_parser():
    parser = argparse.ArgumentParser(
        prog="splatforge",
        description="Occlusion-aware splat scene synthesis pipeline.")
    parser.add_argument("--config", required=True,
                        help="path to the run's JSON config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--mock-denoisers", action="store_true",
                        help="replace remote backends with in-process mocks")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("init", help="lift, outpaint, and carve the scene")
    train = sub.add_parser("train", help="run one optimization stage")
    train.add_argument("--stage", required=True,
                       choices=("inpaint", "refine"))
    rend = sub.add_parser("render", help="render a pose trajectory")
    rend.add_argument("--poses", default=None,
                      help="pose file (default: the run's poses.json)")
    serve = sub.add_parser("serve", help="serve the viewer API")
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--host", default="127.0.0.1")
    return parser


def _apply_overrides(config, args):
    updates = {}
    if args.seed is not None:
        if args.seed < 0:
            raise ValidationError("--seed must be nonnegative")
        updates["seed"] = args.seed
    if args.mock_denoisers:
        from .config import DEFAULT_BACKENDS
        updates["backends"] = dict(DEFAULT_BACKENDS)
    return dataclasses.replace(config, **updates) if updates else config


def main(argv=None):
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _apply_overrides(load_config(args.config), args)
        if args.command == "init":
            cmd_init(config)
        elif args.command == "train":
            cmd_train(config, args.stage)
        elif args.command == "render":
            cmd_render(config, poses_path=args.poses)
        elif args.command == "serve":
            from .server import serve_forever
            serve_forever(config, host=args.host, port=args.port)
        return 0
    except ValidationError as exc:
        _report(exc)
        return 1
    except (RuntimeFailure, OSError) as exc:
        _report(exc)
        return 2


def _report(exc):
    line = json.dumps({"error": type(exc).__name__, "message": str(exc)})
    print(line, file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
