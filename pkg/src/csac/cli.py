"""Command line entry point: ``csac {train,sweep,eval,export-traj,validate-maze}``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import (ConfigError, SweepSpec, TrainConfig, evaluate_checkpoint,
                      export_trajectories, run_sweep, sweep_table_csv, train)
from .maze import MazeSpec, builtin_maze, validate_maze

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig keys")
    p.add_argument("--scale", choices=("desk", "paper"),
                   help="preset budget; desk unless the config file says otherwise")
    p.add_argument("--method", choices=("csac", "uncooperative", "single"))
    p.add_argument("--rooms", type=int, choices=(2, 3, 4))
    p.add_argument("--layout", help="maze layout JSON (overrides --rooms)")
    p.add_argument("--coop-ratio", help="one value, or one per cooperative policy (comma list)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--eval-steps", type=int)
    p.add_argument("--explore-steps", type=int)
    p.add_argument("--train-loops", type=int)
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                   help="override any config key, e.g. --set hidden=[32,32]")


def build_config(args) -> TrainConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    scale = args.scale or data.pop("scale", "desk")
    data.pop("scale", None)
    flags = {"method": args.method, "rooms": args.rooms, "layout": args.layout,
             "epochs": args.epochs, "eval_steps": args.eval_steps,
             "explore_steps": args.explore_steps, "train_loops": args.train_loops,
             "seed": args.seed}
    data.update({k: v for k, v in flags.items() if v is not None})
    if getattr(args, "coop_ratio", None):
        ratios = _floats(args.coop_ratio)
        data["coop_ratios"] = ratios[0] if len(ratios) == 1 else ratios
    for item in args.set:
        key, _, value = item.partition("=")
        try:
            data[key.replace("-", "_")] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--set {item}: value is not JSON") from exc
    try:
        return TrainConfig.for_scale(scale, **data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = build_config(args)
    out = args.out_dir or f"runs/{cfg.method}-r{cfg.rooms}-s{cfg.seed}"
    exp = train(cfg, out, resume=args.resume)
    last = exp.history[-1] if exp.history else None
    print(f"trained {exp.epoch} epochs -> {out}"
          + (f"; final success {last.eval_success_rate:.3f}" if last else ""))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    values = _floats(args.ratios)
    policies = cfg.maze().room_count - 1
    axes = [values] * policies if args.per_policy else [values]
    spec = SweepSpec(axes, [int(s) for s in _floats(args.seeds)], args.window,
                     shared=not args.per_policy)
    rows = run_sweep(spec, cfg, args.out_dir, workers=args.workers)
    sys.stdout.write(sweep_table_csv(rows, policies))
    return EXIT_OK


def cmd_eval(args) -> int:
    rate = evaluate_checkpoint(args.checkpoint, args.episodes, args.seed)
    print(f"success rate {rate:.4f} over {args.episodes} episodes")
    return EXIT_OK


def cmd_export(args) -> int:
    layout = MazeSpec.load(args.layout) if args.layout else None
    text = export_trajectories(args.checkpoint, args.count, args.critic, args.seed, layout)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args) -> int:
    spec = MazeSpec.load(args.layout) if args.layout else builtin_maze(args.rooms)
    report = validate_maze(spec)
    print(f"{spec.name}: {report.room_count} rooms, {report.transitions} transitions, "
          f"{report.dead_end_pockets} dead-end pockets")
    for problem in report.problems:
        print(f"  problem: {problem}")
    print("valid" if report.ok else "INVALID")
    return EXIT_OK if report.ok else EXIT_CONFIG


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="csac", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p)
    p.add_argument("--out-dir", help="run directory (default runs/<method>-r<rooms>-s<seed>)")
    p.add_argument("--resume", action="store_true", help="continue from out-dir/checkpoint.npz")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid over cooperative ratios")
    _add_config_flags(p)
    p.add_argument("--ratios", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.add_argument("--per-policy", action="store_true",
                   help="independent ratio per cooperative policy (full grid)")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--window", type=int, default=50, help="trailing epochs averaged")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="success rate of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-traj", help="CSV of evaluation rollouts with critic values")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--critic", type=int, default=2, help="1-based index of the critic to log")
    p.add_argument("--layout", help="maze layout JSON (default: the checkpoint's maze)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("validate-maze", help="check layout invariants")
    p.add_argument("--rooms", type=int, choices=(2, 3, 4), default=3)
    p.add_argument("--layout")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        logging.getLogger(__name__).exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
