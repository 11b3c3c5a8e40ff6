"""Command-line entry point: ``generate``, ``run`` and ``bench``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, dump_config, load_config
from .errors import ConfigError, InvalidInputError, SceneGenerationError
from .simenv import (ABLATIONS, generate_forest, read_scene, run_benchmark, run_trial,
                     write_results_csv, write_scene, write_trajectory_csv)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

log = logging.getLogger("mapless_mpc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_bounds(text: str) -> tuple:
    parts = text.replace("x", ",").split(",")
    try:
        vals = tuple(float(p) for p in parts if p.strip())
    except ValueError:
        raise UsageError(f"invalid --bounds {text!r}") from None
    if len(vals) not in (2, 4, 6):
        raise UsageError("--bounds takes LxW, xmin,ymin,xmax,ymax or six values")
    return vals


def _build_parser() -> _Parser:
    p = _Parser(prog="mapless-mpc", description=__doc__)
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--print-defaults", action="store_true",
                   help="print the complete effective configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="write a random forest scene file")
    g.add_argument("--bounds", default="50x30")
    g.add_argument("--density", type=float, default=1.0 / 25.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    r = sub.add_parser("run", help="fly one closed-loop trial")
    r.add_argument("--scene", help="scene file (default: generated from the config)")
    r.add_argument("--speed", type=float)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--config", dest="sub_config")
    r.add_argument("--out", required=True)

    b = sub.add_parser("bench", help="run the benchmark matrix from the config")
    b.add_argument("--config", dest="sub_config")
    b.add_argument("--out", required=True)
    return p


def _scene_from_config(cfg: RunConfig):
    spec = cfg.scene
    if spec.source == "file":
        return read_scene(spec.path)
    return generate_forest(spec.bounds, spec.density, spec.seed)


def cmd_generate(args) -> int:
    scene = generate_forest(_parse_bounds(args.bounds), args.density, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scene(scene, out)
    print(f"obstacles={len(scene.obstacles)}")
    return EXIT_OK


def cmd_run(args, cfg: RunConfig) -> int:
    scene = read_scene(args.scene) if args.scene else _scene_from_config(cfg)
    trial = replace(cfg.trial, seed=args.seed)
    if args.speed is not None:
        trial = replace(trial, v_des=args.speed)
    result = run_trial(scene, trial, cfg.mpc, cfg.model, cfg.perception)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(result, out / "trajectory.csv")
    with open(out / "diagnostics.jsonl", "w") as fh:
        for rec in result.diagnostics:
            fh.write(json.dumps(rec) + "\n")
    line = result.summary()
    (out / "summary.txt").write_text(line + "\n")
    print(line)
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    spec = cfg.benchmark
    if cfg.scene.source == "file":
        scenes = [read_scene(cfg.scene.path)]
    else:
        scenes = [generate_forest(cfg.scene.bounds, cfg.scene.density, s)
                  for s in spec.scene_seeds]

    def progress(key, outcome):
        log.info("speed=%s ablation=%s -> %s", key[0], key[1], outcome)

    rows = run_benchmark(scenes, spec.speeds, spec.trials,
                         [ABLATIONS[a] for a in spec.ablations], cfg.mpc, cfg.model,
                         cfg.perception, cfg.trial, workers=spec.workers, progress=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results_csv(rows, out / "results.csv")
    for r in rows:
        print(f"speed={r.speed:g} ablation={r.ablation} success_rate={r.success_rate:.2f} "
              f"mean_speed={r.mean_speed:.2f} mean_solve_ms={r.mean_solve_ms:.2f}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        config_path = getattr(args, "sub_config", None) or args.config
        cfg = load_config(config_path)
        if args.print_defaults:
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        if args.command is None:
            raise UsageError("a command is required: generate, run or bench")
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "run":
            return cmd_run(args, cfg)
        return cmd_bench(args, cfg)
    except (UsageError, ConfigError, InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SceneGenerationError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
