"""Command line entry point: train, eval, gen, solve, diag."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .diagnostics import CollapseConfig, read_metrics_csv, replay
from .envs import ENV_NAMES, family, make_env, read_instances, write_instances
from .envs import frozenlake, sokoban
from .errors import StarpoError

VARIANT_ENV = {"default": "sokoban", "large": "sokoban-large", "newvocab": "sokoban-newvocab"}


def resolve_env(env: str, variant: str | None) -> str:
    if variant is None:
        return env
    if family(env) != "sokoban" or variant not in VARIANT_ENV:
        raise ValueError(f"variant {variant!r} does not apply to {env!r}")
    return VARIANT_ENV[variant]


def run_gen(env: str, count: int, seed: int, out: str | Path, *, variant: str | None = None,
            lake_size=(4, 4), hole_prob: float = 0.2) -> list[dict]:
    name = resolve_env(env, variant)
    e = make_env(name, instance_seed=seed, num_instances=count, lake_size=tuple(lake_size), hole_prob=hole_prob)
    records = [e.instance_record(i) for i in range(count)]
    write_instances(out, records)
    return records


def solve_record(rec: dict, horizon: int = 10, max_depth: int = 100) -> dict:
    fam = family(rec["env"])
    out = dict(rec)
    if fam == "sokoban":
        grid = sokoban.parse("\n".join(rec["layout"]))
        plan = sokoban.bfs_solve(grid, max_depth)
        out.update(solvable=plan is not None, plan=plan, plan_length=None if plan is None else len(plan))
    elif fam == "frozenlake":
        grid = frozenlake.parse("\n".join(rec["layout"]))
        values = frozenlake.value_iteration(grid, horizon, all_horizons=True)
        out.update(solvable=frozenlake.safe_path_exists(grid),
                   optimal_success=float(values[horizon][grid.player]),
                   first_action=frozenlake.greedy_action(grid, values, grid.player, horizon))
    else:
        out.update(solvable=True)
    return out


def run_solve(path: str | Path, out: str | Path, *, horizon: int = 10, max_depth: int = 100) -> dict:
    records = [solve_record(r, horizon, max_depth) for r in read_instances(path)]
    write_instances(out, records)
    solved = sum(r["solvable"] for r in records)
    return {"instances": len(records), "solvable": solved,
            "solvable_fraction": solved / len(records) if records else math.nan}


def run_diag(path: str | Path, config: CollapseConfig = CollapseConfig()) -> dict:
    records = read_metrics_csv(path)
    report = replay(records, config).summary()
    report["steps"] = len(records)
    return report


def _dump(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2)
    print(text)
    if out:
        Path(out).write_text(text + "\n")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="starpo", description="Trajectory-level RL for multi-turn agents.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training experiment")
    t.add_argument("--config", help="TOML config file (defaults if omitted)")
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--out", default="runs/latest", help="run directory")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--env", choices=ENV_NAMES)
    e.add_argument("--seed", type=int, help="eval instance seed")
    e.add_argument("--size", type=int, help="number of eval instances")
    e.add_argument("--temperature", type=float, default=0.5)
    e.add_argument("--out")

    g = sub.add_parser("gen", help="write an instance JSONL file")
    g.add_argument("--env", required=True, choices=ENV_NAMES)
    g.add_argument("--variant", choices=sorted(VARIANT_ENV))
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    s = sub.add_parser("solve", help="annotate instances with oracle solutions")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--horizon", type=int, default=10)
    s.add_argument("--max-depth", type=int, default=100)

    d = sub.add_parser("diag", help="replay a metrics CSV through the collapse detector")
    d.add_argument("--metrics", required=True)
    d.add_argument("--config", help="TOML config whose [diagnostics] section sets thresholds")
    d.add_argument("--out")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            from .train import run_train
            cfg = load_config(args.config) if args.config else ExperimentConfig()

            def progress(rec, state):
                if args.verbose:
                    print(f"step {rec.step} success={rec.success_rate:.3f} std={rec.mean_in_group_reward_std:.3f} "
                          f"grad={rec.gradient_norm:.3g}", file=sys.stderr)

            res = run_train(cfg, args.out, seed=args.seed, workers=args.workers, progress=progress)
            print(json.dumps(res.summary, indent=2))
            return 1 if res.summary["numeric_abort"] else 0
        if args.command == "eval":
            from .train import run_eval
            _dump(run_eval(args.ckpt, args.env, eval_seed=args.seed, eval_size=args.size,
                           temperature=args.temperature), args.out)
        elif args.command == "gen":
            recs = run_gen(args.env, args.count, args.seed, args.out, variant=args.variant)
            print(f"wrote {len(recs)} instances to {args.out}")
        elif args.command == "solve":
            _dump(run_solve(args.inp, args.out, horizon=args.horizon, max_depth=args.max_depth), None)
        elif args.command == "diag":
            cc = load_config(args.config).diagnostics.build() if args.config else CollapseConfig()
            _dump(run_diag(args.metrics, cc), args.out)
    except (StarpoError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
