"""Command line entry point: ``divo gen-data | train | eval | sweep``."""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import sys
from pathlib import Path

import numpy as np

from .actor import Actor
from .dataset import GeneratorSpec, generate_dataset, load, save
from .envs import REGISTRY, evaluate_policy, make_env, normalized_score
from .exceptions import DivoError
from .trainer import (
    TrainConfig,
    aggregate_scores,
    emit_metrics,
    read_checkpoint,
    train,
    train_behavior_cloning,
)

logger = logging.getLogger("divo")


def _config(args) -> TrainConfig:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["total_iterations"] = args.iterations
    for item in args.set or []:
        overrides.update(_parse_fields(item.replace("=", " = ", 1)))
    return config.replace(**overrides)


def _parse_fields(text: str) -> dict:
    """Typed values for the keys named in ``key = value`` lines (others untouched)."""
    parsed = TrainConfig.from_text(text)
    keys = [line.split("=", 1)[0].strip() for line in text.splitlines() if line.strip()]
    return {k: getattr(parsed, k) for k in keys}


def cmd_gen_data(args) -> int:
    spec = GeneratorSpec(args.env, GeneratorSpec.parse_mix(args.mix), args.episodes, args.seed)
    dataset = generate_dataset(spec)
    save(dataset, args.out)
    print(f"wrote {len(dataset)} transitions from {args.episodes} episodes to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    dataset = load(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text())
    if args.baseline == "bc":
        _, metrics = train_behavior_cloning(config, dataset, args.env)
    else:
        trainer, metrics = train(config, dataset, args.env)
        trainer.save_checkpoint(out / "checkpoint.divc")
    emit_metrics(metrics, out / "metrics.csv")
    print(f"final normalized score {metrics.final_score():.2f}")
    return 0


def load_actor(path):
    """Rebuild the deployed actor from a checkpoint.

    Returns ``(actor, env_id, state_mean, state_std, normalized)``.
    """
    meta, arrays = read_checkpoint(path)
    config = TrainConfig.from_text(meta["config"])
    actor = Actor(
        meta["state_dim"], meta["action_dim"], config.alpha, config.beta_reg,
        config.policy_update_freq, config.hidden_dim, config.num_layers,
        dtype=np.dtype(config.dtype),
    )
    actor.theta = arrays["theta"].astype(np.dtype(config.dtype))
    return actor, meta["env_id"], arrays["state_mean"], arrays["state_std"], meta["normalized"]


def cmd_eval(args) -> int:
    actor, env_id, mean, std, normalized = load_actor(args.checkpoint)
    env = make_env(args.env or env_id)
    ret, spread = evaluate_policy(
        env, actor.act, args.episodes, np.random.default_rng(args.seed), mean, std, normalized
    )
    score = float(normalized_score(env.spec.id, ret))
    print(f"return {ret:.4f} +- {spread:.4f}  normalized score {score:.2f}")
    return 0


def _parse_grid(params) -> dict:
    grid = {}
    for item in params:
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise DivoError(f"--param expects key=v1,v2,...; got {item!r}")
        grid[key.strip()] = [v.strip() for v in values.split(",")]
    return grid


def cmd_sweep(args) -> int:
    base = _config(args)
    dataset = load(args.data)
    grid = _parse_grid(args.param)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for combo in itertools.product(*grid.values()):
        changes = _parse_fields("\n".join(f"{k} = {v}" for k, v in zip(grid, combo)))
        name = "_".join(f"{k}={v}" for k, v in zip(grid, combo))
        runs = []
        for seed in seeds:
            _, metrics = train(base.replace(seed=seed, **changes), dataset, args.env)
            runs.append(metrics)
            logger.info("%s seed %d: %.2f", name, seed, metrics.final_score())
        emit_metrics(runs, out / name)
        summary = aggregate_scores([m.final_score() for m in runs])
        rows.append([*combo, summary["runs"], summary["mean"], summary["median"], summary["iqm"]])
        print(f"{name}: mean {summary['mean']:.2f}  iqm {summary['iqm']:.2f}")
    with open(out / "sweep.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([*grid, "runs", "mean", "median", "iqm"])
        writer.writerows(rows)
    means = [r[-3] for r in rows]
    print(f"score range across grid {max(means) - min(means):.2f}")
    return 0


def _add_config_args(p):
    p.add_argument("--config", help="key = value file mirroring TrainConfig")
    p.add_argument("--data", required=True, help="dataset file written by gen-data")
    p.add_argument("--env", required=True, choices=sorted(REGISTRY))
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int, help="override total_iterations")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="divo", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="roll out scripted policies into a dataset file")
    p.add_argument("--env", required=True, choices=sorted(REGISTRY))
    p.add_argument("--mix", default="expert:0.5,random:0.5")
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one run; writes checkpoint and metrics CSV")
    _add_config_args(p)
    p.add_argument("--baseline", choices=["bc"], help="train the behavior-cloning baseline instead")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint's actor")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env", choices=sorted(REGISTRY))
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid over config fields, several seeds per cell")
    _add_config_args(p)
    p.add_argument("--param", action="append", required=True, metavar="KEY=V1,V2,...")
    p.add_argument("--seeds", default="0")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (DivoError, OSError) as exc:
        print(f"divo {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
