"""Command line interface.

Subcommands:
  train     fit one backbone model target on a scene's pretrain split
  train-rl  train the multiplier policy for a scene
  run       evaluate methods over scenes and seeds, writing reports + figures
"""

from __future__ import annotations

import argparse
import dataclasses
import json
from pathlib import Path

import numpy as np

from . import bench, fca
from .bench import BaselineKind, StrategyConfig
from .config import ConfigError, ScenarioConfig, desk_scale, load_scene
from .estimators import TrainConfig, evaluate_auc, build_target_dataset, train_target
from .simulator import run_logged_episode


def _load_override_file(path: str | None) -> tuple[dict, dict]:
    """--config files may carry {"scenario": {...}, "strategy": {...}} sections."""
    if path is None:
        return {}, {}
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if "scenario" in raw or "strategy" in raw:
        return raw.get("scenario", {}), raw.get("strategy", {})
    return raw, {}


def _strategy_from_args(args, strategy_overrides: dict) -> StrategyConfig:
    strategy = StrategyConfig.from_dict(strategy_overrides)
    updates = {}
    if getattr(args, "window", None) is not None:
        updates["window"] = args.window
    if getattr(args, "episodes", None) is not None:
        updates["episodes"] = args.episodes
    if getattr(args, "full_scale", False):
        updates["full_scale"] = True
    return dataclasses.replace(strategy, **updates) if updates else strategy


def _parse_scenes(spec: str) -> list[int]:
    return [int(tok) for tok in spec.split(",") if tok]


def cmd_train(args) -> int:
    scenario_overrides, strategy_overrides = _load_override_file(args.config)
    strategy = _strategy_from_args(args, strategy_overrides)
    config = load_scene(args.scene)
    if not strategy.full_scale:
        config = desk_scale(config)
    if scenario_overrides:
        config = ScenarioConfig.from_dict({**dataclasses.asdict(config), **scenario_overrides})
    coupons = np.asarray(strategy.coupons)

    log = run_logged_episode(config, coupons, config.slots_pretrain)
    n = log.features.shape[0]
    split = int(0.8 * n)
    train_log = dataclasses.replace(
        log,
        features=log.features[:split], base_price=log.base_price[:split],
        coupon_index=log.coupon_index[:split], y_in=log.y_in[:split],
        y_complete=log.y_complete[:split], slot=log.slot[:split],
    )
    held_out = dataclasses.replace(
        log,
        features=log.features[split:], base_price=log.base_price[split:],
        coupon_index=log.coupon_index[split:], y_in=log.y_in[split:],
        y_complete=log.y_complete[split:], slot=log.slot[split:],
    )
    model = train_target(
        train_log, coupons, args.target, TrainConfig(), seed=args.seed,
        anchor=config.num_rsps + 1.0,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / f"scene{args.scene}_{args.target}_seed{args.seed}.ckpt"
    model.save(ckpt)
    auc = evaluate_auc(model, build_target_dataset(held_out, coupons, args.target))
    print(f"scene {args.scene} target {args.target}: held-out AUC {auc:.4f}")
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_train_rl(args) -> int:
    scenario_overrides, strategy_overrides = _load_override_file(args.config)
    strategy = _strategy_from_args(args, strategy_overrides)
    prep = bench.prepare_scene(args.scene, strategy, scenario_overrides or None)
    out_dir = Path(args.out)
    ckpt_dir = out_dir / "checkpoints" / f"scene{args.scene}" / (
        f"{'fca-rl' if not args.no_fca else 'rl-nofca'}_seed{args.seed}"
    )
    policy, history = bench.train_rl_policy(
        prep, args.seed, use_fca=not args.no_fca, checkpoint_dir=ckpt_dir,
    )
    rows = bench.training_curve_rows(prep, history)
    curve_path = ckpt_dir / "training_curve.csv"
    bench.write_training_curve_csv(rows, curve_path)
    if not args.no_figures:
        from . import figures

        figures.render_training_curve(
            rows, ckpt_dir / "training_curve.png",
            title=f"scene {args.scene} seed {args.seed}",
        )
    final_rlr = np.mean([row["rlr"] for row in rows[-20:]])
    print(f"trained {len(history)} episodes; trailing-20 RLR {final_rlr:.3f}")
    print(f"policy checkpoint: {ckpt_dir / 'policy_final.ckpt'}")
    return 0


def cmd_run(args) -> int:
    scenario_overrides, strategy_overrides = _load_override_file(args.config)
    strategy = _strategy_from_args(args, strategy_overrides)
    scenes = _parse_scenes(args.scene)
    kinds = [BaselineKind(tok) for tok in args.method.split(",") if tok]
    seeds = list(range(args.seeds))
    results, summary = bench.run_experiment(
        scenes,
        kinds,
        seeds,
        Path(args.out),
        strategy=strategy,
        scenario_overrides=scenario_overrides or None,
        jobs=args.jobs,
        figures=not args.no_figures,
    )
    for row in summary:
        froi = "na" if row["froi_mean"] is None else f"{row['froi_mean']:.3f}"
        print(
            f"scene {row['scene']} {row['method']:>8}: "
            f"CRE {row['cre_mean']:.4f}±{row['cre_std']:.4f} ({row['direction']}) "
            f"FROI {froi} RLR {row['rlr_mean']:.3f}±{row['rlr_std']:.3f}"
        )
    print(f"report written to {Path(args.out) / 'report.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ridegym", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a backbone model target")
    p_train.add_argument("--scene", type=int, required=True, choices=(1, 2, 3, 4))
    p_train.add_argument("--target", required=True, choices=("w", "f_in", "z", "beta"))
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--out", default="out")
    p_train.add_argument("--config", default=None, help="JSON override file")
    p_train.add_argument("--full-scale", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_rl = sub.add_parser("train-rl", help="train the multiplier policy")
    p_rl.add_argument("--scene", type=int, required=True, choices=(1, 2, 3, 4))
    p_rl.add_argument("--episodes", type=int, default=None)
    p_rl.add_argument("--seed", type=int, default=0)
    p_rl.add_argument("--window", type=int, default=None)
    p_rl.add_argument("--no-fca", action="store_true", help="ablate the tracker updates")
    p_rl.add_argument("--out", default="out")
    p_rl.add_argument("--config", default=None)
    p_rl.add_argument("--full-scale", action="store_true")
    p_rl.add_argument("--no-figures", action="store_true")
    p_rl.set_defaults(func=cmd_train_rl)

    p_run = sub.add_parser("run", help="run the experiment matrix")
    p_run.add_argument("--scene", required=True, help="scene id or comma list, e.g. 1,3")
    p_run.add_argument(
        "--method",
        required=True,
        help="comma list from {opt,pdm-a,pdm-s,fca-rl,rl-nofca}",
    )
    p_run.add_argument("--seeds", type=int, default=5, help="number of seeds (0..K-1)")
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--config", default=None)
    p_run.add_argument("--window", type=int, default=None)
    p_run.add_argument("--episodes", type=int, default=None)
    p_run.add_argument("--jobs", type=int, default=1)
    p_run.add_argument("--full-scale", action="store_true")
    p_run.add_argument("--no-figures", action="store_true")
    p_run.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        parser.error(str(exc))
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
