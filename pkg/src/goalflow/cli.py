"""Command-line entry point.

Subcommands: ``train`` (run a config to completion, writing metrics.csv,
checkpoints, trajectory dumps, and a resolved.ini snapshot that replays the
run exactly), ``eval`` (score a checkpoint under a goal protocol or on an
alternate map), ``verify`` (the exact-enumeration self-check suite), and
``ablate`` (a small data-mode x objective matrix off one base config).

Verbosity comes from the GOALFLOW_LOG environment variable (warning by
default; info shows per-evaluation progress lines).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig, load_config, save_config
from .envs import load_map_file, make_env, spec_from_dict, with_map
from .errors import GoalflowError, TrainingDivergedError
from .model import load_model
from .nn import load_net
from .trainer import (
    STREAM_EVAL,
    STREAM_EVAL_GOALS,
    EvalReport,
    evaluate_success_rate,
    evaluate_unseen,
    make_loop,
    stream_rng,
)

logger = logging.getLogger("goalflow")

EVAL_CSV_COLUMNS = (
    "step",
    "success_rate",
    "entropy",
    "protocol",
    "trials",
    "goals",
    "excluded",
    "checkpoint",
)


def _log_level(raw: str) -> int:
    level = getattr(logging, raw.upper(), None)
    if isinstance(level, int):
        return level
    try:
        return int(raw)
    except ValueError:
        return logging.WARNING


def _setup_logging() -> None:
    level = _log_level(os.environ.get("GOALFLOW_LOG", "warning"))
    logging.basicConfig(level=level, format="%(message)s")
    logger.setLevel(level)


def _apply_overrides(config: RunConfig, args) -> RunConfig:
    train = config.train
    if getattr(args, "seed", None) is not None:
        train = dataclasses.replace(train, seed=args.seed)
    if getattr(args, "map", None):
        height, obstacles, _ = load_map_file(args.map)
        train = dataclasses.replace(
            train,
            env=with_map(
                train.env, height, obstacles, masked_goals=train.env.masked_goals
            ),
        )
    return dataclasses.replace(config, train=train)


def _resolve_out(config: RunConfig, args) -> Path:
    out = getattr(args, "out", None) or config.out or f"runs/{config.name}"
    return Path(out)


def run_train(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    out = _resolve_out(config, args)
    out.mkdir(parents=True, exist_ok=True)
    config = dataclasses.replace(config, out=str(out))
    save_config(out / "resolved.ini", config)
    if config.train.hier_k > 0:
        return _run_hier(config, out)
    loop = make_loop(config.train, out_dir=out)
    try:
        report = loop.run(log=logger.info)
    except TrainingDivergedError as exc:
        # The step raises before the optimizer applies a non-finite update,
        # so the in-memory weights are still the last good state.
        loop.model.save(
            out / "checkpoint_last_good.npz", extra_meta={"step": loop.step}
        )
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(report.to_dict()))
    return 0


def _run_hier(config: RunConfig, out: Path) -> int:
    from .hier import HierSpec, hier_evaluate, hier_train

    hspec = HierSpec(base=config.train.env, k=config.train.hier_k)
    models, _ = hier_train(hspec, config.train, out_dir=out, log=logger.info)
    base_env = make_env(config.train.env)
    goal_picker = stream_rng(config.train.seed, STREAM_EVAL_GOALS)
    goals = [base_env.sample_goal(goal_picker) for _ in range(config.train.eval_goals)]
    report = hier_evaluate(
        models,
        goals,
        config.train.eval_trials,
        stream_rng(config.train.seed, STREAM_EVAL),
        step=config.train.steps,
    )
    (out / "hier_eval.json").write_text(json.dumps(report.to_dict(), indent=2))
    print(json.dumps(report.to_dict()))
    return 0


def _eval_goals(env, protocol: str, count: int, seed: int) -> list:
    if protocol == "masked":
        if not env.spec.masked_goals:
            raise GoalflowError("masked protocol needs env.masked_goals")
        return [tuple(g) for g in env.spec.masked_goals]
    if protocol == "all":
        return env.goal_universe()
    picker = stream_rng(seed, STREAM_EVAL_GOALS)
    return [env.sample_goal(picker) for _ in range(count)]


def _append_eval_csv(out: Path, report: EvalReport, protocol: str, trials: int, checkpoint: str) -> None:
    path = out / "eval.csv"
    lines = [] if path.exists() else [",".join(EVAL_CSV_COLUMNS)]
    lines.append(
        ",".join(
            [
                str(report.step),
                str(float(report.success_rate)),
                str(float(report.mean_entropy)),
                protocol,
                str(trials),
                str(len(report.per_goal)),
                str(len(report.excluded_goals)),
                checkpoint,
            ]
        )
    )
    with open(path, "a") as fh:
        fh.write("\n".join(lines) + "\n")


def run_eval(args) -> int:
    _, meta = load_net(args.checkpoint)
    config = None
    if args.config:
        config = _apply_overrides(load_config(args.config), args)
    seed = args.seed if args.seed is not None else (config.train.seed if config else 0)
    protocol = args.protocol or (config.eval_protocol if config else "train")
    trials = args.trials or (config.eval_trials if config else 20)
    count = config.train.eval_goals if config else 64
    step = int(meta.get("step", 0))

    test_env = None
    if args.map:
        height, obstacles, _ = load_map_file(args.map)
        base_spec = spec_from_dict(meta["spec"])
        test_env = make_env(
            with_map(base_spec, height, obstacles, masked_goals=base_spec.masked_goals)
        )

    if meta.get("model") == "dqn":
        from .dqn import dqn_evaluate, load_q_model

        model, _ = load_q_model(args.checkpoint)
        goals = _eval_goals(model.env, protocol, count, seed)
        epsilon = config.train.dqn_epsilon_final if config else 0.05
        excluded = []
        if test_env is not None:
            excluded = [g for g in goals if not test_env.goal_reachable(g)]
            goals = [g for g in goals if test_env.goal_reachable(g)]
        report = dqn_evaluate(
            model,
            goals,
            trials,
            stream_rng(seed, STREAM_EVAL),
            epsilon=epsilon,
            env=test_env,
            step=step,
        )
        report.excluded_goals = excluded
    else:
        model, _ = load_model(args.checkpoint)
        goals = _eval_goals(model.env, protocol, count, seed)
        rng = stream_rng(seed, STREAM_EVAL)
        if test_env is not None:
            report = evaluate_unseen(model, test_env, goals, trials, rng, step=step)
        else:
            report = evaluate_success_rate(model, goals, trials, rng, step=step)

    print(json.dumps(report.to_dict()))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    _append_eval_csv(out, report, protocol, trials, args.checkpoint)
    return 0


def run_verify(args) -> int:
    from .verify import run_checks

    model = None
    if args.checkpoint:
        net, meta = load_net(args.checkpoint)
        if meta.get("model") == "dqn":
            print("error: checkpoint TV check needs a flow model", file=sys.stderr)
            return 2
        model, _ = load_model(args.checkpoint)
    results = run_checks(checkpoint_model=model, quick=not args.full)
    for result in results:
        print(result.line())
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed} of {len(results)} checks ok")
    return 1 if failed else 0


def run_ablate(args) -> int:
    base = _apply_overrides(load_config(args.config), args)
    out = _resolve_out(base, args)
    out.mkdir(parents=True, exist_ok=True)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    objectives = [o.strip() for o in args.objectives.split(",") if o.strip()]
    rows = ["mode,objective,success_rate,loss"]
    for mode in modes:
        for objective in objectives:
            train = dataclasses.replace(
                base.train,
                data_mode=mode,
                objective=dataclasses.replace(base.train.objective, kind=objective),
            )
            cell = f"{mode}_{objective}"
            logger.info("ablate %s", cell)
            loop = make_loop(train, out_dir=out / cell)
            report = loop.run(log=logger.info)
            rows.append(
                f"{mode},{objective},{report.success_rate},{report.loss_avg}"
            )
    (out / "ablation.csv").write_text("\n".join(rows) + "\n")
    print((out / "ablation.csv").read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="goalflow",
        description="Goal-conditioned flow-network training toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run a training config to completion")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--out", default=None)
    train.add_argument("--map", default=None, help="layout file overriding env obstacles")
    train.set_defaults(func=run_train)

    evaluate = sub.add_parser("eval", help="score a checkpoint")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--config", default=None)
    evaluate.add_argument("--seed", type=int, default=None)
    evaluate.add_argument("--out", default=None)
    evaluate.add_argument("--map", default=None)
    evaluate.add_argument("--protocol", choices=("train", "masked", "all"), default=None)
    evaluate.add_argument("--trials", type=int, default=None)
    evaluate.set_defaults(func=run_eval)

    verify = sub.add_parser("verify", help="run the self-check suite")
    verify.add_argument("--checkpoint", default=None)
    verify.add_argument("--full", action="store_true", help="more gradient-check nets")
    verify.set_defaults(func=run_verify)

    ablate = sub.add_parser("ablate", help="run a data-mode x objective matrix")
    ablate.add_argument("--config", required=True)
    ablate.add_argument("--seed", type=int, default=None)
    ablate.add_argument("--out", default=None)
    ablate.add_argument("--modes", default="rbs,her,plain")
    ablate.add_argument("--objectives", default="db,subtb")
    ablate.set_defaults(func=run_ablate)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except GoalflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
