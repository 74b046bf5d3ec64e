"""Hierarchical goal decomposition for long sequence tasks.

A length-l goal is split into k contiguous slices, one independent model is
trained per slice position on the shorter sub-task, and rollouts are
composed by concatenation. Exact-match rewards factorize across slices, so
the composed object is correct iff every slot is.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .envs import EnvSpec, SEQUENCE_KINDS, sequence_shape
from .errors import ConfigError, ShapeError
from .model import sample_forward_trajectory
from .trainer import (
    STREAM_HIER,
    EvalReport,
    TrainConfig,
    TrainLoop,
    stream_rng,
)


@dataclass(frozen=True)
class HierSpec:
    """A sequence task split into k equal contiguous sub-tasks."""

    base: EnvSpec
    k: int

    def __post_init__(self):
        if self.base.kind not in SEQUENCE_KINDS:
            raise ConfigError("hierarchical training needs a sequence task")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        vocab, length = sequence_shape(self.base)
        if length % self.k:
            raise ConfigError(f"k={self.k} does not divide length {length}")

    @property
    def sub_spec(self) -> EnvSpec:
        vocab, length = sequence_shape(self.base)
        return EnvSpec(
            kind="seq",
            vocab_size=vocab,
            length=length // self.k,
            epsilon=self.base.epsilon,
        )


def decompose_goal(goal, k: int) -> list:
    """Split a goal into k contiguous slices of equal length."""
    goal = tuple(goal)
    if k < 1:
        raise ConfigError("k must be >= 1")
    if len(goal) % k:
        raise ConfigError(f"k={k} does not divide goal length {len(goal)}")
    width = len(goal) // k
    return [goal[i * width : (i + 1) * width] for i in range(k)]


def compose(parts) -> tuple:
    """Concatenate sub-sequences in slot order."""
    parts = [tuple(p) for p in parts]
    if not parts:
        raise ShapeError("nothing to compose")
    if len({len(p) for p in parts}) != 1:
        raise ShapeError("sub-sequences differ in length")
    return tuple(sym for part in parts for sym in part)


def slot_seed(seed: int, slot: int) -> int:
    """The derived run seed for one slice position."""
    return int(stream_rng(seed, STREAM_HIER, slot).integers(1 << 62))


def hier_train(hspec: HierSpec, config: TrainConfig, out_dir=None, log=None):
    """Train one model per slice position; returns (models, reports).

    Each slot is a full training run on the sub-task with a slot-derived
    seed and ``steps // k`` of the configured budget, so the total step
    count matches a flat run. With uniform goal sampling the slices of
    sampled base goals are themselves uniform over the sub-task's goals,
    which is what each slot's run draws.
    """
    if config.steps < hspec.k:
        raise ConfigError("steps must be at least k")
    models = []
    reports = []
    for slot in range(hspec.k):
        child = dataclasses.replace(
            config,
            env=hspec.sub_spec,
            steps=config.steps // hspec.k,
            seed=slot_seed(config.seed, slot),
            hier_k=0,
        )
        slot_dir = None if out_dir is None else f"{out_dir}/slot{slot}"
        slot_log = None
        if log is not None:
            slot_log = lambda msg, slot=slot: log(f"slot {slot}: {msg}")
        loop = TrainLoop(child, out_dir=slot_dir)
        reports.append(loop.run(log=slot_log))
        models.append(loop.model)
        if out_dir is not None:
            loop.model.save(
                f"{out_dir}/model_slot{slot}.npz",
                extra_meta={"slot": slot, "k": hspec.k},
            )
    return models, reports


def hier_rollout(models, goal, rng):
    """Sample each slot toward its slice and concatenate.

    Returns ``(composed object, success flag)``.
    """
    parts = decompose_goal(goal, len(models))
    outputs = []
    for model, part in zip(models, parts):
        record = sample_forward_trajectory(model, part, rng)
        outputs.append(model.env.goal_of(record.states[-1]))
    composed = compose(outputs)
    return composed, composed == tuple(goal)


def hier_evaluate(models, goals, trials: int, rng, step: int = 0) -> EvalReport:
    """Composed success rate over whole goals, shaped like a model report."""
    per_goal = []
    for goal in goals:
        wins = sum(hier_rollout(models, goal, rng)[1] for _ in range(trials))
        per_goal.append((tuple(goal), wins / trials))
    rate = float(np.mean([r for _, r in per_goal])) if per_goal else 0.0
    return EvalReport(
        step=step, success_rate=rate, per_goal=per_goal, mean_entropy=0.0
    )
