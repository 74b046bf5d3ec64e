"""Training loop: retrospective backward synthesis over a replay buffer.

Each step follows the same recipe: sample one goal per rollout slot, roll
the forward policy out toward each goal, and (in the default ``rbs`` mode)
synthesize a second trajectory per goal by walking the backward policy down
from the goal's terminal state, which is stored as a unit-reward success
regardless of what the forward policy managed. A prioritized batch is then
drawn, the balance loss plus the decayed backward-uniformity term is
minimized with one optimizer step, and the consumed records drop out of the
fresh pool.

Modes: ``rbs`` (forward + synthesized), ``her`` (forward + relabeled copy
whose goal is whatever the rollout reached), ``plain`` (forward only), and
``dqn_her`` (value-learning baseline, implemented in ``dqn``).

Randomness is split into named substreams derived from the run seed via
``SeedSequence(entropy=seed, spawn_key=(stream, index))``, so every
consumer (init, goal draws, per-slot rollouts, per-slot synthesis, buffer
sampling, evaluation) owns an independent, reproducible stream.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .envs import EnvSpec, make_env
from .errors import ConfigError, TrainingDivergedError
from .model import (
    GCModel,
    PROV_HER,
    TrajectoryRecord,
    dump_records,
    sample_forward_trajectories,
    synthesize_backward_trajectories,
)
from .objectives import ObjectiveConfig, batch_total_loss, decay_coefficient
from .replay import PrioritizedBuffer

STREAM_INIT = 0
STREAM_GOALS = 1
STREAM_ROLLOUT = 2
STREAM_SYNTH = 3
STREAM_BUFFER = 4
STREAM_EVAL = 5
STREAM_EVAL_GOALS = 6
STREAM_HIER = 7

DATA_MODES = ("rbs", "her", "plain", "dqn_her")

CSV_COLUMNS = ("step", "loss", "success_rate", "entropy", "gamma", "buffer_size", "mode")


def stream_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    """The named substream for one randomness consumer of a run."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(stream, index))
    )


@dataclass
class TrainConfig:
    env: EnvSpec
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    steps: int = 1000
    rollouts: int = 16
    batch_size: int = 128
    learning_rate: float = 1e-3
    data_mode: str = "rbs"
    seed: int = 0
    hidden_sizes: tuple = (256, 256)
    buffer_capacity: int = 1_000_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_cadence: int = 0  # 0: steps // 100, at least 1
    eval_goals: int = 64
    eval_trials: int = 20
    checkpoint_cadence: int = 0  # 0: final checkpoint only
    dump_buffer: int = 0  # newest records to dump after training; 0 disables
    hier_k: int = 0  # > 0 trains per-slice models (see hier)
    dqn_discount: float = 0.98
    dqn_epsilon_final: float = 0.05
    dqn_epsilon_frac: float = 0.1
    dqn_target_sync: int = 500

    def __post_init__(self):
        if self.data_mode not in DATA_MODES:
            raise ConfigError(f"unknown data mode {self.data_mode!r}")
        for name in ("steps", "rollouts", "batch_size", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.eval_cadence < 0 or self.checkpoint_cadence < 0:
            raise ConfigError("cadences must be >= 0")
        if self.eval_goals < 1 or self.eval_trials < 1:
            raise ConfigError("eval_goals and eval_trials must be >= 1")
        if not (0.0 < self.dqn_discount <= 1.0):
            raise ConfigError("dqn_discount must be in (0, 1]")
        if self.hier_k < 0:
            raise ConfigError("hier_k must be >= 0")

    @property
    def resolved_eval_cadence(self) -> int:
        return self.eval_cadence if self.eval_cadence else max(1, self.steps // 100)


@dataclass
class EvalReport:
    step: int
    success_rate: float
    per_goal: list
    mean_entropy: float
    gamma: float = 0.0
    loss_avg: float = float("nan")
    excluded_goals: list = field(default_factory=list)

    def to_dict(self) -> dict:
        # loss_avg is NaN outside training; JSON has no NaN literal
        loss = self.loss_avg
        return {
            "step": self.step,
            "success_rate": self.success_rate,
            "per_goal": [[list(g), r] for g, r in self.per_goal],
            "mean_entropy": self.mean_entropy,
            "gamma": self.gamma,
            "loss_avg": None if math.isnan(loss) else loss,
            "excluded_goals": [list(g) for g in self.excluded_goals],
        }


def her_relabel(env, record: TrajectoryRecord) -> TrajectoryRecord:
    """Pretend the reached object was the commanded goal all along."""
    achieved = env.goal_of(record.states[-1])
    return TrajectoryRecord(
        states=record.states,
        actions=record.actions,
        goal=achieved,
        reward=env.reward(record.states[-1], achieved),
        provenance=PROV_HER,
    )


def _rollout_eval(model, goals, trials, rng, env=None):
    """Stochastic-policy rollouts: per-goal success rates plus entropy."""
    expanded = [g for g in goals for _ in range(trials)]
    records, ent_sum, visits = sample_forward_trajectories(
        model, expanded, rng, env=env, collect_entropy=True
    )
    per_goal = []
    for i, goal in enumerate(goals):
        wins = sum(r.reward for r in records[i * trials : (i + 1) * trials])
        per_goal.append((tuple(goal), wins / trials))
    rate = float(np.mean([r for _, r in per_goal])) if per_goal else 0.0
    entropy = ent_sum / visits if visits else 0.0
    return rate, per_goal, entropy, records


def evaluate_success_rate(model, goals, trials, rng, env=None, step=0) -> EvalReport:
    """Success of stochastic forward rollouts on the given goals."""
    rate, per_goal, entropy, _ = _rollout_eval(model, goals, trials, rng, env=env)
    return EvalReport(
        step=step, success_rate=rate, per_goal=per_goal, mean_entropy=entropy
    )


def evaluate_unseen(model, test_env, goals, trials, rng, step=0) -> EvalReport:
    """Evaluate under a test layout's masks, skipping unreachable goals.

    The test env must differ from the training env only in obstacles and
    masked goals; goals cut off by the new layout are reported in
    ``excluded_goals`` and left out of the averages.
    """
    goals = [tuple(g) for g in goals]
    reachable = [g for g in goals if test_env.goal_reachable(g)]
    excluded = [g for g in goals if not test_env.goal_reachable(g)]
    if not reachable:
        return EvalReport(
            step=step,
            success_rate=0.0,
            per_goal=[],
            mean_entropy=0.0,
            excluded_goals=excluded,
        )
    rate, per_goal, entropy, _ = _rollout_eval(
        model, reachable, trials, rng, env=test_env
    )
    return EvalReport(
        step=step,
        success_rate=rate,
        per_goal=per_goal,
        mean_entropy=entropy,
        excluded_goals=excluded,
    )


def format_csv_row(step, loss, success_rate, entropy, gamma, buffer_size, mode) -> str:
    return ",".join(
        [
            str(int(step)),
            str(float(loss)),
            str(float(success_rate)),
            str(float(entropy)),
            str(float(gamma)),
            str(int(buffer_size)),
            str(mode),
        ]
    )


class TrainLoop:
    """Owns the model, buffer, optimizer, and all randomness of one run."""

    def __init__(self, config: TrainConfig, out_dir=None):
        if config.data_mode == "dqn_her":
            raise ConfigError("dqn_her runs use the value-learning loop")
        self.config = config
        self.env = make_env(config.env)
        self.objective = dataclasses.replace(
            config.objective, total_steps=config.steps
        )
        self.model = GCModel(
            self.env,
            hidden_sizes=config.hidden_sizes,
            rng=stream_rng(config.seed, STREAM_INIT),
        )
        self.adam = nn.init_adam(
            self.model.net,
            lr=config.learning_rate,
            beta1=config.adam_beta1,
            beta2=config.adam_beta2,
            eps=config.adam_eps,
        )
        self.buffer = PrioritizedBuffer(config.buffer_capacity)
        self.goal_rng = stream_rng(config.seed, STREAM_GOALS)
        self.rollout_rngs = [
            stream_rng(config.seed, STREAM_ROLLOUT, i) for i in range(config.rollouts)
        ]
        self.synth_rngs = [
            stream_rng(config.seed, STREAM_SYNTH, i) for i in range(config.rollouts)
        ]
        self.buffer_rng = stream_rng(config.seed, STREAM_BUFFER)
        self.eval_rng = stream_rng(config.seed, STREAM_EVAL)
        goal_picker = stream_rng(config.seed, STREAM_EVAL_GOALS)
        self.eval_goal_set = [
            self.env.sample_goal(goal_picker) for _ in range(config.eval_goals)
        ]
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.step = 0
        self.csv_rows: list[str] = []
        self.last_eval_records: list[TrajectoryRecord] = []

    def her_relabel(self, record: TrajectoryRecord) -> TrajectoryRecord:
        return her_relabel(self.env, record)

    def train_step(self) -> dict:
        """One algorithm iteration; returns the step's metrics."""
        config = self.config
        goals = [self.env.sample_goal(self.goal_rng) for _ in range(config.rollouts)]
        forward_records, _, _ = sample_forward_trajectories(
            self.model, goals, self.rollout_rngs
        )
        if config.data_mode == "rbs":
            companions = synthesize_backward_trajectories(
                self.model, goals, self.synth_rngs
            )
        elif config.data_mode == "her":
            companions = [self.her_relabel(r) for r in forward_records]
        else:
            companions = [None] * len(forward_records)
        for fwd, extra in zip(forward_records, companions):
            self.buffer.insert(fwd)
            if extra is not None:
                self.buffer.insert(extra)
        batch, ids = self.buffer.sample_batch(config.batch_size, self.buffer_rng)
        loss, tape, diag = batch_total_loss(
            self.model, batch, self.objective, self.step
        )
        if not np.isfinite(loss):
            self._dump_divergence(batch, loss, diag)
            raise TrainingDivergedError(
                f"training diverged: loss {loss} at step {self.step}"
            )
        nn.adam_step(self.model.net, tape, self.adam)
        self.buffer.mark_learned(ids)
        self.step += 1
        return {
            "loss": float(loss),
            "objective": float(diag["objective"]),
            "kl": float(diag["kl"]),
            "gamma": decay_coefficient(self.step, self.objective),
            "buffer_size": len(self.buffer),
        }

    def evaluate(self, loss_avg=float("nan")) -> EvalReport:
        rate, per_goal, entropy, records = _rollout_eval(
            self.model, self.eval_goal_set, self.config.eval_trials, self.eval_rng
        )
        self.last_eval_records = records
        return EvalReport(
            step=self.step,
            success_rate=rate,
            per_goal=per_goal,
            mean_entropy=entropy,
            gamma=decay_coefficient(self.step, self.objective),
            loss_avg=loss_avg,
        )

    def _checkpoint(self, name: str) -> None:
        if self.out_dir is None:
            return
        self.model.save(
            self.out_dir / name,
            extra_meta={"step": self.step, "data_mode": self.config.data_mode},
        )

    def _dump_divergence(self, batch, loss, diag) -> None:
        if self.out_dir is None:
            return
        info = {
            "step": self.step,
            "loss": repr(loss),
            "objective": repr(diag["objective"]),
            "kl": repr(diag["kl"]),
        }
        (self.out_dir / "divergence.json").write_text(json.dumps(info, indent=2))
        dump_records(self.out_dir / "divergence_batch.jsonl", batch)

    def run(self, log=None) -> EvalReport:
        """Train to completion; writes artifacts when an out dir is set."""
        config = self.config
        cadence = config.resolved_eval_cadence
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.csv_rows = [",".join(CSV_COLUMNS)]
        window: list[float] = []
        report = None
        started = time.monotonic()
        for _ in range(config.steps):
            metrics = self.train_step()
            window.append(metrics["loss"])
            if self.step % cadence == 0 or self.step == config.steps:
                report = self.evaluate(loss_avg=float(np.mean(window)))
                window.clear()
                self.csv_rows.append(
                    format_csv_row(
                        report.step,
                        report.loss_avg,
                        report.success_rate,
                        report.mean_entropy,
                        report.gamma,
                        metrics["buffer_size"],
                        config.data_mode,
                    )
                )
                if log is not None:
                    log(
                        f"step {report.step}/{config.steps}"
                        f" loss {report.loss_avg:.4g}"
                        f" success {report.success_rate:.3f}"
                        f" entropy {report.mean_entropy:.3f}"
                        f" [{time.monotonic() - started:.0f}s]"
                    )
            if (
                config.checkpoint_cadence
                and self.step % config.checkpoint_cadence == 0
                and self.step != config.steps
            ):
                self._checkpoint(f"checkpoint_step{self.step}.npz")
        self._checkpoint("checkpoint_final.npz")
        if self.out_dir is not None:
            (self.out_dir / "metrics.csv").write_text(
                "\n".join(self.csv_rows) + "\n"
            )
            dump_records(
                self.out_dir / "eval_trajectories.jsonl", self.last_eval_records
            )
            if config.dump_buffer:
                dump_records(
                    self.out_dir / "buffer.jsonl",
                    self.buffer.snapshot(limit=config.dump_buffer),
                )
        return report


def make_loop(config: TrainConfig, out_dir=None):
    """Build the loop matching the configured data mode."""
    if config.data_mode == "dqn_her":
        from .dqn import DQNLoop

        return DQNLoop(config, out_dir=out_dir)
    return TrainLoop(config, out_dir=out_dir)
