"""Goal-conditioned Q-learning baseline with relabeled replays.

Same environments, encodings, replay buffer, and artifact surface as the
flow trainer, but the network predicts one action value per forward action
and acts epsilon-greedily. Every rollout is stored twice: as commanded, and
relabeled to the goal it actually reached. Updates are one-step TD backups
against a periodically synced target copy of the network.
"""

from __future__ import annotations

import time
from copy import deepcopy
from pathlib import Path

import numpy as np

from . import nn
from .envs import make_env, spec_from_dict, spec_hash, spec_to_dict
from .errors import CheckpointError, ConfigError, TrainingDivergedError
from .model import TrajectoryRecord, dump_records
from .replay import PrioritizedBuffer
from .trainer import (
    CSV_COLUMNS,
    EvalReport,
    STREAM_BUFFER,
    STREAM_EVAL,
    STREAM_EVAL_GOALS,
    STREAM_GOALS,
    STREAM_INIT,
    STREAM_ROLLOUT,
    TrainConfig,
    format_csv_row,
    her_relabel,
    stream_rng,
)


class QModel:
    """Online and target action-value networks over (state, goal) inputs."""

    def __init__(self, env, hidden_sizes=(256, 256), rng=None, net=None):
        self.env = env
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        if net is None:
            if rng is None:
                rng = np.random.default_rng(0)
            net = nn.init_net(
                [env.encoding_length, *self.hidden_sizes, env.forward_actions], rng
            )
        if net.output_dim != env.forward_actions:
            raise CheckpointError("net output does not match the action count")
        self.net = net
        self.target = deepcopy(net)

    def sync_target(self) -> None:
        self.target = deepcopy(self.net)

    def q_rows(self, states, goals, env=None, use_target=False):
        env = env if env is not None else self.env
        x = env.encode_batch(states, goals)
        return nn.forward_batch(self.target if use_target else self.net, x)

    def save(self, path, extra_meta=None) -> None:
        meta = {
            "model": "dqn",
            "spec": spec_to_dict(self.env.spec),
            "spec_hash": spec_hash(self.env.spec),
            "hidden_sizes": list(self.hidden_sizes),
        }
        if extra_meta:
            meta.update(extra_meta)
        nn.save_net(path, self.net, meta)


def load_q_model(path, env=None):
    net, meta = nn.load_net(path)
    if meta.get("model") != "dqn":
        raise CheckpointError(f"{path} is not a value-learning model")
    if env is None:
        env = make_env(spec_from_dict(meta["spec"]))
    elif spec_hash(env.spec) != meta["spec_hash"]:
        raise CheckpointError("checkpoint structure does not match the env")
    model = QModel(env, hidden_sizes=meta["hidden_sizes"], net=net)
    model.sync_target()
    return model, meta


def epsilon_schedule(step: int, total_steps: int, frac: float, final: float) -> float:
    """Linear anneal from 1 to ``final`` over the first ``frac`` of the run."""
    ramp = max(1.0, frac * total_steps)
    return 1.0 + (final - 1.0) * min(1.0, step / ramp)


def greedy_action(q_row: np.ndarray, mask: np.ndarray) -> int:
    """Highest-value valid action; exact ties resolve to the lowest index."""
    return int(np.argmax(np.where(mask, q_row, -np.inf)))


def epsilon_greedy(q_row, mask, epsilon, rng) -> int:
    if rng.random() < epsilon:
        valid = np.flatnonzero(mask)
        return int(valid[rng.integers(len(valid))])
    return greedy_action(q_row, mask)


def dqn_rollout(model, goals, rng_or_rngs, epsilon, env=None, collect_entropy=False):
    """Epsilon-greedy rollouts toward each goal.

    Entropy, when collected, is that of the actual behavior distribution:
    the epsilon-uniform mix over valid actions around the greedy choice.
    """
    env = env if env is not None else model.env
    n = len(goals)
    states = [env.initial_state()] * n
    paths = [[env.initial_state()] for _ in range(n)]
    actions: list[list[int]] = [[] for _ in range(n)]
    active = list(range(n))
    entropy_sum = 0.0
    visits = 0
    while active:
        rows = model.q_rows(
            [states[i] for i in active], [goals[i] for i in active], env=env
        )
        still = []
        for row, i in zip(rows, active):
            mask = env.forward_action_mask(states[i])
            if collect_entropy:
                k = int(mask.sum())
                p = np.where(mask, epsilon / k, 0.0)
                p[greedy_action(row, mask)] += 1.0 - epsilon
                nz = p[p > 0]
                entropy_sum += float(-(nz * np.log(nz)).sum())
                visits += 1
            rng = rng_or_rngs if isinstance(rng_or_rngs, np.random.Generator) else rng_or_rngs[i]
            a = epsilon_greedy(row, mask, epsilon, rng)
            states[i] = env.apply_forward(states[i], a)
            paths[i].append(states[i])
            actions[i].append(a)
            if not env.is_terminal(states[i]):
                still.append(i)
        active = still
    records = [
        TrajectoryRecord(
            states=paths[i],
            actions=actions[i],
            goal=tuple(goals[i]),
            reward=env.reward(states[i], goals[i]),
            provenance="forward",
        )
        for i in range(n)
    ]
    return records, entropy_sum, visits


def dqn_update(model: QModel, records, discount: float):
    """One-step TD loss over every transition of the given records.

    Returns ``(loss, tape)``; the caller applies the optimizer step. The
    bootstrap is the target network's best valid action value, zero at
    terminal successors.
    """
    env = model.env
    s_rows = []
    next_rows = []
    goals = []
    acts = []
    rewards = []
    terminal = []
    for record in records:
        n = len(record)
        for t in range(n):
            s_rows.append(record.states[t])
            next_rows.append(record.states[t + 1])
            goals.append(record.goal)
            acts.append(record.actions[t])
            rewards.append(float(record.reward) if t == n - 1 else 0.0)
            terminal.append(env.is_terminal(record.states[t + 1]))
    m = len(s_rows)
    x = env.encode_batch(s_rows, goals)
    q_online, cache = nn.forward_batch(model.net, x, want_cache=True)
    q_next = model.q_rows(next_rows, goals, use_target=True)
    bootstrap = np.zeros(m)
    for i in range(m):
        if not terminal[i]:
            mask = env.forward_action_mask(next_rows[i])
            bootstrap[i] = np.max(np.where(mask, q_next[i], -np.inf))
    targets = np.asarray(rewards) + discount * bootstrap
    idx = np.arange(m)
    delta = q_online[idx, acts] - targets
    loss = float((delta * delta).mean())
    cot = np.zeros_like(q_online)
    cot[idx, acts] = 2.0 * delta / m
    tape = nn.backward_batch(model.net, x, cot, cache=cache)
    return loss, tape


class DQNLoop:
    """Training loop for the ``dqn_her`` data mode."""

    def __init__(self, config: TrainConfig, out_dir=None):
        if config.data_mode != "dqn_her":
            raise ConfigError("DQNLoop only runs the dqn_her data mode")
        self.config = config
        self.env = make_env(config.env)
        self.model = QModel(
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

    @property
    def epsilon(self) -> float:
        return epsilon_schedule(
            self.step,
            self.config.steps,
            self.config.dqn_epsilon_frac,
            self.config.dqn_epsilon_final,
        )

    def train_step(self) -> dict:
        config = self.config
        goals = [self.env.sample_goal(self.goal_rng) for _ in range(config.rollouts)]
        records, _, _ = dqn_rollout(self.model, goals, self.rollout_rngs, self.epsilon)
        for record in records:
            self.buffer.insert(record)
            self.buffer.insert(her_relabel(self.env, record))
        batch, ids = self.buffer.sample_batch(config.batch_size, self.buffer_rng)
        loss, tape = dqn_update(self.model, batch, config.dqn_discount)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"training diverged: loss {loss} at step {self.step}"
            )
        nn.adam_step(self.model.net, tape, self.adam)
        self.buffer.mark_learned(ids)
        self.step += 1
        if self.step % config.dqn_target_sync == 0:
            self.model.sync_target()
        return {"loss": float(loss), "buffer_size": len(self.buffer)}

    def evaluate(self, loss_avg=float("nan")) -> EvalReport:
        rate, per_goal, entropy, records = dqn_evaluate_parts(
            self.model,
            self.eval_goal_set,
            self.config.eval_trials,
            self.eval_rng,
            epsilon=self.config.dqn_epsilon_final,
        )
        self.last_eval_records = records
        return EvalReport(
            step=self.step,
            success_rate=rate,
            per_goal=per_goal,
            mean_entropy=entropy,
            gamma=0.0,
            loss_avg=loss_avg,
        )

    def run(self, log=None) -> EvalReport:
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
                        0.0,
                        metrics["buffer_size"],
                        config.data_mode,
                    )
                )
                if log is not None:
                    log(
                        f"step {report.step}/{config.steps}"
                        f" loss {report.loss_avg:.4g}"
                        f" success {report.success_rate:.3f}"
                        f" eps {self.epsilon:.3f}"
                        f" [{time.monotonic() - started:.0f}s]"
                    )
        if self.out_dir is not None:
            self.model.save(
                self.out_dir / "checkpoint_final.npz",
                extra_meta={"step": self.step, "data_mode": config.data_mode},
            )
            (self.out_dir / "metrics.csv").write_text("\n".join(self.csv_rows) + "\n")
            dump_records(
                self.out_dir / "eval_trajectories.jsonl", self.last_eval_records
            )
        return report


def dqn_evaluate_parts(model, goals, trials, rng, epsilon, env=None):
    expanded = [g for g in goals for _ in range(trials)]
    records, ent_sum, visits = dqn_rollout(
        model, expanded, rng, epsilon, env=env, collect_entropy=True
    )
    per_goal = []
    for i, goal in enumerate(goals):
        wins = sum(r.reward for r in records[i * trials : (i + 1) * trials])
        per_goal.append((tuple(goal), wins / trials))
    rate = float(np.mean([r for _, r in per_goal])) if per_goal else 0.0
    entropy = ent_sum / visits if visits else 0.0
    return rate, per_goal, entropy, records


def dqn_evaluate(model, goals, trials, rng, epsilon=0.05, env=None, step=0) -> EvalReport:
    """Epsilon-greedy evaluation mirroring the flow model's report shape."""
    rate, per_goal, entropy, _ = dqn_evaluate_parts(
        model, goals, trials, rng, epsilon, env=env
    )
    return EvalReport(
        step=step, success_rate=rate, per_goal=per_goal, mean_entropy=entropy
    )
