"""Self-checks against exact enumeration, run by the ``verify`` command.

Each check returns a ``CheckResult`` and never raises on a mere failure;
caps and missing prerequisites turn into skips so one oversized env cannot
wedge the whole suite. The suite covers the load-bearing math: analytic
gradients against finite differences, mask/parent duality of every
environment edge, closed-form trajectory counts, normalization of masked
log-softmax rows, and agreement between Monte Carlo rollouts and the exact
dynamic-programming terminal distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .envs import EnvSpec, make_env
from .errors import EnumerationCapError, NoParentError
from .model import GCModel, sample_forward_trajectories
from .oracle import (
    UniformPolicyModel,
    count_trajectories,
    enumerate_dag,
    exact_terminal_distribution,
)

CHECK_ENVS = (
    EnvSpec(kind="grid", height=3),
    EnvSpec(kind="set", universe=5, target_size=2),
    EnvSpec(kind="seq", vocab_size=3, length=3),
)


@dataclass
class CheckResult:
    name: str
    status: str  # PASS | FAIL | SKIP
    detail: str

    @property
    def ok(self) -> bool:
        return self.status != "FAIL"

    def line(self) -> str:
        return f"{self.status} {self.name}: {self.detail}"


def check_gradients(nets: int = 5, seed: int = 0) -> CheckResult:
    """Finite-difference check of the backward pass on random networks."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    h = 1e-5
    for _ in range(nets):
        sizes = [int(rng.integers(2, 6)) for _ in range(3)]
        net = nn.init_net(sizes, rng)
        for layer in net.layers:
            layer.bias[:] = rng.normal(scale=0.3, size=layer.bias.shape)
        x = rng.normal(size=sizes[0])
        cot = rng.normal(size=sizes[-1])
        tape = nn.backward(net, x, cot)
        for li, layer in enumerate(net.layers):
            for arr, grad in (
                (layer.weight, tape.d_weight[li]),
                (layer.bias, tape.d_bias[li]),
            ):
                flat, gflat = arr.reshape(-1), grad.reshape(-1)
                for j in range(flat.size):
                    orig = flat[j]
                    flat[j] = orig + h
                    up = float(cot @ nn.forward(net, x))
                    flat[j] = orig - h
                    down = float(cot @ nn.forward(net, x))
                    flat[j] = orig
                    fd = (up - down) / (2 * h)
                    worst = max(worst, abs(gflat[j] - fd) / max(1.0, abs(fd)))
    status = "PASS" if worst < 1e-4 else "FAIL"
    return CheckResult("gradients", status, f"worst relative error {worst:.2e} over {nets} nets")


def check_duality(env, cap: int = 100_000) -> CheckResult:
    """Forward and backward edges must be the same set, action-translated."""
    try:
        dag = enumerate_dag(env, cap=cap)
    except EnumerationCapError as exc:
        return CheckResult("duality", "SKIP", str(exc))
    bad = 0
    edges = 0
    for state in dag.states:
        if env.is_terminal(state):
            continue
        mask = env.forward_action_mask(state)
        for action in np.flatnonzero(mask):
            child = env.apply_forward(state, int(action))
            edges += 1
            try:
                b_mask = env.backward_action_mask(child)
            except NoParentError:
                bad += 1
                continue
            b = env.forward_to_backward_action(state, int(action))
            if not b_mask[b]:
                bad += 1
                continue
            if env.apply_backward(child, b) != state:
                bad += 1
                continue
            if env.backward_to_forward_action(child, b) != int(action):
                bad += 1
    status = "PASS" if bad == 0 else "FAIL"
    return CheckResult(
        f"duality[{env.spec.kind}]", status, f"{bad} of {edges} edges broken"
    )


def check_counts() -> CheckResult:
    """Closed-form trajectory counts on the reference tasks."""
    cases = []
    grid = make_env(EnvSpec(kind="grid", height=4))
    dag = enumerate_dag(grid)
    for (x, y) in ((2, 2), (3, 3)):
        want = math.comb(x + y, x)
        cases.append((f"grid({x},{y})", count_trajectories(dag, (x, y, 0)), want))
    seq = make_env(EnvSpec(kind="seq", vocab_size=3, length=3))
    sdag = enumerate_dag(seq)
    # 2^(m-1) distinct build orders needs all-distinct symbols, otherwise
    # intermediate subwords collide as states.
    word = (0, 1, 2)
    cases.append(("seq3", count_trajectories(sdag, word), 2 ** (len(word) - 1)))
    bad = [f"{name} got {got} want {want}" for name, got, want in cases if got != want]
    if bad:
        return CheckResult("counts", "FAIL", "; ".join(bad))
    return CheckResult("counts", "PASS", f"{len(cases)} closed-form counts match")


def check_softmax(seed: int = 0, rows: int = 200) -> CheckResult:
    """Masked log-softmax rows must normalize over their valid entries."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(rows):
        k = int(rng.integers(2, 8))
        logits = rng.normal(scale=5.0, size=k)
        mask = rng.random(k) < 0.7
        if not mask.any():
            mask[int(rng.integers(k))] = True
        logp = nn.masked_log_softmax(logits, mask)
        total = float(np.exp(logp[mask]).sum())
        worst = max(worst, abs(total - 1.0))
        if np.any(logp[~mask] != nn.NEG_INF):
            return CheckResult("softmax", "FAIL", "invalid entry not at sentinel")
    status = "PASS" if worst < 1e-12 else "FAIL"
    return CheckResult("softmax", status, f"worst normalization error {worst:.2e}")


def _terminal_tv(model, env, goal, rollouts: int, seed: int) -> float:
    states, probs = exact_terminal_distribution(model, env, goal)
    index = {s: i for i, s in enumerate(states)}
    counts = np.zeros(len(states))
    rng = np.random.default_rng(seed)
    done = 0
    while done < rollouts:
        n = min(2000, rollouts - done)
        records, _, _ = sample_forward_trajectories(model, [goal] * n, rng, env=env)
        for r in records:
            counts[index[r.states[-1]]] += 1
        done += n
    return 0.5 * float(np.abs(counts / rollouts - probs).sum())


def check_sampler(env, rollouts: int = 4000, seed: int = 1) -> CheckResult:
    """Rollout frequencies against the exact DP terminal distribution."""
    name = f"sampler[{env.spec.kind}]"
    try:
        enumerate_dag(env, cap=100_000)
    except EnumerationCapError as exc:
        return CheckResult(name, "SKIP", str(exc))
    model = UniformPolicyModel(env)
    goal = env.sample_goal(np.random.default_rng(seed))
    tv = _terminal_tv(model, env, goal, rollouts, seed)
    status = "PASS" if tv <= 0.05 else "FAIL"
    return CheckResult(name, status, f"TV {tv:.4f} at {rollouts} rollouts")


def check_checkpoint_tv(model: GCModel, rollouts: int = 4000, seed: int = 2) -> CheckResult:
    """How close a trained model's terminal law is to its commanded goals."""
    env = model.env
    try:
        enumerate_dag(env, cap=100_000)
    except EnumerationCapError as exc:
        return CheckResult("checkpoint_tv", "SKIP", str(exc))
    rng = np.random.default_rng(seed)
    goals = [env.sample_goal(rng) for _ in range(4)]
    worst = 0.0
    for goal in goals:
        states, probs = exact_terminal_distribution(model, env, goal)
        target = np.array([1.0 if s == env.terminal_state(goal) else 0.0 for s in states])
        worst = max(worst, 0.5 * float(np.abs(probs - target).sum()))
    status = "PASS" if worst <= 0.05 else "FAIL"
    return CheckResult(
        "checkpoint_tv", status, f"worst TV to goal {worst:.4f} over {len(goals)} goals"
    )


def run_checks(checkpoint_model: GCModel | None = None, quick: bool = True) -> list:
    """The default verify suite; append the checkpoint check when given."""
    results = [check_gradients(nets=5 if quick else 50)]
    for spec in CHECK_ENVS:
        results.append(check_duality(make_env(spec)))
    results.append(check_counts())
    results.append(check_softmax())
    results.append(check_sampler(make_env(EnvSpec(kind="grid", height=3))))
    results.append(
        check_sampler(make_env(EnvSpec(kind="set", universe=5, target_size=2)))
    )
    if checkpoint_model is not None:
        results.append(check_checkpoint_tv(checkpoint_model))
    return results
