"""Goal-conditioned model and trajectory machinery.

One dense trunk maps ``encode(state, goal)`` to a single output vector that
is sliced into three heads: scalar log state flow, forward action logits,
and backward action logits. Logits are converted to log-probabilities under
the environment's action masks, so invalid actions carry the ``NEG_INF``
sentinel and zero probability.

Trajectories are stored as plain records (states, actions, goal, reward,
provenance) and can be replay-validated against the environment, dumped to
line-delimited JSON, and synthesized backward from a goal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nn
from .envs import make_env, spec_from_dict, spec_hash, spec_to_dict
from .errors import CheckpointError, InvalidTrajectoryError
from .nn import NEG_INF

PROV_FORWARD = "forward"
PROV_RBS = "rbs"
PROV_HER = "her"

PROVENANCES = (PROV_FORWARD, PROV_RBS, PROV_HER)


@dataclass
class TrajectoryRecord:
    """One complete trajectory from the initial state to a terminal state.

    ``states`` holds s_0 .. s_n, ``actions`` the n forward actions between
    them, regardless of whether the trajectory was rolled out forward or
    synthesized backward and reversed.
    """

    states: list
    actions: list
    goal: tuple
    reward: int
    provenance: str

    def __len__(self) -> int:
        return len(self.actions)


class GCModel:
    """Trunk network with flow / forward-policy / backward-policy heads."""

    def __init__(self, env, hidden_sizes=(256, 256), rng=None, net=None):
        self.env = env
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        out_dim = 1 + env.forward_actions + env.backward_actions
        if net is None:
            if rng is None:
                rng = np.random.default_rng(0)
            net = nn.init_net(
                [env.encoding_length, *self.hidden_sizes, out_dim], rng
            )
        if net.input_dim != env.encoding_length or net.output_dim != out_dim:
            raise CheckpointError(
                f"net shape ({net.input_dim}, {net.output_dim}) does not match"
                f" env ({env.encoding_length}, {out_dim})"
            )
        self.net = net

    def head_slices(self):
        af = self.env.forward_actions
        return slice(0, 1), slice(1, 1 + af), slice(1 + af, None)

    def predict_rows(self, states, goals, env=None):
        """Batched predict: returns (log-flows, fwd log-prob rows, bwd rows).

        ``env`` overrides where the masks come from (e.g. evaluating under a
        map with extra obstacles); encodings and logits still come from the
        model's own layout, which must structurally match.
        """
        env = env if env is not None else self.env
        x = env.encode_batch(states, goals)
        out = nn.forward_batch(self.net, x)
        return self._split_rows(out, states, env)

    def _split_rows(self, out, states, env):
        af = env.forward_actions
        log_flow = out[:, 0].copy()
        fwd_rows = []
        bwd_rows = []
        s0 = env.initial_state()
        for i, state in enumerate(states):
            if env.is_terminal(state):
                fwd_rows.append(np.full(af, NEG_INF))
            else:
                mask = env.forward_action_mask(state)
                fwd_rows.append(nn.masked_log_softmax(out[i, 1 : 1 + af], mask))
            if state == s0:
                bwd_rows.append(np.full(env.backward_actions, NEG_INF))
            else:
                mask = env.backward_action_mask(state)
                bwd_rows.append(nn.masked_log_softmax(out[i, 1 + af :], mask))
        return log_flow, fwd_rows, bwd_rows

    def predict(self, state, goal):
        """(log-flow, forward log-probs, backward log-probs) for one state."""
        log_flow, fwd, bwd = self.predict_rows([state], [goal])
        return float(log_flow[0]), fwd[0], bwd[0]

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {
            "model": "gcgfn",
            "spec": spec_to_dict(self.env.spec),
            "spec_hash": spec_hash(self.env.spec),
            "hidden_sizes": list(self.hidden_sizes),
        }
        if extra_meta:
            meta.update(extra_meta)
        nn.save_net(path, self.net, meta)


def load_model(path, env=None):
    """Load a saved model. Returns ``(model, meta)``.

    With ``env`` given, the checkpoint must structurally match it (same
    structural hash); otherwise the training env is rebuilt from the stored
    spec.
    """
    net, meta = nn.load_net(path)
    if meta.get("model") != "gcgfn":
        raise CheckpointError(f"{path} is not a conditional flow model")
    stored = spec_from_dict(meta["spec"])
    if env is None:
        env = make_env(stored)
    elif spec_hash(env.spec) != meta["spec_hash"]:
        raise CheckpointError(
            "checkpoint structure does not match the requested env"
        )
    model = GCModel(env, hidden_sizes=meta["hidden_sizes"], net=net)
    return model, meta


def _predict_rows(model, env, states, goals):
    """Dispatch helper: batched path when available, else per-state."""
    if hasattr(model, "predict_rows"):
        return model.predict_rows(states, goals, env=env)
    log_flow = np.empty(len(states))
    fwd_rows = []
    bwd_rows = []
    for i, (s, g) in enumerate(zip(states, goals)):
        lf, fwd, bwd = model.predict(s, g)
        log_flow[i] = lf
        fwd_rows.append(fwd)
        bwd_rows.append(bwd)
    return log_flow, fwd_rows, bwd_rows


def _draw(rng_or_rngs, slot, logp):
    """Gumbel-argmax draw from one masked log-prob row."""
    if isinstance(rng_or_rngs, np.random.Generator):
        g = rng_or_rngs.gumbel(size=logp.shape)
    else:
        g = rng_or_rngs[slot].gumbel(size=logp.shape)
    return int(np.argmax(logp + g))


def sample_forward_trajectories(
    model, goals, rng_or_rngs, env=None, collect_entropy=False
):
    """Roll out one trajectory per goal under the forward policy.

    ``rng_or_rngs`` is either one generator shared across slots or one
    generator per slot (independent streams). Returns
    ``(records, entropy_sum, visit_count)``; the entropy terms are summed
    over every visited non-terminal state when requested.
    """
    env = env if env is not None else getattr(model, "env")
    n = len(goals)
    states = [env.initial_state()] * n
    paths = [[env.initial_state()] for _ in range(n)]
    actions: list[list[int]] = [[] for _ in range(n)]
    active = [i for i in range(n) if not env.is_terminal(states[i])]
    entropy_sum = 0.0
    visits = 0
    while active:
        _, fwd_rows, _ = _predict_rows(
            model, env, [states[i] for i in active], [goals[i] for i in active]
        )
        still = []
        for row, i in zip(fwd_rows, active):
            if collect_entropy:
                # Sentinel entries contribute exp(NEG_INF) * NEG_INF == 0.0.
                p = np.exp(row)
                entropy_sum += float(-(p * row).sum())
                visits += 1
            a = _draw(rng_or_rngs, i, row)
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
            provenance=PROV_FORWARD,
        )
        for i in range(n)
    ]
    return records, entropy_sum, visits


def sample_forward_trajectory(model, goal, rng, env=None) -> TrajectoryRecord:
    return sample_forward_trajectories(model, [goal], [rng], env=env)[0][0]


def synthesize_backward_trajectories(model, goals, rng_or_rngs, env=None):
    """Walk backward from each goal's terminal state under the backward
    policy, then flip the walk into a forward record with reward 1."""
    env = env if env is not None else getattr(model, "env")
    n = len(goals)
    states = [env.terminal_state(g) for g in goals]
    rev_paths = [[s] for s in states]
    rev_actions: list[list[int]] = [[] for _ in range(n)]
    s0 = env.initial_state()
    active = [i for i in range(n) if states[i] != s0]
    while active:
        _, _, bwd_rows = _predict_rows(
            model, env, [states[i] for i in active], [goals[i] for i in active]
        )
        still = []
        for row, i in zip(bwd_rows, active):
            b = _draw(rng_or_rngs, i, row)
            rev_actions[i].append(env.backward_to_forward_action(states[i], b))
            states[i] = env.apply_backward(states[i], b)
            rev_paths[i].append(states[i])
            if states[i] != s0:
                still.append(i)
        active = still
    return [
        TrajectoryRecord(
            states=rev_paths[i][::-1],
            actions=rev_actions[i][::-1],
            goal=tuple(goals[i]),
            reward=1,
            provenance=PROV_RBS,
        )
        for i in range(n)
    ]


def synthesize_backward_trajectory(model, goal, rng, env=None) -> TrajectoryRecord:
    return synthesize_backward_trajectories(model, [goal], [rng], env=env)[0]


def validate_record(env, record: TrajectoryRecord) -> None:
    """Replay the actions and check every stored invariant.

    Raises ``InvalidTrajectoryError`` on any mismatch: bad chaining, invalid
    actions, a non-terminal endpoint, an unknown provenance, or a stored
    reward that disagrees with the environment.
    """
    if record.provenance not in PROVENANCES:
        raise InvalidTrajectoryError(f"unknown provenance {record.provenance!r}")
    if not record.states or record.states[0] != env.initial_state():
        raise InvalidTrajectoryError("trajectory does not start at the root")
    if len(record.states) != len(record.actions) + 1:
        raise InvalidTrajectoryError("states and actions lengths disagree")
    state = record.states[0]
    for t, action in enumerate(record.actions):
        try:
            state = env.apply_forward(state, action)
        except Exception as exc:
            raise InvalidTrajectoryError(
                f"action {action} invalid at step {t}: {exc}"
            ) from exc
        if state != record.states[t + 1]:
            raise InvalidTrajectoryError(
                f"replay diverges at step {t}: {state} != {record.states[t + 1]}"
            )
    if not env.is_terminal(state):
        raise InvalidTrajectoryError("trajectory does not end in a terminal state")
    want = env.reward(state, record.goal)
    if record.reward != want:
        raise InvalidTrajectoryError(
            f"stored reward {record.reward} != environment reward {want}"
        )


def record_to_json(record: TrajectoryRecord) -> str:
    return json.dumps(
        {
            "states": [list(s) for s in record.states],
            "actions": list(record.actions),
            "goal": list(record.goal),
            "reward": record.reward,
            "provenance": record.provenance,
        },
        separators=(",", ":"),
    )


def record_from_json(line: str) -> TrajectoryRecord:
    d = json.loads(line)
    return TrajectoryRecord(
        states=[tuple(s) for s in d["states"]],
        actions=[int(a) for a in d["actions"]],
        goal=tuple(d["goal"]),
        reward=int(d["reward"]),
        provenance=str(d["provenance"]),
    )


def dump_records(path, records, mode="w") -> None:
    with open(path, mode, encoding="utf-8") as fh:
        for r in records:
            fh.write(record_to_json(r) + "\n")


def load_records(path) -> list[TrajectoryRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_from_json(line))
    return out
