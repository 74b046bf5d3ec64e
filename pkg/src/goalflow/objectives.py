"""Training objectives over complete trajectories.

Both losses penalize squared log-space imbalance along a trajectory,
substituting the terminal state's flow by the (intensified) reward:

* ``db``: one term per transition,
  (log F(s_t) + log P_F(a_t|s_t) - log F(s_{t+1}) - log P_B(b_t|s_{t+1}))^2
  with log F(s_n) replaced by log(C * max(R, r_min)).
* ``subtb``: the same residual summed over every sub-range (i, j) of the
  trajectory, weighted by lambda^(j-i) and normalized by the total weight.

The intensification constant C rescales the reward inside the log, which
shifts every terminal residual by -ln C and therefore concentrates the
optimum of the squared loss closer to the reward support. A reward floor
keeps log(0) out of failed trajectories' targets.

The backward policy can additionally be pulled toward uniform over valid
parent actions by a KL regularizer whose coefficient decays linearly to
zero over the run.

Losses return ``(value, tape)``. For network-backed models the tape holds
the full parameter gradient, assembled analytically in one fused batched
backward pass; for table-backed models the tape is ``None``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError
from .model import validate_record

KIND_DB = "db"
KIND_SUBTB = "subtb"


@dataclass
class ObjectiveConfig:
    kind: str = KIND_DB
    intensification: float = 1.0
    reward_floor: float = 1e-8
    subtb_lambda: float = 0.9
    gamma0: float = 1.0
    total_steps: int = 1

    def __post_init__(self):
        if self.kind not in (KIND_DB, KIND_SUBTB):
            raise ConfigError(f"unknown objective kind {self.kind!r}")
        if self.intensification < 1.0:
            raise ConfigError("intensification must be >= 1")
        if not (0.0 < self.reward_floor <= 1.0):
            raise ConfigError("reward_floor must be in (0, 1]")
        if not (0.0 < self.subtb_lambda <= 1.0):
            raise ConfigError("subtb_lambda must be in (0, 1]")
        if self.gamma0 < 0.0:
            raise ConfigError("gamma0 must be >= 0")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")


def decay_coefficient(step: int, config: ObjectiveConfig) -> float:
    """Linear decay from gamma0 at step 0 to zero at total_steps."""
    frac = 1.0 - step / config.total_steps
    return config.gamma0 * max(0.0, frac)


def terminal_log_target(reward: float, config: ObjectiveConfig) -> float:
    """log(C * max(R, r_min)) split into exact log pieces."""
    return np.log(config.intensification) + np.log(max(reward, config.reward_floor))


def kl_regularizer(bwd_logp: np.ndarray, mask: np.ndarray) -> float:
    """KL(P_B || uniform over the k valid parent actions).

    Sentinel entries carry zero probability and drop out.
    """
    k = int(np.asarray(mask, dtype=bool).sum())
    if k == 0:
        raise ConfigError("mask has no valid entries")
    p = np.exp(bwd_logp)
    return float((p * (bwd_logp + np.log(k))).sum())


def _db_parts(log_f, log_pf, log_pb, log_term):
    """Per-transition residuals, loss, and partials for the one-step loss."""
    nxt = np.append(log_f[1:], log_term)
    r = log_f + log_pf - nxt - log_pb
    loss = float((r * r).sum())
    d_f = 2.0 * r
    d_f[1:] -= 2.0 * r[:-1]
    return loss, d_f, 2.0 * r, -2.0 * r


def _subtb_parts(log_f, log_pf, log_pb, log_term, lam):
    """Loss and partials for the lambda-weighted all-sub-ranges form."""
    n = log_f.shape[0]
    cum_pf = np.concatenate(([0.0], np.cumsum(log_pf)))
    cum_pb = np.concatenate(([0.0], np.cumsum(log_pb)))
    u = np.append(log_f, log_term) - cum_pf + cum_pb
    idx = np.arange(n + 1)
    span = idx[None, :] - idx[:, None]
    w = np.where(span > 0, lam**np.maximum(span, 0), 0.0)
    total_w = w.sum()
    d = u[:, None] - u[None, :]
    loss = float((w * d * d).sum() / total_w)
    g_u = (2.0 / total_w) * ((w * d).sum(axis=1) - (w * d).sum(axis=0))
    suffix = np.cumsum(g_u[::-1])[::-1]
    # u_t depends on logF_t (t < n), on -logPF_k and +logPB_k for all k < t.
    return loss, g_u[:n], -suffix[1:], suffix[1:]


def _record_parts(log_f, log_pf, log_pb, record, config, kind):
    log_term = terminal_log_target(record.reward, config)
    if kind == KIND_DB:
        return _db_parts(log_f, log_pf, log_pb, log_term)
    return _subtb_parts(log_f, log_pf, log_pb, log_term, config.subtb_lambda)


def _evaluate_generic(model, records, config, kind, objective_weight, kl_weight):
    """Value-only path through ``model.predict``, for any model."""
    env = model.env
    total = 0.0
    obj_sum = 0.0
    kl_sum = 0.0
    for record in records:
        validate_record(env, record)
        n = len(record)
        rows = [model.predict(s, record.goal) for s in record.states]
        log_f = np.array([rows[t][0] for t in range(n)])
        log_pf = np.array([rows[t][1][record.actions[t]] for t in range(n)])
        b_actions = [
            env.forward_to_backward_action(record.states[t], record.actions[t])
            for t in range(n)
        ]
        log_pb = np.array([rows[t + 1][2][b_actions[t]] for t in range(n)])
        kl = 0.0
        if kl_weight != 0.0:
            for t in range(n):
                mask = env.backward_action_mask(record.states[t + 1])
                kl += kl_regularizer(rows[t + 1][2], mask)
            kl /= n
        obj = 0.0
        if objective_weight != 0.0:
            obj = _record_parts(log_f, log_pf, log_pb, record, config, kind)[0]
        obj_sum += obj
        kl_sum += kl
        total += objective_weight * obj + kl_weight * kl
    m = len(records)
    return total / m, None, {"objective": obj_sum / m, "kl": kl_sum / m}


def _evaluate_network(model, records, config, kind, objective_weight, kl_weight):
    """Fused batched path for network models: values plus a full gradient.

    All states of all records go through the trunk in one batch; the loss
    cotangent is assembled analytically per record, chained through the
    masked log-softmax heads, and pushed back in a single backward pass.
    """
    env = model.env
    m = len(records)
    states = []
    goals = []
    offsets = []
    for record in records:
        validate_record(env, record)
        offsets.append(len(states))
        states.extend(record.states)
        goals.extend([record.goal] * len(record.states))
    af = env.forward_actions
    x = env.encode_batch(states, goals)
    out, cache = nn.forward_batch(model.net, x, want_cache=True)

    f_rows = []
    b_rows = []
    f_actions = []
    b_actions = []
    for record, off in zip(records, offsets):
        n = len(record)
        f_rows.extend(range(off, off + n))
        b_rows.extend(range(off + 1, off + n + 1))
        f_actions.extend(record.actions)
        b_actions.extend(
            env.forward_to_backward_action(record.states[t], record.actions[t])
            for t in range(n)
        )
    f_rows = np.asarray(f_rows)
    b_rows = np.asarray(b_rows)
    f_actions = np.asarray(f_actions)
    b_actions = np.asarray(b_actions)
    f_masks = np.stack([env.forward_action_mask(s) for r in records for s in r.states[:-1]])
    b_masks = np.stack([env.backward_action_mask(s) for r in records for s in r.states[1:]])

    fwd_logp = nn.masked_log_softmax_batch(out[f_rows, 1 : 1 + af], f_masks)
    bwd_logp = nn.masked_log_softmax_batch(out[b_rows, 1 + af :], b_masks)
    trans = np.arange(len(f_rows))
    log_pf_all = fwd_logp[trans, f_actions]
    log_pb_all = bwd_logp[trans, b_actions]

    kl_rows = np.zeros(len(f_rows))
    kl_cot = None
    if kl_weight != 0.0:
        p = np.exp(bwd_logp)
        log_k = np.log(b_masks.sum(axis=1, dtype=np.float64))
        shifted = bwd_logp + log_k[:, None]
        kl_rows = np.where(b_masks, p * shifted, 0.0).sum(axis=1)
        kl_cot = np.where(b_masks, p * (shifted + 1.0), 0.0)

    upstream_f = np.zeros(len(f_rows))
    upstream_b = np.zeros(len(f_rows))
    g_log_f = np.zeros(len(states))
    kl_row_weight = np.zeros(len(f_rows))
    total = 0.0
    obj_sum = 0.0
    kl_sum = 0.0
    cursor = 0
    for record, off in zip(records, offsets):
        n = len(record)
        sl = slice(cursor, cursor + n)
        cursor += n
        kl = float(kl_rows[sl].sum()) / n
        obj = 0.0
        if objective_weight != 0.0:
            obj, d_f, d_pf, d_pb = _record_parts(
                out[off : off + n, 0],
                log_pf_all[sl],
                log_pb_all[sl],
                record,
                config,
                kind,
            )
            g_log_f[off : off + n] = objective_weight * d_f
            upstream_f[sl] = objective_weight * d_pf
            upstream_b[sl] = objective_weight * d_pb
        kl_row_weight[sl] = kl_weight / n
        obj_sum += obj
        kl_sum += kl
        total += objective_weight * obj + kl_weight * kl

    scale = 1.0 / m
    cot = np.zeros_like(out)
    cot[np.arange(len(states)), 0] = g_log_f * scale
    u_f = np.zeros_like(fwd_logp)
    u_f[trans, f_actions] = upstream_f
    cot[f_rows, 1 : 1 + af] = nn.log_softmax_cotangent(fwd_logp, f_masks, u_f) * scale
    u_b = np.zeros_like(bwd_logp)
    u_b[trans, b_actions] = upstream_b
    if kl_cot is not None:
        u_b += kl_row_weight[:, None] * kl_cot
    cot[b_rows, 1 + af :] = nn.log_softmax_cotangent(bwd_logp, b_masks, u_b) * scale
    tape = nn.backward_batch(model.net, x, cot, cache=cache)
    return total / m, tape, {"objective": obj_sum / m, "kl": kl_sum / m}


def _evaluate(model, records, config, kind, objective_weight, kl_weight):
    if not records:
        raise ConfigError("empty record batch")
    if hasattr(model, "net"):
        return _evaluate_network(
            model, records, config, kind, objective_weight, kl_weight
        )
    return _evaluate_generic(
        model, records, config, kind, objective_weight, kl_weight
    )


def db_residuals(model, record, config: ObjectiveConfig) -> np.ndarray:
    """Signed per-transition balance residuals (terminal flow substituted)."""
    env = model.env
    validate_record(env, record)
    n = len(record)
    rows = [model.predict(s, record.goal) for s in record.states]
    log_f = np.array([rows[t][0] for t in range(n)])
    log_pf = np.array([rows[t][1][record.actions[t]] for t in range(n)])
    log_pb = np.array(
        [
            rows[t + 1][2][
                env.forward_to_backward_action(record.states[t], record.actions[t])
            ]
            for t in range(n)
        ]
    )
    nxt = np.append(log_f[1:], terminal_log_target(record.reward, config))
    return log_f + log_pf - nxt - log_pb


def db_loss(model, record, config: ObjectiveConfig):
    """One-step balance loss for a single trajectory: ``(value, tape)``."""
    loss, tape, _ = _evaluate(model, [record], config, KIND_DB, 1.0, 0.0)
    return loss, tape


def subtb_loss(model, record, config: ObjectiveConfig):
    """All-sub-ranges balance loss for a single trajectory: ``(value, tape)``."""
    loss, tape, _ = _evaluate(model, [record], config, KIND_SUBTB, 1.0, 0.0)
    return loss, tape


def mean_backward_kl(model, record):
    """Per-transition mean KL(P_B || uniform) along one trajectory."""
    config = ObjectiveConfig()
    loss, tape, _ = _evaluate(model, [record], config, KIND_DB, 0.0, 1.0)
    return loss, tape


def total_loss(model, record, config: ObjectiveConfig, step: int):
    """Objective plus the decayed backward-uniformity term for one record."""
    gamma = decay_coefficient(step, config)
    loss, tape, _ = _evaluate(model, [record], config, config.kind, 1.0, gamma)
    return loss, tape


def batch_total_loss(model, records, config: ObjectiveConfig, step: int):
    """Mean total loss over a batch: ``(value, tape, diagnostics)``."""
    gamma = decay_coefficient(step, config)
    return _evaluate(model, records, config, config.kind, 1.0, gamma)
