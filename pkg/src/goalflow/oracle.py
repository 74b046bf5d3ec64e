"""Exact enumeration oracles for small environments.

These are ground-truth references the learned models are checked against:
full DAG enumeration, trajectory counting, the exact terminal distribution
induced by a forward policy, and closed-form flow solutions that satisfy
the balance condition by construction.

Everything here is exponential in principle and guarded by a state cap, so
it is only meant for desk-scale instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EnumerationCapError, UnreachableGoalError
from .nn import NEG_INF, masked_log_softmax

STATE_CAP = 1_000_000


@dataclass
class EnumeratedDAG:
    """Every state reachable from the initial one, in BFS order.

    BFS order is topological: each forward action adds one piece, so edges
    only run from one BFS layer to the next. ``children[i]`` holds
    ``(action, child_index)`` pairs, ``parents[j]`` the dual
    ``(backward_action, parent_index)`` pairs.
    """

    states: list
    index: dict
    children: list[list[tuple[int, int]]]
    parents: list[list[tuple[int, int]]]
    terminals: list[int]

    def __len__(self) -> int:
        return len(self.states)


def enumerate_dag(env, cap: int = STATE_CAP) -> EnumeratedDAG:
    """Breadth-first enumeration of the whole DAG from the initial state."""
    s0 = env.initial_state()
    states = [s0]
    index = {s0: 0}
    children: list[list[tuple[int, int]]] = [[]]
    parents: list[list[tuple[int, int]]] = [[]]
    terminals = []
    frontier = 0
    while frontier < len(states):
        i = frontier
        frontier += 1
        state = states[i]
        if env.is_terminal(state):
            terminals.append(i)
            continue
        mask = env.forward_action_mask(state)
        for action in np.flatnonzero(mask):
            action = int(action)
            child = env.apply_forward(state, action)
            j = index.get(child)
            if j is None:
                if len(states) >= cap:
                    raise EnumerationCapError(f"state count exceeds cap {cap}")
                j = len(states)
                index[child] = j
                states.append(child)
                children.append([])
                parents.append([])
            children[i].append((action, j))
            parents[j].append((env.forward_to_backward_action(state, action), i))
    return EnumeratedDAG(
        states=states,
        index=index,
        children=children,
        parents=parents,
        terminals=terminals,
    )


def count_trajectories(dag: EnumeratedDAG, state) -> int:
    """Number of distinct state sequences from the initial state to ``state``.

    Parallel edges between the same state pair (several actions with one
    effect) count once; this is path counting on the state graph.
    """
    target = dag.index.get(state)
    if target is None:
        raise UnreachableGoalError(f"state {state} is not in the DAG")
    counts = [0] * len(dag.states)
    counts[0] = 1
    for i in range(len(dag.states)):
        if counts[i] == 0:
            continue
        for j in {j for _, j in dag.children[i]}:
            counts[j] += counts[i]
    return counts[target]


def count_action_trajectories(dag: EnumeratedDAG, state) -> int:
    """Like ``count_trajectories`` but distinguishing parallel actions."""
    target = dag.index.get(state)
    if target is None:
        raise UnreachableGoalError(f"state {state} is not in the DAG")
    counts = [0] * len(dag.states)
    counts[0] = 1
    for i in range(len(dag.states)):
        if counts[i] == 0:
            continue
        for _, j in dag.children[i]:
            counts[j] += counts[i]
    return counts[target]


def exact_terminal_distribution(model, env, goal, dag: EnumeratedDAG | None = None):
    """Marginal over terminal states under the model's forward policy.

    Dynamic programming over the DAG in log space: mass flows along every
    action edge weighted by the policy's log-probability. Returns
    ``(terminal_states, probabilities)`` aligned lists.
    """
    if dag is None:
        dag = enumerate_dag(env)
    n = len(dag.states)
    log_mass = np.full(n, -np.inf)
    log_mass[0] = 0.0
    fwd = _forward_logp_table(model, env, dag, goal)
    for i in range(n):
        if log_mass[i] == -np.inf or not dag.children[i]:
            continue
        logp = fwd[i]
        for action, j in dag.children[i]:
            log_mass[j] = np.logaddexp(log_mass[j], log_mass[i] + logp[action])
    probs = np.exp([log_mass[t] for t in dag.terminals])
    return [dag.states[t] for t in dag.terminals], probs


def _forward_logp_table(model, env, dag: EnumeratedDAG, goal):
    """Forward log-probability rows for every non-terminal state."""
    nonterm = [i for i in range(len(dag.states)) if dag.children[i]]
    table = {}
    if hasattr(model, "predict_rows"):
        rows = model.predict_rows(
            [dag.states[i] for i in nonterm], [goal] * len(nonterm), env=env
        )[1]
        for i, row in zip(nonterm, rows):
            table[i] = row
    else:
        for i in nonterm:
            table[i] = model.predict(dag.states[i], goal)[1]
    return [table.get(i) for i in range(len(dag.states))]


class TabularModel:
    """A model backed by lookup tables instead of a network.

    ``predict`` returns the stored log-flow and log-policy rows for the
    given state. Used to express exact, hand-solved flow assignments.
    """

    def __init__(self, env, goal, log_flow, fwd_logp, bwd_logp):
        self.env = env
        self.goal = tuple(goal)
        self.log_flow = log_flow
        self.fwd_logp = fwd_logp
        self.bwd_logp = bwd_logp

    def predict(self, state, goal):
        assert tuple(goal) == self.goal, "tabular model is solved for one goal"
        log_f = self.log_flow.get(state, NEG_INF)
        fwd = self.fwd_logp.get(state)
        bwd = self.bwd_logp.get(state)
        if fwd is None:
            fwd = np.full(self.env.forward_actions, NEG_INF)
        if bwd is None:
            bwd = np.full(self.env.backward_actions, NEG_INF)
        return log_f, fwd, bwd


class UniformPolicyModel:
    """Uniform forward and backward policies over whatever is valid."""

    def __init__(self, env):
        self.env = env

    def predict(self, state, goal):
        env = self.env
        fwd = np.full(env.forward_actions, NEG_INF)
        if not env.is_terminal(state):
            mask = env.forward_action_mask(state)
            fwd[mask] = -np.log(mask.sum())
        bwd = np.full(env.backward_actions, NEG_INF)
        if state != env.initial_state():
            mask = env.backward_action_mask(state)
            bwd[mask] = -np.log(mask.sum())
        return 0.0, fwd, bwd


def solve_flows(env, goal, dag: EnumeratedDAG | None = None) -> TabularModel:
    """Exact balanced flows for an indicator reward at ``goal``.

    The backward policy is uniform over valid backward actions. Flows are
    accumulated from the goal terminal back to the root:

        F(x) = R(x, goal),  F(s) = sum over children s' of F(s') P_B(s|s')

    and the forward policy is read off the balance condition
    P_F(s'|s) = F(s') P_B(s|s') / F(s). Only states with positive flow get
    table entries; every complete trajectory that reaches the goal stays
    inside that support.
    """
    if dag is None:
        dag = enumerate_dag(env)
    target = env.terminal_state(goal)
    if target not in dag.index:
        raise UnreachableGoalError(f"goal {tuple(goal)} has no terminal state")
    n = len(dag.states)
    log_bwd_rows = {}
    for j in range(1, n):
        state = dag.states[j]
        mask = env.backward_action_mask(state)
        log_bwd_rows[j] = masked_log_softmax(np.zeros(env.backward_actions), mask)
    log_flow = np.full(n, -np.inf)
    log_flow[dag.index[target]] = 0.0
    # BFS order is topological, so reversed order visits children first.
    for i in reversed(range(n)):
        if dag.children[i]:
            terms = []
            for action, j in dag.children[i]:
                if log_flow[j] == -np.inf:
                    continue
                b = env.forward_to_backward_action(dag.states[i], action)
                terms.append(log_flow[j] + log_bwd_rows[j][b])
            if terms:
                log_flow[i] = np.logaddexp.reduce(terms)
    flow_table = {}
    fwd_table = {}
    bwd_table = {}
    for i in range(n):
        if log_flow[i] == -np.inf:
            continue
        state = dag.states[i]
        flow_table[state] = float(log_flow[i])
        if i > 0:
            bwd_table[state] = log_bwd_rows[i]
        if dag.children[i]:
            row = np.full(env.forward_actions, NEG_INF)
            for action, j in dag.children[i]:
                if log_flow[j] == -np.inf:
                    continue
                b = env.forward_to_backward_action(state, action)
                row[action] = log_flow[j] + log_bwd_rows[j][b] - log_flow[i]
            fwd_table[state] = row
    return TabularModel(env, goal, flow_table, fwd_table, bwd_table)
