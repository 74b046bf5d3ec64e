import math

import numpy as np
import pytest

from goalflow import envs
from goalflow.envs import EnvSpec, make_env, parse_map_text, spec_from_dict, spec_to_dict, spec_hash
from goalflow.errors import (
    ConfigError,
    EnumerationCapError,
    InvalidActionError,
    NonTerminalStateError,
    NoParentError,
    TerminalStateError,
    UnreachableGoalError,
)
from goalflow.oracle import enumerate_dag


GRID4 = EnvSpec(kind="grid", height=4)
SET52 = EnvSpec(kind="set", universe=5, target_size=2)
WORDS3 = EnvSpec(kind="seq", vocab_size=3, length=3)


def assert_duality(env, dag):
    """Forward and backward edge sets must be exact mirrors of each other."""
    for j, state in enumerate(dag.states):
        if j == 0:
            assert state == env.initial_state()
            continue
        mask = env.backward_action_mask(state)
        from_mask = set()
        for b in np.flatnonzero(mask):
            b = int(b)
            parent = env.apply_backward(state, b)
            from_mask.add((b, dag.index[parent]))
            # The two action translations must invert each other.
            a = env.backward_to_forward_action(state, b)
            assert env.apply_forward(parent, a) == state
            assert env.forward_to_backward_action(parent, a) == b
        assert from_mask == set(dag.parents[j]), f"parent mismatch at {state}"


@pytest.mark.parametrize("spec", [GRID4, SET52, WORDS3])
def test_forward_backward_duality(spec):
    env = make_env(spec)
    assert_duality(env, enumerate_dag(env))


def test_duality_with_obstacles():
    # (1,0) blocked makes (2,0) and (3,0) unreachable even though they are
    # free; backward masks must never step onto them.
    spec = EnvSpec(kind="grid", height=4, obstacles=((1, 0), (2, 2)))
    env = make_env(spec)
    dag = enumerate_dag(env)
    assert_duality(env, dag)
    assert (2, 0, 0) not in dag.index
    assert not env.goal_reachable((3, 0))
    mask = env.backward_action_mask((2, 1, 0))
    assert not mask[1]  # -y parent (2,0) is unreachable
    assert mask[0]


def test_grid_state_count_and_masks():
    env = make_env(GRID4)
    dag = enumerate_dag(env)
    assert len(dag) == 32  # 16 cells, each unstopped and stopped
    assert len(dag.terminals) == 16
    mask = env.forward_action_mask((3, 3, 0))
    assert list(mask) == [False, False, True]  # corner: stop only
    assert list(env.forward_action_mask((0, 0, 0))) == [True, True, True]
    with pytest.raises(TerminalStateError):
        env.forward_action_mask((1, 1, 1))
    with pytest.raises(NoParentError):
        env.backward_action_mask((0, 0, 0))
    assert list(env.backward_action_mask((2, 1, 1))) == [False, False, True]
    with pytest.raises(InvalidActionError):
        env.apply_forward((3, 0, 0), 0)


def test_grid_stop_transitions_have_unique_parent():
    env = make_env(GRID4)
    for x in range(4):
        for y in range(4):
            mask = env.backward_action_mask((x, y, 1))
            assert mask.sum() == 1 and mask[2]
            assert env.apply_backward((x, y, 1), 2) == (x, y, 0)


def test_set_env_contracts():
    env = make_env(SET52)
    dag = enumerate_dag(env)
    assert len(dag) == 1 + 5 + 10
    assert len(dag.terminals) == 10
    s = env.apply_forward((), 3)
    assert s == (3,)
    assert env.apply_forward(s, 1) == (1, 3)
    assert env.is_terminal((1, 3))
    with pytest.raises(TerminalStateError):
        env.apply_forward((1, 3), 0)
    with pytest.raises(InvalidActionError):
        env.apply_forward((3,), 3)
    assert env.apply_backward((1, 3), 1) == (3,)
    with pytest.raises(InvalidActionError):
        env.apply_backward((1, 3), 0)


def test_sequence_env_contracts():
    env = make_env(WORDS3)
    assert env.forward_actions == 6 and env.backward_actions == 2
    s = env.apply_forward((), 4)  # append word 1
    assert s == (1,)
    s = env.apply_forward(s, 2)  # prepend word 2
    assert s == (2, 1)
    s = env.apply_forward(s, 3 + 0)  # append word 0
    assert s == (2, 1, 0)
    assert env.is_terminal(s)
    assert env.apply_backward(s, 0) == (1, 0)
    assert env.apply_backward(s, 1) == (2, 1)
    assert env.backward_to_forward_action((2, 1, 0), 0) == 2
    assert env.backward_to_forward_action((2, 1, 0), 1) == 3 + 0
    with pytest.raises(NoParentError):
        env.backward_action_mask(())


def test_sequence_prepend_append_merge_on_first_word():
    env = make_env(WORDS3)
    assert env.apply_forward((), 1) == env.apply_forward((), 3 + 1) == (1,)


def test_reward_is_exact_match_indicator():
    env = make_env(GRID4)
    assert env.reward((2, 1, 1), (2, 1)) == 1
    assert env.reward((2, 1, 1), (1, 2)) == 0
    with pytest.raises(NonTerminalStateError):
        env.reward((2, 1, 0), (2, 1))
    wide = make_env(EnvSpec(kind="grid", height=4, epsilon=0.5))
    assert wide.reward((2, 1, 1), (1, 2)) == 0  # mismatch is infinitely far


def test_terminal_state_and_reachability():
    env = make_env(EnvSpec(kind="grid", height=4, obstacles=((1, 0),)))
    assert env.terminal_state((2, 1)) == (2, 1, 1)
    with pytest.raises(UnreachableGoalError):
        env.terminal_state((1, 0))  # obstacle
    with pytest.raises(UnreachableGoalError):
        env.terminal_state((2, 0))  # cut off by the obstacle
    with pytest.raises(UnreachableGoalError):
        env.terminal_state((9, 9))
    setenv = make_env(SET52)
    with pytest.raises(UnreachableGoalError):
        setenv.terminal_state((1, 1))


def test_set_goals_are_canonical_sorted_tuples():
    setenv = make_env(SET52)
    with pytest.raises(UnreachableGoalError):
        setenv.terminal_state((4, 1))  # unsorted payloads are rejected
    assert setenv.terminal_state((1, 4)) == (1, 4)


def test_encode_layout_grid():
    env = make_env(GRID4)
    v = env.encode((2, 1, 0), (3, 0))
    assert v.shape == (16,)
    assert v.dtype == np.float64
    want = np.zeros(16)
    want[2] = want[4 + 1] = want[8 + 3] = want[12 + 0] = 1.0
    np.testing.assert_array_equal(v, want)


def test_encode_layout_set():
    env = make_env(SET52)
    v = env.encode((0, 3), (1, 2))
    want = np.zeros(10)
    want[0] = want[3] = want[5 + 1] = want[5 + 2] = 1.0
    np.testing.assert_array_equal(v, want)


def test_encode_layout_sequence():
    env = make_env(WORDS3)
    v = env.encode((2, 0), (1, 1, 0))
    block = 3 * 3 + 4
    assert v.shape == (2 * block,)
    want = np.zeros(2 * block)
    want[0 * 3 + 2] = want[1 * 3 + 0] = 1.0  # state words
    want[9 + 2] = 1.0  # state length 2
    want[block + 0 * 3 + 1] = want[block + 1 * 3 + 1] = want[block + 2 * 3 + 0] = 1.0
    want[block + 9 + 3] = 1.0  # goal length 3
    np.testing.assert_array_equal(v, want)


def test_encode_batch_matches_single():
    for spec in (GRID4, SET52, WORDS3):
        env = make_env(spec)
        dag = enumerate_dag(env)
        goal = env.goal_universe()[-1]
        states = dag.states[:8]
        batch = env.encode_batch(states, [goal] * len(states))
        for i, s in enumerate(states):
            np.testing.assert_array_equal(batch[i], env.encode(s, goal))


def test_goal_universe_and_cap():
    assert len(make_env(GRID4).goal_universe()) == 16
    assert len(make_env(SET52).goal_universe()) == 10
    assert len(make_env(WORDS3).goal_universe()) == 27
    with pytest.raises(EnumerationCapError):
        make_env(WORDS3).goal_universe(cap=26)
    grid = make_env(EnvSpec(kind="grid", height=4, obstacles=((1, 0),)))
    assert len(grid.goal_universe()) == 16 - 1 - 2  # obstacle + 2 cut off


def test_sample_goal_uniform_within_5_sigma():
    env = make_env(EnvSpec(kind="grid", height=8))
    rng = np.random.default_rng(123)
    n = 100_000
    counts = {}
    for _ in range(n):
        g = env.sample_goal(rng)
        counts[g] = counts.get(g, 0) + 1
    assert len(counts) == 64
    p = 1.0 / 64
    sigma = math.sqrt(n * p * (1 - p))
    for c in counts.values():
        assert abs(c - n * p) < 5 * sigma


def test_sample_goal_respects_mask():
    masked = ((0, 0), (3, 3))
    env = make_env(EnvSpec(kind="grid", height=4, masked_goals=masked))
    rng = np.random.default_rng(7)
    seen = {env.sample_goal(rng) for _ in range(3000)}
    assert set(masked).isdisjoint(seen)
    assert len(seen) == 14
    seqenv = make_env(EnvSpec(kind="seq", vocab_size=2, length=2, masked_goals=((0, 0),)))
    seen = {seqenv.sample_goal(rng) for _ in range(500)}
    assert (0, 0) not in seen and len(seen) == 3


def test_sample_goal_deterministic_under_seed():
    env = make_env(SET52)
    a = [env.sample_goal(np.random.default_rng(5)) for _ in range(10)]
    b = [env.sample_goal(np.random.default_rng(5)) for _ in range(10)]
    assert a == b


def test_bits_shape_derivation():
    env = make_env(EnvSpec(kind="bits", word_bits=2, total_bits=16))
    assert env.vocab_size == 4 and env.length == 8
    env = make_env(EnvSpec(kind="bits", word_bits=3, total_bits=60))
    assert env.vocab_size == 8 and env.length == 20
    assert make_env(EnvSpec(kind="tfbind")).vocab_size == 4
    assert make_env(EnvSpec(kind="tfbind")).length == 8
    amp = make_env(EnvSpec(kind="amp"))
    assert amp.vocab_size == 20 and amp.length == 50
    with pytest.raises(ConfigError):
        make_env(EnvSpec(kind="bits", word_bits=3, total_bits=16))


def test_spec_validation_errors():
    with pytest.raises(ConfigError):
        make_env(EnvSpec(kind="grid", height=1))
    with pytest.raises(ConfigError):
        make_env(EnvSpec(kind="grid", height=4, obstacles=((0, 0),)))
    with pytest.raises(ConfigError):
        make_env(EnvSpec(kind="grid", height=4, obstacles=((4, 0),)))
    with pytest.raises(ConfigError):
        make_env(EnvSpec(kind="set", universe=3, target_size=4))
    with pytest.raises(ConfigError):
        make_env(EnvSpec(kind="grid", height=4, masked_goals=((5, 5),)))
    with pytest.raises(ConfigError):
        make_env(EnvSpec(kind="nope"))


def test_spec_hash_ignores_obstacles_but_not_structure():
    a = EnvSpec(kind="grid", height=8)
    b = EnvSpec(kind="grid", height=8, obstacles=((1, 1),), masked_goals=((2, 2),))
    c = EnvSpec(kind="grid", height=9)
    assert spec_hash(a) == spec_hash(b)
    assert spec_hash(a) != spec_hash(c)


def test_spec_dict_round_trip():
    spec = EnvSpec(
        kind="grid", height=5, obstacles=((1, 2), (3, 4)), masked_goals=((2, 2),)
    )
    assert spec_from_dict(spec_to_dict(spec)) == spec


def test_map_parsing():
    text = ".#.\n..G\n#..\n"
    height, obstacles, goals = parse_map_text(text)
    assert height == 3
    assert set(obstacles) == {(1, 0), (0, 2)}
    assert goals == ((2, 1),)
    with pytest.raises(ConfigError):
        parse_map_text("..\n...\n")
    with pytest.raises(ConfigError):
        parse_map_text("#.\n..\n")
    with pytest.raises(ConfigError):
        parse_map_text("x.\n..\n")
    spec = envs.with_map(EnvSpec(kind="grid", height=3), height, obstacles)
    env = make_env(spec)
    assert not env.goal_reachable((0, 2))
