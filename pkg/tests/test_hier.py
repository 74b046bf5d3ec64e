import numpy as np
import pytest

from goalflow.envs import EnvSpec, make_env
from goalflow.errors import ConfigError, ShapeError
from goalflow.hier import (
    HierSpec,
    compose,
    decompose_goal,
    hier_evaluate,
    hier_rollout,
    hier_train,
    slot_seed,
)
from goalflow.model import GCModel, load_model
from goalflow.objectives import ObjectiveConfig
from goalflow.trainer import TrainConfig


def test_decompose_slices_are_contiguous():
    goal = tuple(range(8))
    assert decompose_goal(goal, 2) == [(0, 1, 2, 3), (4, 5, 6, 7)]
    assert decompose_goal(goal, 1) == [goal]
    assert decompose_goal(goal, 8) == [(i,) for i in range(8)]


def test_decompose_rejects_non_divisors():
    with pytest.raises(ConfigError):
        decompose_goal((1, 2, 3), 2)
    with pytest.raises(ConfigError):
        decompose_goal((1, 2, 3), 0)


def test_compose_inverts_decompose_on_random_goals():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        length = int(rng.choice([4, 8, 12, 20]))
        goal = tuple(rng.integers(8, size=length))
        k = int(rng.choice([d for d in (1, 2, 4) if length % d == 0]))
        assert compose(decompose_goal(goal, k)) == goal


def test_compose_rejects_ragged_parts():
    with pytest.raises(ShapeError):
        compose([(1, 2), (3,)])
    with pytest.raises(ShapeError):
        compose([])


def test_hier_spec_derives_sub_task():
    spec = HierSpec(base=EnvSpec(kind="seq", vocab_size=8, length=20), k=4)
    assert spec.sub_spec.vocab_size == 8
    assert spec.sub_spec.length == 5
    bits = HierSpec(base=EnvSpec(kind="bits", word_bits=2, total_bits=16), k=4)
    assert bits.sub_spec.vocab_size == 4
    assert bits.sub_spec.length == 2
    with pytest.raises(ConfigError):
        HierSpec(base=EnvSpec(kind="seq", vocab_size=8, length=20), k=3)
    with pytest.raises(ConfigError):
        HierSpec(base=EnvSpec(kind="grid", height=4), k=2)


def test_slot_seeds_are_stable_and_distinct():
    seeds = [slot_seed(7, i) for i in range(4)]
    assert seeds == [slot_seed(7, i) for i in range(4)]
    assert len(set(seeds)) == 4
    assert seeds != [slot_seed(8, i) for i in range(4)]


def test_rollout_composes_slot_outputs():
    spec = HierSpec(base=EnvSpec(kind="seq", vocab_size=4, length=6), k=3)
    sub_env = make_env(spec.sub_spec)
    models = [
        GCModel(sub_env, hidden_sizes=(8,), rng=np.random.default_rng(i))
        for i in range(3)
    ]
    composed, success = hier_rollout(models, (1, 2, 3, 0, 1, 2), np.random.default_rng(0))
    assert len(composed) == 6
    assert all(0 <= s < 4 for s in composed)
    assert success == (composed == (1, 2, 3, 0, 1, 2))


def test_success_is_conjunctive_over_slots():
    # A solved slot model samples its slice exactly, so composing two solved
    # slots reproduces the goal and swapping one for an adversarial model
    # that fixates on the wrong slice breaks the whole composition.
    from goalflow.oracle import solve_flows

    spec = HierSpec(base=EnvSpec(kind="seq", vocab_size=3, length=4), k=2)
    sub_env = make_env(spec.sub_spec)
    goal = (1, 2, 0, 1)
    right = [solve_flows(sub_env, (1, 2)), solve_flows(sub_env, (0, 1))]
    rng = np.random.default_rng(5)
    composed, success = hier_rollout(right, goal, rng)
    assert success and composed == goal
    class Fixated:
        # Answers every goal query with the policy solved for (2, 2).
        def __init__(self, inner):
            self.inner = inner
            self.env = inner.env

        def predict(self, state, goal):
            return self.inner.predict(state, self.inner.goal)

    wrong = [right[0], Fixated(solve_flows(sub_env, (2, 2)))]
    composed, success = hier_rollout(wrong, goal, rng)
    assert not success and composed == (1, 2, 2, 2)


def test_hier_train_runs_and_checkpoints(tmp_path):
    spec = HierSpec(base=EnvSpec(kind="seq", vocab_size=3, length=4), k=2)
    config = TrainConfig(
        env=spec.base,
        objective=ObjectiveConfig(kind="db"),
        steps=20,
        rollouts=2,
        batch_size=8,
        hidden_sizes=(16,),
        eval_goals=4,
        eval_trials=2,
        seed=3,
    )
    models, reports = hier_train(spec, config, out_dir=tmp_path)
    assert len(models) == len(reports) == 2
    assert all(r.step == 10 for r in reports)
    for slot in range(2):
        model, meta = load_model(tmp_path / f"model_slot{slot}.npz")
        assert meta["slot"] == slot and meta["k"] == 2
        assert (tmp_path / f"slot{slot}" / "metrics.csv").exists()
    report = hier_evaluate(models, [(0, 1, 2, 0), (2, 2, 1, 1)], 3, np.random.default_rng(1))
    assert 0.0 <= report.success_rate <= 1.0
    with pytest.raises(ConfigError):
        hier_train(spec, type(config)(**{**config.__dict__, "steps": 1}))
