"""Goal-augmented construction environments.

Every environment is a finite DAG over partially built objects. A forward
action grows the object, a backward action removes the last possible piece,
and terminal objects map onto goals through an identity attainment map.
Rewards are the exact-match indicator: 1 when the finished object equals the
commanded goal (within ``epsilon``, which is 0 for these discrete tasks and
a mismatch counts as infinitely far), else 0.

Families:

* ``grid``: an H x H lattice walked monotonically from (0, 0) with +x / +y
  moves plus an explicit stop action. Cells may be blocked as obstacles;
  the goal is the cell where the walk stopped.
* ``set``: unordered subsets of a universe, built one element at a time up
  to a fixed target size.
* ``bits`` / ``tfbind`` / ``amp`` / ``seq``: fixed-length strings assembled
  word by word, with both prepend and append actions. ``bits`` derives its
  vocabulary (2**word_bits) and word count (total_bits / word_bits) from a
  bit-string reading; ``tfbind`` (vocab 4, length 8) and ``amp`` (vocab 20,
  length 50) are presets of the same machinery.

State and goal payloads are plain tuples of ints so they hash, compare, and
serialize without ceremony. Grid states carry a stopped flag: ``(x, y, f)``.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    ConfigError,
    EnumerationCapError,
    InvalidActionError,
    NonTerminalStateError,
    NoParentError,
    TerminalStateError,
    UnreachableGoalError,
)

GOAL_UNIVERSE_CAP = 1_000_000

SEQUENCE_KINDS = ("bits", "tfbind", "amp", "seq")


@dataclass(frozen=True)
class EnvSpec:
    """Declarative description of one environment instance.

    Only the fields for the chosen ``kind`` need to be set; the rest keep
    their zero defaults. ``masked_goals`` lists goals that ``sample_goal``
    must never draw (they stay reachable, for held-out evaluation).
    """

    kind: str
    height: int = 0
    obstacles: tuple[tuple[int, int], ...] = ()
    universe: int = 0
    target_size: int = 0
    word_bits: int = 0
    total_bits: int = 0
    vocab_size: int = 0
    length: int = 0
    epsilon: float = 0.0
    masked_goals: tuple[tuple[int, ...], ...] = ()

    def structural_fields(self) -> dict:
        """The fields that fix encodings and action spaces.

        Obstacles and masked goals reshape which states are visitable, not
        how states are encoded, so two specs differing only there are
        checkpoint-compatible.
        """
        return {
            "kind": self.kind,
            "height": self.height,
            "universe": self.universe,
            "target_size": self.target_size,
            "word_bits": self.word_bits,
            "total_bits": self.total_bits,
            "vocab_size": self.vocab_size,
            "length": self.length,
            "epsilon": self.epsilon,
        }


def spec_hash(spec: EnvSpec) -> str:
    """Short digest of the structural fields, stored in checkpoints."""
    blob = json.dumps(spec.structural_fields(), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def spec_to_dict(spec: EnvSpec) -> dict:
    return {
        "kind": spec.kind,
        "height": spec.height,
        "obstacles": [list(c) for c in spec.obstacles],
        "universe": spec.universe,
        "target_size": spec.target_size,
        "word_bits": spec.word_bits,
        "total_bits": spec.total_bits,
        "vocab_size": spec.vocab_size,
        "length": spec.length,
        "epsilon": spec.epsilon,
        "masked_goals": [list(g) for g in spec.masked_goals],
    }


def spec_from_dict(d: dict) -> EnvSpec:
    return EnvSpec(
        kind=str(d["kind"]),
        height=int(d.get("height", 0)),
        obstacles=tuple(tuple(int(v) for v in c) for c in d.get("obstacles", ())),
        universe=int(d.get("universe", 0)),
        target_size=int(d.get("target_size", 0)),
        word_bits=int(d.get("word_bits", 0)),
        total_bits=int(d.get("total_bits", 0)),
        vocab_size=int(d.get("vocab_size", 0)),
        length=int(d.get("length", 0)),
        epsilon=float(d.get("epsilon", 0.0)),
        masked_goals=tuple(
            tuple(int(v) for v in g) for g in d.get("masked_goals", ())
        ),
    )


def parse_map_text(text: str) -> tuple[int, tuple, tuple]:
    """Parse a square ASCII map into ``(height, obstacles, goal_cells)``.

    Row i of the file is the y = i rank (top to bottom), column j is x = j.
    ``.`` marks a free cell, ``#`` an obstacle, ``G`` a free cell collected
    into the goal list. The start corner (0, 0) must be free.
    """
    rows = [line for line in text.splitlines() if line.strip()]
    if not rows:
        raise ConfigError("map is empty")
    height = len(rows)
    obstacles = []
    goals = []
    for y, row in enumerate(rows):
        row = row.strip()
        if len(row) != height:
            raise ConfigError(
                f"map row {y} has width {len(row)}, expected square side {height}"
            )
        for x, ch in enumerate(row):
            if ch == "#":
                obstacles.append((x, y))
            elif ch == "G":
                goals.append((x, y))
            elif ch != ".":
                raise ConfigError(f"map row {y} col {x}: unknown cell {ch!r}")
    if (0, 0) in obstacles:
        raise ConfigError("map blocks the start corner (0, 0)")
    return height, tuple(obstacles), tuple(goals)


def load_map_file(path) -> tuple[int, tuple, tuple]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_map_text(fh.read())


class GridEnv:
    """Monotone walk on an H x H lattice with an explicit stop action.

    Forward actions: 0 = +x, 1 = +y, 2 = stop. Backward actions mirror
    them: 0 = -x, 1 = -y, 2 = un-stop. A stopped state's only parent is the
    same cell un-stopped, so stop transitions carry backward probability 1.

    A backward step may only move onto a cell from which the start corner
    can still be reached through free cells; this keeps parent sets exactly
    dual to the forward-reachable DAG when obstacles are present.
    """

    kind_family = "grid"

    def __init__(self, spec: EnvSpec):
        if spec.height < 2:
            raise ConfigError(f"grid height must be >= 2, got {spec.height}")
        self.spec = spec
        self.height = spec.height
        h = spec.height
        self._blocked = np.zeros((h, h), dtype=bool)
        for (x, y) in spec.obstacles:
            if not (0 <= x < h and 0 <= y < h):
                raise ConfigError(f"obstacle {(x, y)} outside the {h}x{h} grid")
            self._blocked[x, y] = True
        if self._blocked[0, 0]:
            raise ConfigError("obstacle blocks the start corner (0, 0)")
        # Monotone reachability from (0, 0) through free cells.
        reach = np.zeros((h, h), dtype=bool)
        for x in range(h):
            for y in range(h):
                if self._blocked[x, y]:
                    continue
                if x == 0 and y == 0:
                    reach[x, y] = True
                else:
                    reach[x, y] = (x > 0 and reach[x - 1, y]) or (
                        y > 0 and reach[x, y - 1]
                    )
        self._reach = reach
        self._goal_cells = [
            (x, y) for x in range(h) for y in range(h) if reach[x, y]
        ]
        _validate_masked_goals(self, spec.masked_goals)
        masked = set(spec.masked_goals)
        self._sample_cells = [g for g in self._goal_cells if g not in masked]

    @property
    def forward_actions(self) -> int:
        return 3

    @property
    def backward_actions(self) -> int:
        return 3

    @property
    def encoding_length(self) -> int:
        return 4 * self.height

    @property
    def horizon(self) -> int:
        return 2 * (self.height - 1) + 1

    def initial_state(self) -> tuple:
        return (0, 0, 0)

    def is_terminal(self, state) -> bool:
        return state[2] == 1

    def _check_cell(self, state) -> None:
        x, y, f = state
        if not (0 <= x < self.height and 0 <= y < self.height) or f not in (0, 1):
            raise InvalidActionError(f"state {state} is not on the grid")

    def forward_action_mask(self, state) -> np.ndarray:
        if self.is_terminal(state):
            raise TerminalStateError(f"state {state} is terminal")
        x, y, _ = state
        h = self.height
        return np.array(
            [
                x + 1 < h and not self._blocked[x + 1, y],
                y + 1 < h and not self._blocked[x, y + 1],
                True,
            ],
            dtype=bool,
        )

    def apply_forward(self, state, action: int):
        mask = self.forward_action_mask(state)
        if not (0 <= action < 3 and mask[action]):
            raise InvalidActionError(f"forward action {action} invalid at {state}")
        x, y, _ = state
        if action == 0:
            return (x + 1, y, 0)
        if action == 1:
            return (x, y + 1, 0)
        return (x, y, 1)

    def backward_action_mask(self, state) -> np.ndarray:
        x, y, f = state
        if state == self.initial_state():
            raise NoParentError("initial state has no parents")
        if f == 1:
            return np.array([False, False, True], dtype=bool)
        return np.array(
            [
                x > 0 and self._reach[x - 1, y],
                y > 0 and self._reach[x, y - 1],
                False,
            ],
            dtype=bool,
        )

    def apply_backward(self, state, action: int):
        mask = self.backward_action_mask(state)
        if not (0 <= action < 3 and mask[action]):
            raise InvalidActionError(f"backward action {action} invalid at {state}")
        x, y, _ = state
        if action == 0:
            return (x - 1, y, 0)
        if action == 1:
            return (x, y - 1, 0)
        return (x, y, 0)

    def forward_to_backward_action(self, state, action: int) -> int:
        # Forward action indices line up with the backward index that undoes
        # them at the child: +x/-x, +y/-y, stop/un-stop.
        return action

    def backward_to_forward_action(self, state, action: int) -> int:
        return action

    def goal_of(self, state) -> tuple:
        if not self.is_terminal(state):
            raise NonTerminalStateError(f"state {state} has not stopped")
        return (state[0], state[1])

    def reward(self, state, goal) -> int:
        distance = 0.0 if self.goal_of(state) == tuple(goal) else math.inf
        return 1 if distance <= self.spec.epsilon else 0

    def goal_reachable(self, goal) -> bool:
        x, y = goal
        return (
            0 <= x < self.height and 0 <= y < self.height and bool(self._reach[x, y])
        )

    def terminal_state(self, goal) -> tuple:
        if not self.goal_reachable(goal):
            raise UnreachableGoalError(f"goal {tuple(goal)} is not reachable")
        return (goal[0], goal[1], 1)

    def sample_goal(self, rng: np.random.Generator) -> tuple:
        return self._sample_cells[int(rng.integers(len(self._sample_cells)))]

    def goal_universe(self, cap: int = GOAL_UNIVERSE_CAP) -> list:
        if len(self._goal_cells) > cap:
            raise EnumerationCapError(
                f"{len(self._goal_cells)} goals exceed cap {cap}"
            )
        return list(self._goal_cells)

    def encode_batch(self, states, goals) -> np.ndarray:
        h = self.height
        n = len(states)
        out = np.zeros((n, 4 * h), dtype=np.float64)
        idx = np.arange(n)
        arr = np.asarray(states, dtype=np.int64)
        g = np.asarray(goals, dtype=np.int64)
        out[idx, arr[:, 0]] = 1.0
        out[idx, h + arr[:, 1]] = 1.0
        out[idx, 2 * h + g[:, 0]] = 1.0
        out[idx, 3 * h + g[:, 1]] = 1.0
        return out

    def encode(self, state, goal) -> np.ndarray:
        return self.encode_batch([state], [goal])[0]


class SetEnv:
    """Unordered subsets of ``range(universe)`` grown to ``target_size``.

    States are sorted tuples. Forward action e adds element e; backward
    action e removes it. Goals are target-size subsets, order-free by the
    sorted canonical form.
    """

    kind_family = "set"

    def __init__(self, spec: EnvSpec):
        if spec.universe < 1:
            raise ConfigError(f"set universe must be >= 1, got {spec.universe}")
        if not (1 <= spec.target_size <= spec.universe):
            raise ConfigError(
                f"target size {spec.target_size} must be in [1, {spec.universe}]"
            )
        self.spec = spec
        self.universe = spec.universe
        self.target_size = spec.target_size
        _validate_masked_goals(self, spec.masked_goals)
        self._masked = frozenset(spec.masked_goals)
        if math.comb(spec.universe, spec.target_size) <= len(self._masked):
            raise ConfigError("masked goals exclude every goal")

    @property
    def forward_actions(self) -> int:
        return self.universe

    @property
    def backward_actions(self) -> int:
        return self.universe

    @property
    def encoding_length(self) -> int:
        return 2 * self.universe

    @property
    def horizon(self) -> int:
        return self.target_size

    def initial_state(self) -> tuple:
        return ()

    def is_terminal(self, state) -> bool:
        return len(state) == self.target_size

    def forward_action_mask(self, state) -> np.ndarray:
        if self.is_terminal(state):
            raise TerminalStateError(f"state {state} is terminal")
        mask = np.ones(self.universe, dtype=bool)
        mask[list(state)] = False
        return mask

    def apply_forward(self, state, action: int):
        if self.is_terminal(state):
            raise TerminalStateError(f"state {state} is terminal")
        if not (0 <= action < self.universe) or action in state:
            raise InvalidActionError(f"forward action {action} invalid at {state}")
        return tuple(sorted(state + (action,)))

    def backward_action_mask(self, state) -> np.ndarray:
        if len(state) == 0:
            raise NoParentError("initial state has no parents")
        mask = np.zeros(self.universe, dtype=bool)
        mask[list(state)] = True
        return mask

    def apply_backward(self, state, action: int):
        if not (0 <= action < self.universe) or action not in state:
            raise InvalidActionError(f"backward action {action} invalid at {state}")
        return tuple(e for e in state if e != action)

    def forward_to_backward_action(self, state, action: int) -> int:
        return action

    def backward_to_forward_action(self, state, action: int) -> int:
        return action

    def goal_of(self, state) -> tuple:
        if not self.is_terminal(state):
            raise NonTerminalStateError(f"state {state} is not a full set")
        return state

    def reward(self, state, goal) -> int:
        distance = 0.0 if self.goal_of(state) == tuple(goal) else math.inf
        return 1 if distance <= self.spec.epsilon else 0

    def goal_reachable(self, goal) -> bool:
        goal = tuple(goal)
        return (
            len(goal) == self.target_size
            and len(set(goal)) == self.target_size
            and all(0 <= e < self.universe for e in goal)
            and goal == tuple(sorted(goal))
        )

    def terminal_state(self, goal) -> tuple:
        goal = tuple(goal)
        if not self.goal_reachable(goal):
            raise UnreachableGoalError(f"goal {goal} is not a valid subset")
        return goal

    def sample_goal(self, rng: np.random.Generator) -> tuple:
        while True:
            goal = tuple(
                sorted(rng.choice(self.universe, size=self.target_size, replace=False))
            )
            goal = tuple(int(e) for e in goal)
            if goal not in self._masked:
                return goal

    def goal_universe(self, cap: int = GOAL_UNIVERSE_CAP) -> list:
        count = math.comb(self.universe, self.target_size)
        if count > cap:
            raise EnumerationCapError(f"{count} goals exceed cap {cap}")
        return [
            tuple(c) for c in itertools.combinations(range(self.universe), self.target_size)
        ]

    def encode_batch(self, states, goals) -> np.ndarray:
        u = self.universe
        out = np.zeros((len(states), 2 * u), dtype=np.float64)
        rows, cols = [], []
        for i, s in enumerate(states):
            rows.extend([i] * len(s))
            cols.extend(s)
        out[rows, cols] = 1.0
        rows, cols = [], []
        for i, g in enumerate(goals):
            rows.extend([i] * len(g))
            cols.extend(u + e for e in g)
        out[rows, cols] = 1.0
        return out

    def encode(self, state, goal) -> np.ndarray:
        return self.encode_batch([state], [goal])[0]


class SequenceEnv:
    """Fixed-length strings built by prepending or appending words.

    Forward action a < V prepends word a; action V + a appends word a.
    Backward action 0 removes the front word, 1 the back word. States and
    goals are tuples of word indices; goals have the full length.
    """

    kind_family = "seq"

    def __init__(self, spec: EnvSpec, vocab_size: int, length: int):
        if vocab_size < 1 or length < 1:
            raise ConfigError(
                f"sequence needs vocab >= 1 and length >= 1, got {vocab_size}, {length}"
            )
        self.spec = spec
        self.vocab_size = vocab_size
        self.length = length
        _validate_masked_goals(self, spec.masked_goals)
        self._masked = frozenset(spec.masked_goals)
        if float(vocab_size) ** length <= len(self._masked):
            raise ConfigError("masked goals exclude every goal")

    @property
    def forward_actions(self) -> int:
        return 2 * self.vocab_size

    @property
    def backward_actions(self) -> int:
        return 2

    @property
    def encoding_length(self) -> int:
        return 2 * (self.length * self.vocab_size + self.length + 1)

    @property
    def horizon(self) -> int:
        return self.length

    def initial_state(self) -> tuple:
        return ()

    def is_terminal(self, state) -> bool:
        return len(state) == self.length

    def forward_action_mask(self, state) -> np.ndarray:
        if self.is_terminal(state):
            raise TerminalStateError(f"state {state} is terminal")
        return np.ones(2 * self.vocab_size, dtype=bool)

    def apply_forward(self, state, action: int):
        if self.is_terminal(state):
            raise TerminalStateError(f"state {state} is terminal")
        v = self.vocab_size
        if not 0 <= action < 2 * v:
            raise InvalidActionError(f"forward action {action} invalid at {state}")
        if action < v:
            return (action,) + state
        return state + (action - v,)

    def backward_action_mask(self, state) -> np.ndarray:
        if len(state) == 0:
            raise NoParentError("initial state has no parents")
        return np.ones(2, dtype=bool)

    def apply_backward(self, state, action: int):
        if len(state) == 0:
            raise NoParentError("initial state has no parents")
        if action == 0:
            return state[1:]
        if action == 1:
            return state[:-1]
        raise InvalidActionError(f"backward action {action} invalid at {state}")

    def forward_to_backward_action(self, state, action: int) -> int:
        # A prepend is undone by removing the front, an append the back.
        return 0 if action < self.vocab_size else 1

    def backward_to_forward_action(self, state, action: int) -> int:
        if action == 0:
            return state[0]
        return self.vocab_size + state[-1]

    def goal_of(self, state) -> tuple:
        if not self.is_terminal(state):
            raise NonTerminalStateError(f"state {state} is not full length")
        return state

    def reward(self, state, goal) -> int:
        distance = 0.0 if self.goal_of(state) == tuple(goal) else math.inf
        return 1 if distance <= self.spec.epsilon else 0

    def goal_reachable(self, goal) -> bool:
        goal = tuple(goal)
        return len(goal) == self.length and all(
            0 <= w < self.vocab_size for w in goal
        )

    def terminal_state(self, goal) -> tuple:
        goal = tuple(goal)
        if not self.goal_reachable(goal):
            raise UnreachableGoalError(f"goal {goal} is not a valid string")
        return goal

    def sample_goal(self, rng: np.random.Generator) -> tuple:
        while True:
            goal = tuple(
                int(w) for w in rng.integers(self.vocab_size, size=self.length)
            )
            if goal not in self._masked:
                return goal

    def goal_universe(self, cap: int = GOAL_UNIVERSE_CAP) -> list:
        count = self.vocab_size**self.length
        if count > cap:
            raise EnumerationCapError(f"{count} goals exceed cap {cap}")
        return [tuple(p) for p in itertools.product(range(self.vocab_size), repeat=self.length)]

    def encode_batch(self, states, goals) -> np.ndarray:
        v, m = self.vocab_size, self.length
        block = m * v + m + 1
        out = np.zeros((len(states), 2 * block), dtype=np.float64)
        rows, cols = [], []
        for i, s in enumerate(states):
            rows.extend([i] * (len(s) + 1))
            cols.extend(j * v + w for j, w in enumerate(s))
            cols.append(m * v + len(s))
        out[rows, cols] = 1.0
        rows, cols = [], []
        for i, g in enumerate(goals):
            rows.extend([i] * (len(g) + 1))
            cols.extend(block + j * v + w for j, w in enumerate(g))
            cols.append(block + m * v + len(g))
        out[rows, cols] = 1.0
        return out

    def encode(self, state, goal) -> np.ndarray:
        return self.encode_batch([state], [goal])[0]


def _validate_masked_goals(env, masked_goals) -> None:
    for g in masked_goals:
        if not env.goal_reachable(tuple(g)):
            raise ConfigError(f"masked goal {tuple(g)} is not a reachable goal")


def sequence_shape(spec: EnvSpec) -> tuple[int, int]:
    """Resolve ``(vocab_size, length)`` for any sequence-family spec."""
    if spec.kind == "bits":
        if spec.word_bits < 1:
            raise ConfigError("bits env needs word_bits >= 1")
        if spec.total_bits < 1 or spec.total_bits % spec.word_bits != 0:
            raise ConfigError(
                f"total_bits {spec.total_bits} must be a positive multiple of"
                f" word_bits {spec.word_bits}"
            )
        return 2**spec.word_bits, spec.total_bits // spec.word_bits
    if spec.kind == "tfbind":
        return spec.vocab_size or 4, spec.length or 8
    if spec.kind == "amp":
        return spec.vocab_size or 20, spec.length or 50
    if spec.kind == "seq":
        return spec.vocab_size, spec.length
    raise ConfigError(f"{spec.kind} is not a sequence kind")


def make_env(spec: EnvSpec):
    """Instantiate the environment described by ``spec``."""
    if spec.kind == "grid":
        return GridEnv(spec)
    if spec.kind == "set":
        return SetEnv(spec)
    if spec.kind in SEQUENCE_KINDS:
        vocab, length = sequence_shape(spec)
        return SequenceEnv(spec, vocab_size=vocab, length=length)
    raise ConfigError(f"unknown env kind {spec.kind!r}")


def with_map(spec: EnvSpec, height: int, obstacles, masked_goals=None) -> EnvSpec:
    """Rebuild a grid spec with a new obstacle layout (same structure)."""
    if spec.kind != "grid":
        raise ConfigError("maps only apply to grid envs")
    if height != spec.height:
        raise ConfigError(
            f"map side {height} does not match the spec height {spec.height}"
        )
    return replace(
        spec,
        obstacles=tuple(obstacles),
        masked_goals=tuple(masked_goals) if masked_goals is not None else spec.masked_goals,
    )
