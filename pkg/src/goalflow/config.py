"""Run configuration files.

A run is described by a flat INI file with four sections: ``[env]`` (the
task), ``[objective]`` (the balance loss), ``[train]`` (budget, optimizer,
data mode, artifacts), and ``[eval]`` (the goal protocol for standalone
evaluation). Unknown sections or keys are rejected with the offending line
number so typos cannot silently fall back to defaults. ``RunConfig`` round
trips losslessly: parsing the rendered INI reproduces the value, which is
what makes the per-run ``resolved.ini`` snapshot sufficient to replay a run.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass

from .envs import EnvSpec, load_map_file, with_map
from .errors import ConfigError
from .objectives import ObjectiveConfig
from .trainer import TrainConfig

EVAL_PROTOCOLS = ("train", "masked", "all")

# [env] keys are EnvSpec fields plus the map_file convenience.
_ENV_KEYS = {
    "kind": str,
    "height": int,
    "obstacles": "pairs",
    "universe": int,
    "target_size": int,
    "word_bits": int,
    "total_bits": int,
    "vocab_size": int,
    "length": int,
    "epsilon": float,
    "masked_goals": "tuples",
    "map_file": str,
}

_OBJECTIVE_KEYS = {
    "kind": str,
    "intensification": float,
    "reward_floor": float,
    "subtb_lambda": float,
    "gamma0": float,
}

_TRAIN_KEYS = {
    "name": str,
    "out": str,
    "steps": int,
    "rollouts": int,
    "batch_size": int,
    "learning_rate": float,
    "data_mode": str,
    "seed": int,
    "hidden_sizes": "ints",
    "buffer_capacity": int,
    "adam_beta1": float,
    "adam_beta2": float,
    "adam_eps": float,
    "eval_cadence": int,
    "eval_goals": int,
    "eval_trials": int,
    "checkpoint_cadence": int,
    "dump_buffer": int,
    "hier_k": int,
    "dqn_discount": float,
    "dqn_epsilon_final": float,
    "dqn_epsilon_frac": float,
    "dqn_target_sync": int,
}

_EVAL_KEYS = {
    "protocol": str,
    "trials": int,
}

# Bit tasks need the success reward scaled up with the goal space; other
# kinds train unscaled. Applied only when the config leaves C unset.
_BITS_C_DEFAULTS = ((40, 1e7), (60, 1e25))


def default_intensification(spec: EnvSpec) -> float:
    """Default reward scaling constant for an environment."""
    if spec.kind != "bits":
        return 1.0
    for limit, c in _BITS_C_DEFAULTS:
        if spec.total_bits <= limit:
            return c
    return 1e40

_SECTIONS = {
    "env": _ENV_KEYS,
    "objective": _OBJECTIVE_KEYS,
    "train": _TRAIN_KEYS,
    "eval": _EVAL_KEYS,
}


@dataclass
class RunConfig:
    """Everything one run needs: task, loss, budget, outputs, protocol."""

    train: TrainConfig
    name: str = "run"
    out: str = ""
    eval_protocol: str = "train"
    eval_trials: int = 20

    def __post_init__(self):
        if self.eval_protocol not in EVAL_PROTOCOLS:
            raise ConfigError(f"unknown eval protocol {self.eval_protocol!r}")
        if self.eval_trials < 1:
            raise ConfigError("eval trials must be >= 1")


def _line_of(text: str, section: str, key: str | None = None) -> int:
    """Best-effort line number of a section header or key for messages."""
    pattern = (
        rf"^\s*\[{re.escape(section)}\]"
        if key is None
        else rf"^\s*{re.escape(key)}\s*[=:]"
    )
    in_section = key is None
    for i, line in enumerate(text.splitlines(), start=1):
        if key is not None and re.match(rf"^\s*\[{re.escape(section)}\]", line):
            in_section = True
            continue
        if key is not None and re.match(r"^\s*\[", line):
            in_section = False
        if in_section and re.match(pattern, line):
            return i
    return 0


def _parse_ints(raw: str) -> tuple:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(v) for v in raw.split(","))


def _parse_tuples(raw: str) -> tuple:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(_parse_ints(group) for group in raw.split(";"))


def _render_tuples(groups) -> str:
    return "; ".join(",".join(str(v) for v in g) for g in groups)


def _convert(section: str, key: str, raw: str, text: str):
    kind = _SECTIONS[section][key]
    try:
        if kind == "ints":
            return _parse_ints(raw)
        if kind in ("pairs", "tuples"):
            return _parse_tuples(raw)
        return kind(raw)
    except ValueError as exc:
        line = _line_of(text, section, key)
        raise ConfigError(f"line {line}: bad value for {section}.{key}: {exc}")


def from_ini(text: str, base_dir=None) -> RunConfig:
    """Parse an INI config; unknown keys fail with their line number."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}")
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    for section in parser.sections():
        if section not in _SECTIONS:
            line = _line_of(text, section)
            raise ConfigError(f"line {line}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                line = _line_of(text, section, key)
                raise ConfigError(f"line {line}: unknown key {section}.{key}")
            values[section][key] = _convert(section, key, raw, text)

    env_values = values["env"]
    if "kind" not in env_values:
        raise ConfigError("config needs env.kind")
    map_file = env_values.pop("map_file", "")
    spec = EnvSpec(**env_values)
    if map_file:
        path = map_file if base_dir is None else f"{base_dir}/{map_file}"
        height, obstacles, goals = load_map_file(path)
        spec = with_map(spec, height, obstacles, masked_goals=spec.masked_goals)

    objective_values = dict(values["objective"])
    if "intensification" not in objective_values:
        objective_values["intensification"] = default_intensification(spec)
    objective = ObjectiveConfig(**objective_values)

    train_values = dict(values["train"])
    name = train_values.pop("name", "run")
    out = train_values.pop("out", "")
    train = TrainConfig(env=spec, objective=objective, **train_values)

    eval_values = values["eval"]
    return RunConfig(
        train=train,
        name=name,
        out=out,
        eval_protocol=eval_values.get("protocol", "train"),
        eval_trials=eval_values.get("trials", 20),
    )


def _render_value(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return _render_tuples(value)
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def to_ini(config: RunConfig) -> str:
    """Render a config to INI text that parses back to an equal value."""
    spec = config.train.env
    lines = ["[env]"]
    for name in _ENV_KEYS:
        if name == "map_file":
            continue  # resolved into explicit obstacles at load time
        lines.append(f"{name} = {_render_value(getattr(spec, name))}")
    lines += ["", "[objective]"]
    for name in _OBJECTIVE_KEYS:
        lines.append(f"{name} = {_render_value(getattr(config.train.objective, name))}")
    lines += ["", "[train]"]
    lines.append(f"name = {config.name}")
    lines.append(f"out = {config.out}")
    for name in _TRAIN_KEYS:
        if name in ("name", "out"):
            continue
        lines.append(f"{name} = {_render_value(getattr(config.train, name))}")
    lines += ["", "[eval]"]
    lines.append(f"protocol = {config.eval_protocol}")
    lines.append(f"trials = {config.eval_trials}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}")
    base_dir = "/".join(str(path).split("/")[:-1]) or "."
    return from_ini(text, base_dir=base_dir)


def save_config(path, config: RunConfig) -> None:
    with open(path, "w") as fh:
        fh.write(to_ini(config))
