"""Experiment configuration: flat ``key = value`` text or JSON with the same keys.

Grammar, one entry per line::

    # comment            ignored, as are blank lines
    key = value          key matches [a-z_][a-z0-9_]*; value is the rest of the line

Values are typed by the key: integers, reals, booleans (``true``/``false``)
or bare strings. Unknown or repeated keys are errors. A document whose first
non-blank character is ``{`` is read as a JSON object instead.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import asdict, dataclass, fields, replace

from .trainer import TrainProtocol

COMMANDS = ("pretrain", "quantize", "prune", "plain", "lottery", "theory", "sweep")
SWEEP_PARAMS = {"delta": "delta", "lambda": "lam", "gamma": "gamma", "t_s": "t_s", "divergence": "divergence"}
SUITES = ("theorem1", "theorem2", "contraction", "lemma1", "pl_checks", "all")
OUT_ENV = "DFCOMPRESS_OUT"

_KEY = re.compile(r"[a-z_][a-z0-9_]*$")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    command: str = "plain"
    seed: int = 0
    out: str = ""
    teacher: str = ""
    teacher_steps: int = 800
    # data-free protocol
    rounds: int = 2000
    generator_steps_per_round: int = 1
    student_steps_per_round: int = 10
    batch: int = 64
    lr_student: float = 2e-3
    lr_generator: float = 1e-3
    z_dim: int = 100
    warm_up_rounds: int = 0
    divergence: str = "KL"
    beta: float = 1.0
    gamma: float = 0.0
    lam: float = 0.0
    delta: float = 0.1
    t_s: float = 0.1
    student_width: str = "half"
    student_bn_mode: str = "eval"
    fresh_z_per_step: bool = False
    eval_every: int = 100
    probe_size: int = 1000
    check_every_step: bool = False
    wall_clock: bool = False
    # lottery
    lottery_setting: str = "supervised"
    lottery_eval_setting: str = "data_free"
    lottery_p: float = 0.2
    lottery_rounds: int = 3
    lottery_iterations: int = 150
    lottery_eval_iterations: int = 40
    lottery_seeds: int = 5
    # theory
    suite: str = "all"
    theory_iterations: int = 100000
    # sweep
    sweep_command: str = "quantize"
    sweep_param: str = ""
    sweep_values: str = ""
    jobs: int = 1

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"command must be one of {COMMANDS}, got {self.command!r}")
        if self.suite not in SUITES:
            raise ConfigError(f"suite must be one of {SUITES}, got {self.suite!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.command == "sweep":
            if self.sweep_param not in SWEEP_PARAMS:
                raise ConfigError(f"sweep_param must be one of {sorted(SWEEP_PARAMS)}")
            if not self.sweep_values.strip():
                raise ConfigError("sweep_values is empty")
            self.sweep_list()
        if self.command in ("quantize", "prune", "plain") or self.command == "sweep":
            self.protocol()

    def protocol(self, mode=None):
        mode = mode or (self.command if self.command in ("quantize", "prune", "plain") else self.sweep_command)
        kw = {f.name: getattr(self, f.name) for f in fields(TrainProtocol) if f.name != "mode"}
        try:
            return TrainProtocol(mode=mode, **kw)
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def sweep_list(self):
        items = [v.strip() for v in self.sweep_values.split(",") if v.strip()]
        if not items:
            raise ConfigError("sweep_values is empty")
        if self.sweep_param == "divergence":
            return items
        try:
            return [float(v) for v in items]
        except ValueError as err:
            raise ConfigError(f"unparseable sweep value: {err}") from err

    def arm(self, value):
        """Config of one sweep arm: same seed, one parameter changed."""
        return replace(self, command=self.sweep_command, sweep_param="", sweep_values="",
                       **{SWEEP_PARAMS[self.sweep_param]: value})

    def resolved_out(self):
        return self.out or os.path.join(os.environ.get(OUT_ENV, "runs"), self.command)


_TYPES = {f.name: type(f.default) for f in fields(ExperimentConfig)}


def _coerce(key, raw):
    kind = _TYPES[key]
    if isinstance(raw, str):
        text = raw.strip()
        if kind is bool:
            if text.lower() not in ("true", "false"):
                raise ConfigError(f"{key}: expected true/false, got {text!r}")
            return text.lower() == "true"
        if kind is int:
            try:
                return int(text)
            except ValueError:
                raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
        if kind is float:
            try:
                return float(text)
            except ValueError:
                raise ConfigError(f"{key}: expected a number, got {text!r}") from None
        return text
    if kind is bool and not isinstance(raw, bool):
        raise ConfigError(f"{key}: expected a boolean")
    if kind is int and (isinstance(raw, bool) or not isinstance(raw, int)):
        raise ConfigError(f"{key}: expected an integer")
    if kind is float and (isinstance(raw, bool) or not isinstance(raw, (int, float))):
        raise ConfigError(f"{key}: expected a number")
    if kind is str and not isinstance(raw, str):
        raise ConfigError(f"{key}: expected a string")
    return kind(raw)


def from_mapping(mapping, base=None):
    unknown = sorted(set(mapping) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _coerce(k, v) for k, v in mapping.items()}
    try:
        return replace(base, **values) if base is not None else ExperimentConfig(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from err


def parse_text(text):
    """Mapping of raw string values from flat key-value text."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not _KEY.match(key):
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        if key in out:
            raise ConfigError(f"line {n}: repeated key {key!r}")
        out[key] = value.strip()
    return out


def loads(text, base=None):
    if text.lstrip().startswith("{"):
        try:
            mapping = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"invalid JSON config: {err}") from err
        if not isinstance(mapping, dict):
            raise ConfigError("JSON config must be an object")
        return from_mapping(mapping, base)
    return from_mapping(parse_text(text), base)


def load(path, base=None):
    with open(path) as fh:
        return loads(fh.read(), base)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps(config):
    """Snapshot text; ``loads(dumps(c)) == c``."""
    return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(asdict(config).items()))


def to_json(config):
    return json.dumps(asdict(config), sort_keys=True, indent=1)
