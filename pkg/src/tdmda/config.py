"""Training configuration and its INI-style file format.

A config file must name every key; missing or unknown keys are errors so a
file on disk is always a complete record of a run.  ``dump_config`` writes
the canonical layout::

    [adaptation]
    lambda_f = 1.0
    ...
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass

REGIMES = ("source-only", "dann", "pmda", "cmda", "tdmda")

_REGIME_TOGGLES = {
    "source-only": (False, False, False),
    "dann": (True, False, False),
    "pmda": (True, True, False),
    "cmda": (True, False, True),
    "tdmda": (True, True, True),
}

# section -> ordered field names
_LAYOUT = {
    "adaptation": [
        "feature_adapt", "prob_adapt", "cmap_adapt",
        "lambda_f", "lambda_p", "lambda_c", "mc_samples",
    ],
    "model": ["dropout_rate"],
    "optimization": ["optimizer", "learning_rate", "momentum", "epochs", "batch_size"],
    "schedule": ["lambda_schedule", "ramp_gamma"],
    "run": ["seed", "eval_every", "eval_mc_samples", "record_wall_time", "debug_checks"],
}


@dataclass(frozen=True)
class TrainConfig:
    feature_adapt: bool = True
    prob_adapt: bool = True
    cmap_adapt: bool = True
    lambda_f: float = 1.0
    lambda_p: float = 1.0
    lambda_c: float = 1.0
    mc_samples: int = 8
    dropout_rate: float = 0.5
    optimizer: str = "sgd"
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 300
    batch_size: int = 64
    lambda_schedule: str = "rampup"
    ramp_gamma: float = 10.0
    seed: int = 0
    eval_every: int = 0  # steps; 0 evaluates only after the final step
    eval_mc_samples: int = 32
    record_wall_time: bool = False
    debug_checks: int = 0  # check the stop-gradient contract every N steps; 0 = off

    def __post_init__(self):
        for name in ("lambda_f", "lambda_p", "lambda_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.mc_samples < 1:
            raise ValueError(f"mc_samples must be >= 1, got {self.mc_samples}")
        if self.eval_mc_samples < 1:
            raise ValueError(f"eval_mc_samples must be >= 1, got {self.eval_mc_samples}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.lambda_schedule not in ("constant", "rampup"):
            raise ValueError(f"lambda_schedule must be 'constant' or 'rampup', got {self.lambda_schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")

    @property
    def regime(self) -> str:
        toggles = (self.feature_adapt, self.prob_adapt, self.cmap_adapt)
        for name, t in _REGIME_TOGGLES.items():
            if t == toggles:
                return name
        return "custom"

    def with_regime(self, regime: str) -> "TrainConfig":
        try:
            fa, pa, ca = _REGIME_TOGGLES[regime]
        except KeyError:
            raise ValueError(f"unknown regime {regime!r}; choose from {', '.join(REGIMES)}") from None
        return dataclasses.replace(self, feature_adapt=fa, prob_adapt=pa, cmap_adapt=ca)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ValueError(f"{source}: {exc}") from None
    values = {}
    for section in cp.sections():
        if section not in _LAYOUT:
            raise ValueError(f"{source}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in _LAYOUT[section]:
                raise ValueError(f"{source}: unknown key {key!r} in [{section}]")
            values[key] = _parse_value(key, raw)
    for section, keys in _LAYOUT.items():
        for key in keys:
            if key not in values:
                raise ValueError(f"{source}: missing config key {key!r} in [{section}]")
    return TrainConfig(**values)


def load_config(path: str) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read(), source=path)


def dump_config(cfg: TrainConfig) -> str:
    buf = io.StringIO()
    first = True
    for section, keys in _LAYOUT.items():
        if not first:
            buf.write("\n")
        first = False
        buf.write(f"[{section}]\n")
        for key in keys:
            v = getattr(cfg, key)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            buf.write(f"{key} = {v}\n")
    return buf.getvalue()
