"""Flat ``key = value`` run configuration with typed keys.

Blank lines and ``#`` comments are ignored; every key may appear at most
once; unknown keys are errors. See docs/config_format.md for the key table.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from . import __version__
from .model import DATASET_DIMS, Dataset, PipelineModel, ToyLQ, make_dataset, mlp_model
from .protocol import (
    AQSGD,
    EPOCH_SHUFFLE,
    FIRST_VISIT_EXACT,
    MODES,
    UNIFORM,
    ZERO_INIT,
    ConfigError,
    TrainConfig,
)
from .quantize import IDENTITY, QuantizerSpec, Scheme, l2_spec, range_spec

SCHEMES = {"identity": Scheme.IDENTITY, "l2": Scheme.L2_STOCHASTIC, "range": Scheme.RANGE_UNIFORM}
EXECUTIONS = ("reference", "workers")


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _choice(*options):
    def parse(v: str) -> str:
        if v not in options:
            raise ValueError(f"expected one of {options}, got {v!r}")
        return v

    return parse


def _buffer_bits(v: str):
    return None if v.lower() == "full" else int(v)


def _lr(v: str):
    return "theorem" if v == "theorem" else float(v)


def _opt_int(v: str):
    return None if v.lower() == "none" else int(v)


@dataclass(frozen=True)
class RunSpec:
    """Everything a run needs: protocol settings plus dataset, model and execution."""

    mode: str = AQSGD
    stages: int = 2
    fw_scheme: str = "range"
    fw_bits: int = 4
    bw_scheme: str = "range"
    bw_bits: int = 8
    buffer_bits: int | None = None
    lr: float | str = 0.05
    epochs: int = 10
    steps: int | None = None
    sampling: str = EPOCH_SHUFFLE
    seed: int = 0
    warmup: str = FIRST_VISIT_EXACT
    sequential_update: bool = False
    dataset: str = "regression-mlp"
    n_samples: int = 256
    data_seed: int = 1
    hidden: int = 16
    layers: int = 4
    execution: str = "reference"
    analysis: bool = False

    def __post_init__(self):
        if self.dataset not in DATASET_DIMS:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.execution not in EXECUTIONS:
            raise ConfigError(f"execution must be one of {EXECUTIONS}")
        for side in ("fw", "bw"):
            if getattr(self, f"{side}_scheme") not in SCHEMES:
                raise ConfigError(f"{side}_scheme must be one of {sorted(SCHEMES)}")
        if self.dataset == "toy-lq" and self.stages != 2:
            raise ConfigError("the toy-lq model has exactly 2 stages")
        if self.dataset != "toy-lq" and not 2 <= self.stages <= self.layers:
            raise ConfigError(f"stages must be in [2, layers={self.layers}]")
        try:
            self.fw_spec(), self.bw_spec()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        self.train_config()

    def fw_spec(self) -> QuantizerSpec:
        return _spec(self.fw_scheme, self.fw_bits)

    def bw_spec(self) -> QuantizerSpec:
        return _spec(self.bw_scheme, self.bw_bits)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            mode=self.mode, K=self.stages, fw=self.fw_spec(), bw=self.bw_spec(),
            buffer_bits=self.buffer_bits, lr=self.lr, epochs=self.epochs, steps=self.steps,
            sampling=self.sampling, seed=self.seed, warmup=self.warmup,
            sequential_update=self.sequential_update,
        )

    def with_(self, **kw) -> "RunSpec":
        return replace(self, **kw)

    def build(self) -> tuple[PipelineModel, Dataset, ToyLQ | None]:
        data = make_dataset(self.dataset, self.n_samples, self.data_seed)
        if self.dataset == "toy-lq":
            toy = ToyLQ(n=data.in_dim, h=data.out_dim)
            return toy.model(), data, toy
        return mlp_model(data.in_dim, data.out_dim, self.stages, self.hidden, self.layers), data, None

    def initial_params(self, model, toy):
        return toy.init_params(self.seed) if toy is not None else model.init_params(self.seed)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "buffer_bits":
                v = "full" if v is None else v
            elif v is None:
                v = "none"
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _spec(scheme: str, bits: int) -> QuantizerSpec:
    s = SCHEMES[scheme]
    if s == Scheme.IDENTITY:
        return IDENTITY
    return l2_spec(bits) if s == Scheme.L2_STOCHASTIC else range_spec(bits)


PARSERS = {
    "mode": _choice(*MODES),
    "stages": int,
    "fw_scheme": _choice(*SCHEMES),
    "fw_bits": int,
    "bw_scheme": _choice(*SCHEMES),
    "bw_bits": int,
    "buffer_bits": _buffer_bits,
    "lr": _lr,
    "epochs": int,
    "steps": _opt_int,
    "sampling": _choice(EPOCH_SHUFFLE, UNIFORM),
    "seed": int,
    "warmup": _choice(FIRST_VISIT_EXACT, ZERO_INIT),
    "sequential_update": _bool,
    "dataset": _choice(*DATASET_DIMS),
    "n_samples": int,
    "data_seed": int,
    "hidden": int,
    "layers": int,
    "execution": _choice(*EXECUTIONS),
    "analysis": _bool,
}
assert set(PARSERS) == {f.name for f in fields(RunSpec)}


def parse_value(key: str, raw: str):
    if key not in PARSERS:
        raise ConfigError(f"unknown key {key!r}")
    try:
        return PARSERS[key](raw.strip())
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from None


def parse_config(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = parse_value(key, raw)
    return out


def load_spec(text: str = "", **overrides) -> RunSpec:
    values = parse_config(text)
    values.update({k: v for k, v in overrides.items()})
    for k in values:
        if k not in PARSERS:
            raise ConfigError(f"unknown key {k!r}")
    return RunSpec(**values)


@dataclass
class RunManifest:
    """Reproducible description of a run; re-running it reproduces its outputs."""

    config: str
    seeds: list
    outputs: dict = field(default_factory=dict)
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))
