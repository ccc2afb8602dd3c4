"""Experiment configuration: a flat ``key = value`` file, one key per field.

Blank lines and ``#`` comments are ignored. Lists are comma separated,
booleans are true/false, ``inf`` is accepted for floats.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidConfig
from .evaluation import METHODS
from .fqi import (
    EVALUATION,
    ITERATION,
    PER_ACTION,
    UNION,
    DataDrivenPenalty,
    FixedPenalty,
    FixedThreshold,
    ScaledThreshold,
)
from .rng import BIT_GENERATORS

MODES = {"fqe": EVALUATION, "fqi": ITERATION}


@dataclass(frozen=True)
class ExperimentConfig:
    # environment
    d: int = 50
    support_size: int = 10
    num_actions: int = 2
    horizon: int = 5
    discount: float = 0.9
    sigma_s: float = 0.4
    sigma_r: float = 0.6
    beta_min_floor: float = 0.5
    spectral_cap: float = 0.9
    initial_sd: float = 1.0
    # design of the study
    sample_sizes: tuple[int, ...] = (100, 250, 500, 1000, 2000, 4000)
    replications: int = 50
    n_oracle: int = 20_000
    num_eval_states: int = 1000
    methods: tuple[str, ...] = METHODS
    fixed_policies: bool = False
    # estimator
    mode: str = "fqe"
    penalty_rule: str = "data_driven"
    penalty: float = 0.0
    alpha: float = 0.05
    c: float = 1.1
    num_sim: int = 500
    refinements: int = 20
    sigma_residual: str = "post_ols"
    threshold_rule: str = "scaled"
    threshold_scale: float = 2.0
    threshold: float = 0.0
    support_pooling: str = UNION
    lasso_tol: float = 1e-8
    lasso_max_iters: int = 10_000
    # bookkeeping
    master_seed: int = 0
    rng_algorithm: str = "philox"
    output_dir: str = "results"
    record_wall_time: bool = False

    def __post_init__(self):
        if self.replications < 1:
            raise InvalidConfig("replications must be at least 1")
        if not self.sample_sizes or any(b <= a for a, b in zip(self.sample_sizes, self.sample_sizes[1:])):
            raise InvalidConfig("sample_sizes must be a non-empty, strictly increasing list")
        if self.sample_sizes[0] < 1:
            raise InvalidConfig("sample sizes must be positive")
        if self.n_oracle < 20 * self.d:
            raise InvalidConfig(f"n_oracle must be at least 20 * d = {20 * self.d}")
        if self.num_eval_states < 1:
            raise InvalidConfig("num_eval_states must be positive")
        if not self.methods or any(m not in METHODS for m in self.methods) or len(set(self.methods)) != len(self.methods):
            raise InvalidConfig(f"methods must be distinct names from {list(METHODS)}")
        if self.mode not in MODES:
            raise InvalidConfig(f"mode must be one of {sorted(MODES)}")
        if self.penalty_rule not in ("data_driven", "fixed"):
            raise InvalidConfig("penalty_rule must be data_driven or fixed")
        if self.threshold_rule not in ("scaled", "fixed"):
            raise InvalidConfig("threshold_rule must be scaled or fixed")
        if self.sigma_residual not in ("post_ols", "lasso"):
            raise InvalidConfig("sigma_residual must be post_ols or lasso")
        if self.support_pooling not in (UNION, PER_ACTION):
            raise InvalidConfig(f"support_pooling must be {UNION} or {PER_ACTION}")
        if self.rng_algorithm not in BIT_GENERATORS:
            raise InvalidConfig(f"rng_algorithm must be one of {sorted(BIT_GENERATORS)}")
        if self.refinements < 1:
            raise InvalidConfig("refinements must be at least 1")

    @property
    def fqi_mode(self) -> str:
        return MODES[self.mode]

    def penalty_rule_obj(self):
        if self.penalty_rule == "fixed":
            return FixedPenalty(self.penalty)
        return DataDrivenPenalty(self.alpha, self.c, self.num_sim, self.refinements, self.sigma_residual)

    def threshold_rule_obj(self):
        if self.threshold_rule == "fixed":
            return FixedThreshold(self.threshold)
        return ScaledThreshold(self.threshold_scale)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in dataclasses.fields(self)}

    def to_text(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in self.to_dict().items())


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ", ".join(map(str, v))
    return str(v)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int(text: str) -> int:
    return int(text.replace("_", ""))


def _parser(name: str):
    default = {f.name: f.default for f in dataclasses.fields(ExperimentConfig)}[name]
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return _parse_int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        item = _parse_int if name == "sample_sizes" else str
        return lambda s: tuple(item(x.strip()) for x in s.split(",") if x.strip())
    return str


FIELD_NAMES = tuple(f.name for f in dataclasses.fields(ExperimentConfig))


def coerce(name: str, text: str):
    if name not in FIELD_NAMES:
        raise InvalidConfig(f"unknown config key {name!r}")
    try:
        return _parser(name)(text.strip())
    except ValueError as exc:
        raise InvalidConfig(f"bad value for {name}: {exc}") from None


def parse_config(text: str, **overrides) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise InvalidConfig(f"line {lineno}: duplicate key {key!r}")
        values[key] = coerce(key, value)
    values.update(overrides)
    return ExperimentConfig(**values)


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), **overrides)
