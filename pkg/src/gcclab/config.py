"""Strict YAML scenario configuration.

Every section is a dataclass; unknown keys, wrong types and out-of-range
values raise ConfigError naming the offending key path. Defaults live in the
dataclass fields below and nowhere else.
"""

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field

import yaml

from .metric import (crossterm_toy, damping_ball, damping_shell, minkowski, no_damping,
                     trapped_shell)

__all__ = ["ConfigError", "ScenarioConfig", "load_config", "parse_config", "build_metric",
           "build_damping", "MetricSpec", "DampingSpec", "RaysSpec", "GCCSpec", "EscapeSpec",
           "WaveSpec", "LEDSpec", "LEDRun", "config_hash"]


class ConfigError(ValueError):
    def __init__(self, msg, key=None):
        super().__init__(msg if key is None else f"{key}: {msg}")
        self.key = key


METRICS = {
    "minkowski": (lambda p, d: minkowski(damping=d), set()),
    "trapped_shell": (lambda p, d: trapped_shell(damping=d, **p), {"A", "r_c", "width"}),
    "crossterm_toy": (lambda p, d: crossterm_toy(damping=d, **p), {"eps"}),
}
DAMPINGS = {
    "none": (lambda p: no_damping(), set()),
    "ball": (lambda p: damping_ball(**p), {"center", "radius", "amplitude"}),
    "shell": (lambda p: damping_shell(**p), {"radius", "half_width", "amplitude"}),
}


def _positive(v, key):
    if not v > 0:
        raise ConfigError(f"must be positive, got {v}", key)


@dataclass(frozen=True)
class MetricSpec:
    name: str = "minkowski"
    params: dict = field(default_factory=dict)

    def check(self, key):
        if self.name not in METRICS:
            raise ConfigError(f"unknown metric {self.name!r} (known: {sorted(METRICS)})", key + ".name")
        allowed = METRICS[self.name][1]
        for k in self.params:
            if k not in allowed:
                raise ConfigError(f"unknown parameter for {self.name}", f"{key}.params.{k}")


@dataclass(frozen=True)
class DampingSpec:
    kind: str = "none"
    params: dict = field(default_factory=dict)

    def check(self, key):
        if self.kind not in DAMPINGS:
            raise ConfigError(f"unknown damping {self.kind!r} (known: {sorted(DAMPINGS)})", key + ".kind")
        allowed = DAMPINGS[self.kind][1]
        for k in self.params:
            if k not in allowed:
                raise ConfigError(f"unknown parameter for {self.kind} damping", f"{key}.params.{k}")
        missing = allowed - set(self.params)
        if missing:
            raise ConfigError(f"missing parameters {sorted(missing)}", key + ".params")


@dataclass(frozen=True)
class RaysSpec:
    """Ray study: conservation drift and classification of a seed panel."""
    R: float = 16.0
    T_max: float = 500.0
    s_max: float = 100.0
    seeds: int = 64
    radius: float = 8.0

    def check(self, key):
        for k in ("R", "T_max", "s_max", "radius"):
            _positive(getattr(self, k), f"{key}.{k}")
        _positive(self.seeds, f"{key}.seeds")


@dataclass(frozen=True)
class GCCSpec:
    """GCC audit: seeds on the numerically detected trapped shell (or Halton seeds if none)."""
    R: float = 16.0
    T_max: float = 500.0
    seeds: int = 4096
    a_threshold: float = None
    delta: float = None
    require_hit: bool = False
    detect_radii: int = 64

    def check(self, key):
        _positive(self.R, key + ".R")
        _positive(self.T_max, key + ".T_max")
        _positive(self.seeds, key + ".seeds")
        if self.a_threshold is not None:
            _positive(self.a_threshold, key + ".a_threshold")


@dataclass(frozen=True)
class EscapeSpec:
    # asymptotic flatness and the exterior weight
    j_max: int = 12
    samples_per_annulus: int = 2000
    af_threshold: float = 0.1
    af_envelope: float = 0.01
    af_delta: float = 0.25
    R: float = None
    # semi-bounded cover
    trapped_seeds: int = 256
    gcc_T_max: float = 200.0
    horizon: float = 60.0
    cover_rho: float = 0.25
    # interior symbol
    n_probes: int = 2048
    q_in_step: float = 0.05
    coarse_factor: float = 8.0
    psi_delta: float = None
    # verification
    n_generic: int = 90_000
    n_char: int = 5_000
    C_target: float = 0.0
    # tuning loop
    lambdas: list = field(default_factory=lambda: [4.0, 8.0, 16.0, 32.0])
    sigmas: list = field(default_factory=lambda: [4.0, 16.0, 64.0])
    gammas: list = field(default_factory=lambda: [16.0, 64.0, 256.0])
    eps_start: float = 1.0
    eps_min: float = 2.0**-40

    def check(self, key):
        for k in ("samples_per_annulus", "af_threshold", "af_delta", "trapped_seeds", "gcc_T_max",
                  "horizon", "cover_rho", "q_in_step", "coarse_factor", "n_generic",
                  "eps_start", "eps_min"):
            _positive(getattr(self, k), f"{key}.{k}")
        if self.j_max < 1:
            raise ConfigError("must be >= 1", key + ".j_max")
        if self.n_char < 0 or self.n_probes < 0:
            raise ConfigError("must be nonnegative", key + ".n_char/n_probes")
        if self.af_envelope < 0:
            raise ConfigError("must be nonnegative", key + ".af_envelope")
        if self.n_generic + 2 * self.n_char < 1:
            raise ConfigError("no samples", key)
        for k in ("lambdas", "sigmas", "gammas"):
            vals = getattr(self, k)
            if not vals:
                raise ConfigError("must be a nonempty list", f"{key}.{k}")
            for i, v in enumerate(vals):
                if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
                    raise ConfigError(f"must be a positive number, got {v!r}", f"{key}.{k}[{i}]")
        if self.eps_min > self.eps_start:
            raise ConfigError("must not exceed eps_start", key + ".eps_min")


@dataclass(frozen=True)
class WaveSpec:
    extent: float = 16.0
    n: int = 48
    cfl: float = 0.4
    sponge_width: float = None
    sponge_strength: float = 3.0
    T: float = 10.0
    center: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    radius: float = 2.0
    snapshot_every: int = 0
    write_snapshots: bool = False

    def check(self, key):
        for k in ("extent", "cfl", "sponge_strength", "T", "radius"):
            _positive(getattr(self, k), f"{key}.{k}")
        if self.n < 8:
            raise ConfigError("must be >= 8", key + ".n")
        if len(self.center) != 3:
            raise ConfigError("must have three entries", key + ".center")
        if self.snapshot_every < 0:
            raise ConfigError("must be nonnegative", key + ".snapshot_every")


@dataclass(frozen=True)
class LEDRun:
    label: str
    metric: MetricSpec = field(default_factory=MetricSpec)
    damping: DampingSpec = field(default_factory=DampingSpec)

    def check(self, key):
        self.metric.check(key + ".metric")
        self.damping.check(key + ".damping")


@dataclass(frozen=True)
class LEDSpec:
    extent: float = 32.0
    n: int = 96
    cfl: float = 0.4
    sponge_width: float = 6.0
    sponge_strength: float = 3.0
    T_list: list = field(default_factory=lambda: [10.0, 20.0, 40.0, 80.0])
    center: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    radius: float = 2.0
    runs: list = field(default_factory=list)
    # thresholds on rho(T_last)/rho(T_mid) recorded with the run
    flat_growth_max: float = 1.05
    trapped_growth_min: float = 1.15
    separation_min: float = 1.30

    def check(self, key):
        for k in ("extent", "cfl", "sponge_width", "sponge_strength", "radius"):
            _positive(getattr(self, k), f"{key}.{k}")
        if self.n < 8:
            raise ConfigError("must be >= 8", key + ".n")
        if not self.T_list or any(not t > 0 for t in self.T_list):
            raise ConfigError("must be a nonempty list of positive times", key + ".T_list")
        if len(self.center) != 3:
            raise ConfigError("must have three entries", key + ".center")
        labels = [r.label for r in self.runs]
        if len(set(labels)) != len(labels):
            raise ConfigError("duplicate run labels", key + ".runs")
        for i, r in enumerate(self.runs):
            r.check(f"{key}.runs[{i}]")


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    metric: MetricSpec = field(default_factory=MetricSpec)
    damping: DampingSpec = field(default_factory=DampingSpec)
    rng_seed: int = 0
    output_dir: str = None
    rays: RaysSpec = None
    gcc: GCCSpec = None
    escape: EscapeSpec = None
    wave: WaveSpec = None
    led: LEDSpec = None

    def check(self):
        self.metric.check("metric")
        self.damping.check("damping")
        if self.rng_seed < 0:
            raise ConfigError("must be nonnegative", "rng_seed")
        for k in ("rays", "gcc", "escape", "wave", "led"):
            sec = getattr(self, k)
            if sec is not None:
                sec.check(k)


def _is_dataclass_type(tp):
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _coerce(value, tp, key):
    """Check ``value`` against the annotated type ``tp`` and build nested dataclasses."""
    if value is None:
        return None
    if _is_dataclass_type(tp):
        return _build(tp, value, key)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", key)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key)
        return value
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping, got {value!r}", key)
        return dict(value)
    if tp is list:
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}", key)
        return list(value)
    raise ConfigError(f"unsupported field type {tp}", key)


_LIST_ITEMS = {("LEDSpec", "runs"): LEDRun}


def _build(cls, data, key):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", key or "<root>")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError("unknown key", f"{key}.{k}" if key else str(k))
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError("required key missing", f"{key}.{f.name}" if key else f.name)
            continue
        sub = f"{key}.{f.name}" if key else f.name
        val = _coerce(data[f.name], hints[f.name], sub)
        item = _LIST_ITEMS.get((cls.__name__, f.name))
        if item is not None and val is not None:
            val = [_build(item, v, f"{sub}[{i}]") for i, v in enumerate(val)]
        kwargs[f.name] = val
    return cls(**kwargs)


def parse_config(data):
    cfg = _build(ScenarioConfig, data, "")
    cfg.check()
    return cfg


def load_config(path):
    """Parse and validate a YAML scenario file; returns (config, raw bytes)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", "config") from exc
    try:
        data = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}", "config") from exc
    return parse_config(data if data is not None else {}), raw


def config_hash(raw):
    return hashlib.sha256(raw).hexdigest()


def build_damping(spec):
    try:
        return DAMPINGS[spec.kind][0](spec.params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "damping.params") from exc


def build_metric(spec, damping_spec=None):
    d = build_damping(damping_spec) if damping_spec is not None else no_damping()
    try:
        return METRICS[spec.name][0](spec.params, d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "metric.params") from exc
