"""Scenario files: flat ``key = value`` sections read with configparser.

Example::

    [scenario]
    name = table2
    benchmark = latency
    dims = 4,4,2
    pairs = M1QAF1-M1QAF2, M1QAF1-M1QBF1
    sizes = 0
    iterations = 10
    warmup = 2

    [faults]
    loss_rate = 0.0

    [calibration]
    link_latency_ns = 120

Pair benchmarks name MPSoCs explicitly; collectives take ``n_ranks`` and
``ranks_per_fpga`` (block placement).
"""
from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field, fields

from ..latmodel import DEFAULT_PARAMS, CalibrationParams
from ..topology import PROTOTYPE_DIMS

BENCHMARKS = ("latency", "bw", "bibw", "bcast", "allreduce", "allreduce_accel", "one_way_lat")
PAIR_BENCHMARKS = ("latency", "bw", "bibw", "one_way_lat")
CALIBRATION_KEYS = {f.name for f in fields(CalibrationParams)}


class ConfigError(ValueError):
    """The scenario text cannot be parsed (CLI exit 1)."""


class ScenarioInvalid(ValueError):
    """The scenario parsed but breaks an invariant (CLI exit 2)."""


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def parse_size(text: str) -> int:
    """'4K' -> 4096, '1M' -> 1048576, plain integers pass through."""
    t = text.strip().upper().rstrip("B")
    mult = {"K": 1 << 10, "M": 1 << 20, "G": 1 << 30}.get(t[-1:], 1)
    return int(t[:-1] if mult > 1 else t) * mult


@dataclass
class Scenario:
    name: str = "scenario"
    benchmark: str = "latency"
    dims: tuple[int, int, int] = PROTOTYPE_DIMS
    pairs: tuple[tuple[str, str], ...] = ()
    n_ranks: tuple[int, ...] = (2,)
    ranks_per_fpga: int = 4
    sizes: tuple[int, ...] = (0,)
    iterations: int = 10
    warmup: int = 2
    repetitions: int = 30
    window: int = 64
    op: str = "sum"
    dtype: str = "float32"
    accel: bool = False
    loss_rate: float = 0.0
    seed: int = 0
    params: CalibrationParams = field(default_factory=lambda: DEFAULT_PARAMS)

    def validate(self) -> "Scenario":
        if self.benchmark not in BENCHMARKS:
            raise ScenarioInvalid(f"unknown benchmark {self.benchmark!r}")
        if not self.iterations > self.warmup >= 0:
            raise ScenarioInvalid("need iterations > warmup >= 0")
        if list(self.sizes) != sorted(self.sizes) or not self.sizes or min(self.sizes) < 0:
            raise ScenarioInvalid("sizes must be non-negative and sorted ascending")
        if self.benchmark in PAIR_BENCHMARKS and not self.pairs:
            raise ScenarioInvalid(f"{self.benchmark} needs at least one MPSoC pair")
        if self.repetitions < 1 or self.window < 1:
            raise ScenarioInvalid("repetitions and window must be >= 1")
        if not 0.0 <= self.loss_rate < 1.0:
            raise ScenarioInvalid("loss_rate must be in [0, 1)")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ScenarioInvalid(f"bad dims {self.dims}")
        return self

    def metadata(self) -> dict:
        d = asdict(self)
        d["params"] = asdict(self.params)
        return d

    def to_json(self) -> str:
        return json.dumps(self.metadata(), sort_keys=True, indent=1)


_KEYS = {
    "name": str, "benchmark": str, "dims": _ints, "n_ranks": _ints,
    "ranks_per_fpga": int, "iterations": int, "warmup": int, "repetitions": int,
    "window": int, "op": str, "dtype": str, "seed": int,
}


def loads(text: str, seed: int | None = None) -> Scenario:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"scenario parse error: {exc}") from None
    if not cp.has_section("scenario"):
        raise ConfigError("missing [scenario] section")
    sec = cp["scenario"]
    kw = {}
    try:
        for key, value in sec.items():
            if key in _KEYS:
                kw[key] = _KEYS[key](value)
            elif key == "sizes":
                kw["sizes"] = tuple(parse_size(x) for x in value.split(",") if x.strip())
            elif key == "pairs":
                kw["pairs"] = tuple(tuple(p.strip().split("-")) for p in value.split(",") if p.strip())
                if any(len(p) != 2 for p in kw["pairs"]):
                    raise ValueError("pairs are written A-B")
            elif key == "accel":
                kw["accel"] = sec.getboolean("accel")
            else:
                raise ValueError(f"unknown key {key!r}")
        if cp.has_section("faults"):
            kw["loss_rate"] = cp["faults"].getfloat("loss_rate", 0.0)
        calib = {}
        if cp.has_section("calibration"):
            calib = dict(cp["calibration"])
            for k, v in calib.items():
                if k not in CALIBRATION_KEYS:
                    raise KeyError(f"unknown calibration key {k!r}")
                int(v) if isinstance(getattr(DEFAULT_PARAMS, k), int) else float(v)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"scenario parse error: {exc}") from None
    if calib:
        try:
            kw["params"] = CalibrationParams.from_mapping(calib)
        except ValueError as exc:
            # parsed fine, but the values break a model invariant
            raise ScenarioInvalid(f"calibration: {exc}") from None
    if seed is not None:
        kw["seed"] = seed
    return Scenario(**kw).validate()


def load(path, seed: int | None = None) -> Scenario:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario: {exc}") from None
    return loads(text, seed)
