"""Plain-text run configuration: ``section.key = value`` lines with ``#`` comments.

Every key is declared in :data:`SCHEMA` with its type, default and range
check; unknown keys, malformed lines and out-of-range values raise
:class:`ConfigError`.  Seeds for the individual pipeline stages are derived
from one global seed with :func:`derive_seed`.
"""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np


class ConfigError(ValueError):
    pass


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _finite(v):
    return math.isfinite(v)


def _at_least(n):
    return lambda v: v >= n


def _open_unit(v):
    return 0 < v < 1


def _one_of(*opts):
    return lambda v: v in opts


@dataclass(frozen=True)
class Key:
    kind: type
    default: Any
    check: Callable[[Any], bool] | None = None
    doc: str = ""


SCHEMA: dict[str, Key] = {
    "data.source": Key(str, "SPY", None, "ticker of the unlevered fund"),
    "data.target": Key(str, "SSO", None, "ticker of the leveraged fund"),
    "data.r": Key(float, 0.01, _finite, "risk-free rate"),
    "data.iv_min": Key(float, 0.01, _nonneg),
    "data.iv_max": Key(float, 3.0, _positive),
    "data.ttm_min": Key(float, 0.05, _nonneg),
    "data.ttm_max": Key(float, 2.5, _positive),
    "data.lm_min": Key(float, -3.5, _finite),
    "data.lm_max": Key(float, 1.0, _finite),
    "heston.kappa": Key(float, 2.0, _positive, "initial guess"),
    "heston.theta": Key(float, 0.04, _positive, "initial guess"),
    "heston.sigma": Key(float, 0.3, _nonneg, "initial guess"),
    "heston.v0": Key(float, 0.04, _nonneg, "initial guess"),
    "heston.rho": Key(float, -0.5, lambda v: -1 < v < 1, "initial guess"),
    "heston.steps_per_year": Key(int, 250, _at_least(1)),
    "heston.max_nfev": Key(int, 400, _at_least(10)),
    "condvar.provider": Key(str, "heston", _one_of("heston", "constant")),
    "condvar.paths": Key(int, 20000, _at_least(1000)),
    "condvar.bins": Key(int, 31, _at_least(2)),
    "condvar.lm_lo": Key(float, -0.6, _finite),
    "condvar.lm_hi": Key(float, 0.4, _finite),
    "condvar.variance": Key(float, 0.04, _positive, "constant-variance surrogate"),
    "scaling.ttm": Key(float, 0.6, _positive),
    "bands.alpha": Key(float, 0.05, lambda v: 0 < v < 0.5),
    "bands.B": Key(int, 1000, _at_least(100)),
    "bands.kernel": Key(str, "gaussian", _one_of("gaussian", "quartic")),
    "bands.h": Key(float, 0.0, _nonneg, "0 selects the bandwidth by cross-validation"),
    "bands.trim": Key(float, 0.05, lambda v: 0 <= v < 0.5),
    "bands.grid": Key(int, 41, _at_least(2)),
    "bands.days": Key(int, 5, _at_least(1), "trailing days pooled for the demo bands"),
    "dsfm.L": Key(int, 3, _nonneg),
    "dsfm.order_m": Key(int, 3, _at_least(1)),
    "dsfm.order_t": Key(int, 3, _at_least(1)),
    "dsfm.n_interior_m": Key(int, 3, _nonneg),
    "dsfm.n_interior_t": Key(int, 1, _nonneg),
    "dsfm.tol": Key(float, 1e-7, _positive),
    "dsfm.max_iter": Key(int, 500, _at_least(1)),
    "var.pmax": Key(int, 5, _at_least(1)),
    "var.lags": Key(int, 12, _at_least(2)),
    "var.order": Key(int, 1, _at_least(1)),
    "strategy.window": Key(int, 100, _at_least(30)),
    "strategy.tau_star": Key(float, 0.6, _positive),
    "strategy.tau_tol": Key(float, 2.0 / 365.0, _positive),
    "strategy.hedge_model": Key(str, "black_scholes_delta", _one_of("black_scholes_delta", "external_delta")),
    "strategy.grid_size": Key(int, 101, _at_least(2)),
    "robustness.iters": Key(int, 500, _at_least(1)),
    "robustness.block": Key(int, 5, _at_least(1)),
}


def _coerce(name: str, text: str, kind: type):
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {text!r}") from None
    return text


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v.default for k, v in SCHEMA.items()})

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, value, source: str = "") -> None:
        where = f"{source}: " if source else ""
        if key not in SCHEMA:
            raise ConfigError(f"{where}unknown key {key!r}")
        spec = SCHEMA[key]
        if isinstance(value, str) and spec.kind is not str:
            value = _coerce(key, value, spec.kind)
        elif spec.kind is float:
            value = float(value)
        if spec.check is not None and not spec.check(value):
            raise ConfigError(f"{where}{key} = {value!r} is out of range")
        self.values[key] = value

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for i, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{i}: expected 'section.key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if "." not in key:
                raise ConfigError(f"{source}:{i}: key {key!r} lacks a section")
            cfg.set(key, value, f"{source}:{i}")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        path = Path(path)
        return cls.from_text(path.read_text(), str(path.name))

    def validate(self) -> None:
        pairs = (("data.iv_min", "data.iv_max"), ("data.ttm_min", "data.ttm_max"),
                 ("data.lm_min", "data.lm_max"), ("condvar.lm_lo", "condvar.lm_hi"))
        for lo, hi in pairs:
            if not self[lo] < self[hi]:
                raise ConfigError(f"{lo} must be below {hi}")
        if self["var.lags"] <= self["var.order"]:
            raise ConfigError("var.lags must exceed var.order")

    def canonical(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))

    def digest(self, extra: dict | None = None) -> str:
        payload = self.canonical() + json.dumps(extra or {}, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def derive_seed(seed: int, module: str, index: int = 0) -> int:
    """Stage seed from ``(seed, module, index)``.

    The module name enters through its CRC-32 as a spawn key of a
    :class:`numpy.random.SeedSequence` seeded with the global seed, so
    stages draw from unrelated streams while the whole run stays a
    function of one integer.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(module.encode()), int(index)))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
