"""Service-time distribution family: exponential, hyper-exponential, Erlang.

Each law supports exact analytic evaluation (pdf, cdf, Laplace-Stieltjes
transform, mean) and random-variate generation from a caller-supplied
numpy generator.  Evaluation is pure and thread-safe; sampling mutates
only the generator it is handed.

Config literals::

    {"kind": "exp", "rate": 1.0}
    {"kind": "hyperexp", "branches": [[0.5, 1.0], [0.5, 2.0]]}
    {"kind": "erlang", "stages": 2, "rate": 2.0}
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import special

from .errors import DomainError

__all__ = [
    "Exponential",
    "HyperExponential",
    "Erlang",
    "ServiceDist",
    "dist_from_json",
    "dist_to_json",
]

_WEIGHT_TOL = 1e-12


def _check_nonneg(x, name: str):
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0):
        raise DomainError(f"{name} must be non-negative, got {x!r}")
    return arr


@dataclass(frozen=True)
class Exponential:
    """Exponential law with the given rate (mean 1/rate)."""

    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise DomainError(f"rate must be positive, got {self.rate}")

    def mean(self) -> float:
        return 1.0 / self.rate

    def pdf(self, x):
        x = _check_nonneg(x, "x")
        out = self.rate * np.exp(-self.rate * x)
        return float(out) if out.ndim == 0 else out

    def cdf(self, x):
        x = _check_nonneg(x, "x")
        out = -np.expm1(-self.rate * x)
        return float(out) if out.ndim == 0 else out

    def lst(self, s) -> float:
        s = _check_nonneg(s, "s")
        out = self.rate / (self.rate + s)
        return float(out) if out.ndim == 0 else out

    def sample(self, rng: np.random.Generator, size=None):
        return rng.exponential(1.0 / self.rate, size=size)

    def min_rate(self) -> float:
        return self.rate


@dataclass(frozen=True)
class HyperExponential:
    """Probabilistic mixture of exponentials: branch l drawn with weight p_l,
    then an exponential with that branch's rate."""

    branches: tuple  # of (weight, rate) pairs

    def __post_init__(self):
        branches = tuple((float(w), float(r)) for w, r in self.branches)
        object.__setattr__(self, "branches", branches)
        if not branches:
            raise DomainError("hyper-exponential needs at least one branch")
        if any(w < 0 for w, _ in branches):
            raise DomainError("branch weights must be non-negative")
        if any(r <= 0 for _, r in branches):
            raise DomainError("branch rates must be positive")
        total = sum(w for w, _ in branches)
        if abs(total - 1.0) > _WEIGHT_TOL:
            raise DomainError(f"branch weights must sum to 1, got {total}")

    def mean(self) -> float:
        return sum(w / r for w, r in self.branches)

    def pdf(self, x):
        x = _check_nonneg(x, "x")
        out = sum(w * r * np.exp(-r * x) for w, r in self.branches)
        out = np.asarray(out)
        return float(out) if out.ndim == 0 else out

    def cdf(self, x):
        x = _check_nonneg(x, "x")
        out = sum(-w * np.expm1(-r * x) for w, r in self.branches)
        out = np.asarray(out)
        return float(out) if out.ndim == 0 else out

    def lst(self, s):
        s = _check_nonneg(s, "s")
        out = sum(w * r / (r + s) for w, r in self.branches)
        out = np.asarray(out)
        return float(out) if out.ndim == 0 else out

    def sample(self, rng: np.random.Generator, size=None):
        weights = np.array([w for w, _ in self.branches])
        rates = np.array([r for _, r in self.branches])
        if size is None:
            idx = rng.choice(len(rates), p=weights)
            return rng.exponential(1.0 / rates[idx])
        idx = rng.choice(len(rates), p=weights, size=size)
        return rng.exponential(1.0 / rates[idx])

    def min_rate(self) -> float:
        return min(r for _, r in self.branches)


@dataclass(frozen=True)
class Erlang:
    """Erlang law: sum of `stages` iid exponentials with rate `stage_rate`
    (mean stages/stage_rate)."""

    stages: int
    stage_rate: float

    def __post_init__(self):
        if not (isinstance(self.stages, (int, np.integer)) and self.stages >= 1):
            raise DomainError(f"stages must be an integer >= 1, got {self.stages}")
        if not self.stage_rate > 0:
            raise DomainError(f"stage_rate must be positive, got {self.stage_rate}")
        object.__setattr__(self, "stages", int(self.stages))

    def mean(self) -> float:
        return self.stages / self.stage_rate

    def pdf(self, x):
        x = _check_nonneg(x, "x")
        k, nu = self.stages, self.stage_rate
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(
                (x == 0) & (k > 1),
                0.0,
                nu**k * x ** (k - 1) * np.exp(-nu * x) / math.factorial(k - 1),
            )
        out = np.asarray(out)
        return float(out) if out.ndim == 0 else out

    def cdf(self, x):
        x = _check_nonneg(x, "x")
        out = special.gammainc(self.stages, self.stage_rate * x)
        out = np.asarray(out)
        return float(out) if out.ndim == 0 else out

    def lst(self, s):
        s = _check_nonneg(s, "s")
        out = (self.stage_rate / (self.stage_rate + s)) ** self.stages
        out = np.asarray(out)
        return float(out) if out.ndim == 0 else out

    def sample(self, rng: np.random.Generator, size=None):
        # Sum of k exponentials: exact, no gamma rejection step.
        if size is None:
            return rng.exponential(1.0 / self.stage_rate, size=self.stages).sum()
        return rng.exponential(1.0 / self.stage_rate, size=(self.stages,) + _as_shape(size)).sum(axis=0)

    def min_rate(self) -> float:
        return self.stage_rate


def _as_shape(size) -> tuple:
    return (size,) if isinstance(size, (int, np.integer)) else tuple(size)


ServiceDist = Union[Exponential, HyperExponential, Erlang]


def dist_from_json(obj: dict) -> ServiceDist:
    """Build a ServiceDist from its config literal."""
    try:
        kind = obj["kind"]
    except (TypeError, KeyError):
        raise DomainError(f"distribution literal needs a 'kind' field: {obj!r}")
    if kind == "exp":
        return Exponential(rate=float(obj["rate"]))
    if kind == "hyperexp":
        return HyperExponential(branches=tuple((float(w), float(r)) for w, r in obj["branches"]))
    if kind == "erlang":
        return Erlang(stages=int(obj["stages"]), stage_rate=float(obj["rate"]))
    raise DomainError(f"unknown distribution kind {kind!r}")


def dist_to_json(dist: ServiceDist) -> dict:
    if isinstance(dist, Exponential):
        return {"kind": "exp", "rate": dist.rate}
    if isinstance(dist, HyperExponential):
        return {"kind": "hyperexp", "branches": [[w, r] for w, r in dist.branches]}
    if isinstance(dist, Erlang):
        return {"kind": "erlang", "stages": dist.stages, "rate": dist.stage_rate}
    raise DomainError(f"not a ServiceDist: {dist!r}")
