"""Priors, parameter boxes and space-filling Sobol designs."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special
from scipy.stats import qmc

SOBOL_MAX_DIM = 21201


class PriorError(ValueError):
    pass


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise PriorError(f"Uniform needs lo < hi, got [{self.lo}, {self.hi}]")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.lo) & (x <= self.hi)
        return np.where(inside, -np.log(self.hi - self.lo), -np.inf)

    def sample(self, rng, n):
        return rng.uniform(self.lo, self.hi, size=n)

    def mean(self):
        return 0.5 * (self.lo + self.hi)

    def variance(self):
        return (self.hi - self.lo) ** 2 / 12.0

    def support_box(self):
        return self.lo, self.hi


@dataclass(frozen=True)
class LogNormal:
    """``log(x) ~ Normal(mu_ln, sigma_ln^2)``."""

    mu_ln: float
    sigma_ln: float

    def __post_init__(self):
        if not self.sigma_ln > 0:
            raise PriorError("LogNormal needs sigma_ln > 0")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            lx = np.log(np.where(x > 0, x, 1.0))
            z = (lx - self.mu_ln) / self.sigma_ln
            val = -0.5 * z**2 - lx - np.log(self.sigma_ln) - 0.5 * np.log(2 * np.pi)
        return np.where(x > 0, val, -np.inf)

    def sample(self, rng, n):
        return rng.lognormal(self.mu_ln, self.sigma_ln, size=n)

    def mean(self):
        return float(np.exp(self.mu_ln + 0.5 * self.sigma_ln**2))

    def variance(self):
        s2 = self.sigma_ln**2
        return float((np.exp(s2) - 1.0) * np.exp(2 * self.mu_ln + s2))

    def mode(self):
        return float(np.exp(self.mu_ln - self.sigma_ln**2))

    def quantile(self, q):
        return np.exp(self.mu_ln + self.sigma_ln * special.ndtri(q))

    def support_box(self):
        # unbounded support: truncate to the central 99.8 %
        return float(self.quantile(0.001)), float(self.quantile(0.999))


@dataclass(frozen=True)
class BetaOnInterval:
    """Beta(a, b) distribution stretched onto ``[lo, hi]``."""

    a: float
    b: float
    lo: float
    hi: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise PriorError("BetaOnInterval needs a > 0 and b > 0")
        if not self.lo < self.hi:
            raise PriorError("BetaOnInterval needs lo < hi")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        width = self.hi - self.lo
        u = (x - self.lo) / width
        inside = (u >= 0) & (u <= 1)
        uc = np.clip(u, 0.0, 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = (special.xlogy(self.a - 1, uc) + special.xlog1py(self.b - 1, -uc)
                   - special.betaln(self.a, self.b) - np.log(width))
        return np.where(inside, val, -np.inf)

    def sample(self, rng, n):
        return self.lo + (self.hi - self.lo) * rng.beta(self.a, self.b, size=n)

    def mean(self):
        return self.lo + (self.hi - self.lo) * self.a / (self.a + self.b)

    def variance(self):
        a, b = self.a, self.b
        return (self.hi - self.lo) ** 2 * a * b / ((a + b) ** 2 * (a + b + 1))

    def mode(self):
        return self.lo + (self.hi - self.lo) * (self.a - 1) / (self.a + self.b - 2)

    def support_box(self):
        return self.lo, self.hi


_KINDS = {"uniform": Uniform, "lognormal": LogNormal, "beta": BetaOnInterval}


def distribution_from_dict(spec: dict):
    """``{"kind": "uniform", "lo": .., "hi": ..}`` and friends."""
    spec = dict(spec)
    kind = spec.pop("kind")
    spec.pop("name", None)
    try:
        cls = _KINDS[kind]
    except KeyError:
        raise PriorError(f"unknown prior kind {kind!r}") from None
    return cls(**{k: float(v) for k, v in spec.items()})


def distribution_to_dict(dist) -> dict:
    kind = {v: k for k, v in _KINDS.items()}[type(dist)]
    return {"kind": kind, **{k: float(v) for k, v in vars(dist).items()}}


class Prior:
    """Independent per-dimension prior; the joint density is the product."""

    def __init__(self, dists: Sequence, names: Sequence[str] | None = None):
        self.dists = tuple(dists)
        if not self.dists:
            raise PriorError("a prior needs at least one dimension")
        self.names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(len(self.dists)))
        if len(self.names) != len(self.dists):
            raise PriorError("one name per dimension")

    @property
    def dim(self) -> int:
        return len(self.dists)

    def __add__(self, other: "Prior") -> "Prior":
        return Prior(self.dists + other.dists, self.names + other.names)

    def log_pdf(self, x):
        """Sum of per-dimension log densities; accepts ``(d,)`` or ``(n, d)``."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise PriorError(f"expected {self.dim} coordinates, got {x.shape[1]}")
        out = np.zeros(x.shape[0])
        for j, dist in enumerate(self.dists):
            out += dist.logpdf(x[:, j])
        return float(out[0]) if single else out

    def sample(self, rng_seed, n: int) -> np.ndarray:
        if n < 1:
            raise PriorError("n must be >= 1")
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        return np.column_stack([dist.sample(rng, n) for dist in self.dists])

    def mean(self) -> np.ndarray:
        return np.array([d.mean() for d in self.dists])

    def variance(self) -> np.ndarray:
        return np.array([d.variance() for d in self.dists])

    def box(self) -> "ParameterBox":
        lo, hi = zip(*(d.support_box() for d in self.dists))
        return ParameterBox(lo, hi)

    def to_list(self) -> list:
        return [{"name": n, **distribution_to_dict(d)} for n, d in zip(self.names, self.dists)]

    @classmethod
    def from_list(cls, items) -> "Prior":
        items = list(items)
        return cls([distribution_from_dict(it) for it in items],
                   [it.get("name", f"x{i}") for i, it in enumerate(items)])


def log_prior_pdf(prior: Prior, x):
    return prior.log_pdf(x)


def sample_prior(prior: Prior, rng_seed, n: int) -> np.ndarray:
    return prior.sample(rng_seed, n)


@dataclass(frozen=True)
class ParameterBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lo, dtype=float).ravel()
        hi = np.array(self.hi, dtype=float).ravel()
        if lo.shape != hi.shape or lo.size == 0:
            raise PriorError("box bounds need matching, non-empty shapes")
        if not np.all(lo < hi):
            raise PriorError(f"box needs lo < hi in every dimension: {lo} vs {hi}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def __add__(self, other: "ParameterBox") -> "ParameterBox":
        return ParameterBox(np.concatenate([self.lo, other.lo]), np.concatenate([self.hi, other.hi]))

    def to_list(self) -> list:
        return [[float(a), float(b)] for a, b in zip(self.lo, self.hi)]

    @classmethod
    def from_list(cls, bounds) -> "ParameterBox":
        bounds = np.asarray(bounds, dtype=float)
        return cls(bounds[:, 0], bounds[:, 1])

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise PriorError(f"expected {self.dim} coordinates, got {x.shape[-1]}")
        return x


def standardize(x, box: ParameterBox):
    x = box._check(x)
    return (x - box.lo) / box.width


def unstandardize(u, box: ParameterBox):
    u = box._check(u)
    return box.lo + u * box.width


def design_to_box(points, box: ParameterBox):
    """Affine map of unit-cube points onto ``box``."""
    return unstandardize(points, box)


def sobol_points(dim: int, n: int, skip: int = 1) -> np.ndarray:
    """First ``n`` points of the unscrambled Sobol sequence after dropping ``skip``.

    Uses the Joe-Kuo direction numbers with Gray-code ordering, so any prefix
    of a longer design equals the shorter design.
    """
    if dim < 1 or n < 1 or skip < 0:
        raise ValueError("need dim >= 1, n >= 1 and skip >= 0")
    if dim > SOBOL_MAX_DIM:
        raise ValueError(f"Sobol direction numbers are available up to dim {SOBOL_MAX_DIM}")
    engine = qmc.Sobol(d=dim, scramble=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        if skip:
            engine.fast_forward(skip)
        return engine.random(n)
