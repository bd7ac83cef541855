"""Adaptive-tempering sequential Monte Carlo.

The sampler moves a weighted particle cloud from the prior to the posterior
through the tempered targets ``exp(gamma * L(x)) * p(x)``. Each step picks
the next ``gamma`` so that the effective sample size shrinks by a fixed
factor ``zeta``, reweights, resamples when the ESS falls below a threshold,
and rejuvenates the particles with random-walk Metropolis moves whose
covariance is the scaled weighted particle covariance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .parameter_space import Prior

log = logging.getLogger(__name__)

ACCEPT_A = 1.0 / 9.0
ACCEPT_B = 8.0 / 9.0
GAMMA_TOL = 1e-8


class SMCError(RuntimeError):
    pass


def normalize_log_weights(log_weights):
    lw = np.asarray(log_weights, dtype=float)
    return lw - logsumexp(lw)


@dataclass
class ParticleSet:
    """Weighted particles with the tempering state.

    ``log_lik`` and ``log_prior`` are cached per particle so that the
    unnormalized posterior score ``log_lik + log_prior`` is always at hand.
    """

    positions: np.ndarray
    log_weights: np.ndarray
    gamma: float = 0.0
    log_lik: np.ndarray | None = None
    log_prior: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        self.positions = pos[:, None] if pos.ndim == 1 else pos
        self.log_weights = normalize_log_weights(self.log_weights)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def ess(self) -> float:
        return effective_sample_size(self.weights)

    @property
    def scores(self) -> np.ndarray:
        """Log unnormalized posterior (at gamma = 1) per particle."""
        if self.log_lik is None or self.log_prior is None:
            raise SMCError("particle set has no cached log-likelihood / log-prior")
        return self.log_lik + self.log_prior

    def take(self, idx) -> "ParticleSet":
        """Copy of the particles at ``idx`` with uniform weights."""
        idx = np.asarray(idx)
        return ParticleSet(
            self.positions[idx], np.zeros(idx.size), self.gamma,
            None if self.log_lik is None else self.log_lik[idx],
            None if self.log_prior is None else self.log_prior[idx],
        )

    @classmethod
    def uniform(cls, positions, **kw) -> "ParticleSet":
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        return cls(positions, np.zeros(positions.shape[0]), **kw)


@dataclass(frozen=True)
class SMCConfig:
    n_particles: int = 5000
    zeta: float = 0.995
    ess_min_fraction: float = 0.5
    n_rejuvenation: int = 20
    proposal_scale_init: float | None = None
    rng_seed: int = 0
    max_steps: int = 100_000

    def __post_init__(self):
        if self.n_particles < 2:
            raise SMCError("need at least 2 particles")
        if not 0 < self.zeta < 1:
            raise SMCError("zeta must lie in (0, 1)")
        if not 0 < self.ess_min_fraction < 1:
            raise SMCError("ess_min_fraction must lie in (0, 1)")
        if self.n_rejuvenation < 1:
            raise SMCError("need at least one rejuvenation sweep")


@dataclass
class SMCTrace:
    gammas: list = field(default_factory=list)
    ess: list = field(default_factory=list)
    resampled: list = field(default_factory=list)
    acceptance: list = field(default_factory=list)
    scales: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "gammas": [float(g) for g in self.gammas],
            "ess": [float(e) for e in self.ess],
            "resampled": [bool(r) for r in self.resampled],
            "acceptance": [[float(a) for a in acc] for acc in self.acceptance],
            "scales": [float(s) for s in self.scales],
        }


def effective_sample_size(weights) -> float:
    """``1 / sum(w^2)`` of normalized weights."""
    w = np.asarray(weights, dtype=float)
    s = np.sum(w)
    if not s > 0:
        raise SMCError("weights are all zero")
    w = w / s
    return float(1.0 / np.sum(w * w))


def _ess_from_log(lw):
    # ESS of unnormalized log weights without leaving log space
    return float(np.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw)))


def find_gamma_step(particles: ParticleSet, log_liks, gamma_prev: float, zeta: float) -> float:
    """Next tempering exponent.

    Bisects ``gamma in (gamma_prev, 1]`` for the root of
    ``ESS(gamma) - zeta * ESS(gamma_prev)`` where ``ESS(gamma)`` uses the
    current weights multiplied by ``exp((gamma - gamma_prev) * L)``. Returns
    exactly 1 when the full step keeps the ESS above the target.
    """
    L = np.asarray(log_liks, dtype=float)
    if not np.all(np.isfinite(L)):
        raise SMCError("log-likelihoods must be finite")
    lw0 = particles.log_weights
    target = zeta * _ess_from_log(lw0)

    def ess_at(g):
        return _ess_from_log(lw0 + (g - gamma_prev) * L)

    if ess_at(1.0) >= target:
        return 1.0
    lo, hi = gamma_prev, 1.0
    while hi - lo > GAMMA_TOL:
        mid = 0.5 * (lo + hi)
        if ess_at(mid) >= target:
            lo = mid
        else:
            hi = mid
    return lo if lo > gamma_prev else hi


def reweight(particles: ParticleSet, log_liks, gamma_new: float) -> ParticleSet:
    """Multiply weights by ``exp((gamma_new - gamma) * L)`` and renormalize."""
    dg = gamma_new - particles.gamma
    if dg < 0:
        raise SMCError("gamma must not decrease")
    lw = particles.log_weights + dg * np.asarray(log_liks, dtype=float)
    return replace(particles, log_weights=lw, gamma=float(gamma_new))


def systematic_indices(weights, rng) -> np.ndarray:
    """Offspring indices by systematic resampling (one uniform offset)."""
    w = np.asarray(weights, dtype=float)
    n = w.size
    cum = np.cumsum(w / np.sum(w))
    cum[-1] = 1.0
    positions = (rng.uniform() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cum, positions, side="right"), n - 1)


def systematic_resample(particles: ParticleSet, rng) -> ParticleSet:
    return particles.take(systematic_indices(particles.weights, rng))


def weighted_covariance(positions, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    w = w / np.sum(w)
    mean = w @ positions
    dev = positions - mean
    return (dev * w[:, None]).T @ dev


@dataclass
class ScaleState:
    """Random-walk scale ``c``; the proposal covariance is ``c^2 * Sigma``."""

    c: float
    c_unit: float

    @classmethod
    def initial(cls, dim: int, scale: float | None = None) -> "ScaleState":
        c_unit = 2.38 / np.sqrt(dim)
        return cls(c_unit if scale is None else float(scale), c_unit)

    def update(self, acceptance_rate: float) -> None:
        self.c = (ACCEPT_A + ACCEPT_B * acceptance_rate) * self.c_unit


def rejuvenate(particles: ParticleSet, target_logpdf: Callable, n_sweeps: int, scale_state: ScaleState,
               rng, current_logpdf=None):
    """Random-walk Metropolis sweeps leaving ``target_logpdf`` invariant.

    ``target_logpdf`` maps an ``(n, d)`` array to ``n`` log densities. It may
    also return a tuple ``(log_target, *extras)`` of per-particle arrays; the
    extras are carried along with accepted moves and returned as a list.

    Returns
    -------
    particles, acceptance_rates, extras
    """
    x = particles.positions.copy()
    cur = target_logpdf(x) if current_logpdf is None else current_logpdf
    cur, cur_extra = _split(cur)
    cov = weighted_covariance(x, particles.weights)
    cov = cov + 1e-10 * np.diag(np.maximum(np.diag(cov), 1.0))
    try:
        chol = linalg.cholesky(cov, lower=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SMCError("particle covariance is singular after regularization") from exc
    rates = []
    n, d = x.shape
    for _ in range(n_sweeps):
        prop = x + scale_state.c * rng.standard_normal((n, d)) @ chol.T
        new, new_extra = _split(target_logpdf(prop))
        log_u = np.log(rng.uniform(size=n))
        with np.errstate(invalid="ignore"):
            accept = log_u < (new - cur)
        accept &= np.isfinite(new)
        x[accept] = prop[accept]
        cur = np.where(accept, new, cur)
        cur_extra = [np.where(accept, ne, ce) for ne, ce in zip(new_extra, cur_extra)]
        rate = float(np.mean(accept))
        rates.append(rate)
        scale_state.update(rate)
    return replace(particles, positions=x), rates, [cur, *cur_extra]


def _split(value):
    if isinstance(value, tuple):
        return np.asarray(value[0], dtype=float), [np.asarray(v, dtype=float) for v in value[1:]]
    return np.asarray(value, dtype=float), []


def run_smc(log_lik_fn: Callable, prior: Prior, config: SMCConfig, return_trace: bool = False):
    """Sample the posterior ``exp(L(x)) p(x)`` with adaptive tempering.

    ``log_lik_fn`` maps an ``(n, d)`` array to ``n`` finite log-likelihoods on
    the prior support. Returns the final normalized :class:`ParticleSet`
    (and the :class:`SMCTrace` when ``return_trace``).
    """
    rng = np.random.default_rng(config.rng_seed)
    N = config.n_particles
    x = prior.sample(rng, N)
    L = np.asarray(log_lik_fn(x), dtype=float)
    bad = np.flatnonzero(~np.isfinite(L))
    if bad.size:
        raise SMCError(f"non-finite log-likelihood at prior draw {bad[0]}: {x[bad[0]].tolist()}")
    lp = prior.log_pdf(x)
    particles = ParticleSet(x, np.zeros(N), 0.0, L, lp)
    trace = SMCTrace(gammas=[0.0], ess=[float(N)])
    scale = ScaleState.initial(prior.dim, config.proposal_scale_init)

    def evaluate(gamma):
        def target(pos):
            lpr = prior.log_pdf(pos)
            ll = np.full(pos.shape[0], -np.inf)
            ok = np.isfinite(lpr)
            if np.any(ok):
                ll[ok] = log_lik_fn(pos[ok])
            with np.errstate(invalid="ignore"):
                t = np.where(ok, gamma * ll + lpr, -np.inf)
            return t, ll, lpr
        return target

    step = 0
    while particles.gamma < 1.0:
        step += 1
        if step > config.max_steps:
            raise SMCError(f"no convergence to gamma = 1 within {config.max_steps} steps")
        gamma = find_gamma_step(particles, particles.log_lik, particles.gamma, config.zeta)
        particles = reweight(particles, particles.log_lik, gamma)
        ess = particles.ess
        resampled = ess < config.ess_min_fraction * N
        if resampled:
            particles = systematic_resample(particles, rng)
        target = evaluate(gamma)
        current = (gamma * particles.log_lik + particles.log_prior, particles.log_lik, particles.log_prior)
        particles, rates, (_, ll, lpr) = rejuvenate(particles, target, config.n_rejuvenation, scale, rng,
                                                    current_logpdf=current)
        particles.log_lik, particles.log_prior = ll, lpr
        trace.gammas.append(float(gamma))
        trace.ess.append(float(ess))
        trace.resampled.append(bool(resampled))
        trace.acceptance.append(rates)
        trace.scales.append(float(scale.c))
        log.debug("step %d gamma=%.6g ess=%.1f resampled=%s acc=%.3f", step, gamma, ess, resampled,
                  float(np.mean(rates)))
    particles.log_weights = normalize_log_weights(particles.log_weights)
    return (particles, trace) if return_trace else particles
