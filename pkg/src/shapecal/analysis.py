"""Post-processing of weighted particle sets.

Moments, marginals, MAP estimates (best particle and histogram mode),
weighted kernel density estimates, Laplace approximations and CSV/JSON
export of the results.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .smc import ParticleSet, effective_sample_size

LOO_GRID_SIZE = 20
LOO_GRID_RANGE = (0.2, 5.0)
LOO_MAX_QUERIES = 1000


class AnalysisError(ValueError):
    pass


class LaplaceError(AnalysisError):
    pass


def _positions_weights(particles, weights=None):
    if isinstance(particles, ParticleSet):
        return particles.positions, particles.weights
    pos = np.asarray(particles, dtype=float)
    pos = pos[:, None] if pos.ndim == 1 else pos
    if weights is None:
        w = np.full(pos.shape[0], 1.0 / pos.shape[0])
    else:
        w = np.asarray(weights, dtype=float)
        w = w / np.sum(w)
    return pos, w


def weighted_moments(particles, weights=None):
    """Weighted mean and (biased, weight-normalized) covariance."""
    pos, w = _positions_weights(particles, weights)
    mean = w @ pos
    dev = pos - mean
    cov = (dev * w[:, None]).T @ dev
    return mean, 0.5 * (cov + cov.T)


def marginalize(particles: ParticleSet, keep_dims: Sequence[int]) -> ParticleSet:
    """Drop every coordinate not listed in ``keep_dims``; weights are untouched."""
    keep = np.asarray(keep_dims, dtype=int)
    if keep.size == 0 or np.any(keep < 0) or np.any(keep >= particles.dim):
        raise AnalysisError(f"invalid dimensions {keep.tolist()} for {particles.dim}-D particles")
    return ParticleSet(particles.positions[:, keep], particles.log_weights.copy(), particles.gamma,
                       particles.log_lik, particles.log_prior)


def map_from_particles(positions, scores) -> np.ndarray:
    """Position of the highest-scoring particle; ties go to the lowest index."""
    pos = np.asarray(positions, dtype=float)
    pos = pos[:, None] if pos.ndim == 1 else pos
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise AnalysisError("empty particle set")
    return pos[int(np.argmax(s))].copy()


@dataclass(frozen=True)
class BinSpec:
    lo: np.ndarray
    hi: np.ndarray
    bins: int

    def edges(self, j):
        return np.linspace(self.lo[j], self.hi[j], self.bins + 1)

    def centers(self, idx):
        width = (self.hi - self.lo) / self.bins
        return self.lo + (np.asarray(idx) + 0.5) * width


def bin_indices(positions, bins: int, lo=None, hi=None):
    pos = np.asarray(positions, dtype=float)
    lo = pos.min(axis=0) if lo is None else np.asarray(lo, dtype=float)
    hi = pos.max(axis=0) if hi is None else np.asarray(hi, dtype=float)
    span = np.where(hi > lo, hi - lo, 1.0)
    idx = np.floor((pos - lo) / span * bins).astype(int)
    return np.clip(idx, 0, bins - 1), BinSpec(lo, hi, bins)


def map_binned(particles, bins_per_dim: int, weights=None):
    """Center of the heaviest bin of a rectangular grid over the particle bounding box.

    Ties go to the lexicographically smallest bin index. Returns the center
    vector and the :class:`BinSpec` used.
    """
    if bins_per_dim < 2:
        raise AnalysisError("need at least 2 bins per dimension")
    pos, w = _positions_weights(particles, weights)
    idx, spec = bin_indices(pos, bins_per_dim)
    uniq, inverse = np.unique(idx, axis=0, return_inverse=True)
    mass = np.bincount(inverse.ravel(), weights=w, minlength=uniq.shape[0])
    best = uniq[int(np.argmax(mass))]
    # a bin of zero width sits on the particles themselves
    center = np.where(spec.hi > spec.lo, spec.centers(best), spec.lo)
    return center, spec


def histogram(particles, dims: Sequence[int], bins: int, weights=None, ranges=None):
    """Weighted 1-D or 2-D histogram of selected coordinates; masses sum to 1.

    Returns ``(centers, mass)`` where ``centers`` is a list of per-axis bin
    center arrays and ``mass`` has shape ``(bins,)`` or ``(bins, bins)``.
    """
    pos, w = _positions_weights(particles, weights)
    sel = pos[:, list(dims)]
    if ranges is None:
        ranges = [(float(c.min()), float(c.max()) if c.max() > c.min() else float(c.min()) + 1.0) for c in sel.T]
    mass, edges = np.histogramdd(sel, bins=bins, range=ranges, weights=w)
    centers = [0.5 * (e[1:] + e[:-1]) for e in edges]
    return centers, mass / mass.sum()


def silverman_bandwidth(positions, weights) -> np.ndarray:
    """Per-dimension rule-of-thumb ``sigma * (4 / ((d + 2) N_eff))^(1 / (d + 4))``."""
    pos, w = _positions_weights(positions, weights)
    d = pos.shape[1]
    _, cov = weighted_moments(pos, w)
    sigma = np.sqrt(np.diag(cov))
    n_eff = effective_sample_size(w)
    return sigma * (4.0 / ((d + 2) * n_eff)) ** (1.0 / (d + 4))


def _kde_log_terms(query, pos, h):
    # log of the Gaussian product kernel for each (query, particle) pair
    z = (query[:, None, :] - pos[None, :, :]) / h
    return -0.5 * np.einsum("ijk,ijk->ij", z, z) - np.sum(np.log(h)) - 0.5 * pos.shape[1] * np.log(2 * np.pi)


def _loo_score(pos, w, h, rows, chunk=256):
    # weighted leave-one-out log density, evaluated at the particles in ``rows``
    logw = np.log(w)
    total = 0.0
    for i in range(0, rows.size, chunk):
        r = rows[i:i + chunk]
        lk = _kde_log_terms(pos[r], pos, h) + logw[None, :]
        lk[np.arange(r.size), r] = -np.inf
        with np.errstate(divide="ignore"):
            dens = logsumexp(lk, axis=1) - np.log1p(-w[r])
        total += np.sum(w[r] * dens)
    return float(total / np.sum(w[rows]))


def select_bandwidth(positions, weights, mode: str = "loo_grid") -> np.ndarray:
    pos, w = _positions_weights(positions, weights)
    if np.unique(pos, axis=0).shape[0] < 2:
        raise AnalysisError("bandwidth selection needs at least 2 distinct positions")
    h0 = silverman_bandwidth(pos, w)
    if np.any(h0 <= 0):
        raise AnalysisError("degenerate spread in at least one dimension")
    if mode == "silverman":
        return h0
    if mode != "loo_grid":
        raise AnalysisError(f"unknown bandwidth mode {mode!r}")
    factors = np.geomspace(*LOO_GRID_RANGE, LOO_GRID_SIZE)
    # large sets: score a fixed, evenly strided subset of query particles
    n = pos.shape[0]
    rows = np.arange(n) if n <= LOO_MAX_QUERIES else np.linspace(0, n - 1, LOO_MAX_QUERIES).astype(int)
    rows = rows[(w[rows] < 1.0) & (w[rows] > 0.0)]
    if rows.size == 0:
        return h0
    scores = [_loo_score(pos, w, f * h0, rows) for f in factors]
    return factors[int(np.argmax(scores))] * h0


def weighted_kde(particles, query_points, bandwidth_mode="loo_grid", weights=None, chunk=1024):
    """Gaussian-kernel density of weighted 1-D or 2-D particles.

    ``bandwidth_mode`` is ``"silverman"``, ``"loo_grid"`` or an explicit
    bandwidth (scalar or one value per dimension).
    """
    pos, w = _positions_weights(particles, weights)
    if pos.shape[1] not in (1, 2):
        raise AnalysisError("weighted_kde supports 1-D and 2-D positions")
    if isinstance(bandwidth_mode, str):
        h = select_bandwidth(pos, w, bandwidth_mode)
    else:
        h = np.broadcast_to(np.asarray(bandwidth_mode, dtype=float), (pos.shape[1],)).copy()
        if np.any(h <= 0):
            raise AnalysisError("bandwidth must be positive")
    q = np.asarray(query_points, dtype=float)
    q = q[:, None] if q.ndim == 1 else q
    logw = np.log(w)
    out = np.empty(q.shape[0])
    for i in range(0, q.shape[0], chunk):
        out[i:i + chunk] = np.exp(logsumexp(_kde_log_terms(q[i:i + chunk], pos, h) + logw[None, :], axis=1))
    return out


def finite_difference_hessian(fn: Callable, x, steps) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    h = np.asarray(steps, dtype=float)
    d = x.size
    f0 = fn(x)
    H = np.empty((d, d))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h[i]
        H[i, i] = (fn(x + ei) - 2.0 * f0 + fn(x - ei)) / h[i] ** 2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (fn(x + ei + ej) - fn(x + ei - ej) - fn(x - ei + ej) + fn(x - ei - ej)) / (
                4.0 * h[i] * h[j])
    return H


def laplace_approximation(log_post_fn: Callable, map_point, fd_step: float = 1e-4, scale=None):
    """Gaussian approximation at ``map_point`` from a central-difference Hessian.

    The step in dimension ``i`` is ``fd_step * scale[i]``; pass the parameter
    box widths as ``scale`` to get steps relative to standardized units.

    Raises
    ------
    LaplaceError
        If the negative Hessian is not positive definite.
    """
    x = np.asarray(map_point, dtype=float).ravel()
    scale = np.ones_like(x) if scale is None else np.asarray(scale, dtype=float)
    H = finite_difference_hessian(lambda z: float(log_post_fn(z)), x, fd_step * scale)
    neg = -0.5 * (H + H.T)
    try:
        chol = np.linalg.cholesky(neg)
    except np.linalg.LinAlgError:
        raise LaplaceError("non-PD Hessian: the negative Hessian at the MAP is not positive definite") from None
    inv_chol = np.linalg.inv(chol)
    cov = inv_chol.T @ inv_chol
    return x, 0.5 * (cov + cov.T)


@dataclass
class PosteriorSummary:
    pm: np.ndarray
    cov: np.ndarray
    map_particle: np.ndarray
    map_score: float
    map_binned: np.ndarray
    bins: int

    def to_dict(self) -> dict:
        return {
            "posterior_mean": self.pm.tolist(),
            "covariance": self.cov.tolist(),
            "map_particle": self.map_particle.tolist(),
            "map_particle_score": self.map_score,
            "map_binned": self.map_binned.tolist(),
            "map_bins_per_dim": self.bins,
        }


def summarize(particles: ParticleSet, scores, bins: int = 30) -> PosteriorSummary:
    pm, cov = weighted_moments(particles)
    scores = np.asarray(scores, dtype=float)
    best = int(np.argmax(scores))
    center, _ = map_binned(particles, bins)
    return PosteriorSummary(pm, cov, particles.positions[best].copy(), float(scores[best]), center, bins)


# --- file layer -------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def particle_columns(n_params: int, n_theta: int = 0) -> list:
    return [f"param_{i}" for i in range(n_params)] + [f"theta_{j}" for j in range(n_theta)] + [
        "weight", "log_lik", "log_prior"]


def write_particles_csv(path, particles: ParticleSet, n_params: int) -> None:
    n_theta = particles.dim - n_params
    w = particles.weights
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(particle_columns(n_params, n_theta))
        for i in range(particles.n):
            writer.writerow([_fmt(v) for v in particles.positions[i]]
                            + [_fmt(w[i]), _fmt(particles.log_lik[i]), _fmt(particles.log_prior[i])])


def read_particles_csv(path):
    """Return ``(particles, n_params)`` from a particle CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader])
    n_params = sum(h.startswith("param_") for h in header)
    n_theta = sum(h.startswith("theta_") for h in header)
    d = n_params + n_theta
    w = rows[:, d]
    with np.errstate(divide="ignore"):
        lw = np.log(w)
    ps = ParticleSet(rows[:, :d], lw, 1.0, rows[:, d + 1], rows[:, d + 2])
    return ps, n_params


def write_histogram_csv(path, centers, mass) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if len(centers) == 1:
            writer.writerow(["bin_center_0", "mass"])
            for c, m in zip(centers[0], mass):
                writer.writerow([_fmt(c), _fmt(m)])
        else:
            writer.writerow(["bin_center_0", "bin_center_1", "mass"])
            for i, c0 in enumerate(centers[0]):
                for j, c1 in enumerate(centers[1]):
                    writer.writerow([_fmt(c0), _fmt(c1), _fmt(mass[i, j])])


def export_tables(particles: ParticleSet, scores, out_dir, n_params: int | None = None,
                  names: Sequence[str] | None = None, hist_bins: int = 30, map_bins: int = 30,
                  pairs: Sequence[Sequence[int]] | None = None, kde_mode: str | None = "loo_grid",
                  kde_points: int = 200, laplace: dict | None = None) -> dict:
    """Write particle, histogram, parallel-axis, KDE and summary files into ``out_dir``.

    The summary refers to the calibration parameters only: uncertain-condition
    coordinates (beyond ``n_params``) are marginalized out first. ``laplace``
    is stored verbatim in the summary (a result or an error message).
    Returns a mapping of artifact names to paths.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise AnalysisError(f"cannot write to {out}: {exc}") from exc
    n_params = particles.dim if n_params is None else n_params
    n_theta = particles.dim - n_params
    names = list(names) if names is not None else [f"param_{i}" for i in range(n_params)]
    scores = np.asarray(scores, dtype=float)
    files = {}

    files["particles"] = out / "particles.csv"
    write_particles_csv(files["particles"], particles, n_params)

    marg = marginalize(particles, range(n_params))
    for i in range(n_params):
        centers, mass = histogram(marg, [i], hist_bins)
        p = out / f"hist_{i}.csv"
        write_histogram_csv(p, centers, mass)
        files[f"hist_{i}"] = p
    if pairs is None:
        pairs = [(i, j) for i in range(n_params) for j in range(i + 1, n_params)]
    for i, j in pairs:
        centers, mass = histogram(marg, [i, j], hist_bins)
        p = out / f"hist_{i}_{j}.csv"
        write_histogram_csv(p, centers, mass)
        files[f"hist_{i}_{j}"] = p

    if kde_mode is not None:
        for i in range(n_params):
            col = marg.positions[:, [i]]
            grid = np.linspace(col.min(), col.max(), kde_points)
            p = out / f"kde_{i}.csv"
            try:
                dens = weighted_kde(col, grid, kde_mode, weights=marg.weights)
            except AnalysisError:
                continue
            with open(p, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["x", "density"])
                for g, d in zip(grid, dens):
                    writer.writerow([_fmt(g), _fmt(d)])
            files[f"kde_{i}"] = p

    files["parallel_axis"] = out / "parallel_axis.csv"
    with open(files["parallel_axis"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names + [f"theta_{j}" for j in range(n_theta)] + ["log_posterior"])
        for i in range(particles.n):
            writer.writerow([_fmt(v) for v in particles.positions[i]] + [_fmt(scores[i])])

    summary = summarize(marg, scores, map_bins).to_dict()
    summary["map_particle"] = particles.positions[int(np.argmax(scores))].tolist()
    summary["names"] = names
    summary["n_particles"] = particles.n
    summary["ess"] = particles.ess
    summary["laplace"] = laplace
    files["summary"] = out / "summary.json"
    files["summary"].write_text(json.dumps(summary, indent=1))
    return files
