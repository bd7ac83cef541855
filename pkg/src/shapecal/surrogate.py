"""Gaussian-process regression of the log-likelihood over standardized inputs.

Two kernels are available: an isotropic Matern-3/2 kernel (``"matern32"``)
and a product of one-dimensional Matern-3/2 factors with one length scale per
input dimension (``"ard"``). Both share a single signal variance. The prior
mean and the nugget are fixed from the training outputs before the
hyperparameters are fitted by maximizing the log marginal likelihood.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import cdist

from ._kernels import kernel_matvec
from .parameter_space import ParameterBox, standardize

log = logging.getLogger(__name__)

SQRT3 = np.sqrt(3.0)
KERNELS = ("matern32", "ard")
_PREDICT_CHUNK = 2048


class SurrogateError(RuntimeError):
    pass


def matern32(x, x2, sigma_k2: float, l_k: float):
    """Matern-3/2 covariance ``s2 (1 + sqrt(3) r / l) exp(-sqrt(3) r / l)``.

    With 1-D inputs returns the scalar covariance of two points; with 2-D
    inputs ``(n, d)`` and ``(m, d)`` returns the ``(n, m)`` matrix.
    """
    if not (l_k > 0 and sigma_k2 > 0):
        raise ValueError("need l_k > 0 and sigma_k2 > 0")
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x.ndim <= 1 and x2.ndim <= 1:
        r = np.linalg.norm(np.atleast_1d(x) - np.atleast_1d(x2))
        a = SQRT3 * r / l_k
        return float(sigma_k2 * (1.0 + a) * np.exp(-a))
    a = SQRT3 * cdist(np.atleast_2d(x), np.atleast_2d(x2)) / l_k
    return sigma_k2 * (1.0 + a) * np.exp(-a)


def _unit_kernel(X1, X2, lengthscales, kind):
    """Kernel with unit signal variance."""
    ls = np.asarray(lengthscales, dtype=float)
    if kind == "matern32":
        a = cdist(X1, X2)
        a *= SQRT3 / ls[0]
        k = 1.0 + a
        np.negative(a, out=a)
        np.exp(a, out=a)
        k *= a
        return k
    scaled1 = X1 * (SQRT3 / ls)
    scaled2 = X2 * (SQRT3 / ls)
    k = np.exp(-cdist(scaled1, scaled2, "cityblock"))
    for j in range(ls.size):
        diff = np.subtract.outer(scaled1[:, j], scaled2[:, j])
        np.abs(diff, out=diff)
        diff += 1.0
        k *= diff
    return k


def prior_mean_rule(log_liks) -> float:
    """Constant prior mean one output range below the smallest training value."""
    y = np.asarray(log_liks, dtype=float)
    y = y[np.isfinite(y)]
    if y.size == 0:
        raise SurrogateError("prior mean needs at least one successful training output")
    lo, hi = float(np.min(y)), float(np.max(y))
    return lo - 1.0 * (hi - lo)


def nugget_rule(log_liks) -> float:
    """Fixed nugget variance ``1e-5 * range(log_liks)``, floored at 1e-12."""
    y = np.asarray(log_liks, dtype=float)
    y = y[np.isfinite(y)]
    if y.size == 0:
        raise SurrogateError("nugget needs at least one successful training output")
    return max(1e-5 * float(np.max(y) - np.min(y)), 1e-12)


@dataclass
class TrainingSet:
    """Raw parameter points, their log-likelihoods and failure flags.

    Failed entries carry ``nan`` as log-likelihood.
    """

    inputs: np.ndarray
    log_liks: np.ndarray
    failed_mask: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.log_liks = np.asarray(self.log_liks, dtype=float).ravel()
        self.failed_mask = np.asarray(self.failed_mask, dtype=bool).ravel()
        n = self.inputs.shape[0]
        if self.log_liks.size != n or self.failed_mask.size != n:
            raise SurrogateError("inputs, log_liks and failed_mask need equal length")
        if np.any(np.isfinite(self.log_liks[self.failed_mask])):
            raise SurrogateError("failed entries must not carry a log-likelihood")
        if not np.all(np.isfinite(self.log_liks[~self.failed_mask])):
            raise SurrogateError("successful entries need a finite log-likelihood")

    def __len__(self):
        return self.inputs.shape[0]

    def successful(self):
        keep = ~self.failed_mask
        return self.inputs[keep], self.log_liks[keep]

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(self.inputs[idx], self.log_liks[idx], self.failed_mask[idx])


@dataclass
class GPModel:
    """Fitted GP; inputs are stored standardized against ``box``."""

    X: np.ndarray
    y: np.ndarray
    box: ParameterBox
    kind: str
    lengthscales: np.ndarray
    signal_var: float
    nugget: float
    mean: float
    chol: np.ndarray = field(init=False, repr=False)
    alpha: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise SurrogateError(f"unknown kernel {self.kind!r}")
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        expected = 1 if self.kind == "matern32" else self.X.shape[1]
        if self.lengthscales.size != expected:
            raise SurrogateError(f"{self.kind} kernel needs {expected} length scale(s)")
        K = self.signal_var * _unit_kernel(self.X, self.X, self.lengthscales, self.kind)
        K[np.diag_indices_from(K)] += self.nugget
        try:
            self.chol = linalg.cholesky(K, lower=True)
        except linalg.LinAlgError as exc:
            raise SurrogateError("covariance matrix is not positive definite") from exc
        self.alpha = linalg.cho_solve((self.chol, True), self.y - self.mean)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def _standardize(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim:
            raise SurrogateError(f"query has {x.shape[1]} coordinates, model expects {self.dim}")
        return standardize(x, self.box)

    def kernel(self, U1, U2):
        return self.signal_var * _unit_kernel(U1, U2, self.lengthscales, self.kind)

    def predict_mean(self, x) -> np.ndarray:
        """Posterior mean at raw (unstandardized) inputs."""
        U = self._standardize(x)
        return self.mean + kernel_matvec(U, self.X, self.lengthscales, self.kind, self.signal_var * self.alpha)

    def predict(self, x):
        """Posterior mean and variance at raw inputs; variance clamped at 0."""
        U = self._standardize(x)
        mean = self.predict_mean(x)
        var = np.empty(U.shape[0])
        for i in range(0, U.shape[0], _PREDICT_CHUNK):
            ks = self.kernel(U[i:i + _PREDICT_CHUNK], self.X)
            v = linalg.solve_triangular(self.chol, ks.T, lower=True)
            var[i:i + _PREDICT_CHUNK] = self.signal_var - np.einsum("ij,ij->j", v, v)
        return mean, np.maximum(var, 0.0)

    def log_marginal_likelihood(self) -> float:
        r = self.y - self.mean
        n = self.y.size
        return float(-0.5 * r @ self.alpha - np.sum(np.log(np.diag(self.chol))) - 0.5 * n * np.log(2 * np.pi))

    def to_dict(self) -> dict:
        return {
            "kernel": self.kind,
            "inputs": self.X.tolist(),
            "outputs": self.y.tolist(),
            "box": self.box.to_list(),
            "lengthscales": self.lengthscales.tolist(),
            "signal_variance": self.signal_var,
            "nugget": self.nugget,
            "prior_mean": self.mean,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GPModel":
        return cls(
            X=np.asarray(data["inputs"], dtype=float),
            y=np.asarray(data["outputs"], dtype=float),
            box=ParameterBox.from_list(data["box"]),
            kind=data["kernel"],
            lengthscales=np.asarray(data["lengthscales"], dtype=float),
            signal_var=float(data["signal_variance"]),
            nugget=float(data["nugget"]),
            mean=float(data["prior_mean"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GPModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def predict(model: GPModel, x_query):
    return model.predict(x_query)


def log_marginal_likelihood(model: GPModel) -> float:
    return model.log_marginal_likelihood()


def _pairwise_terms(U, kind):
    if kind == "matern32":
        return cdist(U, U)
    return np.abs(U[:, None, :] - U[None, :, :]).transpose(2, 0, 1).copy()


def lml_and_grad(log_params, U, y, mean, nugget, kind, _pairs=None):
    """Log marginal likelihood and its gradient w.r.t. ``log_params``.

    ``log_params`` is ``[log l_1, ..., log l_p, log sigma_k^2]`` with one
    length scale for the isotropic kernel and one per dimension for ARD.
    """
    log_params = np.asarray(log_params, dtype=float)
    ls = np.exp(log_params[:-1])
    s2 = float(np.exp(log_params[-1]))
    pairs = _pairwise_terms(U, kind) if _pairs is None else _pairs
    n = y.size
    if kind == "matern32":
        a = SQRT3 * pairs / ls[0]
        ea = np.exp(-a)
        ku = (1.0 + a) * ea
        dku = [a * a * ea]
    else:
        a = SQRT3 * pairs / ls[:, None, None]
        ku = np.prod(1.0 + a, axis=0) * np.exp(-np.sum(a, axis=0))
        dku = [ku * a[j] ** 2 / (1.0 + a[j]) for j in range(ls.size)]
    K = s2 * ku
    K[np.diag_indices(n)] += nugget
    c = linalg.cho_factor(K, lower=True)
    r = y - mean
    alpha = linalg.cho_solve(c, r)
    lml = -0.5 * r @ alpha - np.sum(np.log(np.diag(c[0]))) - 0.5 * n * np.log(2 * np.pi)
    W = np.outer(alpha, alpha) - linalg.cho_solve(c, np.eye(n))
    grad = np.empty(log_params.size)
    for j, d in enumerate(dku):
        grad[j] = 0.5 * np.sum(W * (s2 * d))
    grad[-1] = 0.5 * np.sum(W * (s2 * ku))
    return float(lml), grad


def fit_gp(train: TrainingSet, box: ParameterBox, kernel_kind: str = "matern32", restarts: int = 5,
           rng_seed: int = 0, nugget: float | None = None, maxiter: int = 200) -> GPModel:
    """Fit a GP to the successful runs of ``train``.

    The prior mean and nugget come from :func:`prior_mean_rule` and
    :func:`nugget_rule` (pass ``nugget`` to override). Hyperparameters are
    optimized with L-BFGS-B on their logarithms from ``restarts`` starting
    points drawn log-uniformly from ``l in [0.01, 10]`` and
    ``sigma_k^2 in [1e-2, 1e2] * var(y)``; the best final value wins.
    """
    if kernel_kind not in KERNELS:
        raise SurrogateError(f"unknown kernel {kernel_kind!r}")
    X, y = train.successful()
    if y.size < 2:
        raise SurrogateError(f"need at least 2 successful training points, got {y.size}")
    if restarts < 1:
        raise SurrogateError("need at least one restart")
    U = standardize(X, box)
    mean = prior_mean_rule(y)
    nug = nugget_rule(y) if nugget is None else float(nugget)
    scale = float(np.var(y)) if np.var(y) > 0 else 1.0
    n_ls = 1 if kernel_kind == "matern32" else U.shape[1]
    bounds = [(np.log(1e-3), np.log(1e2))] * n_ls + [(np.log(1e-6 * scale), np.log(1e6 * scale))]
    pairs = _pairwise_terms(U, kernel_kind)
    rng = np.random.default_rng(rng_seed)

    def objective(p):
        try:
            val, grad = lml_and_grad(p, U, y, mean, nug, kernel_kind, pairs)
        except (linalg.LinAlgError, ValueError):
            return 1e25, np.zeros_like(p)
        return -val, -grad

    best = None
    for i in range(restarts):
        start = np.concatenate([
            rng.uniform(np.log(0.01), np.log(10.0), size=n_ls),
            [rng.uniform(np.log(1e-2 * scale), np.log(1e2 * scale))],
        ])
        res = optimize.minimize(objective, start, jac=True, method="L-BFGS-B", bounds=bounds,
                                options={"maxiter": maxiter})
        log.debug("restart %d: -lml=%.6g (%s)", i, res.fun, res.message)
        if res.fun < 1e24 and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise SurrogateError("covariance factorization failed at every restart")
    p = best.x
    return GPModel(U, y, box, kernel_kind, np.exp(p[:-1]), float(np.exp(p[-1])), nug, mean)


def test_error(model: GPModel, test_inputs, test_log_liks) -> float:
    """L2 norm of the predicted-mean error over a test set."""
    pred = model.predict_mean(test_inputs)
    return float(np.linalg.norm(pred - np.asarray(test_log_liks, dtype=float)))


test_error.__test__ = False  # keep pytest from collecting it
