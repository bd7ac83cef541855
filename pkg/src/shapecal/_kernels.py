"""Compiled loops for GP mean prediction (kernel row times weights, fused)."""

import math

import numba
import numpy as np

SQRT3 = math.sqrt(3.0)


@numba.njit(cache=True, fastmath=True)
def _iso_matvec(U, XT, inv_l, alpha, out):
    n, d = U.shape
    m = XT.shape[1]
    r2 = np.empty(m)
    c = SQRT3 * inv_l
    for i in range(n):
        r2[:] = 0.0
        for k in range(d):
            u = U[i, k]
            for j in range(m):
                t = u - XT[k, j]
                r2[j] += t * t
        acc = 0.0
        for j in range(m):
            a = c * math.sqrt(r2[j])
            acc += (1.0 + a) * math.exp(-a) * alpha[j]
        out[i] = acc


@numba.njit(cache=True, fastmath=True)
def _ard_matvec(U, XT, inv_l, alpha, out):
    # XT is (d, m): the inner loops run over training points and vectorize
    n, d = U.shape
    m = XT.shape[1]
    s = np.empty(m)
    p = np.empty(m)
    for i in range(n):
        s[:] = 0.0
        p[:] = 1.0
        for k in range(d):
            c = SQRT3 * inv_l[k]
            u = U[i, k]
            for j in range(m):
                a = c * abs(u - XT[k, j])
                s[j] += a
                p[j] *= 1.0 + a
        acc = 0.0
        for j in range(m):
            acc += p[j] * math.exp(-s[j]) * alpha[j]
        out[i] = acc


def kernel_matvec(U, X, lengthscales, kind, alpha):
    """``k(U, X) @ alpha`` for the unit-variance kernel without forming the matrix."""
    U = np.ascontiguousarray(U, dtype=np.float64)
    XT = np.ascontiguousarray(np.asarray(X, dtype=np.float64).T)
    alpha = np.ascontiguousarray(alpha, dtype=np.float64)
    inv_l = 1.0 / np.asarray(lengthscales, dtype=np.float64)
    out = np.empty(U.shape[0])
    if kind == "matern32":
        _iso_matvec(U, XT, float(inv_l[0]), alpha, out)
    else:
        _ard_matvec(U, XT, np.ascontiguousarray(inv_l), alpha, out)
    return out
