"""Compiled Jacobi kernels. Callers in :mod:`spectral_opt.densela` own validation."""

import numpy as np
from numba import njit


@njit(cache=True)
def _rotation(theta):
    # smaller root of t^2 + 2*theta*t - 1 = 0
    if abs(theta) > 1e150:
        return 0.5 / theta
    sgn = 1.0 if theta >= 0.0 else -1.0
    return sgn / (abs(theta) + np.sqrt(theta * theta + 1.0))


@njit(cache=True)
def _offdiag_norm(a):
    n = a.shape[0]
    s = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                s += a[i, j] * a[i, j]
    return np.sqrt(s)


@njit(cache=True)
def jacobi_eig(a, tol, max_sweeps):
    """Cyclic Jacobi on a symmetric matrix, in place on ``a``.

    Returns (eigenvectors, sweeps_used, converged). Eigenvalues are left on the
    diagonal of ``a``.
    """
    n = a.shape[0]
    v = np.eye(n)
    fro = np.sqrt(np.sum(a * a))
    if fro == 0.0:
        return v, 0, True
    for sweep in range(max_sweeps + 1):
        if _offdiag_norm(a) <= tol * fro:
            return v, sweep, True
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                t = _rotation((a[q, q] - a[p, p]) / (2.0 * apq))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    return v, max_sweeps, False


@njit(cache=True)
def one_sided_jacobi(y, tol, max_sweeps):
    """Hestenes one-sided Jacobi: orthogonalize the columns of ``y`` in place.

    Returns (accumulated rotation J, sweeps_used, converged) with y_in @ J = y_out.
    """
    n, m = y.shape
    j = np.eye(m)
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(m - 1):
            for q in range(p + 1, m):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(n):
                    alpha += y[k, p] * y[k, p]
                    beta += y[k, q] * y[k, q]
                    gamma += y[k, p] * y[k, q]
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                t = _rotation((beta - alpha) / (2.0 * gamma))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    ykp = y[k, p]
                    ykq = y[k, q]
                    y[k, p] = c * ykp - s * ykq
                    y[k, q] = s * ykp + c * ykq
                for k in range(m):
                    jkp = j[k, p]
                    jkq = j[k, q]
                    j[k, p] = c * jkp - s * jkq
                    j[k, q] = s * jkp + c * jkq
        if not rotated:
            return j, sweep, True
    return j, max_sweeps, False
