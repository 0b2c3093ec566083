"""Dense double-precision linear algebra.

Matrices are plain 2-D ``float64`` numpy arrays in C (row-major) order. Every
function here is pure: inputs are never written to. Eigen- and singular value
decompositions are computed with Jacobi methods (see :mod:`._jacobi`) rather
than LAPACK, so the library does not depend on which LAPACK numpy links against.
"""

from __future__ import annotations

import io
import os
from typing import NamedTuple

import numpy as np

from . import _jacobi

KRON_CAP = (4096, 4096)
EIG_MAX_SWEEPS = 100
SVD_MAX_SWEEPS = 100
EIG_OFFDIAG_TOL = 1e-12
SYMMETRY_TOL = 1e-9
SPD_FLOOR = 1e-12
_EPS = np.finfo(np.float64).eps


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class ConvergenceError(RuntimeError):
    """An iterative method ran out of iterations."""


class NotSPDError(ValueError):
    """A matrix required to be symmetric positive definite is not."""


class KronCapError(ValueError):
    """A Kronecker product would exceed the materialization cap."""


def as_matrix(a, *, name: str = "matrix") -> np.ndarray:
    """Validate and copy ``a`` into a finite 2-D float64 C-ordered array.

    Scalars become 1x1 and 1-D inputs become column vectors.
    """
    arr = np.array(a, dtype=np.float64, order="C", copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} must have positive dimensions, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return arr


def _finite(result: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(result)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return result


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return _finite(out, "matmul")


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64).T)


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    # scaled to avoid overflow on large entries
    scale = np.max(np.abs(a)) if a.size else 0.0
    if scale == 0.0:
        return 0.0
    return float(scale * np.sqrt(np.sum((a / scale) ** 2)))


def vec(a) -> np.ndarray:
    """Stack the columns of ``a`` into a column vector (column-major order)."""
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(-1, 1, order="F").copy()


def unvec(v, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`vec`."""
    v = np.asarray(v, dtype=np.float64)
    if v.size != rows * cols:
        raise ValueError(f"cannot reshape {v.size} entries to {rows}x{cols}")
    return np.ascontiguousarray(v.reshape(rows, cols, order="F"))


def kron(a, b, *, cap: tuple[int, int] = KRON_CAP) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    rows = a.shape[0] * b.shape[0]
    cols = a.shape[1] * b.shape[1]
    if rows > cap[0] or cols > cap[1]:
        raise KronCapError(f"kron result {rows}x{cols} exceeds cap {cap[0]}x{cap[1]}")
    out = (a[:, None, :, None] * b[None, :, None, :]).reshape(rows, cols)
    return _finite(out, "kron")


class EigResult(NamedTuple):
    values: np.ndarray  # ascending
    vectors: np.ndarray  # columns are eigenvectors


class SvdResult(NamedTuple):
    U: np.ndarray  # m x m
    sigma: np.ndarray  # descending, length m
    V: np.ndarray  # n x m


def _symmetrized(s, name: str = "S") -> np.ndarray:
    s = as_matrix(s, name=name)
    if s.shape[0] != s.shape[1]:
        raise ValueError(f"{name} must be square, got {s.shape}")
    fro = frobenius_norm(s)
    asym = frobenius_norm(s - s.T)
    if asym > SYMMETRY_TOL * fro:
        raise ValueError(f"{name} is not symmetric (asymmetry {asym:.3e} vs norm {fro:.3e})")
    return 0.5 * (s + s.T)


def sym_eig(s, *, max_sweeps: int = EIG_MAX_SWEEPS) -> EigResult:
    """Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.

    Iterates until the off-diagonal Frobenius mass is at most 1e-12 * ||S||_F.
    Raises ConvergenceError if that takes more than ``max_sweeps`` sweeps.
    """
    a = _symmetrized(s)
    vectors, _, converged = _jacobi.jacobi_eig(a, EIG_OFFDIAG_TOL, max_sweeps)
    if not converged:
        raise ConvergenceError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")
    values = np.diag(a).copy()
    order = np.argsort(values, kind="stable")
    return EigResult(values[order], np.ascontiguousarray(vectors[:, order]))


def _complete_columns(v: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Replace unfilled columns of ``v`` with an orthonormal completion."""
    n = v.shape[0]
    basis = [v[:, j] for j in np.flatnonzero(filled)]
    candidates = iter(np.eye(n))
    for j in np.flatnonzero(~filled):
        for e in candidates:
            w = e.copy()
            for _ in range(2):  # reorthogonalize once
                for b in basis:
                    w -= (b @ w) * b
            norm = np.linalg.norm(w)
            if norm > 1e-8:
                v[:, j] = w / norm
                basis.append(v[:, j])
                break
    return v


def svd(g, *, max_sweeps: int = SVD_MAX_SWEEPS) -> SvdResult:
    """Thin SVD of a matrix with rows <= cols by one-sided (Hestenes) Jacobi.

    Returns U (m x m), sigma descending, V (n x m) with G = U diag(sigma) V^T.
    """
    g = as_matrix(g, name="G")
    m, n = g.shape
    if m > n:
        raise ValueError(f"svd expects rows <= cols, got {g.shape}; transpose first")
    y = np.ascontiguousarray(g.T)  # columns of y are the rows of G
    tol = max(n, 2) * _EPS
    j, _, converged = _jacobi.one_sided_jacobi(y, tol, max_sweeps)
    if not converged:
        raise ConvergenceError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")
    sigma = np.sqrt(np.sum(y * y, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    y = y[:, order]
    u = np.ascontiguousarray(j[:, order])
    filled = sigma > 0.0
    v = np.zeros((n, m))
    v[:, filled] = y[:, filled] / sigma[filled]
    if not filled.all():
        v = _complete_columns(v, filled)
    return SvdResult(u, sigma, v)


def lambda_max_power(s, tol: float = 1e-10, max_iters: int = 10_000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Starts from the normalized all-ones vector and stops once the eigen-residual
    ||S v - rho v|| falls below ``tol * rho``.
    """
    s = _symmetrized(s)
    n = s.shape[0]
    v = np.full(n, 1.0 / np.sqrt(n))
    for _ in range(max_iters):
        w = s @ v
        rho = float(v @ w)
        if rho <= 0.0:
            if not np.any(w):
                return 0.0
            raise ValueError("power iteration requires a positive semidefinite matrix")
        if np.linalg.norm(w - rho * v) <= tol * rho:
            return rho
        v = w / np.linalg.norm(w)
    raise ConvergenceError(f"power iteration did not reach tol={tol} in {max_iters} iterations")


def _spd_function(s, power: float, eig_floor: float) -> np.ndarray:
    values, vectors = sym_eig(s)
    lam_max = values[-1]
    if lam_max <= 0.0 or values[0] < eig_floor * lam_max:
        raise NotSPDError(
            f"matrix is not SPD within floor: lambda_min={values[0]:.3e}, lambda_max={lam_max:.3e}"
        )
    out = (vectors * values**power) @ vectors.T
    return _finite(0.5 * (out + out.T), "spd matrix function")


def spd_power(s, power: float, *, eig_floor: float = SPD_FLOOR) -> np.ndarray:
    """S**power for symmetric positive definite S, through its eigendecomposition."""
    return _spd_function(s, power, eig_floor)


def sqrt_spd(s, *, eig_floor: float = SPD_FLOOR) -> np.ndarray:
    return _spd_function(s, 0.5, eig_floor)


def sqrt_inv_spd(s, *, eig_floor: float = SPD_FLOOR) -> np.ndarray:
    return _spd_function(s, -0.5, eig_floor)


# -- plain-text matrix format -------------------------------------------------


def format_matrix(a) -> str:
    a = as_matrix(a)
    buf = io.StringIO()
    buf.write(f"{a.shape[0]} {a.shape[1]}\n")
    for row in a:
        buf.write(" ".join(f"{x:.17g}" for x in row))
        buf.write("\n")
    return buf.getvalue()


def parse_matrix(text: str) -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty matrix text")
    header = lines[0].split()
    if len(header) != 2:
        raise ValueError(f"bad header {lines[0]!r}; expected 'rows cols'")
    rows, cols = (int(tok) for tok in header)
    if len(lines) - 1 != rows:
        raise ValueError(f"expected {rows} data rows, found {len(lines) - 1}")
    data = []
    for i, ln in enumerate(lines[1:], start=1):
        vals = [float(tok) for tok in ln.split()]
        if len(vals) != cols:
            raise ValueError(f"row {i} has {len(vals)} values, expected {cols}")
        data.append(vals)
    return as_matrix(data)


def write_matrix(path: str | os.PathLike, a) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_matrix(a))


def read_matrix(path: str | os.PathLike) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return parse_matrix(fh.read())
