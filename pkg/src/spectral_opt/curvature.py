"""Kronecker-factored quadratics and the spectral quantities of the step-size
and convergence-rate comparison between gradient descent and Muon.

A quadratic is L(W) = 1/2 vec(W - W*)^T (A kron B) vec(W - W*) with A (n x n) in
the role of X^T X and B (m x m) in the role of G G^T. Loss and gradient use the
matrix form; H = A kron B is only materialized on request.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .densela import (
    SPD_FLOOR,
    NotSPDError,
    as_matrix,
    kron,
    sqrt_spd,
    svd,
    sym_eig,
)
from .polar import spectral_flatness

SPD_REG = 1e-6


def _extremes(s) -> tuple[float, float]:
    values = sym_eig(s).values
    return float(values[0]), float(values[-1])


def _require_spd(s, name: str) -> tuple[float, float]:
    lo, hi = _extremes(s)
    if lo <= 0.0:
        raise NotSPDError(f"{name} is not positive definite (lambda_min = {lo:.3e})")
    return lo, hi


@dataclass(frozen=True)
class KroneckerQuadratic:
    A: np.ndarray  # n x n, SPD
    B: np.ndarray  # m x m, SPD
    W_star: np.ndarray  # m x n
    _spectra: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        a = as_matrix(self.A, name="A")
        b = as_matrix(self.B, name="B")
        w = as_matrix(self.W_star, name="W_star")
        if a.shape != (w.shape[1], w.shape[1]) or b.shape != (w.shape[0], w.shape[0]):
            raise ValueError(f"factor shapes {a.shape}, {b.shape} do not fit W* {w.shape}")
        for mat, name in ((a, "A"), (b, "B")):
            if not np.allclose(mat, mat.T, rtol=0.0, atol=1e-12 * np.abs(mat).max()):
                raise ValueError(f"{name} is not symmetric")
        a = 0.5 * (a + a.T)
        b = 0.5 * (b + b.T)
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "B", b)
        object.__setattr__(self, "W_star", w)
        object.__setattr__(self, "_spectra", (_require_spd(a, "A"), _require_spd(b, "B")))

    @property
    def shape(self) -> tuple[int, int]:
        return self.W_star.shape

    @property
    def lam_A(self) -> tuple[float, float]:
        return self._spectra[0]

    @property
    def lam_B(self) -> tuple[float, float]:
        return self._spectra[1]

    @property
    def beta(self) -> float:
        """lambda_max(H) = lambda_max(A) lambda_max(B)."""
        return self.lam_A[1] * self.lam_B[1]

    @property
    def alpha(self) -> float:
        """lambda_min(H) = lambda_min(A) lambda_min(B)."""
        return self.lam_A[0] * self.lam_B[0]

    @cached_property
    def H(self) -> np.ndarray:
        return kron(self.A, self.B)


def make_quadratic(
    m: int,
    n: int,
    cond_A: float | None = None,
    cond_B: float | None = None,
    seed: int = 0,
) -> KroneckerQuadratic:
    """Seeded random instance.

    Each factor is R^T R + k * 1e-6 * I with R standard normal (k = its size); a
    requested condition number is imposed by log-affine rescaling of the
    eigenvalues, keeping eigenvectors and lambda_max.
    """
    rng = np.random.default_rng(seed)

    def factor(k, cond):
        r = rng.standard_normal((k, k))
        s = r.T @ r + k * SPD_REG * np.eye(k)
        if cond is not None and k > 1:
            if cond < 1.0:
                raise ValueError("condition number must be >= 1")
            values, vectors = sym_eig(s)
            logs = np.log(values)
            span = logs[-1] - logs[0]
            unit = (logs - logs[0]) / span if span > 0 else np.linspace(0.0, 1.0, k)
            values = values[-1] * np.exp((unit - 1.0) * np.log(cond))
            s = (vectors * values) @ vectors.T
            s = 0.5 * (s + s.T)
        return s

    a = factor(n, cond_A)
    b = factor(m, cond_B)
    w_star = rng.standard_normal((m, n))
    return KroneckerQuadratic(a, b, w_star)


def _check_shape(q: KroneckerQuadratic, w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != q.shape:
        raise ValueError(f"W has shape {w.shape}, instance expects {q.shape}")
    return w


def loss(q: KroneckerQuadratic, w) -> float:
    """1/2 tr(D^T B D A) with D = W - W*; equals 1/2 vec(D)^T (A kron B) vec(D)."""
    d = _check_shape(q, w) - q.W_star
    return 0.5 * float(np.sum((q.B @ d @ q.A) * d))


def gradient(q: KroneckerQuadratic, w) -> np.ndarray:
    """B (W - W*) A, i.e. vec(G) = (A kron B) vec(W - W*)."""
    d = _check_shape(q, w) - q.W_star
    return q.B @ d @ q.A


def eta_max_gd(lam_max_H: float) -> float:
    if not lam_max_H > 0.0:
        raise ValueError("lambda_max(H) must be positive")
    return 2.0 / lam_max_H


def eta_max_muon(lam_max_H: float, sigma, m: int) -> float:
    """(2 / lambda_max(H)) * sum(sigma) / m."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if not lam_max_H > 0.0:
        raise ValueError("lambda_max(H) must be positive")
    if m < 1:
        raise ValueError("m must be >= 1")
    if np.any(sigma < 0.0):
        raise ValueError("singular values must be non-negative")
    return 2.0 / lam_max_H * float(np.sum(sigma)) / m


@dataclass(frozen=True)
class KfacFactors:
    A: np.ndarray  # X^T X
    B: np.ndarray  # G G^T
    lam_max_A: float
    lam_max_B: float

    @property
    def lam_max_H(self) -> float:
        return self.lam_max_A * self.lam_max_B


def kfac_factors(x, g) -> KfacFactors:
    """K-FAC factors for a layer with input batch X (b x d) and gradient G (m x d)."""
    x = as_matrix(x, name="X")
    g = as_matrix(g, name="G")
    if x.shape[1] != g.shape[1]:
        raise ValueError(f"X has {x.shape[1]} features but G has {g.shape[1]} columns")
    a = x.T @ x
    b = g @ g.T
    return KfacFactors(a, b, _extremes(a)[1], _extremes(b)[1])


def condition_ratios(a, ggt) -> tuple[float, float]:
    """(alpha/beta, alpha~/beta~) for H = A kron GG^T and P = I kron (GG^T)^(-1/2)."""
    a_lo, a_hi = _require_spd(a, "A")
    g_lo, g_hi = _require_spd(ggt, "GG^T")
    ratio_gd = (a_lo * g_lo) / (a_hi * g_hi)
    ratio_muon = (a_lo * np.sqrt(g_lo)) / (a_hi * np.sqrt(g_hi))
    return float(ratio_gd), float(ratio_muon)


def preconditioned_extremes(p, h) -> tuple[float, float]:
    """(lambda_min, lambda_max) of P H, via the similar matrix P^(1/2) H P^(1/2)."""
    p = as_matrix(p, name="P")
    h = as_matrix(h, name="H")
    if p.shape != h.shape or p.shape[0] != p.shape[1]:
        raise ValueError(f"P {p.shape} and H {h.shape} must be square and equal in size")
    root = sqrt_spd(p)
    q = root @ h @ root
    return _extremes(0.5 * (q + q.T))


def _gram_power(g: np.ndarray, power: float) -> np.ndarray:
    """(G G^T)^power for m <= n, else (G^T G)^power, from the SVD of G.

    Working from sigma rather than the Gram matrix keeps small singular values
    accurate; the SPD floor is applied to sigma^2 as for an eigendecomposition.
    """
    res = svd(g if g.shape[0] <= g.shape[1] else g.T)
    lam = res.sigma**2
    if lam[0] <= 0.0 or lam[-1] < SPD_FLOOR * lam[0]:
        raise NotSPDError(f"Gram matrix of G is singular within floor: sigma={res.sigma}")
    out = (res.U * lam**power) @ res.U.T
    return 0.5 * (out + out.T)


def muon_preconditioner(g) -> np.ndarray:
    """Materialized P with vec(polar(G)) = P vec(G).

    I_n kron (G G^T)^(-1/2) when m <= n, else (G^T G)^(-1/2) kron I_m.
    """
    g = as_matrix(g, name="G")
    m, n = g.shape
    root = _gram_power(g, -0.5)
    return kron(np.eye(n), root) if m <= n else kron(root, np.eye(m))


def kron_preconditioned_extremes(q: KroneckerQuadratic, g) -> tuple[float, float]:
    """(alpha~, beta~) of P H for H = A kron B without materializing either.

    With S = G G^T (m <= n), P^(1/2) H P^(1/2) = A kron (S^(-1/4) B S^(-1/4)), whose
    extreme eigenvalues are products of the factors' extremes.
    """
    g = as_matrix(g, name="G")
    root = _gram_power(g, -0.25)
    if g.shape[0] <= g.shape[1]:
        (a_lo, a_hi), (c_lo, c_hi) = q.lam_A, _extremes(root @ q.B @ root)
    else:
        (a_lo, a_hi), (c_lo, c_hi) = _extremes(root @ q.A @ root), q.lam_B
    return a_lo * c_lo, a_hi * c_hi


@dataclass(frozen=True)
class SpectralReport:
    sigma: np.ndarray
    lam_max_A: float
    lam_min_A: float
    lam_max_B: float
    lam_min_B: float
    eta_max_gd: float
    eta_max_muon: float
    ratio_gd: float | None  # None when GG^T is singular
    ratio_muon: float | None
    flatness: float

    def lines(self) -> list[str]:
        def fmt(v):
            return "undefined" if v is None else f"{v:.17g}"

        out = [f"sigma={','.join(f'{s:.17g}' for s in self.sigma)}"]
        for key in (
            "lam_max_A", "lam_min_A", "lam_max_B", "lam_min_B",
            "eta_max_gd", "eta_max_muon", "ratio_gd", "ratio_muon", "flatness",
        ):
            out.append(f"{key}={fmt(getattr(self, key))}")
        out.append(f"eta_ratio={fmt(self.eta_max_muon / self.eta_max_gd)}")
        return out


def spectral_report(g, x=None) -> SpectralReport:
    """Step-size and conditioning summary for gradient G (m x n) and layer input X (b x n).

    Without X the input covariance is taken to be the identity. Singular values
    are averaged over min(m, n); the ratios are undefined when G G^T is singular.
    """
    g = as_matrix(g, name="G")
    m, n = g.shape
    if x is None:
        a = np.eye(n)
    else:
        x = as_matrix(x, name="X")
        a = x.T @ x
    if a.shape != (n, n):
        raise ValueError(f"X^T X is {a.shape}, expected {(n, n)}")
    flat = spectral_flatness(g)
    a_lo, a_hi = _extremes(a)
    ggt = g @ g.T
    b_lo, b_hi = _extremes(ggt)
    lam_h = a_hi * b_hi
    try:
        ratio_gd, ratio_muon = condition_ratios(a, ggt)
    except NotSPDError:
        ratio_gd = ratio_muon = None
    return SpectralReport(
        sigma=flat.sigma,
        lam_max_A=a_hi,
        lam_min_A=a_lo,
        lam_max_B=b_hi,
        lam_min_B=b_lo,
        eta_max_gd=eta_max_gd(lam_h),
        eta_max_muon=eta_max_muon(lam_h, flat.sigma, min(m, n)),
        ratio_gd=ratio_gd,
        ratio_muon=ratio_muon,
        flatness=flat.flatness,
    )
