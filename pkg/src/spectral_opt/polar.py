"""Orthogonal polar factor of a gradient matrix.

``exact_polar`` returns U V^T from a Jacobi SVD. ``newton_schulz`` approximates it
with an odd matrix polynomial iteration X <- aX + bX(X^T X) + cX(X^T X)^2, the way
Muon does. Inputs with more rows than columns are transposed, processed and
transposed back, so internally rows <= cols.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .densela import NonFiniteError, as_matrix, frobenius_norm, svd

RANK_TOL = 1e-10

# p(s) = (15 s - 10 s^3 + 3 s^5) / 8: p(1) = 1, p'(1) = p''(1) = 0.
CLASSICAL_QUINTIC = (15 / 8, -10 / 8, 3 / 8)
CLASSICAL_CUBIC = (1.5, -0.5, 0.0)
# Coefficients used by the reference Muon implementation. They trade the
# fixed point at 1 for faster growth of small singular values; outputs settle
# in roughly [0.7, 1.2] instead of converging.
MUON_QUINTIC = (3.4445, -4.7750, 2.0315)


@dataclass(frozen=True)
class NewtonSchulzConfig:
    iterations: int = 5
    coefficients: tuple[float, float, float] = CLASSICAL_QUINTIC
    prescale_epsilon: float = 1e-7
    # Require p(1) = 1. Off only for presets that knowingly lack the fixed point.
    strict: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if len(self.coefficients) != 3:
            raise ValueError("coefficients must be a triple (a, b, c)")
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
        if self.strict and abs(self.fixed_point_value() - 1.0) > 1e-6:
            raise ValueError(
                f"coefficients {self.coefficients} give p(1) = {self.fixed_point_value():.6g}, not 1"
            )

    def fixed_point_value(self) -> float:
        a, b, c = self.coefficients
        return a + b + c

    @classmethod
    def cubic(cls, iterations: int = 5) -> NewtonSchulzConfig:
        return cls(iterations=iterations, coefficients=CLASSICAL_CUBIC)

    @classmethod
    def muon_quintic(cls, iterations: int = 5) -> NewtonSchulzConfig:
        return cls(iterations=iterations, coefficients=MUON_QUINTIC, strict=False)


DEFAULT_NS = NewtonSchulzConfig()


def _oriented(g, name="G"):
    g = as_matrix(g, name=name)
    if not np.any(g):
        raise ValueError(f"{name} is the zero matrix; its polar factor is undefined")
    flip = g.shape[0] > g.shape[1]
    return (g.T.copy() if flip else g), flip


def _retained(sigma: np.ndarray, rank_tol: float) -> np.ndarray:
    return sigma > rank_tol * sigma[0]


def exact_polar(g, rank_tol: float = RANK_TOL) -> np.ndarray:
    """U V^T of G, dropping singular directions with sigma <= rank_tol * sigma_max.

    For rank-deficient G the result is a partial isometry.
    """
    x, flip = _oriented(g)
    u, sigma, v = svd(x)
    keep = _retained(sigma, rank_tol)
    o = u[:, keep] @ v[:, keep].T
    return np.ascontiguousarray(o.T) if flip else o


def _ns_iterate(x: np.ndarray, cfg: NewtonSchulzConfig) -> np.ndarray:
    a, b, c = cfg.coefficients
    x = x / (frobenius_norm(x) + cfg.prescale_epsilon)
    for _ in range(cfg.iterations):
        with np.errstate(over="ignore", invalid="ignore"):
            gram = x @ x.T
            x = a * x + (b * gram + c * (gram @ gram)) @ x
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("Newton-Schulz iterate became non-finite; coefficients diverge")
    return x


def newton_schulz(g, cfg: NewtonSchulzConfig = DEFAULT_NS) -> np.ndarray:
    """Approximate polar factor of G after ``cfg.iterations`` polynomial steps."""
    x, flip = _oriented(g)
    x = _ns_iterate(x, cfg)
    return np.ascontiguousarray(x.T) if flip else x


class NSResult(NamedTuple):
    matrix: np.ndarray
    delta: float  # max |sigma_i - 1| along G's retained singular directions


def newton_schulz_report(g, cfg: NewtonSchulzConfig = DEFAULT_NS, rank_tol: float = RANK_TOL) -> NSResult:
    """Newton-Schulz output together with its deviation from an isometry.

    delta is measured as max_i |u_i^T O v_i - 1| over the singular pairs of G with
    sigma_i > rank_tol * sigma_max; filtered directions are excluded.
    """
    x, flip = _oriented(g)
    out = _ns_iterate(x, cfg)
    u, sigma, v = svd(x)
    keep = _retained(sigma, rank_tol)
    along = np.einsum("ik,ij,jk->k", u[:, keep], out, v[:, keep])
    delta = float(np.max(np.abs(along - 1.0)))
    return NSResult(np.ascontiguousarray(out.T) if flip else out, delta)


def trace_inner(g, o) -> float:
    """Frobenius inner product tr(G^T O)."""
    g = np.asarray(g, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    if g.shape != o.shape:
        raise ValueError(f"shape mismatch {g.shape} vs {o.shape}")
    return float(np.sum(g * o))


@dataclass(frozen=True)
class SpectralFlatness:
    sigma: np.ndarray  # descending; filtered directions reported as 0
    mean_sigma: float  # sum(sigma) / m
    flatness: float  # sum(sigma) / (m * sigma_max)
    sigma_max: float
    sigma_min: float


def spectral_flatness(g, rank_tol: float = RANK_TOL) -> SpectralFlatness:
    x, _ = _oriented(g)
    m = x.shape[0]
    sigma = svd(x).sigma
    sigma = np.where(_retained(sigma, rank_tol), sigma, 0.0)
    total = float(np.sum(sigma))
    return SpectralFlatness(
        sigma=sigma,
        mean_sigma=total / m,
        flatness=total / (m * sigma[0]),
        sigma_max=float(sigma[0]),
        sigma_min=float(sigma[-1]),
    )
