"""Executable checks of the step-size and convergence theory on Kronecker quadratics.

On a quadratic the second-order expansion is exact, so every bound below can be
tested sharply: one-step descent thresholds are found by bisection, convergence
runs record the per-step gap ratio r_t, and :func:`verify_all` gathers one named
check per claim into a PASS/FAIL report.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import curvature as cv
from .densela import (
    NotSPDError,
    frobenius_norm,
    kron,
    svd,
    sym_eig,
    vec,
)
from .optim import Kind, OptimizerState, direction
from .polar import exact_polar, trace_inner

GAP_FLOOR = 1e-14
BISECT_REL_WIDTH = 1e-8
TRACE_FIELDS = ("step", "loss", "gap", "r_t", "eta", "alpha_tilde", "beta_tilde", "grad_fro", "param_fro")


# -- one-step descent threshold ------------------------------------------------


@dataclass(frozen=True)
class ThresholdResult:
    eta_star_empirical: float
    eta_bound_theory: float
    kind: Kind
    shape: tuple[int, int]

    @property
    def dominates_bound(self) -> bool:
        return self.eta_star_empirical >= self.eta_bound_theory * (1.0 - 1e-6)


def _theory_direction(g: np.ndarray, kind: Kind) -> np.ndarray:
    return direction(g, OptimizerState(Kind(kind), eta=1.0, use_exact_polar=True))


def theory_bound(q: cv.KroneckerQuadratic, g: np.ndarray, kind: Kind) -> float:
    """2/lambda_max(H) for GD; (2/lambda_max(H)) * mean singular value of G for Muon."""
    if Kind(kind) is Kind.SGD:
        return cv.eta_max_gd(q.beta)
    x = g if g.shape[0] <= g.shape[1] else g.T
    return cv.eta_max_muon(q.beta, svd(x).sigma, min(g.shape))


def one_step_threshold(
    q: cv.KroneckerQuadratic, w, kind: Kind, rel_width: float = BISECT_REL_WIDTH
) -> ThresholdResult:
    """Largest eta for which one step from W strictly lowers the loss.

    The bracket starts at the theory bound and doubles until a step ascends; the
    boundary is then bisected to relative width ``rel_width``.
    """
    kind = Kind(kind)
    w = np.asarray(w, dtype=np.float64)
    g = cv.gradient(q, w)
    if not np.any(g):
        raise ValueError("gradient is zero; no descent threshold exists")
    d = _theory_direction(g, kind)
    base = cv.loss(q, w)

    def descends(eta):
        return cv.loss(q, w - eta * d) < base

    bound = theory_bound(q, g, kind)
    lo, hi = 0.0, bound
    while descends(hi):
        lo, hi = hi, 2.0 * hi
    while hi - lo > rel_width * hi:
        mid = 0.5 * (lo + hi)
        if descends(mid):
            lo = mid
        else:
            hi = mid
    return ThresholdResult(0.5 * (lo + hi), bound, kind, q.shape)


# -- convergence runs ------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    loss: float
    gap: float
    r_t: float | None = None
    eta: float | None = None
    alpha_tilde: float | None = None
    beta_tilde: float | None = None
    grad_fro: float | None = None
    param_fro: float | None = None


@dataclass
class RunTrace:
    records: list[StepRecord] = field(default_factory=list)
    # "completed", "converged" (zero gradient) or "singular_gradient"
    status: str = "completed"
    # W_t per record when requested
    iterates: list = field(default_factory=list)

    @property
    def gaps(self) -> list[float]:
        return [r.gap for r in self.records]

    def rate_product(self) -> float:
        """Product of the per-step factors 1 - alpha~_t/beta~_t over recorded steps."""
        out = 1.0
        for rec in self.records[1:]:
            if rec.alpha_tilde is not None:
                out *= 1.0 - rec.alpha_tilde / rec.beta_tilde
        return out

    def to_csv(self, path: str | os.PathLike | None = None, extra: Sequence[str] = ()) -> str:
        text = trace_csv(self.records, extra)
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return f"{float(v):.17g}"


def trace_csv(records: Iterable, extra: Sequence[str] = ()) -> str:
    """CSV for trace records; absent values are written as empty fields."""
    fields = TRACE_FIELDS + tuple(extra)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for rec in records:
        writer.writerow([_fmt(getattr(rec, name, None)) for name in fields])
    return buf.getvalue()


def rt_series(losses: Sequence[float], l_star: float, gap_floor: float = GAP_FLOOR) -> list[float | None]:
    """r_t = (L_t - L*) / (L_{t-1} - L*), None where the previous gap is at or below the floor."""
    losses = [float(x) for x in losses]
    if any(x < l_star - 1e-12 for x in losses):
        raise ValueError("l_star exceeds an observed loss")
    out: list[float | None] = []
    for prev, cur in zip(losses, losses[1:]):
        denom = prev - l_star
        out.append((cur - l_star) / denom if denom > gap_floor else None)
    return out


def run(
    q: cv.KroneckerQuadratic,
    w0,
    kind: Kind,
    eta_policy: float | str,
    steps: int,
    *,
    l_star: float = 0.0,
    use_exact_polar: bool = True,
    keep_iterates: bool = False,
) -> RunTrace:
    """Iterate GD or Muon (no momentum) from W0 and record a :class:`RunTrace`.

    ``eta_policy`` is a constant learning rate, ``"gd_theory"`` (eta = 1/beta) or
    ``"muon_theory"`` (eta_t = 1/beta~_t with beta~_t = lambda_max(P_t H), P_t
    built from the current gradient). Row t describes W_t; eta, alpha~, beta~ and
    r_t belong to the step that produced it. ``keep_iterates`` stores every W_t.
    """
    kind = Kind(kind)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if isinstance(eta_policy, str) and eta_policy not in ("gd_theory", "muon_theory"):
        raise ValueError(f"unknown eta policy {eta_policy!r}")
    state = OptimizerState(kind, eta=1.0, use_exact_polar=use_exact_polar)
    w = np.asarray(w0, dtype=np.float64).copy()
    g = cv.gradient(q, w)
    cur = cv.loss(q, w)
    trace = RunTrace()
    trace.records.append(
        StepRecord(0, cur, cur - l_star, grad_fro=frobenius_norm(g), param_fro=frobenius_norm(w))
    )
    if keep_iterates:
        trace.iterates.append(w.copy())
    for t in range(1, steps + 1):
        if not np.any(g):
            trace.status = "converged"
            break
        alpha_t = beta_t = None
        if eta_policy == "gd_theory":
            eta = 1.0 / q.beta
        elif eta_policy == "muon_theory":
            try:
                alpha_t, beta_t = cv.kron_preconditioned_extremes(q, g)
            except NotSPDError:
                trace.status = "singular_gradient"
                break
            eta = 1.0 / beta_t
        else:
            eta = float(eta_policy)
        try:
            w = w - eta * direction(g, state)
        except ValueError:
            trace.status = "converged"
            break
        prev_gap = cur - l_star
        cur = cv.loss(q, w)
        gap = cur - l_star
        g = cv.gradient(q, w)
        trace.records.append(
            StepRecord(
                t, cur, gap,
                r_t=gap / prev_gap if prev_gap > GAP_FLOOR else None,
                eta=eta, alpha_tilde=alpha_t, beta_tilde=beta_t,
                grad_fro=frobenius_norm(g), param_fro=frobenius_norm(w),
            )
        )
        if keep_iterates:
            trace.iterates.append(w.copy())
    return trace


# -- verification report ----------------------------------------------------------


@dataclass(frozen=True)
class Check:
    name: str
    residual: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.residual <= self.tol)

    def line(self) -> str:
        return f"CHECK {self.name} residual={self.residual:.6e} tol={self.tol:.1e} {'PASS' if self.passed else 'FAIL'}"


@dataclass
class VerificationReport:
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        return [c.line() for c in sorted(self.checks, key=lambda c: c.name)]

    def format(self) -> str:
        return "\n".join(self.lines()) + "\n"


def _rel(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0.0 else abs(a - b) / scale


def _instances(seed: int, sizes, per_size: int):
    for k, (m, n) in enumerate(sizes):
        for i in range(per_size):
            inst_seed = seed * 1_000_003 + 1000 * k + i
            rng = np.random.default_rng(inst_seed)
            cond_a, cond_b = np.exp(rng.uniform(0.0, math.log(100.0), size=2))
            q = cv.make_quadratic(m, n, cond_a, cond_b, seed=inst_seed)
            yield q, rng


def check_threshold_claims(instances, points_per_instance: int = 3) -> dict[str, float]:
    """Residuals for the GD and Muon one-step descent claims.

    Keys: gd/muon failure counts at 0.999 x bound, worst relative gap between the
    bisected GD threshold and 2||g||^2/(g^T H g), worst shortfall of empirical
    thresholds below the bounds, and worst error of the bound ratio against the
    mean singular value.
    """
    out = dict(gd_fail=0.0, muon_fail=0.0, gd_sharp=0.0, gd_dom=0.0, muon_dom=0.0, ratio=0.0)
    for q, rng in instances:
        for _ in range(points_per_instance):
            w = q.W_star + rng.standard_normal(q.shape)
            g = cv.gradient(q, w)
            base = cv.loss(q, w)
            gd_bound = theory_bound(q, g, Kind.SGD)
            mu_bound = theory_bound(q, g, Kind.MUON)
            if not cv.loss(q, w - 0.999 * gd_bound * g) < base:
                out["gd_fail"] += 1
            if not cv.loss(q, w - 0.999 * mu_bound * exact_polar(g)) < base:
                out["muon_fail"] += 1
            gd = one_step_threshold(q, w, Kind.SGD)
            mu = one_step_threshold(q, w, Kind.MUON)
            gv = vec(g)
            closed = 2.0 * (gv.T @ gv).item() / (gv.T @ q.H @ gv).item()
            out["gd_sharp"] = max(out["gd_sharp"], _rel(gd.eta_star_empirical, closed))
            out["gd_dom"] = max(out["gd_dom"], 1.0 - gd.eta_star_empirical / gd.eta_bound_theory)
            out["muon_dom"] = max(out["muon_dom"], 1.0 - mu.eta_star_empirical / mu.eta_bound_theory)
            x = g if g.shape[0] <= g.shape[1] else g.T
            mean_sigma = float(np.sum(svd(x).sigma)) / min(g.shape)
            out["ratio"] = max(out["ratio"], _rel(mu_bound / gd_bound, mean_sigma))
    out["gd_dom"] = max(out["gd_dom"], 0.0)
    out["muon_dom"] = max(out["muon_dom"], 0.0)
    return out


def contraction_excess(trace: RunTrace, q: cv.KroneckerQuadratic | None = None) -> float:
    """Largest r_t - (1 - ratio) over steps with a defined r_t.

    ``ratio`` is alpha/beta of ``q`` when given (GD) and alpha~_t/beta~_t from the
    record otherwise (Muon).
    """
    worst = -math.inf
    for rec in trace.records[1:]:
        if rec.r_t is None:
            continue
        if q is not None:
            ratio = q.alpha / q.beta
        else:
            ratio = rec.alpha_tilde / rec.beta_tilde
        worst = max(worst, rec.r_t - (1.0 - ratio))
    return worst


def condition_ratio_residuals(x, g) -> dict[str, float]:
    """Closed-form condition ratios against eigendecompositions of materialized H and P H."""
    a = x.T @ x
    s = g @ g.T
    ratio_gd, ratio_muon = cv.condition_ratios(a, s)
    h = kron(a, s)
    h_vals = sym_eig(h).values
    mat_gd = h_vals[0] / h_vals[-1]
    lo, hi = cv.preconditioned_extremes(cv.muon_preconditioner(g), h)
    s_vals = sym_eig(s).values
    relation = ratio_muon * math.sqrt(s_vals[0] / s_vals[-1])
    anisotropic = s_vals[0] < s_vals[-1] * (1.0 - 1e-9)
    return dict(
        ratio_gd=abs(ratio_gd - mat_gd),
        ratio_muon=abs(ratio_muon - lo / hi),
        relation=abs(ratio_gd - relation),
        strict_fail=float(anisotropic and not ratio_gd < ratio_muon),
    )


def relative_regularity_residuals(q: cv.KroneckerQuadratic, rng, probes: int) -> tuple[float, float]:
    """Worst relative violations of relative smoothness (i) and relative PL (ii).

    (i) at a random W with probes over Delta; (ii) over ``probes`` random W.
    """
    h = q.H
    w = q.W_star + rng.standard_normal(q.shape)
    g = cv.gradient(q, w)
    p = cv.muon_preconditioner(g)
    p_inv = _inverse_spd(p)
    _, beta_t = cv.preconditioned_extremes(p, h)
    smooth = 0.0
    for _ in range(probes):
        dv = rng.standard_normal((h.shape[0], 1))
        lhs = (dv.T @ h @ dv).item()
        rhs = beta_t * (dv.T @ p_inv @ dv).item()
        smooth = max(smooth, (lhs - rhs) / rhs)
    pl = 0.0
    for _ in range(probes):
        w = q.W_star + rng.standard_normal(q.shape)
        g = cv.gradient(q, w)
        p = cv.muon_preconditioner(g)
        alpha_t, _ = cv.preconditioned_extremes(p, h)
        gv = vec(g)
        lhs = 0.5 * (gv.T @ p @ gv).item()
        rhs = alpha_t * cv.loss(q, w)
        pl = max(pl, (rhs - lhs) / rhs)
    return max(smooth, 0.0), max(pl, 0.0)


def _inverse_spd(p: np.ndarray) -> np.ndarray:
    values, vectors = sym_eig(p)
    return (vectors / values) @ vectors.T


def verify_all(
    seed: int = 0,
    sizes: Sequence[tuple[int, int]] = ((2, 2), (4, 6), (8, 8)),
    per_size: int = 3,
    run_steps: int = 100,
    probes: int = 20,
) -> VerificationReport:
    sizes = [tuple(s) for s in sizes]
    checks: list[Check] = []
    rng = np.random.default_rng(seed)

    # vec(ABC) = (C^T kron A) vec(B)
    worst = 0.0
    for m, n in sizes:
        for _ in range(probes):
            k = int(rng.integers(1, 6))
            a, b, c = rng.standard_normal((m, n)), rng.standard_normal((n, k)), rng.standard_normal((k, m))
            lhs = vec(a @ b @ c)
            rhs = kron(c.T, a) @ vec(b)
            worst = max(worst, float(np.max(np.abs(lhs - rhs))) / max(float(np.max(np.abs(lhs))), 1e-300))
    checks.append(Check("vec_kron_identity", worst, 1e-11))

    # tr(G^T polar(G)) = sum of singular values
    worst = 0.0
    for m, n in sizes:
        for _ in range(probes):
            g = rng.standard_normal((m, n))
            x = g if m <= n else g.T
            worst = max(worst, _rel(trace_inner(g, exact_polar(g)), float(np.sum(svd(x).sigma))))
    checks.append(Check("polar_trace_nuclear_norm", worst, 1e-9))

    instances = list(_instances(seed, sizes, per_size))

    kron_spec = lam_max_prod = taylor = rayleigh = pl = 0.0
    for q, irng in instances:
        h = q.H
        h_vals = sym_eig(h).values
        prods = np.sort(np.outer(sym_eig(q.A).values, sym_eig(q.B).values).ravel())
        kron_spec = max(kron_spec, float(np.max(np.abs(h_vals - prods))) / h_vals[-1])
        lam_max_prod = max(lam_max_prod, _rel(h_vals[-1], q.lam_A[1] * q.lam_B[1]))
        for _ in range(probes):
            w = q.W_star + irng.standard_normal(q.shape)
            delta = irng.standard_normal(q.shape)
            g = cv.gradient(q, w)
            dv = vec(delta)
            quad = (dv.T @ h @ dv).item()
            model = cv.loss(q, w) + trace_inner(g, delta) + 0.5 * quad
            taylor = max(taylor, abs(cv.loss(q, w + delta) - model) / max(abs(model), 1e-300))
            bound = q.beta * float(np.sum(delta**2))
            rayleigh = max(rayleigh, (quad - bound) / bound)
            ratio = 0.5 * float(np.sum(g**2)) / cv.loss(q, w)
            pl = max(pl, q.alpha - ratio)
    checks.append(Check("kron_spectrum_products", kron_spec, 1e-8))
    checks.append(Check("kron_lambda_max_product", lam_max_prod, 1e-8))
    checks.append(Check("quadratic_taylor_exact", taylor, 1e-10))
    checks.append(Check("rayleigh_quotient_bound", max(rayleigh, 0.0), 1e-12))
    checks.append(Check("pl_inequality", max(pl, 0.0), 1e-9))

    thr = check_threshold_claims([(q, np.random.default_rng(seed + i)) for i, (q, _) in enumerate(instances)])
    checks.append(Check("gd_descent_below_bound", thr["gd_fail"], 0.0))
    checks.append(Check("gd_threshold_closed_form", thr["gd_sharp"], 1e-6))
    checks.append(Check("gd_threshold_dominates_bound", thr["gd_dom"], 1e-6))
    checks.append(Check("muon_descent_below_bound", thr["muon_fail"], 0.0))
    checks.append(Check("muon_threshold_dominates_bound", thr["muon_dom"], 1e-6))
    checks.append(Check("muon_bound_ratio_mean_sigma", thr["ratio"], 1e-12))

    gd_excess = mu_excess = -math.inf
    mu_descent_fail = 0
    for q, irng in instances:
        w0 = q.W_star + irng.standard_normal(q.shape)
        gd_trace = run(q, w0, Kind.SGD, "gd_theory", run_steps)
        gd_excess = max(gd_excess, contraction_excess(gd_trace, q))
        mu_trace = run(q, w0, Kind.MUON, "muon_theory", run_steps)
        mu_excess = max(mu_excess, contraction_excess(mu_trace))
        gaps = [r.gap for r in mu_trace.records if r.gap > GAP_FLOOR]
        mu_descent_fail += sum(1 for a, b in zip(gaps, gaps[1:]) if not b < a)
    checks.append(Check("gd_linear_contraction", max(gd_excess, 0.0), 1e-10))
    checks.append(Check("muon_preconditioned_contraction", max(mu_excess, 0.0), 1e-9))
    checks.append(Check("muon_gap_monotone", float(mu_descent_fail), 0.0))

    cr = dict(ratio_gd=0.0, ratio_muon=0.0, relation=0.0, strict_fail=0.0)
    for m, n in sizes:
        mm, nn = min(m, n), max(m, n)
        for _ in range(max(per_size, 5)):
            x = rng.standard_normal((nn + 3, nn))
            g = rng.standard_normal((mm, nn))
            for key, val in condition_ratio_residuals(x, g).items():
                cr[key] = cr[key] + val if key == "strict_fail" else max(cr[key], val)
    checks.append(Check("condition_ratio_gd_closed_form", cr["ratio_gd"], 1e-9))
    checks.append(Check("condition_ratio_muon_closed_form", cr["ratio_muon"], 1e-9))
    checks.append(Check("condition_ratio_relation", cr["relation"], 1e-11))
    checks.append(Check("condition_ratio_strict_improvement", cr["strict_fail"], 0.0))
    a = rng.standard_normal((6, 4))
    gd_iso, mu_iso = cv.condition_ratios(a.T @ a, 3.0 * np.eye(3))
    checks.append(Check("condition_ratio_isotropic_equal", abs(gd_iso - mu_iso), 1e-12))

    smooth = pl_rel = structured = 0.0
    for q, irng in instances:
        if q.shape[0] * q.shape[1] > 64:
            continue
        s, p = relative_regularity_residuals(q, irng, probes)
        smooth, pl_rel = max(smooth, s), max(pl_rel, p)
        for shape in (q.shape, q.shape[::-1]):
            if shape != q.shape:
                # the m > n orientation needs its own instance
                qt = cv.KroneckerQuadratic(q.B, q.A, q.W_star.T)
            else:
                qt = q
            g = cv.gradient(qt, qt.W_star + irng.standard_normal(shape))
            fast = cv.kron_preconditioned_extremes(qt, g)
            slow = cv.preconditioned_extremes(cv.muon_preconditioner(g), qt.H)
            structured = max(structured, _rel(fast[0], slow[0]), _rel(fast[1], slow[1]))
    checks.append(Check("preconditioned_extremes_structured", structured, 1e-9))
    checks.append(Check("relative_smoothness", smooth, 1e-9))
    checks.append(Check("relative_pl", pl_rel, 1e-9))

    return VerificationReport(checks)
