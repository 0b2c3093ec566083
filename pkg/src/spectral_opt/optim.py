"""SGD and Muon update rules, with optional heavy-ball momentum, and the
dual-optimizer router that decides which parameters each rule may touch."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .polar import DEFAULT_NS, NewtonSchulzConfig, exact_polar, newton_schulz


class Kind(str, enum.Enum):
    SGD = "sgd"
    MUON = "muon"


@dataclass
class OptimizerState:
    kind: Kind
    eta: float
    mu: float = 0.0
    momentum_buffer: np.ndarray | None = None
    ns_config: NewtonSchulzConfig = DEFAULT_NS
    use_exact_polar: bool = False
    # number of times the orthogonalization path ran for this state
    polar_calls: int = 0

    def __post_init__(self):
        self.kind = Kind(self.kind)
        if not self.eta >= 0.0:
            raise ValueError(f"eta must be non-negative, got {self.eta}")
        if not 0.0 <= self.mu < 1.0:
            raise ValueError(f"mu must lie in [0, 1), got {self.mu}")

    def fresh(self) -> OptimizerState:
        """Same configuration, empty buffer and counters."""
        return replace(self, momentum_buffer=None, polar_calls=0)


def direction(g: np.ndarray, state: OptimizerState) -> np.ndarray:
    """Update the momentum buffer with G and return the (unscaled) step direction."""
    g = np.asarray(g, dtype=np.float64)
    if state.mu == 0.0 or state.momentum_buffer is None:
        m = g.copy()
    else:
        if state.momentum_buffer.shape != g.shape:
            raise ValueError(f"momentum buffer {state.momentum_buffer.shape} does not match {g.shape}")
        m = state.mu * state.momentum_buffer + g
    state.momentum_buffer = m
    if state.kind is Kind.SGD:
        return m
    if not np.any(m):
        raise ValueError("Muon update matrix is zero")
    state.polar_calls += 1
    return exact_polar(m) if state.use_exact_polar else newton_schulz(m, state.ns_config)


def step(w, g, state: OptimizerState, eta: float | None = None) -> np.ndarray:
    """One optimizer step: returns W - eta * D, where D is G (SGD) or polar(M) (Muon).

    ``eta`` overrides ``state.eta`` for this step only (schedules, theory runs).
    """
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if w.shape != g.shape:
        raise ValueError(f"parameter shape {w.shape} does not match gradient shape {g.shape}")
    d = direction(g, state)
    return w - (state.eta if eta is None else eta) * d


def is_matrix_shape(shape: Sequence[int]) -> bool:
    return len(shape) >= 2 and sum(1 for s in shape if s > 1) >= 2


@dataclass
class ParamGroup:
    label: str
    is_matrix_param: bool
    state: OptimizerState

    def __post_init__(self):
        if self.state.kind is Kind.MUON and not self.is_matrix_param:
            raise ValueError(f"parameter {self.label!r} is not matrix-shaped and cannot use Muon")


@dataclass
class DualOptimizerPolicy:
    """Matrix parameters get ``target``; everything else gets ``reference`` (SGD)."""

    target: OptimizerState
    reference: OptimizerState = field(default_factory=lambda: OptimizerState(Kind.SGD, eta=0.01))

    def __post_init__(self):
        if self.reference.kind is not Kind.SGD:
            raise ValueError("the reference optimizer must be SGD")


def route(params: Iterable[tuple[str, Sequence[int]]], policy: DualOptimizerPolicy) -> list[ParamGroup]:
    groups = []
    seen = set()
    for label, shape in params:
        if label in seen:
            raise ValueError(f"duplicate parameter label {label!r}")
        seen.add(label)
        matrix = is_matrix_shape(tuple(shape))
        template = policy.target if matrix else policy.reference
        groups.append(ParamGroup(label, matrix, template.fresh()))
    return groups
