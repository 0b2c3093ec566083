"""Training runs, stability sweeps and milestone analysis for the MLP testbed."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..densela import NonFiniteError, frobenius_norm
from ..optim import DualOptimizerPolicy, Kind, OptimizerState, direction, route
from ..polar import DEFAULT_NS, NewtonSchulzConfig
from ..theory import GAP_FLOOR, trace_csv
from .data import BlobSpec, Dataset, make_blobs
from .model import MLP, PreNorm, forward_backward, init_mlp, loss_only, predict

DIVERGENCE_LOSS = 1e6
NORM_TRACE_STEPS = 50
LR_GRID = (0.0005, 0.001, 0.005, 0.01)
EQUAL_ETA = 0.05
BEST_ETA = {Kind.MUON: 0.1, Kind.SGD: 0.01}
FROBNORM_ETA = 0.25
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
THREADS_ENV = "SPECTRAL_OPT_THREADS"


@dataclass(frozen=True)
class TrainConfig:
    eta_target: float = EQUAL_ETA
    eta_reference: float = 0.01
    target_kind: Kind = Kind.MUON
    mu: float = 0.0
    epochs: int = 10
    batch_size: int = 64
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    schedule: str = "constant"  # or "linear-decay"
    milestones: tuple[float, ...] = (0.5, 0.7, 0.9)
    sizes: tuple[int, ...] = (16, 32, 32, 3)
    pre_norm: PreNorm = PreNorm.NONE
    init_gain: float = 1.0
    data: BlobSpec = BlobSpec()
    ns_config: NewtonSchulzConfig = DEFAULT_NS
    # stop after this many optimizer steps (None: run all epochs)
    max_steps: int | None = None
    # keep the normalized layer inputs of every batch (memory heavy)
    capture_inputs: bool = False

    def __post_init__(self):
        object.__setattr__(self, "target_kind", Kind(self.target_kind))
        object.__setattr__(self, "pre_norm", PreNorm(self.pre_norm))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "milestones", tuple(float(t) for t in self.milestones))
        if not self.eta_target >= 0.0 or not self.eta_reference >= 0.0:
            raise ValueError("learning rates must be non-negative")
        if not 0.0 <= self.mu < 1.0:
            raise ValueError("mu must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.schedule not in ("constant", "linear-decay"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        ms = self.milestones
        if any(not 0.0 < t < 1.0 for t in ms) or any(a >= b for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly ascending in (0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    step: int
    loss: float
    val_acc: float
    eta: float | None
    grad_fro: float | None
    param_fro: float
    gap: float | None = None
    r_t: float | None = None


@dataclass
class NormRecord:
    step: int
    loss: float
    grad_fro: float
    param_fro: float


@dataclass
class TrainTrace:
    seed: int
    kind: Kind
    eta: float
    epochs: list[EpochRecord] = field(default_factory=list)
    norms: list[NormRecord] = field(default_factory=list)
    initial_loss: float = math.nan
    initial_param_fro: float = math.nan
    step50_loss: float | None = None
    diverged: bool = False
    diverged_step: int | None = None
    steps_taken: int = 0
    # orthogonalization calls per parameter label
    polar_calls: dict = field(default_factory=dict)
    layer_inputs: list = field(default_factory=list)

    @property
    def final_loss(self) -> float | None:
        return self.epochs[-1].loss if self.epochs and not self.diverged else None

    @property
    def val_accs(self) -> list[float]:
        return [r.val_acc for r in self.epochs if r.epoch > 0]

    def norm_growth(self) -> float | None:
        """Weight-matrix Frobenius norm after the last traced step minus its initial value."""
        if not self.norms:
            return None
        return self.norms[-1].param_fro - self.initial_param_fro

    def apply_l_star(self, l_star: float) -> None:
        prev = None
        for rec in self.epochs:
            rec.gap = rec.loss - l_star
            rec.r_t = rec.gap / prev if prev is not None and prev > GAP_FLOOR else None
            prev = rec.gap

    def epoch_csv(self) -> str:
        return trace_csv(self.epochs, extra=("epoch", "val_acc"))

    def norms_csv(self) -> str:
        lines = ["step,loss,grad_fro,param_fro"]
        for r in self.norms:
            lines.append(f"{r.step},{r.loss:.17g},{r.grad_fro:.17g},{r.param_fro:.17g}")
        return "\n".join(lines) + "\n"


def _matrix_norm(model: MLP) -> float:
    return math.sqrt(sum(float(np.sum(l.weight**2)) for l in model.layers))


def _grad_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))


def accuracy(model: MLP, data: Dataset) -> float:
    return float(np.mean(predict(model, data.inputs) == data.labels))


def _safe_loss(model: MLP, data: Dataset) -> float:
    try:
        out = loss_only(model, data.inputs, data.labels)
    except (NonFiniteError, FloatingPointError):
        return math.inf
    return out if math.isfinite(out) else math.inf


def _policy(cfg: TrainConfig, kind: Kind, eta: float) -> DualOptimizerPolicy:
    target = OptimizerState(kind, eta=eta, mu=cfg.mu, ns_config=cfg.ns_config)
    reference = OptimizerState(Kind.SGD, eta=cfg.eta_reference, mu=cfg.mu)
    return DualOptimizerPolicy(target, reference)


def _apply(p, g, state: OptimizerState, scale: float) -> None:
    if state.kind is Kind.MUON:
        buf = state.momentum_buffer
        nxt = g if state.mu == 0.0 or buf is None else state.mu * buf + g
        if not np.any(nxt):
            return  # dead layer: nothing to orthogonalize
    p -= state.eta * scale * direction(g, state)


def train(
    cfg: TrainConfig,
    seed: int,
    kind: Kind | None = None,
    eta: float | None = None,
    data: tuple[Dataset, Dataset] | None = None,
) -> TrainTrace:
    """One seeded run. Matrix weights use the target optimizer, biases reference SGD."""
    kind = cfg.target_kind if kind is None else Kind(kind)
    eta = cfg.eta_target if eta is None else float(eta)
    train_set, val_set = make_blobs(cfg.data, seed=seed) if data is None else data
    model = init_mlp(cfg.sizes, seed=seed + 10_000, pre_norm=cfg.pre_norm, gain=cfg.init_gain)
    params = dict(model.named_parameters())
    groups = {g.label: g for g in route(((k, v.shape) for k, v in params.items()), _policy(cfg, kind, eta))}
    rng = np.random.default_rng(seed + 20_000)

    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)

    trace = TrainTrace(seed, kind, eta)
    trace.initial_loss = _safe_loss(model, train_set)
    trace.initial_param_fro = _matrix_norm(model)
    trace.epochs.append(
        EpochRecord(0, 0, trace.initial_loss, accuracy(model, val_set), None, None, trace.initial_param_fro)
    )

    step = 0
    done = False
    last_eta = None
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(n)
            grad_fro = None
            epoch_start = step
            for start in range(0, n, cfg.batch_size):
                if step >= total:
                    done = True
                    break
                idx = order[start:start + cfg.batch_size]
                try:
                    loss, grads, inputs = forward_backward(model, train_set.inputs[idx], train_set.labels[idx])
                except NonFiniteError:
                    loss = math.inf
                if not loss <= DIVERGENCE_LOSS:
                    trace.diverged, trace.diverged_step = True, step + 1
                    break
                if cfg.capture_inputs:
                    trace.layer_inputs.append(inputs)
                scale = 1.0 - step / total if cfg.schedule == "linear-decay" else 1.0
                for label, p in params.items():
                    _apply(p, grads[label], groups[label].state, scale)
                last_eta = eta * scale
                step += 1
                grad_fro = _grad_norm(grads)
                if step <= NORM_TRACE_STEPS:
                    trace.norms.append(NormRecord(step, loss, grad_fro, _matrix_norm(model)))
                if step == NORM_TRACE_STEPS:
                    trace.step50_loss = _safe_loss(model, train_set)
            if trace.diverged:
                break
            if step > epoch_start:
                full = _safe_loss(model, train_set)
                if not full <= DIVERGENCE_LOSS:
                    trace.diverged, trace.diverged_step = True, step
                    break
                trace.epochs.append(
                    EpochRecord(epoch, step, full, accuracy(model, val_set), last_eta, grad_fro, _matrix_norm(model))
                )
            if done or step >= total:
                break
    trace.steps_taken = step
    trace.polar_calls = {label: g.state.polar_calls for label, g in groups.items()}
    return trace


# -- analysis -----------------------------------------------------------------------


def milestone_epochs(val_accs: Sequence[float], thresholds: Sequence[float]) -> list[int | None]:
    """First 1-indexed epoch whose validation accuracy reaches each threshold."""
    thresholds = list(thresholds)
    if any(a >= b for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be ascending")
    out = []
    for t in thresholds:
        hit = next((i + 1 for i, acc in enumerate(val_accs) if acc >= t), None)
        out.append(hit)
    return out


def l_star_estimate(traces: Sequence[TrainTrace]) -> float:
    """Minimum loss observed across all (non-diverged) runs of a sweep."""
    losses = [r.loss for t in traces if not t.diverged for r in t.epochs]
    if not losses:
        raise ValueError("no finite losses to estimate L* from")
    return min(losses)


def mean_rt(trace: TrainTrace, first: int = 2, last: int = 10) -> float | None:
    vals = [r.r_t for r in trace.epochs if first <= r.epoch <= last and r.r_t is not None]
    return float(np.mean(vals)) if vals else None


# -- parallel sweeps ----------------------------------------------------------------


def worker_count(n_tasks: int) -> int:
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        cap = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if cap < 0:
        raise ValueError(f"{THREADS_ENV} must be >= 0")
    if cap == 0:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_tasks))


def _run_task(task):
    cfg, seed, kind, eta = task
    return train(cfg, seed, kind, eta)


def run_many(tasks: Sequence[tuple[TrainConfig, int, Kind, float]]) -> list[TrainTrace]:
    """Run (cfg, seed, kind, eta) tasks, in worker processes when allowed; order is preserved."""
    tasks = list(tasks)
    workers = worker_count(len(tasks))
    if workers == 1:
        return [_run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_task, tasks))


@dataclass
class SweepRow:
    eta: float
    optimizer: Kind
    seed: int
    trace: TrainTrace


def lr_sweep(cfg: TrainConfig, etas: Sequence[float], kinds=(Kind.SGD, Kind.MUON)) -> list[SweepRow]:
    if not etas:
        raise ValueError("empty learning-rate grid")
    cfg = replace(cfg, max_steps=NORM_TRACE_STEPS if cfg.max_steps is None else cfg.max_steps)
    keys = [(float(eta), Kind(k), s) for eta in etas for k in kinds for s in cfg.seeds]
    traces = run_many([(cfg, s, k, eta) for eta, k, s in keys])
    return [SweepRow(eta, k, s, t) for (eta, k, s), t in zip(keys, traces)]


def sweep_csv(rows: Sequence[SweepRow], milestones: Sequence[float]) -> str:
    head = ["eta", "optimizer", "seed", "diverged", "diverged_step", "step50_loss", "final_loss"]
    head += [f"milestone_{t:g}" for t in milestones]
    lines = [",".join(head)]

    def f(v):
        return "" if v is None else f"{v:.17g}"

    for r in rows:
        t = r.trace
        ms = milestone_epochs(t.val_accs, milestones) if not t.diverged else [None] * len(milestones)
        cells = [f"{r.eta:g}", r.optimizer.value, str(r.seed), str(int(t.diverged)),
                 "" if t.diverged_step is None else str(t.diverged_step), f(t.step50_loss), f(t.final_loss)]
        cells += ["" if m is None else str(m) for m in ms]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


@dataclass
class StabilityFinding:
    eta: float | None
    # seeds at that eta where Muon's step-50 loss beat its initial loss and SGD diverged
    asymmetric_seeds: list[int]
    # (seed, muon growth, sgd growth) where neither diverged
    norm_comparisons: list[tuple[int, float, float]]


def find_stability_gap(rows: Sequence[SweepRow]) -> StabilityFinding:
    """Largest eta at which Muon improves within 50 steps in every seed; report SGD's fate there."""
    by = {(r.eta, r.optimizer, r.seed): r.trace for r in rows}
    etas = sorted({r.eta for r in rows})
    seeds = sorted({r.seed for r in rows})

    def muon_ok(eta, s):
        t = by.get((eta, Kind.MUON, s))
        return t is not None and not t.diverged and t.step50_loss is not None and t.step50_loss < t.initial_loss

    stable = [eta for eta in etas if all(muon_ok(eta, s) for s in seeds)]
    if not stable:
        return StabilityFinding(None, [], [])
    eta = stable[-1]
    asym = [s for s in seeds if muon_ok(eta, s) and by[(eta, Kind.SGD, s)].diverged]
    comps = []
    for s in seeds:
        sgd, muon = by[(eta, Kind.SGD, s)], by[(eta, Kind.MUON, s)]
        if not sgd.diverged and not muon.diverged:
            comps.append((s, muon.norm_growth(), sgd.norm_growth()))
    return StabilityFinding(eta, asym, comps)


def converge_runs(cfg: TrainConfig, etas: dict) -> dict:
    """Train every seed for each optimizer at its eta; fill gaps and r_t from the sweep-wide L*."""
    kinds = list(etas)
    tasks = [(cfg, s, k, etas[k]) for k in kinds for s in cfg.seeds]
    traces = run_many(tasks)
    l_star = l_star_estimate(traces)
    for t in traces:
        t.apply_l_star(l_star)
    out = {k: [] for k in kinds}
    for (_, _, k, _), t in zip(tasks, traces):
        out[k].append(t)
    return out
