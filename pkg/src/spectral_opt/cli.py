"""Command-line entry point: ``spectral-opt {verify,lr-sweep,converge,spectrum}``.

Exit codes: 0 success, 1 a verification check failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import curvature as cv
from . import theory
from .config import ConfigError, RunConfig, load_config
from .densela import read_matrix
from .nn.data import BlobSpec
from .nn.model import PreNorm
from .nn.training import (
    TrainConfig,
    converge_runs,
    find_stability_gap,
    lr_sweep,
    mean_rt,
    milestone_epochs,
    sweep_csv,
)
from .optim import Kind
from .polar import NewtonSchulzConfig

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _train_config(cfg: RunConfig, section: str) -> TrainConfig:
    d, m, s = cfg["data"], cfg["model"], cfg[section]
    try:
        data = BlobSpec(**d)
        return TrainConfig(
            eta_reference=m["eta_reference"],
            mu=m["mu"],
            batch_size=m["batch_size"],
            seeds=tuple(cfg.seed * 1000 + x for x in s["seeds"]),
            sizes=(d["n_features"], *m["hidden"], d["n_classes"]),
            pre_norm=PreNorm(s["pre_norm"]),
            init_gain=m["init_gain"],
            data=data,
            ns_config=NewtonSchulzConfig(iterations=m["ns_iterations"]),
            epochs=s.get("epochs", 1),
            schedule=s.get("schedule", "constant"),
            milestones=s.get("milestones", (0.5, 0.7, 0.9)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_verify(cfg: RunConfig) -> int:
    v = cfg["verify"]
    report = theory.verify_all(cfg.seed, v["sizes"], v["per_size"], v["run_steps"], v["probes"])
    text = report.format()
    _write(os.path.join(cfg.out, "verify_report.txt"), text)
    sys.stdout.write(text)
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_lr_sweep(cfg: RunConfig) -> int:
    s = cfg["lr-sweep"]
    if not s["etas"]:
        raise ConfigError("lr-sweep: 'etas' is empty")
    if s["steps"] < 1:
        raise ConfigError("lr-sweep: 'steps' must be >= 1")
    try:
        kinds = tuple(Kind(k) for k in s["optimizers"])
    except ValueError as exc:
        raise ConfigError(f"lr-sweep: {exc}") from exc
    tc = _train_config(cfg, "lr-sweep")
    # enough epochs to cover the requested step budget
    tc = replace(tc, max_steps=s["steps"], epochs=s["steps"])
    rows = lr_sweep(tc, s["etas"], kinds)
    base = cfg.seed * 1000
    for r in rows:
        r.seed -= base
    _write(os.path.join(cfg.out, "lr_sweep.csv"), sweep_csv(rows, ()))
    lines = ["eta,optimizer,seed,param_fro_growth"]
    for r in rows:
        g = r.trace.norm_growth()
        lines.append(f"{r.eta:g},{r.optimizer.value},{r.seed},{'' if g is None else f'{g:.17g}'}")
    _write(os.path.join(cfg.out, "norm_growth.csv"), "\n".join(lines) + "\n")
    if set(kinds) == {Kind.SGD, Kind.MUON}:
        finding = find_stability_gap(rows)
        summary = [
            f"largest_muon_stable_eta={'none' if finding.eta is None else f'{finding.eta:g}'}",
            f"sgd_diverged_muon_improved_seeds={','.join(str(x) for x in finding.asymmetric_seeds)}",
        ]
        for seed, mg, sg in finding.norm_comparisons:
            summary.append(f"norm_growth seed={seed} muon={mg:.17g} sgd={sg:.17g}")
        text = "\n".join(summary) + "\n"
        _write(os.path.join(cfg.out, "stability.txt"), text)
        sys.stdout.write(text)
    return EXIT_OK


def _converge_quadratic(cfg: RunConfig) -> int:
    c = cfg["converge"]
    if c["steps"] < 1 or c["m"] < 1 or c["n"] < 1:
        raise ConfigError("converge: m, n and steps must be >= 1")
    q = cv.make_quadratic(c["m"], c["n"], c["cond_a"], c["cond_b"], seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    w0 = q.W_star + rng.standard_normal(q.shape)
    for kind, policy in ((Kind.SGD, "gd_theory"), (Kind.MUON, "muon_theory")):
        trace = theory.run(q, w0, kind, policy, c["steps"])
        trace.to_csv(os.path.join(cfg.out, f"trace_quadratic_{kind.value}.csv"))
        sys.stdout.write(f"{kind.value}: status={trace.status} final_gap={trace.records[-1].gap:.6e}\n")
    return EXIT_OK


def cmd_converge(cfg: RunConfig) -> int:
    c = cfg["converge"]
    mode = c["mode"]
    if mode == "quadratic":
        return _converge_quadratic(cfg)
    if mode == "equal":
        etas = {Kind.SGD: c["eta"], Kind.MUON: c["eta"]}
    elif mode == "best":
        etas = {Kind.SGD: c["eta_sgd"], Kind.MUON: c["eta_muon"]}
    else:
        raise ConfigError(f"converge: unknown mode {mode!r} (equal, best, quadratic)")
    tc = _train_config(cfg, "converge")
    results = converge_runs(tc, etas)
    norms_dir = os.path.join(cfg.out, "norms")
    os.makedirs(norms_dir, exist_ok=True)
    base = cfg.seed * 1000
    head = ["optimizer", "seed", "eta", "diverged"] + [f"milestone_{t:g}" for t in tc.milestones] + ["mean_rt_2_10"]
    table = [",".join(head)]
    for kind, traces in results.items():
        for t in traces:
            seed = t.seed - base
            name = f"{kind.value}_seed{seed}.csv"
            _write(os.path.join(cfg.out, f"trace_{name}"), t.epoch_csv())
            _write(os.path.join(norms_dir, f"norms_{name}"), t.norms_csv())
            ms = milestone_epochs(t.val_accs, tc.milestones)
            rt = mean_rt(t)
            cells = [kind.value, str(seed), f"{t.eta:g}", str(int(t.diverged))]
            cells += ["" if m is None else str(m) for m in ms]
            cells.append("" if rt is None else f"{rt:.17g}")
            table.append(",".join(cells))
    text = "\n".join(table) + "\n"
    _write(os.path.join(cfg.out, "milestones.csv"), text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_spectrum(cfg: RunConfig, matrix: str | None, inputs: str | None) -> int:
    s = cfg["spectrum"]
    matrix = matrix or s["matrix"]
    inputs = inputs or s["inputs"] or None
    if not matrix:
        raise ConfigError("spectrum: no matrix file given")
    try:
        g = read_matrix(matrix)
        x = read_matrix(inputs) if inputs else None
    except OSError as exc:
        raise ConfigError(f"spectrum: cannot read {exc.filename}: {exc.strerror}") from exc
    except ValueError as exc:
        raise ConfigError(f"spectrum: {exc}") from exc
    try:
        report = cv.spectral_report(g, x)
    except ValueError as exc:
        raise ConfigError(f"spectrum: {exc}") from exc
    text = "\n".join(report.lines()) + "\n"
    _write(os.path.join(cfg.out, "spectrum.txt"), text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectral-opt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("verify", "lr-sweep", "converge", "spectrum"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--out", help="output directory (overrides [global] out)")
        p.add_argument("--seed", type=int, help="global seed (overrides [global] seed)")
        if name == "spectrum":
            p.add_argument("matrix", nargs="?", help="gradient matrix file ('rows cols' header, then rows)")
            p.add_argument("--inputs", help="layer input matrix X (batch x features)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.sections["global"]["out"] = args.out
        if args.seed is not None:
            cfg.sections["global"]["seed"] = args.seed
        os.makedirs(cfg.out, exist_ok=True)
        if args.command == "verify":
            return cmd_verify(cfg)
        if args.command == "lr-sweep":
            return cmd_lr_sweep(cfg)
        if args.command == "converge":
            return cmd_converge(cfg)
        return cmd_spectrum(cfg, args.matrix, args.inputs)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
