import subprocess
import sys

import numpy as np
import pytest

from spectral_opt.cli import main
from spectral_opt.config import ConfigError, load_config, parse_config
from spectral_opt.densela import write_matrix


@pytest.fixture(autouse=True)
def single_worker(monkeypatch):
    monkeypatch.setenv("SPECTRAL_OPT_THREADS", "1")


def write_cfg(path, text):
    path.write_text(text)
    return str(path)


def files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- config --------------------------------------------------------------------------


def test_config_defaults_and_overrides(tmp_path):
    cfg = load_config(None)
    assert cfg.seed == 0 and cfg["lr-sweep"]["etas"] == (0.0005, 0.001, 0.005, 0.01)
    assert cfg["converge"]["eta"] == 0.05 and cfg["converge"]["eta_muon"] == 0.1 and cfg["converge"]["eta_sgd"] == 0.01
    cfg = parse_config("[global]\nseed = 7\n[lr-sweep]\netas = 0.1, 0.2\n")
    assert cfg.seed == 7 and cfg["lr-sweep"]["etas"] == (0.1, 0.2)


@pytest.mark.parametrize("text,needle", [
    ("[verify]\nsizez = 2x2\n", "sizez"),
    ("[bogus]\nx = 1\n", "bogus"),
    ("[global]\nseed = seven\n", "seed"),
])
def test_config_errors_name_the_key(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


# -- verify --------------------------------------------------------------------------


def test_verify_default(tmp_path, capsys):
    assert main(["verify", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "verify_report.txt").read_text().splitlines()
    assert sum(l.endswith("PASS") for l in lines) >= 12
    assert not any(l.endswith("FAIL") for l in lines)
    assert capsys.readouterr().out.splitlines() == lines


def test_verify_seed_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["verify", "--seed", "7", "--out", str(a)]) == 0
    assert main(["verify", "--seed", "7", "--out", str(b)]) == 0
    assert files(a) == files(b)


def test_verify_bad_key_exits_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.ini", "[verify]\nprobez = 3\n")
    assert main(["verify", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "probez" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["verify", "--config", str(tmp_path / "missing.ini")]) == 2


# -- lr-sweep ------------------------------------------------------------------------


def test_lr_sweep_default_grid_row_count(tmp_path):
    assert main(["lr-sweep", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "lr_sweep.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 4 * 5
    assert rows[0].startswith("eta,optimizer,seed,diverged")
    assert len((tmp_path / "norm_growth.csv").read_text().splitlines()) == 41
    assert (tmp_path / "stability.txt").read_text().startswith("largest_muon_stable_eta=")


def test_lr_sweep_single_row(tmp_path):
    cfg = write_cfg(tmp_path / "c.ini", "[lr-sweep]\netas = 0.01\nseeds = 3\noptimizers = muon\n")
    assert main(["lr-sweep", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rows = (tmp_path / "o" / "lr_sweep.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith("0.01,muon,3,")


def test_lr_sweep_empty_etas(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.ini", "[lr-sweep]\netas =\n")
    assert main(["lr-sweep", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "etas" in capsys.readouterr().err


# -- converge ------------------------------------------------------------------------

SHORT = "[data]\nn_samples = 300\n[converge]\nepochs = 2\n"


def test_converge_equal_writes_ten_traces(tmp_path):
    cfg = write_cfg(tmp_path / "c.ini", SHORT)
    out = tmp_path / "o"
    assert main(["converge", "--config", cfg, "--out", str(out)]) == 0
    traces = sorted(p.name for p in out.glob("trace_*.csv"))
    assert len(traces) == 10
    assert "trace_muon_seed4.csv" in traces and "trace_sgd_seed0.csv" in traces
    head = (out / "trace_sgd_seed0.csv").read_text().splitlines()[0]
    assert head == "step,loss,gap,r_t,eta,alpha_tilde,beta_tilde,grad_fro,param_fro,epoch,val_acc"
    table = (out / "milestones.csv").read_text().splitlines()
    assert len(table) == 11 and all(",0.05," in row for row in table[1:])
    assert len(list((out / "norms").glob("norms_*.csv"))) == 10


def test_converge_best_mode_defaults(tmp_path):
    cfg = write_cfg(tmp_path / "c.ini", SHORT + "mode = best\nseeds = 0\n")
    out = tmp_path / "o"
    assert main(["converge", "--config", cfg, "--out", str(out)]) == 0
    table = (out / "milestones.csv").read_text().splitlines()[1:]
    etas = {row.split(",")[0]: row.split(",")[2] for row in table}
    assert etas == {"muon": "0.1", "sgd": "0.01"}


def test_converge_quadratic_mode(tmp_path):
    cfg = write_cfg(tmp_path / "c.ini", "[converge]\nmode = quadratic\nsteps = 20\n")
    out = tmp_path / "o"
    assert main(["converge", "--config", cfg, "--out", str(out)]) == 0
    for kind in ("sgd", "muon"):
        lines = (out / f"trace_quadratic_{kind}.csv").read_text().splitlines()
        assert lines[0] == "step,loss,gap,r_t,eta,alpha_tilde,beta_tilde,grad_fro,param_fro"
        assert len(lines) >= 2


def test_converge_unknown_mode(tmp_path):
    cfg = write_cfg(tmp_path / "c.ini", "[converge]\nmode = fastest\n")
    assert main(["converge", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


# -- spectrum ------------------------------------------------------------------------


def spectrum_lines(tmp_path, g, capsys):
    path = tmp_path / "g.txt"
    write_matrix(path, np.asarray(g, dtype=float))
    assert main(["spectrum", str(path), "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert (tmp_path / "o" / "spectrum.txt").read_text() == out
    return dict(line.split("=", 1) for line in out.splitlines())


def test_spectrum_identity(tmp_path, capsys):
    rep = spectrum_lines(tmp_path, np.eye(3), capsys)
    assert float(rep["flatness"]) == 1.0
    assert float(rep["eta_ratio"]) == pytest.approx(1.0)


def test_spectrum_diag(tmp_path, capsys):
    rep = spectrum_lines(tmp_path, np.diag([3.0, 1.0]), capsys)
    assert float(rep["flatness"]) == pytest.approx(2 / 3)


def test_spectrum_missing_file(tmp_path, capsys):
    assert main(["spectrum", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "o")]) == 2
    assert "nope.txt" in capsys.readouterr().err


# -- idempotence ---------------------------------------------------------------------


@pytest.mark.parametrize("argv", [
    ["lr-sweep"],
    ["converge"],
])
def test_reruns_are_byte_identical(tmp_path, argv):
    cfg = write_cfg(tmp_path / "c.ini", SHORT + "seeds = 0 1\n[lr-sweep]\nseeds = 0\netas = 0.01\n")
    out = tmp_path / "o"
    assert main(argv + ["--config", cfg, "--out", str(out)]) == 0
    first = files(out)
    assert main(argv + ["--config", cfg, "--out", str(out)]) == 0
    assert files(out) == first


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "spectral_opt", "verify", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "PASS" in res.stdout
