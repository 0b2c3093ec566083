import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spectral_opt.densela import NonFiniteError
from spectral_opt.nn import (
    MLP,
    Activation,
    BlobSpec,
    Layer,
    PreNorm,
    TrainConfig,
    finite_difference_grads,
    forward_backward,
    frobnorm,
    init_mlp,
    lambda_max_probe,
    make_blobs,
    milestone_epochs,
    standardize,
    train,
)
from spectral_opt.nn import training as tr
from spectral_opt.optim import Kind

SMALL = BlobSpec(n_samples=120)


def lam_max(x):
    return np.linalg.eigvalsh(x.T @ x)[-1]


def max_rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.abs(a), np.abs(b))
    err = np.abs(a - b)
    return float(np.max(np.where(err == 0.0, 0.0, err / np.where(denom == 0.0, 1.0, denom))))


# -- data ----------------------------------------------------------------------------


def test_blobs_split_and_determinism():
    a_train, a_val = make_blobs(BlobSpec(), seed=3)
    b_train, b_val = make_blobs(BlobSpec(), seed=3)
    assert len(a_train) == 800 and len(a_val) == 200
    assert np.array_equal(a_train.inputs, b_train.inputs) and np.array_equal(a_val.labels, b_val.labels)
    assert not np.array_equal(a_train.inputs, make_blobs(BlobSpec(), seed=4)[0].inputs)
    assert set(np.unique(a_train.labels)) == {0, 1, 2}


def test_blobs_feature_scales_are_anisotropic():
    train_set, _ = make_blobs(BlobSpec(), seed=0)
    std = train_set.inputs.std(axis=0)
    assert std[-1] / std[0] > 100


def test_blobs_errors():
    with pytest.raises(ValueError):
        make_blobs(BlobSpec(n_classes=1))
    with pytest.raises(ValueError):
        make_blobs(BlobSpec(val_fraction=1.0))


# -- normalizations -------------------------------------------------------------------


def test_frobnorm_examples():
    x = np.array([[1.0, 1.0], [1.0, 1.0]])  # ||x||_F = 2
    np.testing.assert_array_equal(frobnorm(x), x / 2)
    u = np.array([[0.6, 0.0], [0.0, 0.8]])
    np.testing.assert_allclose(frobnorm(u), u, rtol=1e-15)
    out, flag = frobnorm(np.zeros((2, 3)), return_flag=True)
    assert flag and not np.any(out)
    assert frobnorm(x, return_flag=True)[1] is False


def test_frobnorm_random_16x8():
    x = frobnorm(np.random.default_rng(0).standard_normal((16, 8)))
    assert np.linalg.norm(x) == pytest.approx(1.0, rel=1e-14)
    assert lam_max(x) <= 1.0


@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 10_000), st.floats(1e-6, 1e6))
def test_frobnorm_spectral_guarantee(b, d, seed, scale):
    x = frobnorm(np.random.default_rng(seed).standard_normal((b, d)) * scale)
    assert lam_max(x) <= 1.0 + 1e-12


def test_standardize_examples():
    np.testing.assert_allclose(standardize([[1.0], [3.0]]), [[-1.0], [1.0]])
    z = standardize(np.random.default_rng(1).standard_normal((10, 3)))
    np.testing.assert_allclose(standardize(z), z, atol=1e-10)
    const = standardize(np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]]))
    assert not np.any(const[:, 0])
    with pytest.raises(ValueError):
        standardize([[1.0, 2.0]])


@given(st.integers(2, 30), st.integers(1, 6), st.integers(0, 10_000))
def test_standardize_moments(b, d, seed):
    x = np.random.default_rng(seed).standard_normal((b, d)) * np.geomspace(1, 100, d) + 3.0
    z = standardize(x)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-10)
    var = z.var(axis=0)
    keep = x.var(axis=0) > 1e-6
    np.testing.assert_allclose(var[keep], 1.0, atol=1e-8)


def test_standardize_reduces_lambda_max_on_scaled_blobs():
    rng = np.random.default_rng(2)
    x = (rng.standard_normal((32, 4)) + rng.standard_normal(4)) * np.array([1.0, 10.0, 100.0, 1000.0])
    assert lam_max(standardize(x)) <= lam_max(x)


# -- forward / backward --------------------------------------------------------------


def tiny_batch(seed, n_features=4):
    train_set, _ = make_blobs(BlobSpec(n_features=n_features, max_feature_scale=10.0), seed=seed)
    return train_set.inputs[:16], train_set.labels[:16]


@pytest.mark.parametrize("pre_norm", list(PreNorm))
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(pre_norm, seed):
    model = init_mlp((4, 6, 3), seed=seed, pre_norm=pre_norm)
    assert sum(p.size for _, p in model.named_parameters()) <= 64
    x, y = tiny_batch(seed)
    _, grads, _ = forward_backward(model, x, y)
    fd = finite_difference_grads(model, x, y, h=1e-5)
    for label in grads:
        assert max_rel_error(grads[label], fd[label]) <= 1e-4, label


def test_logistic_regression_closed_form():
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((10, 5)), rng.integers(0, 4, 10)
    w, b = rng.standard_normal((4, 5)), rng.standard_normal((4, 1))
    model = MLP([Layer(w, b, Activation.IDENTITY)])
    loss, grads, _ = forward_backward(model, x, y)
    logits = x @ w.T + b.T
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    onehot = np.eye(4)[y]
    np.testing.assert_allclose(grads["layer0.weight"], (p - onehot).T @ x / 10, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(grads["layer0.bias"], (p - onehot).sum(axis=0).reshape(-1, 1) / 10, atol=1e-15)
    assert loss == pytest.approx(-np.mean(np.log(p[np.arange(10), y])), rel=1e-12)


def test_zero_weights_give_ln2():
    model = MLP([Layer(np.zeros((2, 3)), np.zeros((2, 1)), Activation.IDENTITY)])
    x = np.random.default_rng(4).standard_normal((6, 3))
    loss, _, _ = forward_backward(model, x, np.array([0, 1, 0, 1, 0, 1]))
    assert loss == pytest.approx(math.log(2), rel=1e-15)


@pytest.mark.parametrize("pre_norm", [PreNorm.NONE, PreNorm.STANDARDIZE])
def test_duplicated_batch_gives_same_gradient(pre_norm):
    model = init_mlp((4, 6, 3), seed=5, pre_norm=pre_norm)
    x, y = tiny_batch(5)
    loss, g1, _ = forward_backward(model, x, y)
    loss2, g2, _ = forward_backward(model, np.vstack([x, x]), np.concatenate([y, y]))
    assert loss2 == pytest.approx(loss, rel=1e-13)
    for k in g1:
        np.testing.assert_allclose(g2[k], g1[k], rtol=1e-10, atol=1e-14)


def test_layer_inputs_are_post_normalization():
    model = init_mlp((4, 6, 3), seed=0, pre_norm=PreNorm.FROBNORM)
    x, y = tiny_batch(0)
    _, _, inputs = forward_backward(model, x, y)
    assert len(inputs) == 2
    for xi in inputs:
        assert np.linalg.norm(xi) == pytest.approx(1.0, rel=1e-13)


def test_forward_errors():
    model = init_mlp((4, 6, 3), seed=0)
    with pytest.raises(ValueError):
        forward_backward(model, np.zeros((0, 4)), np.zeros(0, dtype=int))
    x, y = tiny_batch(0)
    model.layers[1].weight[:] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError, match="layer 1"):
        forward_backward(model, x, y)


def test_mlp_shape_validation():
    with pytest.raises(ValueError):
        MLP([Layer(np.zeros((3, 2)), np.zeros((3, 1))), Layer(np.zeros((2, 4)), np.zeros((2, 1)))])
    with pytest.raises(ValueError):
        MLP([Layer(np.zeros((3, 2)), np.zeros((1, 3)))])


# -- lambda_max probes ---------------------------------------------------------------


def test_probe_examples():
    assert lambda_max_probe([[np.eye(5)[:3].T]]) == pytest.approx([1.0], rel=1e-9)
    assert lambda_max_probe([[np.eye(4)]]) == pytest.approx([1.0], rel=1e-9)
    with pytest.raises(ValueError):
        lambda_max_probe([])


def test_probe_frobnorm_inputs_bounded():
    model = init_mlp((16, 32, 32, 3), seed=1, pre_norm=PreNorm.FROBNORM)
    train_set, _ = make_blobs(BlobSpec(), seed=1)
    batches = [forward_backward(model, train_set.inputs[i:i + 64], train_set.labels[i:i + 64])[2]
               for i in range(0, 320, 64)]
    assert all(v <= 1.0 + 1e-12 for v in lambda_max_probe(batches))


@pytest.mark.parametrize("seed", range(3))
def test_probe_grows_with_depth_without_normalization(seed):
    model = init_mlp((16, 32, 32, 32, 3), seed=seed)
    train_set, _ = make_blobs(BlobSpec(), seed=seed)
    batches = [forward_backward(model, train_set.inputs[i:i + 64], train_set.labels[i:i + 64])[2]
               for i in range(0, 320, 64)]
    probe = lambda_max_probe(batches)
    assert probe[0] < probe[1] < probe[2]


# -- training ------------------------------------------------------------------------


def test_config_validation():
    for bad in (dict(eta_target=-1.0), dict(mu=1.0), dict(epochs=0), dict(seeds=()),
                dict(schedule="cosine"), dict(milestones=(0.7, 0.5)), dict(milestones=(1.2,))):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_zero_target_eta_freezes_matrices():
    cfg = TrainConfig(eta_target=0.0, epochs=2, data=SMALL)
    for kind in (Kind.SGD, Kind.MUON):
        model0 = init_mlp(cfg.sizes, seed=10_000)
        trace = train(cfg, 0, kind=kind)
        assert not trace.diverged
        assert trace.epochs[-1].param_fro == trace.initial_param_fro
        assert trace.initial_param_fro == tr._matrix_norm(model0)
        assert trace.epochs[-1].loss != trace.initial_loss  # biases still move


def test_single_step_hand_oracle():
    spec = BlobSpec(n_samples=20, val_fraction=0.2)
    data = make_blobs(spec, seed=0)
    cfg = TrainConfig(eta_target=0.01, eta_reference=0.01, target_kind=Kind.SGD, epochs=1,
                      batch_size=16, data=spec, sizes=(16, 8, 3))
    trace = train(cfg, 0, data=data)
    model = init_mlp(cfg.sizes, seed=10_000)
    order = np.random.default_rng(20_000).permutation(16)
    _, grads, _ = forward_backward(model, data[0].inputs[order], data[0].labels[order])
    for label, p in model.named_parameters():
        p -= 0.01 * grads[label]
    assert trace.steps_taken == 1
    assert trace.epochs[-1].param_fro == tr._matrix_norm(model)
    assert trace.epochs[-1].loss == tr._safe_loss(model, data[0])


def test_training_is_deterministic():
    cfg = TrainConfig(epochs=2, data=SMALL)
    for kind in (Kind.SGD, Kind.MUON):
        a, b = train(cfg, 3, kind=kind), train(cfg, 3, kind=kind)
        assert a.epoch_csv() == b.epoch_csv() and a.norms_csv() == b.norms_csv()


def test_biases_never_use_polar_path():
    trace = train(TrainConfig(epochs=2, data=SMALL), 0, kind=Kind.MUON)
    for label, calls in trace.polar_calls.items():
        if label.endswith("bias"):
            assert calls == 0
        else:
            assert calls > 0


def test_norm_trace_covers_first_50_steps():
    trace = train(TrainConfig(epochs=30, data=SMALL), 0)
    assert trace.steps_taken == 60
    assert [r.step for r in trace.norms] == list(range(1, 51))
    assert trace.step50_loss is not None
    assert trace.epochs[0].epoch == 0 and trace.epochs[-1].epoch == 30


def test_divergence_flagged_with_step():
    trace = train(TrainConfig(eta_target=50.0, target_kind=Kind.SGD, epochs=3, data=SMALL), 0)
    assert trace.diverged and trace.diverged_step is not None and trace.diverged_step >= 1
    assert trace.final_loss is None


def test_linear_decay_schedule_reaches_zero():
    cfg = TrainConfig(epochs=2, schedule="linear-decay", data=SMALL)
    trace = train(cfg, 0)
    etas = [r.eta for r in trace.epochs[1:]]
    assert etas[0] < cfg.eta_target and etas[-1] == pytest.approx(cfg.eta_target / trace.steps_taken)


def test_apply_l_star_and_mean_rt():
    trace = train(TrainConfig(epochs=3, data=SMALL), 0)
    l_star = min(r.loss for r in trace.epochs)
    trace.apply_l_star(l_star)
    assert trace.epochs[0].r_t is None
    gaps = [r.gap for r in trace.epochs]
    for prev, rec in zip(gaps, trace.epochs[1:]):
        if prev > 1e-14:
            assert rec.r_t == pytest.approx(rec.gap / prev)
    assert tr.mean_rt(trace, 2, 3) is not None


def test_milestone_examples():
    assert milestone_epochs([0.5, 0.72, 0.8], [0.7]) == [2]
    assert milestone_epochs([0.5, 0.72, 0.8], [0.95]) == [None]
    assert milestone_epochs([0.6, 0.85], [0.5, 0.8]) == [1, 2]
    with pytest.raises(ValueError):
        milestone_epochs([0.5], [0.8, 0.5])


def test_worker_count(monkeypatch):
    monkeypatch.setenv(tr.THREADS_ENV, "1")
    assert tr.worker_count(10) == 1
    monkeypatch.setenv(tr.THREADS_ENV, "4")
    assert tr.worker_count(2) == 2
    monkeypatch.setenv(tr.THREADS_ENV, "x")
    with pytest.raises(ValueError):
        tr.worker_count(3)


def test_run_many_matches_serial(monkeypatch):
    cfg = TrainConfig(epochs=1, data=SMALL)
    tasks = [(cfg, s, Kind.MUON, 0.05) for s in range(2)]
    monkeypatch.setenv(tr.THREADS_ENV, "2")
    par = tr.run_many(tasks)
    monkeypatch.setenv(tr.THREADS_ENV, "1")
    ser = tr.run_many(tasks)
    assert [t.epoch_csv() for t in par] == [t.epoch_csv() for t in ser]


def test_sweep_csv_and_stability_finding(monkeypatch):
    monkeypatch.setenv(tr.THREADS_ENV, "1")
    cfg = TrainConfig(seeds=(0, 1), epochs=25, data=SMALL)
    rows = tr.lr_sweep(cfg, [0.001, 50.0])
    text = tr.sweep_csv(rows, cfg.milestones)
    lines = text.splitlines()
    assert lines[0].startswith("eta,optimizer,seed,diverged,diverged_step,step50_loss,final_loss,milestone_0.5")
    assert len(lines) == 1 + 2 * 2 * 2
    finding = tr.find_stability_gap(rows)
    assert finding.eta == 0.001
    assert all(r.trace.steps_taken == 50 for r in rows if not r.trace.diverged)
    with pytest.raises(ValueError):
        tr.lr_sweep(cfg, [])
