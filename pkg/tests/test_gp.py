import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lbnmpc import gp
from lbnmpc.errors import InvalidArgument, NumericalFailure


def random_model(rng, T=60, d=6, noise=0.2):
    X = rng.normal(size=(T, d)) * rng.uniform(0.5, 3.0, size=d)
    y = np.sin(X[:, 0]) + 0.3 * X[:, 1] + 0.1 * rng.normal(size=T)
    ds = gp.GpDataset.from_arrays(X, y)
    params = gp.KernelParams(rng.uniform(0.5, 3.0, size=d), noise)
    return gp.fit(params, ds)


def dense_oracle(model, x):
    """Posterior mean and variance through an explicit matrix inverse."""
    ds = model.dataset
    Xs = ds.std_inputs()
    ls = model.params.lengthscales
    diff = (Xs[:, None, :] - Xs[None, :, :]) / ls
    K = np.exp(-(diff**2).sum(-1))
    Kn = K + (model.params.noise_std**2 + model.jitter_used) * np.eye(len(ds))
    Kinv = np.linalg.inv(Kn)
    q = ds.standardize_query(x)
    k = np.exp(-(((Xs - q) / ls) ** 2).sum(-1))
    mean = ds.y_shift + ds.y_scale * k @ Kinv @ ds.std_targets()
    var = 1.0 - k @ Kinv @ k
    return mean, var


def test_posterior_matches_dense_inverse(rng):
    for _ in range(20):
        T = int(rng.integers(5, 101))
        model = random_model(rng, T=T)
        for _ in range(5):
            x = model.dataset.inputs[rng.integers(T)] + rng.normal(scale=0.5, size=6)
            m, v = dense_oracle(model, x)
            assert abs(gp.posterior_mean(model, x) - m) <= 1e-8 * max(1.0, abs(m))
            assert abs(gp.posterior_variance(model, x) - v) <= 1e-8


def test_mean_gradient_matches_finite_differences(rng, backend):
    model = random_model(rng)
    x = model.dataset.inputs[3] + 0.1
    g = gp.mean_gradient(model, x)
    h = 1e-6
    fd = np.array([(gp.posterior_mean(model, x + h * e) - gp.posterior_mean(model, x - h * e)) / (2 * h)
                   for e in np.eye(6)])
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_log_ml_gradient_matches_finite_differences(rng):
    for _ in range(10):
        model = random_model(rng, T=40)
        value, grad = gp.log_marginal_likelihood(model)
        theta = model.params.log_vector()
        h = 1e-5
        fd = np.empty_like(theta)
        for k in range(theta.size):
            vals = []
            for sgn in (1, -1):
                th = theta.copy()
                th[k] += sgn * h
                m = gp.fit(gp.KernelParams.from_log_vector(th, model.jitter_used), model.dataset)
                vals.append(gp.log_marginal_likelihood(m)[0])
            fd[k] = (vals[0] - vals[1]) / (2 * h)
        assert np.max(np.abs(grad - fd) / np.maximum(1.0, np.abs(fd))) <= 1e-4


def test_gram_backends_agree(rng):
    from lbnmpc import core

    pytest.importorskip("lbnmpc._core")
    X = rng.normal(size=(30, 6))
    inv_ls = rng.uniform(0.2, 2.0, size=6)
    a = core.load_backend("python").gram(X, inv_ls)
    b = core.load_backend("compiled").gram(X, inv_ls)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 25), st.integers(0, 10_000))
def test_gram_symmetric_psd(T, seed):
    rng = np.random.default_rng(seed)
    params = gp.KernelParams(rng.uniform(0.3, 3.0, size=6), 0.1)
    K = gp.gram_matrix(params, rng.normal(size=(T, 6)))
    assert np.array_equal(K, K.T)
    assert np.allclose(np.diag(K), 1.0)
    assert np.linalg.eigvalsh(K).min() >= -1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_posterior_variance_bounded(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, T=20)
    for _ in range(5):
        v = gp.posterior_variance(model, rng.normal(scale=3.0, size=6))
        assert 0.0 <= v <= 1.0


def test_variance_small_at_training_points(rng):
    model = random_model(rng, T=30, noise=0.15)
    for i in range(5):
        assert gp.posterior_variance(model, model.dataset.inputs[i]) < 0.15


def test_permutation_invariance(rng):
    model = random_model(rng, T=40)
    perm = rng.permutation(40)
    ds = model.dataset
    other = gp.fit(model.params, gp.GpDataset(ds.inputs[perm], ds.targets[perm], ds.x_shift, ds.x_scale,
                                              ds.y_shift, ds.y_scale))
    x = rng.normal(size=6)
    assert math.isclose(gp.posterior_mean(model, x), gp.posterior_mean(other, x), rel_tol=1e-10, abs_tol=1e-12)
    assert math.isclose(gp.posterior_variance(model, x), gp.posterior_variance(other, x), abs_tol=1e-12)


def test_duplicate_points_without_noise_still_factor():
    ds = gp.GpDataset.from_arrays(np.zeros((4, 6)), np.arange(4.0))
    model = gp.fit(gp.KernelParams(np.ones(6), 0.0), ds)
    assert np.isfinite(model.alpha).all()
    assert gp.JITTER_START <= model.jitter_used <= gp.JITTER_MAX


def test_cholesky_failure_raises():
    K = -np.eye(3)
    with pytest.raises(NumericalFailure):
        gp._cholesky(K, 0.0, gp.JITTER_START)


def test_save_load_roundtrip(rng, tmp_path):
    model = random_model(rng, T=25)
    model.save(tmp_path / "m.json")
    back = gp.GpModel.load(tmp_path / "m.json")
    x = rng.normal(size=6)
    assert gp.posterior_mean(back, x) == pytest.approx(gp.posterior_mean(model, x), rel=1e-12)


def test_training_improves_evidence(rng):
    X = rng.uniform(-2, 2, size=(120, 6))
    y = np.sin(2 * X[:, 0]) + 0.05 * rng.normal(size=120)
    ds = gp.GpDataset.from_arrays(X, y)
    cfg = gp.TrainConfig(epochs=60, learning_rate=0.05)
    init = gp.KernelParams(np.full(6, cfg.init_lengthscale), cfg.init_noise)
    trained = gp.train_hyperparams(ds, cfg)
    before = gp.log_marginal_likelihood(gp.fit(init, ds))[0]
    after = gp.log_marginal_likelihood(gp.fit(trained, ds))[0]
    assert after > before
    assert trained.noise_std >= cfg.noise_floor
    # the irrelevant inputs should end up with the longer lengthscales
    assert trained.lengthscales[0] < trained.lengthscales[1:].min()


def test_training_is_deterministic(rng):
    X = rng.normal(size=(60, 6))
    ds = gp.GpDataset.from_arrays(X, X[:, 0] ** 2)
    cfg = gp.TrainConfig(epochs=5, learning_rate=0.05, seed=7)
    a = gp.train_hyperparams(ds, cfg)
    b = gp.train_hyperparams(ds, cfg)
    assert np.array_equal(a.lengthscales, b.lengthscales) and a.noise_std == b.noise_std


@pytest.mark.parametrize("bad", [np.array([1.0, -1.0]), np.array([np.nan, 1.0]), np.array([])])
def test_kernel_params_validation(bad):
    with pytest.raises(InvalidArgument):
        gp.KernelParams(bad, 0.1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_dataset_rejects_nonfinite():
    with pytest.raises(InvalidArgument):
        gp.GpDataset.from_arrays(np.array([[np.inf] * 6]), [1.0])


def test_query_dimension_checked(rng):
    model = random_model(rng, T=10)
    with pytest.raises(InvalidArgument):
        gp.posterior_mean(model, np.zeros(5))
