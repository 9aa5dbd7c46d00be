import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lbnmpc import gp, reduce
from lbnmpc.errors import InvalidArgument


def make_set(rng, T=300, threshold=1.0, noise=0.2):
    X = rng.normal(size=(T, 6)) * np.array([3.0, 1.0, 1.0, 1.0, 0.2, 0.5])
    ds = gp.GpDataset.from_arrays(X, np.sin(X[:, 0]) + X[:, 1])
    params = gp.KernelParams(rng.uniform(0.6, 2.5, size=6), noise)
    return reduce.sod_reduce(params, ds, threshold)


def variance_given(params, Xs, kept, j):
    """Posterior variance of row j given rows ``kept``, dense solve."""
    if not kept:
        return 1.0
    A = Xs[kept] / params.lengthscales
    q = Xs[j] / params.lengthscales
    K = np.exp(-((A[:, None] - A[None]) ** 2).sum(-1)) + (params.noise_std**2 + params.jitter) * np.eye(len(kept))
    k = np.exp(-((A - q) ** 2).sum(-1))
    return 1.0 - k @ np.linalg.solve(K, k)


def replay(sod):
    """Every excluded row's variance at its visit is below the threshold and
    every kept row's is above it."""
    params = sod.params
    Xs = sod.dataset.std_inputs()
    thr = sod.threshold_factor * params.noise_std**2
    kept = set(sod.indices.tolist())
    prefix = []
    for j in range(len(sod.dataset)):
        v = variance_given(params, Xs, prefix, j)
        if j in kept:
            assert j == 0 or v > thr - 1e-10
            prefix.append(j)
        else:
            assert v <= thr + 1e-10


def test_sod_replay_property(rng, backend):
    replay(make_set(rng, T=250))


def test_threshold_monotone(rng):
    sizes = [len(make_set(np.random.default_rng(5), threshold=t)) for t in (0.25, 1.0, 4.0)]
    assert sizes[0] >= sizes[1] >= sizes[2]


def test_zero_threshold_keeps_distinct_points(rng):
    sod = make_set(rng, T=40, threshold=0.0)
    assert len(sod) == 40


def test_negative_threshold_rejected(rng):
    sod = make_set(rng, T=10)
    with pytest.raises(InvalidArgument):
        reduce.sod_reduce(sod.params, sod.dataset, -1.0)


def brute_force(sod, query, t_nn):
    q = sod.dataset.standardize_query(query)
    d = [float((((sod.X_std[i] - q) / sod.params.lengthscales) ** 2).sum()) for i in range(len(sod))]
    order = sorted(range(len(sod)), key=lambda i: (d[i], sod.indices[i]))
    return sod.indices[order[:t_nn]]


def test_nn_select_matches_brute_force(rng):
    sod = make_set(rng, T=400)
    for _ in range(1000):
        q = sod.dataset.inputs[rng.integers(len(sod.dataset))] + rng.normal(scale=0.3, size=6)
        t = int(rng.integers(1, 60))
        assert np.array_equal(reduce.nn_select(sod, q, t), brute_force(sod, q, t))


def test_nn_select_ties_prefer_lower_index():
    X = np.vstack([np.zeros(6), np.ones(6), -np.ones(6)])
    ds = gp.GpDataset.from_arrays(X, [0.0, 1.0, 2.0], standardize=False)
    sod = reduce.make_sod_set([0, 1, 2], 1.0, gp.KernelParams(np.ones(6), 0.1), ds)
    assert reduce.nn_select(sod, np.zeros(6), 2).tolist() == [0, 1]


def test_nn_select_small_set_returns_all(rng):
    sod = make_set(rng, T=20)
    assert set(reduce.nn_select(sod, np.zeros(6), 10_000)) == set(sod.indices)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_nn_select_permutation_of_query_rows(seed, t_nn):
    rng = np.random.default_rng(seed)
    sod = make_set(rng, T=80)
    q = rng.normal(size=6)
    a = reduce.nn_select(sod, q, t_nn)
    assert len(set(a.tolist())) == len(a)
    d = [reduce.weighted_distance(sod.params, sod.X_std[list(sod.indices).index(i)],
                                  sod.dataset.standardize_query(q)) for i in a]
    assert d == sorted(d)


def test_horizon_models_share_fits(rng):
    sod = make_set(rng, T=150)
    anchors = np.repeat(sod.dataset.inputs[:1], 5, axis=0)
    models = reduce.select_along_horizon(sod, anchors, 30)
    assert all(m is models[0] for m in models)
    assert len(models[0].indices) == min(30, len(sod))


def test_sod_save_load(rng, tmp_path):
    sod = make_set(rng, T=60)
    sod.save(tmp_path / "s.json")
    back = reduce.SodSet.load(tmp_path / "s.json", sod.params, sod.dataset)
    assert np.array_equal(back.indices, sod.indices)
    assert back.threshold_factor == sod.threshold_factor
