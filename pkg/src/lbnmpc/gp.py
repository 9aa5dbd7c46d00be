"""Exact Gaussian-process regression for one scalar acceleration channel.

The kernel is the unit-amplitude squared exponential without the usual 1/2
factor, ``k(a, b) = exp(-sum(((a - b) / l) ** 2))``. Inputs and targets are
standardized before fitting; the missing amplitude hyperparameter is
compensated by the unit target variance. All quantities exposed in physical
units are chain-ruled back through the stored standardizers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import core
from .errors import InvalidArgument, NumericalFailure, TrainingFailure

NOISE_FLOOR = 0.15
JITTER_START = 1e-9
JITTER_MAX = 1e-6
VARIANCE_TOL = 1e-10
FORMAT_VERSION = 1


@dataclass(frozen=True)
class KernelParams:
    lengthscales: np.ndarray
    noise_std: float
    jitter: float = JITTER_START

    def __post_init__(self):
        ls = np.asarray(self.lengthscales, dtype=float).ravel()
        if ls.size == 0 or not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise InvalidArgument("lengthscales must be finite and positive")
        if not math.isfinite(self.noise_std) or self.noise_std < 0:
            raise InvalidArgument("noise_std must be finite and non-negative")
        if not self.jitter > 0:
            raise InvalidArgument("jitter must be positive")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "noise_std", float(self.noise_std))

    @property
    def dim(self):
        return self.lengthscales.size

    @property
    def inv_ls(self):
        return 1.0 / self.lengthscales

    def log_vector(self):
        return np.append(np.log(self.lengthscales), math.log(self.noise_std))

    @classmethod
    def from_log_vector(cls, theta, jitter=JITTER_START):
        theta = np.asarray(theta, dtype=float)
        return cls(np.exp(theta[:-1]), float(np.exp(theta[-1])), jitter)


@dataclass(frozen=True)
class GpDataset:
    """Training pairs plus the standardizers used everywhere downstream."""

    inputs: np.ndarray
    targets: np.ndarray
    x_shift: np.ndarray
    x_scale: np.ndarray
    y_shift: float = 0.0
    y_scale: float = 1.0

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.asarray(self.targets, dtype=float).ravel()
        if X.shape[0] < 1 or X.shape[0] != y.size:
            raise InvalidArgument("need T >= 1 rows with one target each")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise InvalidArgument("dataset contains non-finite entries")
        xs = np.asarray(self.x_shift, dtype=float).ravel()
        xc = np.asarray(self.x_scale, dtype=float).ravel()
        if xs.size != X.shape[1] or xc.size != X.shape[1]:
            raise InvalidArgument("standardizer size does not match input dimension")
        if np.any(xc <= 0) or not self.y_scale > 0:
            raise InvalidArgument("standardizer scales must be positive")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "x_shift", xs)
        object.__setattr__(self, "x_scale", xc)
        object.__setattr__(self, "y_shift", float(self.y_shift))
        object.__setattr__(self, "y_scale", float(self.y_scale))

    @classmethod
    def from_arrays(cls, X, y, standardize=True):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        d = X.shape[1]
        if not standardize:
            return cls(X, y, np.zeros(d), np.ones(d), 0.0, 1.0)
        x_shift = X.mean(axis=0)
        x_scale = X.std(axis=0)
        # constant columns keep unit scale
        x_scale = np.where(x_scale > 1e-12, x_scale, 1.0)
        y_std = float(y.std())
        return cls(X, y, x_shift, x_scale, float(y.mean()), y_std if y_std > 1e-12 else 1.0)

    def __len__(self):
        return self.targets.size

    @property
    def dim(self):
        return self.inputs.shape[1]

    def std_inputs(self):
        return (self.inputs - self.x_shift) / self.x_scale

    def std_targets(self):
        return (self.targets - self.y_shift) / self.y_scale

    def standardize_query(self, x):
        return (np.asarray(x, dtype=float) - self.x_shift) / self.x_scale

    def subset(self, indices):
        """Rows ``indices`` with the parent's standardizers kept."""
        idx = np.asarray(indices, dtype=int)
        return replace(self, inputs=self.inputs[idx], targets=self.targets[idx])


@dataclass(frozen=True, eq=False)
class GpModel:
    params: KernelParams
    dataset: GpDataset
    alpha: np.ndarray
    chol: np.ndarray
    jitter_used: float = JITTER_START
    _Xs: np.ndarray = field(default=None, repr=False)

    @property
    def X_std(self):
        return self._Xs

    def pack(self):
        """Flat arrays for the compiled kernels: (X, alpha, p)."""
        ds = self.dataset
        p = np.concatenate(
            [self.params.inv_ls, ds.x_shift, 1.0 / ds.x_scale, [ds.y_shift, ds.y_scale]]
        )
        return self._Xs, self.alpha, np.ascontiguousarray(p)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(model_to_dict(self), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return model_from_dict(json.load(fh))


def kernel_eval(params, a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != params.dim or b.size != params.dim:
        raise InvalidArgument(f"expected {params.dim}-vectors, got {a.size} and {b.size}")
    d = (a - b) / params.lengthscales
    return math.exp(-float(d @ d))


def gram_matrix(params, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != params.dim:
        raise InvalidArgument("input dimension does not match lengthscales")
    if not np.all(np.isfinite(X)):
        raise InvalidArgument("non-finite input")
    if X.shape[1] == core.NGP:
        return core.gram(np.ascontiguousarray(X), np.ascontiguousarray(params.inv_ls))
    return core._core_py.gram(X, params.inv_ls)


def _cholesky(K, base_diag, jitter):
    n = K.shape[0]
    j = jitter
    while True:
        A = K + (base_diag + j) * np.eye(n)
        try:
            return np.linalg.cholesky(A), j
        except np.linalg.LinAlgError:
            if j >= JITTER_MAX:
                raise NumericalFailure("Cholesky failed at maximum jitter") from None
            j = min(j * 10.0, JITTER_MAX)


def fit(params, dataset):
    """Factor K + sigma_n^2 I and solve for alpha in standardized space."""
    if dataset.dim != params.dim:
        raise InvalidArgument("dataset dimension does not match lengthscales")
    Xs = np.ascontiguousarray(dataset.std_inputs())
    K = gram_matrix(params, Xs)
    L, j = _cholesky(K, params.noise_std**2, params.jitter)
    alpha = cho_solve((L, True), dataset.std_targets())
    return GpModel(params, dataset, alpha, L, j, Xs)


def _kstar(model, x):
    x = np.asarray(x, dtype=float).ravel()
    if x.size != model.params.dim or not np.all(np.isfinite(x)):
        raise InvalidArgument("query must be a finite vector of the model dimension")
    q = model.dataset.standardize_query(x)
    return core._core_py.kernel_vector(model._Xs, q, model.params.inv_ls)


def posterior_mean(model, x):
    k = _kstar(model, x)
    ds = model.dataset
    return ds.y_shift + ds.y_scale * float(k @ model.alpha)


def posterior_variance(model, x):
    """Latent posterior variance in standardized units (prior variance 1)."""
    k = _kstar(model, x)
    v = solve_triangular(model.chol, k, lower=True, check_finite=False)
    var = 1.0 - float(v @ v)
    if var < 0:
        if var < -VARIANCE_TOL:
            raise NumericalFailure(f"negative posterior variance {var:.3e}")
        var = 0.0
    return var


def mean_gradient(model, x):
    """d posterior_mean / d x in physical units."""
    _kstar(model, x)  # validation
    X, alpha, p = model.pack()
    if model.params.dim == core.NGP:
        return core.gp_channel(np.asarray(x, dtype=float), X, alpha, p)[1]
    ds = model.dataset
    q = ds.standardize_query(x)
    diff = (q - X) * model.params.inv_ls
    ka = np.exp(-np.einsum("ij,ij->i", diff, diff)) * alpha
    return -2.0 * ds.y_scale * (ka @ diff) * model.params.inv_ls / ds.x_scale


def log_marginal_likelihood(model):
    """Gaussian log evidence and its gradient w.r.t. (log l_1..d, log sigma_n)."""
    y = model.dataset.std_targets()
    L = model.chol
    T = y.size
    value = -0.5 * float(y @ model.alpha) - float(np.log(np.diag(L)).sum()) - 0.5 * T * math.log(2 * math.pi)
    Kinv = cho_solve((L, True), np.eye(T))
    W = np.outer(model.alpha, model.alpha) - Kinv
    Xs = model._Xs
    K = gram_matrix(model.params, Xs)
    grad = np.empty(model.params.dim + 1)
    for m, ell in enumerate(model.params.lengthscales):
        D = (Xs[:, m, None] - Xs[None, :, m]) ** 2
        dK = K * D * (2.0 / ell**2)
        grad[m] = 0.5 * float(np.einsum("ij,ji->", W, dK))
    grad[-1] = float(np.trace(W)) * model.params.noise_std**2
    return value, grad


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    epochs: int = 400
    learning_rate: float = 1e-3
    noise_floor: float = NOISE_FLOOR
    seed: int = 0
    init_lengthscale: float = 2.0
    init_noise: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999


def train_hyperparams(dataset, config=TrainConfig()):
    """Minibatch Adam ascent on the log marginal likelihood in log space.

    sigma_n is projected onto the floor after every update.
    """
    rng = np.random.default_rng(config.seed)
    d = dataset.dim
    log_floor = math.log(config.noise_floor)
    theta = np.append(np.full(d, math.log(config.init_lengthscale)),
                      max(math.log(config.init_noise), log_floor))
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    step = 0
    T = len(dataset)
    last_valid = KernelParams.from_log_vector(theta)
    for _ in range(config.epochs):
        order = rng.permutation(T)
        for start in range(0, T, config.batch_size):
            batch = np.sort(order[start:start + config.batch_size])
            params = KernelParams.from_log_vector(theta)
            try:
                model = fit(params, dataset.subset(batch))
                value, grad = log_marginal_likelihood(model)
            except NumericalFailure as exc:
                raise TrainingFailure(str(exc), last_valid) from exc
            if not (math.isfinite(value) and np.all(np.isfinite(grad))):
                raise TrainingFailure("non-finite marginal likelihood", last_valid)
            last_valid = params
            step += 1
            g = grad / batch.size
            m1 = config.beta1 * m1 + (1 - config.beta1) * g
            m2 = config.beta2 * m2 + (1 - config.beta2) * g * g
            mhat = m1 / (1 - config.beta1**step)
            vhat = m2 / (1 - config.beta2**step)
            theta = theta + config.learning_rate * mhat / (np.sqrt(vhat) + 1e-8)
            theta[-1] = max(theta[-1], log_floor)
    return KernelParams.from_log_vector(theta)


def model_to_dict(model):
    ds = model.dataset
    return {
        "format": "lbnmpc-gp",
        "version": FORMAT_VERSION,
        "lengthscales": model.params.lengthscales.tolist(),
        "noise_std": model.params.noise_std,
        "jitter": model.params.jitter,
        "x_shift": ds.x_shift.tolist(),
        "x_scale": ds.x_scale.tolist(),
        "y_shift": ds.y_shift,
        "y_scale": ds.y_scale,
        "inputs": ds.inputs.tolist(),
        "targets": ds.targets.tolist(),
        "alpha": model.alpha.tolist(),
    }


def model_from_dict(obj):
    if obj.get("format") != "lbnmpc-gp" or obj.get("version") != FORMAT_VERSION:
        raise InvalidArgument("not a version-1 GP model file")
    params = KernelParams(np.array(obj["lengthscales"]), obj["noise_std"], obj["jitter"])
    ds = GpDataset(
        np.array(obj["inputs"]),
        np.array(obj["targets"]),
        np.array(obj["x_shift"]),
        np.array(obj["x_scale"]),
        obj["y_shift"],
        obj["y_scale"],
    )
    model = fit(params, ds)
    # keep the stored solve vector so a round trip is bit-exact
    return replace(model, alpha=np.array(obj["alpha"]))
