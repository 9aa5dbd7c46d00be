"""Subset-of-Data selection and nearest-neighbour local GP models."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import gp
from .errors import InvalidArgument

# per-channel neighbour counts used online
T_NN_LATERAL = 30
T_NN_YAW = 50


@dataclass(frozen=True, eq=False)
class SodSet:
    indices: np.ndarray
    threshold_factor: float
    params: gp.KernelParams
    dataset: gp.GpDataset
    _Xs: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return self.indices.size

    @property
    def X_std(self):
        return self._Xs

    def model(self):
        """Full GP over the subset (the 'SoD' model)."""
        return gp.fit(self.params, self.dataset.subset(self.indices))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(
                {
                    "format": "lbnmpc-sod",
                    "version": 1,
                    "indices": self.indices.tolist(),
                    "threshold_factor": self.threshold_factor,
                },
                fh,
            )

    @classmethod
    def load(cls, path, params, dataset):
        with open(path) as fh:
            obj = json.load(fh)
        if obj.get("format") != "lbnmpc-sod":
            raise InvalidArgument("not a SoD file")
        return make_sod_set(np.array(obj["indices"], dtype=int), obj["threshold_factor"], params, dataset)


def make_sod_set(indices, threshold_factor, params, dataset):
    indices = np.asarray(indices, dtype=int)
    Xs = np.ascontiguousarray(dataset.std_inputs()[indices])
    return SodSet(indices, float(threshold_factor), params, dataset, Xs)


@dataclass(frozen=True, eq=False)
class LocalModel:
    indices: np.ndarray
    model: gp.GpModel
    anchor: np.ndarray

    @property
    def alpha(self):
        return self.model.alpha

    def pack(self):
        return self.model.pack()

    def mean(self, x):
        return gp.posterior_mean(self.model, x)


def sod_reduce(params, dataset, threshold_factor=1.0):
    """Greedy in-order selection: keep row j iff its posterior variance under
    the rows kept so far exceeds ``threshold_factor * sigma_n**2``.

    The Cholesky factor of the kept set is grown one row at a time.
    """
    if threshold_factor < 0:
        raise InvalidArgument("threshold_factor must be non-negative")
    Xs = np.ascontiguousarray(dataset.std_inputs())
    T = Xs.shape[0]
    inv_ls = params.inv_ls
    diag = params.noise_std**2 + params.jitter
    threshold = threshold_factor * params.noise_std**2
    cap = min(T, 64)
    L = np.zeros((cap, cap))
    L[0, 0] = math.sqrt(1.0 + diag)
    kept = [0]
    for j in range(1, T):
        n = len(kept)
        k = gp.core.kernel_vector(Xs[kept], Xs[j], inv_ls)
        v = solve_triangular(L[:n, :n], k, lower=True, check_finite=False)
        var = 1.0 - float(v @ v)
        if var > threshold:
            if n == L.shape[0]:
                grown = np.zeros((2 * n, 2 * n))
                grown[:n, :n] = L
                L = grown
            L[n, :n] = v
            L[n, n] = math.sqrt(max(1.0 + diag - float(v @ v), diag))
            kept.append(j)
    return make_sod_set(kept, threshold_factor, params, dataset)


def weighted_distance(params, a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != params.dim or b.size != params.dim:
        raise InvalidArgument("dimension mismatch")
    d = (a - b) / params.lengthscales
    return float(d @ d)


def _std_distances(sod_set, query):
    q = sod_set.dataset.standardize_query(query)
    diff = (sod_set.X_std - q) / sod_set.params.lengthscales
    return np.einsum("ij,ij->i", diff, diff)


def nn_select(sod_set, query, t_nn):
    """Dataset indices of the ``t_nn`` SoD points nearest to ``query``.

    Distances use the lengthscale-weighted metric in standardized space;
    ties go to the lower dataset index.
    """
    if len(sod_set) == 0:
        raise InvalidArgument("empty SoD set")
    if t_nn < 1:
        raise InvalidArgument("t_nn must be >= 1")
    if t_nn >= len(sod_set):
        return sod_set.indices.copy()
    dist = _std_distances(sod_set, query)
    # stable sort on increasing SoD indices gives the lower-index tie-break
    order = np.argsort(dist, kind="stable")[:t_nn]
    return sod_set.indices[order]


def build_local_model(dataset, params, indices, anchor=None):
    idx = np.asarray(indices, dtype=int)
    model = gp.fit(params, dataset.subset(idx))
    return LocalModel(idx, model, None if anchor is None else np.asarray(anchor, dtype=float))


def select_along_horizon(sod_set, anchors, t_nn):
    """One local model per anchor; identical neighbour sets share one fit."""
    cache = {}
    out = []
    for anchor in anchors:
        idx = nn_select(sod_set, anchor, t_nn)
        key = np.sort(idx).tobytes()
        lm = cache.get(key)
        if lm is None:
            lm = build_local_model(sod_set.dataset, sod_set.params, np.sort(idx), anchor)
            cache[key] = lm
        out.append(lm)
    return out
