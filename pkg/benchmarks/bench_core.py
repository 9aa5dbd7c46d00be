"""Compiled core against the pure-Python kernels.

Times the kernels the controller calls in its inner loop plus one full OCP
linearization per backend, and prints a table with the speed-up.

    python benchmarks/bench_core.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from lbnmpc import core, dynamics, gp, ocp, plant, sqp, track as tr


def gp_pair(rng, n):
    X = rng.normal(size=(n, 6))
    out = []
    for k in range(2):
        ds = gp.GpDataset.from_arrays(X, np.sin(X[:, 0] + k) + X[:, 1] * X[:, 4])
        out.append(gp.fit(gp.KernelParams(np.full(6, 1.5), 0.1), ds))
    return dynamics.GpAccelerationModels(*out)


def cases(rng):
    T = tr.default_track()
    nom = plant.NominalModel(plant.PlantParams().without_lag())
    gpm = gp_pair(rng, 50)
    X = rng.normal(size=(500, 6))
    inv_ls = np.full(6, 0.7)
    x = np.array([7.0, 0.1, 0.3, 0.02, 0.1, 0.2, 0.05, 0.1, 0.0])
    u = np.array([0.1, 0.01, 0.0, 0.0])
    z = np.full(8, 0.05)
    it = sqp.cold_start(x, 5.0, T, ocp.OcpConfig())

    def linearize(backend):
        saved = {name: getattr(core, name) for name in ("accel", "interval")}
        try:
            for name in saved:
                setattr(core, name, getattr(backend, name))
            ocp.linearize(ocp.OcpConfig(), T, gpm, it)
        finally:
            for name, fn in saved.items():
                setattr(core, name, fn)

    return {
        "gram 500x6": lambda b: b.gram(X, inv_ls),
        "kernel vector 500": lambda b: b.kernel_vector(X, X[0], inv_ls),
        "nominal accel + jac": lambda b: b.accel(x[[0, 1, 2, 5, 6, 7]], *nom.pack()),
        "GP accel + jac (T=50)": lambda b: b.accel(x[[0, 1, 2, 5, 6, 7]], *gpm.pack()),
        "interval 8 RK4 steps, sens": lambda b: b.interval(x, u, z, 0.0375, True, *gpm.pack()),
        "OCP linearization (GP)": linearize,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    py = core.load_backend("python")
    cc = core.load_backend("compiled")
    if cc is py:
        print("compiled extension not built; only the Python backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':30s} {'python ms':>11s} {'compiled ms':>12s} {'speed-up':>9s}")
    for name, fn in cases(rng).items():
        res = []
        for b in (py, cc):
            t = timeit.Timer(lambda: fn(b))
            n, _ = t.autorange()
            res.append(1e3 * min(t.repeat(args.repeat, n)) / n)
        print(f"{name:30s} {res[0]:11.4f} {res[1]:12.4f} {res[0] / res[1]:9.1f}x")


if __name__ == "__main__":
    main()
