"""Smoke test for the fald_py extension module.

Build and install next to this script:

    cargo build -p fald-py --release
    cp target/release/libfald_py.so python/fald_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import fald_py  # noqa: E402

SIGMA = [[5.0, -2.0], [-2.0, 1.0]]


def main():
    fed = fald_py.GaussianFederation([20] * 10, 1.0, SIGMA, tau=1.0, seed=2024)
    assert fed.dim == 2 and fed.n_clients == 10
    assert math.isclose(sum(fed.weights), 1.0)

    mean, cov = fed.target()
    assert fald_py.w2_gaussian(mean, cov, mean, cov) < 1e-6

    big_l, m, kappa, gamma, _ = fed.constants()
    assert math.isclose(kappa, big_l / m)
    assert math.isclose(kappa, 17 + 12 * math.sqrt(2), rel_tol=1e-9)
    assert gamma >= 0.0
    assert fald_py.optimal_local_steps(kappa) in (5, 6)

    w2 = fed.w2_curve(10, 1e-4, 2000, 50, seed=1)
    assert len(w2) == 201
    assert w2[-1] < w2[0]

    full = fed.w2_curve(5, 1e-4, 200, 8, seed=3)
    two = fed.w2_curve(5, 1e-4, 200, 8, seed=3, scheme="scheme2", devices=10)
    assert full == two

    eps, delta = fald_py.dp_account(1e-6, 200, 10, 2, 10, q=0.5)
    assert abs(eps - 0.94503514808799469032) < 1e-12
    assert 0.0 < delta < 1.0

    try:
        fald_py.GaussianFederation([5], 1.0, [[1.0, 2.0], [2.0, 1.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("non-SPD covariance accepted")

    csv = fald_py.sweep_csv(
        "n_clients = 3\npoints_per_client = 5\nk_local = 2\neta = 1e-4\n"
        "horizon = 20\nreplications = 4\nsweep = rho\nsweep_values = 0, 1\n"
    )
    assert csv.startswith("sweep_value,round,metric,value\n")
    assert csv.count("\n") == 1 + 2 * 11

    print("fald_py smoke test passed: w2 %.4f -> %.4f, kappa %.3f" % (w2[0], w2[-1], kappa))


if __name__ == "__main__":
    main()
