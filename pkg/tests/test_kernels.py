import os

import numpy as np
import pytest

from budgetforge import kernels

BACKENDS = kernels.backends()


def test_compiled_backend_available():
    # the editable install builds the extension; a missing .so means the build broke
    assert "cython" in BACKENDS
    if os.environ.get("BUDGETFORGE_PURE_PYTHON", "") in ("", "0"):
        assert kernels.BACKEND == "cython"
    else:
        assert kernels.BACKEND == "numpy"


@pytest.mark.parametrize("act", [kernels.IDENTITY, kernels.RELU, kernels.SIGMOID])
def test_layer_kernels_agree(act):
    rng = np.random.default_rng(act)
    w = rng.normal(size=(7, 5))
    b = rng.normal(size=7)
    x = rng.normal(size=(11, 5))
    g = rng.normal(size=(11, 7))
    results = {}
    for name, mod in BACKENDS.items():
        pre, out = mod.layer_forward(w, b, x, act)
        gw, gb, gx = mod.layer_backward(w, x, pre, out, g, act)
        results[name] = (pre, out, gw, gb, gx)
    ref = results["numpy"]
    for name, res in results.items():
        for a, r in zip(res, ref):
            np.testing.assert_allclose(a, r, rtol=1e-12, atol=1e-12, err_msg=name)


def test_distance_kernels_agree():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(9, 4))
    b = rng.normal(size=(6, 4))
    p = rng.normal(size=4)
    for name, mod in BACKENDS.items():
        np.testing.assert_allclose(mod.sq_dists(a, b), BACKENDS["numpy"].sq_dists(a, b), rtol=1e-12)
        m = np.full(9, np.inf)
        mod.min_dist_update(m, a, p)
        np.testing.assert_allclose(m, ((a - p) ** 2).sum(1), rtol=1e-12)
        best = np.zeros(9)
        mod.coverage_update(best, a, p, 0.5)
        np.testing.assert_allclose(best, np.exp(-0.5 * ((a - p) ** 2).sum(1)), rtol=1e-12)
        # second update only raises values
        before = best.copy()
        mod.coverage_update(best, a, a[0], 0.5)
        assert np.all(best >= before) and best[0] == 1.0


def test_unknown_activation_rejected():
    for mod in BACKENDS.values():
        with pytest.raises(ValueError):
            mod.layer_forward(np.eye(2), np.zeros(2), np.ones((1, 2)), 9)


@pytest.mark.parametrize("act", [kernels.IDENTITY, kernels.RELU, kernels.SIGMOID])
def test_nan_propagates_on_every_backend(act):
    x = np.array([[np.nan], [1.0]])
    for name, mod in BACKENDS.items():
        _, out = mod.layer_forward(np.ones((1, 1)), np.zeros(1), x, act)
        assert np.isnan(out[0, 0]) and not np.isnan(out[1, 0]), name
