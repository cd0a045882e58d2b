"""Both kernel backends against each other and against direct formulas."""
import os
import subprocess
import sys

import numpy as np
import pytest

from nac import kernels

BACKENDS = kernels.available_backends()


@pytest.fixture(params=sorted(BACKENDS))
def impl(request):
    return BACKENDS[request.param]


def test_dispatch_reports_backend():
    assert kernels.BACKEND in BACKENDS
    assert kernels.topk_lastdim is getattr(BACKENDS[kernels.BACKEND], "topk_lastdim")


def test_use_backend_restores():
    before = kernels.topk_lastdim
    with kernels.use_backend("python"):
        assert kernels.BACKEND == "python"
        assert kernels.topk_lastdim is BACKENDS["python"].topk_lastdim
    assert kernels.topk_lastdim is before
    with pytest.raises(ValueError):
        with kernels.use_backend("fortran"):
            pass


@pytest.mark.parametrize("k", [1, 3, 32, 33, 100])
def test_topk_matches_stable_argsort(impl, rng, k):
    x = np.round(rng.normal(size=(3, 4, 70)), 1)  # rounding forces ties
    vals, idx = impl.topk_lastdim(x, k)
    ref = np.argsort(-x, axis=-1, kind="stable")[..., :min(k, 70)]
    np.testing.assert_array_equal(idx, ref)
    np.testing.assert_array_equal(vals, np.take_along_axis(x, ref, -1))


def test_topk_rejects_zero(impl):
    with pytest.raises(ValueError):
        impl.topk_lastdim(np.ones(3), 0)


def _draws(rng, n=500):
    return rng.uniform(0, 1, n), np.exp(rng.uniform(np.log(1e-2), np.log(10), n)), rng.uniform(0, 1, n)


def test_exact_logits_formula(impl, rng):
    phi, omega, t = _draws(rng)
    np.testing.assert_allclose(impl.exact_logits(phi, omega, t), phi / omega * (1 - np.exp(-omega * t)),
                               rtol=1e-12, atol=1e-15)


def test_euler_logits_recursion(impl, rng):
    phi, omega, t = _draws(rng)
    a = np.zeros_like(phi)
    for _ in range(6):
        a = a + t / 6 * (phi - omega * a)
    np.testing.assert_allclose(impl.euler_logits(phi, omega, t, 6), a, rtol=1e-14, atol=1e-16)


@pytest.mark.parametrize("name,extra", [("exact_logits_grad", ()), ("euler_logits_grad", (6,))])
def test_grad_kernels_agree(rng, name, extra):
    phi, omega, t = _draws(rng)
    g = rng.normal(size=phi.shape)
    outs = [getattr(m, name)(phi, omega, t, *extra, g) for m in BACKENDS.values()]
    for o in outs[1:]:
        for a, b in zip(o, outs[0]):
            np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


def test_broadcasting_shapes(impl):
    phi = np.full((2, 3, 1), 0.5)
    omega = np.full((2, 3, 4), 2.0)
    t = np.full((2, 1, 1), 0.3)
    assert impl.exact_logits(phi, omega, t).shape == (2, 3, 4)
    assert impl.euler_logits(phi, omega, t, 3).shape == (2, 3, 4)


def test_rnn_recurrence(impl, rng):
    x = rng.normal(size=(2, 7, 3))
    w_x, w_h, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 5)) / 2, rng.normal(size=5)
    h = np.zeros((2, 5))
    for i in range(7):
        h = np.tanh(x[:, i] @ w_x + h @ w_h + b)
    np.testing.assert_allclose(impl.rnn_forward(x, w_x, w_h, b)[:, -1], h, atol=1e-13)


def test_env_forces_fallback():
    env = dict(os.environ, NAC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from nac import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
