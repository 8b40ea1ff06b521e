import numpy as np
import pytest


def central_difference(fn, arrays, h=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. each array, in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = fn()
            arr[idx] = orig - h
            down = fn()
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-8, small=1e-6):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape
    tiny = np.abs(analytic) < small
    assert np.all(np.abs(analytic[tiny] - numeric[tiny]) <= atol), "absolute check failed"
    big = ~tiny
    rel = np.abs(analytic[big] - numeric[big]) / np.maximum(np.abs(analytic[big]), np.abs(numeric[big]))
    assert rel.size == 0 or rel.max() <= rtol, f"max relative error {rel.max():.3g}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
