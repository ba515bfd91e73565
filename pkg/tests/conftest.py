"""Shared test helpers: finite-difference oracles and small model factories."""

import numpy as np
import pytest

from headgate import tensor as T


def central_diff_grad(fn, arrays, index, eps=1e-5):
    """Central-difference gradient of scalar fn w.r.t. arrays[index].

    fn takes a list of plain ndarrays and returns a float. Independent of the
    tape engine on purpose: this is the oracle the engine is checked against.
    """
    base = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(base)
        flat[i] = orig - eps
        lo = fn(base)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def assert_grad_matches(analytic, numeric, rtol=1e-5):
    """Element-wise relative comparison with a unit floor for tiny entries."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    worst = np.max(np.abs(analytic - numeric) / denom)
    assert worst < rtol, f"gradient mismatch: worst relative error {worst:.3e}"


def check_param_grads(loss_fn, params, rtol=1e-5, eps=1e-5):
    """Compare reverse-mode grads of loss_fn(params) against central differences.

    loss_fn must rebuild the graph from the parameters' current .data each
    call, so the finite-difference probe re-runs the true forward pass.
    """
    grads = T.reverse_grad(loss_fn(), params)
    for idx, p in enumerate(params):
        arrays = [q.value.data for q in params]

        def scalar(arrs, _idx=idx):
            saved = [np.array(q.value.data, copy=True) for q in params]
            for q, a in zip(params, arrs):
                q.value.data = np.array(a, copy=True)
            try:
                return float(loss_fn().data)
            finally:
                for q, s in zip(params, saved):
                    q.value.data = s

        numeric = central_diff_grad(scalar, arrays, idx, eps=eps)
        assert_grad_matches(grads[p.name], numeric, rtol=rtol)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
