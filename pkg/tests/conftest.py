"""Shared oracles for the test suite.

The central finite-difference helper is the independent gradient oracle used
throughout: it never touches the tape machinery, only repeated forward
evaluations of a plain float function.
"""

import numpy as np
import pytest

import cpslab.tensor as T


def numeric_grads(f, arrays, eps=1e-6):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. each array.

    ``f`` must accept plain numpy arrays and return a float. Gradients are
    returned in the same order as ``arrays``.
    """
    grads = []
    for pos, arr in enumerate(arrays):
        g = np.zeros_like(arr, dtype=np.float64)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            plus = [a.copy() if i == pos else a for i, a in enumerate(arrays)]
            minus = [a.copy() if i == pos else a for i, a in enumerate(arrays)]
            plus[pos][ix] += eps
            minus[pos][ix] -= eps
            g[ix] = (f(*plus) - f(*minus)) / (2.0 * eps)
        grads.append(g)
    return grads


def tape_grads(build, arrays):
    """Analytic gradients of a tape-built scalar w.r.t. each array.

    ``build`` receives one Tensor per array and must return a scalar Tensor.
    """
    tensors = [T.Tensor(a) for a in arrays]
    with T.Tape() as tape:
        for t in tensors:
            tape.watch(t)
        loss = build(*tensors)
    tape.backward(loss)
    return [tape.grad(t) for t in tensors]


def max_rel_err(analytic, numeric):
    """Worst-entry relative error with an absolute floor for near-zeros."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(1.0, float(np.abs(numeric).max()))
    return float(np.abs(analytic - numeric).max() / scale)


def assert_grads_close(build, f, arrays, tol, eps=1e-6):
    """FD-vs-tape comparison for every input array."""
    ana = tape_grads(build, arrays)
    num = numeric_grads(f, arrays, eps=eps)
    for i, (a, n) in enumerate(zip(ana, num)):
        err = max_rel_err(a, n)
        assert err < tol, f"input {i}: relative error {err:.3e} >= {tol:g}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
