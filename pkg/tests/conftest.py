"""Shared test helpers: independent numerical oracles."""

import numpy as np


def fd_gradient(forward, array, h=1e-6):
    """Central finite differences of a scalar-valued ``forward`` with
    respect to ``array``, perturbing it in place."""
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        orig = array[idx]
        array[idx] = orig + h
        f_plus = forward()
        array[idx] = orig - h
        f_minus = forward()
        array[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


def rel_error(analytic, numeric):
    """Max-norm relative disagreement between two gradient arrays."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return np.abs(analytic - numeric).max() / scale


def assert_grad_matches(forward, params, tol=1e-4, h=1e-6):
    """Check every parameter's tape gradient against finite differences.

    ``forward`` must rebuild the graph from the current parameter values
    and return the loss tensor.
    """
    loss = forward()
    tape = loss.tape
    tape.zero_grad()
    tape.backward(loss)
    grads = {id(p): p.grad.copy() for p in params}
    with tape.paused():
        for p in params:
            numeric = fd_gradient(lambda: forward().item(), p.data, h=h)
            err = rel_error(grads[id(p)], numeric)
            assert err <= tol, f"gradient mismatch for {p.name or p}: {err:.3e}"
