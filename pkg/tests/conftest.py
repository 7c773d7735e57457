import numpy as np
import pytest

from hgrn2.tensor import Tensor, no_grad


def fd_grad(f, leaf: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. every element of leaf.

    Independent of the autodiff engine: perturbs leaf.data in place and
    re-evaluates the forward pass under no_grad.
    """
    g = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gf = g.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            lp = f()
            flat[k] = old - h
            lm = f()
            flat[k] = old
            gf[k] = (lp - lm) / (2.0 * h)
    return g


def check_grad(build_loss, leaves, rtol=1e-7, atol=1e-10, h=1e-5):
    """Compare autodiff gradients of build_loss() against finite differences.

    build_loss must rebuild the graph from the given leaf tensors on every
    call and return the scalar loss Tensor.
    """
    for leaf in leaves:
        leaf.zero_grad()
    loss = build_loss()
    loss.backward()
    for leaf in leaves:
        want = fd_grad(lambda: build_loss().item(), leaf, h=h)
        np.testing.assert_allclose(leaf.grad, want, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
