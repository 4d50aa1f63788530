import numpy as np
import pytest

from pmpreg.regnet import RegularizerParams


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def random_params(rng, n_layers=3, n_channels=2, scale=0.5):
    from pmpreg.regnet import layer_shapes

    return RegularizerParams(
        tuple(rng.normal(scale=scale, size=s) for s in layer_shapes(n_layers, n_channels))
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_grad(fun, x, h=1e-5):
    """Central-difference gradient of scalar ``fun`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fun(x)
        flat[i] = old - h
        fm = fun(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def fd_grad_params(fun, theta, h=1e-5):
    """Central-difference gradient of scalar ``fun`` over all weights of ``theta``."""
    vec = theta.flat()
    return theta.from_flat(fd_grad(lambda v: fun(theta.from_flat(v)), vec, h))
