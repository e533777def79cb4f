"""Shared test utilities."""
import numpy as np

from ambientflow.diffengine import Tensor, no_grad


def perturb(model, seed=0, scale=0.3):
    """Randomise every parameter so couplings are no longer the identity."""
    rng = np.random.default_rng(seed)
    for t in model.params.tensors():
        t.data = t.data + scale * rng.standard_normal(t.shape)
    return model


def numeric_jacobian(fn, x, h=1e-6):
    """Central-difference Jacobian of a map R^n -> R^n at a single point."""
    n = x.size
    jac = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        jac[:, i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return jac


def forward_np(model, z):
    with no_grad():
        out, ld = model.forward(Tensor(np.atleast_2d(z)))
    return out.data, ld.data
