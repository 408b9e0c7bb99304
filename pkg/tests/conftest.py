import logging

import numpy as np
import pytest


@pytest.fixture(autouse=True)
def _quiet_condition_ceiling(caplog):
    # tests that assert on the ceiling warning re-enable it explicitly
    logging.getLogger("harp.hessian").setLevel(logging.ERROR)
    yield
    logging.getLogger("harp.hessian").setLevel(logging.NOTSET)


def central_difference_gradient(f, theta, step=1e-6):
    """Independent finite-difference gradient oracle."""
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        grad[i] = (f(theta + e) - f(theta - e)) / (2.0 * step)
    return grad


def central_difference_hessian(grad, theta, step=1e-5):
    """Independent finite-difference Hessian oracle built on a gradient."""
    theta = np.asarray(theta, dtype=float)
    d = theta.size
    H = np.zeros((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        H[:, i] = (grad(theta + e) - grad(theta - e)) / (2.0 * step)
    return 0.5 * (H + H.T)
