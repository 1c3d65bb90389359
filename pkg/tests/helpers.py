"""Shared test utilities: finite-difference gradient checking."""

import numpy as np


def numeric_gradient(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar f() with respect to array x.

    f must read x's current contents; entries are perturbed in place.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f()
        flat[i] = keep - h
        fm = f()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / max(na, nb, 1e-12))


def check_layer_gradients(layer, x: np.ndarray, rng: np.random.Generator,
                          h: float = 1e-4, train: bool = True) -> float:
    """Worst relative error across input and all parameters of one layer.

    The scalar objective is sum(forward(x) * R) for a fixed random R, whose
    analytic input gradient is layer.backward(R).
    """
    y = layer.forward(x, train)
    r = rng.standard_normal(y.shape)

    def objective():
        return float((layer.forward(x, train) * r).sum())

    for p in layer.params():
        p.grad[...] = 0
    layer.forward(x, train)
    dx = layer.backward(r)

    worst = relative_error(dx, numeric_gradient(objective, x, h))
    for p in layer.params():
        worst = max(worst, relative_error(p.grad, numeric_gradient(objective, p.value, h)))
    return worst
