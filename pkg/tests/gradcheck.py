"""Central finite differences against the analytic backward pass."""
import numpy as np

from dessilbi.network import backward, forward


def numeric_grad(net, params, x, y, key, step=1e-5):
    g = np.zeros_like(params[key])
    flat = params[key].reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = forward(net, params, x, y).loss
        flat[i] = orig - step
        down = forward(net, params, x, y).loss
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def max_relative_error(net, params, x, y, step=1e-5):
    """Largest ||analytic - fd|| / (||analytic|| + 1e-12) over parameter tensors."""
    params = {k: v.copy() for k, v in params.items()}
    grads = backward(net, params, forward(net, params, x, y))
    worst = 0.0
    for key in params:
        fd = numeric_grad(net, params, x, y, key, step)
        err = np.linalg.norm(grads[key] - fd) / (np.linalg.norm(grads[key]) + 1e-12)
        worst = max(worst, err)
    return worst
