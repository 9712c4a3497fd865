"""Pure numpy implementations of the hot kernels.

Every function here has a drop-in twin in ``_ckernels.pyx``; the two are
checked against each other in ``tests/test_kernels.py``.
"""

import numpy as np

IDENTITY, RELU, SIGMOID = 0, 1, 2


def _activate(z, act):
    if act == IDENTITY:
        return z.copy()
    if act == RELU:
        return np.maximum(z, 0.0)
    if act == SIGMOID:
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    raise ValueError(f"unknown activation code {act}")


def layer_forward(weight, bias, x, act):
    """Batched affine map plus activation.

    Returns ``(pre, out)`` with shapes ``(n, out_dim)``.
    """
    pre = x @ weight.T + bias
    return pre, _activate(pre, act)


def layer_backward(weight, x, pre, out, grad_out, act):
    """Backward pass of one layer; returns ``(grad_w, grad_b, grad_x)``."""
    if act == IDENTITY:
        delta = grad_out
    elif act == RELU:
        delta = grad_out * (pre > 0)
    elif act == SIGMOID:
        delta = grad_out * out * (1.0 - out)
    else:
        raise ValueError(f"unknown activation code {act}")
    grad_w = delta.T @ x
    grad_b = delta.sum(axis=0)
    grad_x = delta @ weight
    return grad_w, grad_b, grad_x


def sq_dists(a, b):
    """Pairwise squared Euclidean distances, shape ``(len(a), len(b))``."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def min_dist_update(min_sq, points, new_point):
    """In place: ``min_sq[i] = min(min_sq[i], |points[i] - new_point|^2)``."""
    diff = points - new_point
    np.minimum(min_sq, np.einsum("ij,ij->i", diff, diff), out=min_sq)


def coverage_update(best, points, new_point, inv_two_sigma_sq):
    """In place: ``best[m] = max(best[m], exp(-|points[m] - new_point|^2 / 2s^2))``."""
    diff = points - new_point
    k = np.exp(-np.einsum("ij,ij->i", diff, diff) * inv_two_sigma_sq)
    np.maximum(best, k, out=best)
