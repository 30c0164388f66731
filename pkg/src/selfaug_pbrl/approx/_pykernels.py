"""NumPy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` must agree with them
bit-for-bit on every input (no fast-math, same operation order).
"""

import numpy as np


def leaky_relu(z, slope):
    return np.where(z > 0.0, z, z * slope)


def leaky_relu_backward(z, grad, slope):
    return np.where(z > 0.0, grad, grad * slope)


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step):
    """In-place Adam step with bias correction on one parameter array."""
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def kth_nearest_distance(queries, points, k):
    """Euclidean distance from each query row to its k-th nearest row of ``points``."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    diff = queries[:, None, :] - points[None, :, :]
    sq = np.sum(diff * diff, axis=-1)
    kth = np.partition(sq, k - 1, axis=1)[:, k - 1]
    return np.sqrt(kth)
