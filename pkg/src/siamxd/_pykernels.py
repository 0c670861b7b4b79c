"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable, or when
``SIAMXD_PURE_PYTHON=1`` is set.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def pairwise_distances(A, B):
    diff = A[:, None, :] - B[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def pairwise_distances_backward(A, B, dist, grad):
    coef = np.zeros_like(dist)
    nz = dist != 0.0
    coef[nz] = grad[nz] / dist[nz]
    diff = A[:, None, :] - B[None, :, :]
    contrib = coef[:, :, None] * diff
    return contrib.sum(axis=1), -contrib.sum(axis=0)


def conv2d_forward(x, w):
    kh, kw = w.shape[2], w.shape[3]
    # windows: [B, C, OH, OW, kh, kw]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return np.einsum("bcijpq,ocpq->boij", win, w)


def conv2d_backward(x, w, grad):
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = grad.shape[2], grad.shape[3]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    gw = np.einsum("bcijpq,boij->ocpq", win, grad)
    gx = np.zeros_like(x)
    for p in range(kh):
        for q in range(kw):
            gx[:, :, p:p + oh, q:q + ow] += np.einsum("boij,oc->bcij", grad, w[:, :, p, q])
    return gx, gw
