"""Numba-jitted kernels: the accelerated backend.

Formulas mirror _kernels_numpy exactly; per-element arithmetic runs in the
array dtype for adam_update and in float64 for the similarity/assignment
accumulations, matching the numpy path.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def adam_update(param, grad, m, v, lr, b1, omb1, b2, omb2, eps, bc1, bc2):
    for i in range(param.shape[0]):
        g = grad[i]
        m[i] = m[i] * b1 + omb1 * g
        v[i] = v[i] * b2 + omb2 * (g * g)
        param[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)


@njit(cache=True)
def assign_centers(points, centers):
    n, d = points.shape
    k = centers.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    for i in range(n):
        bj = 0
        bd = np.inf
        for j in range(k):
            acc = 0.0
            for t in range(d):
                diff = np.float64(points[i, t]) - np.float64(centers[j, t])
                acc += diff * diff
            if acc < bd:
                bd = acc
                bj = j
        labels[i] = bj
        best[i] = bd
    return labels, best


@njit(cache=True)
def cosine_topk(latents, norms, candidates, query, qnorm, top_t, exclude):
    d = latents.shape[1]
    idx = np.full(top_t, -1, dtype=np.int64)
    sims = np.full(top_t, -np.inf)
    filled = 0
    for ci in range(candidates.shape[0]):
        j = candidates[ci]
        if j == exclude:
            continue
        nj = norms[j]
        if nj == 0.0 or qnorm == 0.0:
            s = 0.0
        else:
            acc = 0.0
            for t in range(d):
                acc += np.float64(latents[j, t]) * query[t]
            s = acc / (nj * qnorm)
        if filled < top_t:
            pos = filled
            idx[pos] = j
            sims[pos] = s
            while pos > 0 and sims[pos] > sims[pos - 1]:
                sims[pos], sims[pos - 1] = sims[pos - 1], sims[pos]
                idx[pos], idx[pos - 1] = idx[pos - 1], idx[pos]
                pos -= 1
            filled += 1
        elif s > sims[top_t - 1]:
            pos = top_t - 1
            idx[pos] = j
            sims[pos] = s
            while pos > 0 and sims[pos] > sims[pos - 1]:
                sims[pos], sims[pos - 1] = sims[pos - 1], sims[pos]
                idx[pos], idx[pos - 1] = idx[pos - 1], idx[pos]
                pos -= 1
    return idx, sims, filled
