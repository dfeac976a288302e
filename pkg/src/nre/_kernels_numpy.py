"""Pure-numpy kernels: the fallback backend.

The numba backend mirrors these formulas operation for operation; keep the
two files in sync when changing any of them.
"""

import numpy as np


def adam_update(param, grad, m, v, lr, b1, omb1, b2, omb2, eps, bc1, bc2):
    """In-place Adam update on flat arrays. Scalars must carry param's dtype."""
    m *= b1
    m += omb1 * grad
    v *= b2
    v += omb2 * (grad * grad)
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def assign_centers(points, centers):
    """Index of the nearest center (squared Euclidean) per point.

    Returns (labels int64, squared distance float64); accumulates in float64.
    """
    pts = points.astype(np.float64, copy=False)
    best = np.full(pts.shape[0], np.inf)
    labels = np.zeros(pts.shape[0], dtype=np.int64)
    for j in range(centers.shape[0]):
        diff = pts - centers[j].astype(np.float64)
        d2 = np.einsum("ij,ij->i", diff, diff)
        closer = d2 < best
        best[closer] = d2[closer]
        labels[closer] = j
    return labels, best


def cosine_topk(latents, norms, candidates, query, qnorm, top_t, exclude):
    """Top `top_t` candidate rows by cosine similarity to `query`.

    Similarity to or from a zero vector is 0. `exclude` (or -1 for none) is
    skipped. Ties keep the earlier candidate. Returns fixed-size arrays
    (indices, similarities) padded with -1 / -inf, plus the filled count.
    """
    if exclude >= 0:
        candidates = candidates[candidates != exclude]
    idx = np.full(top_t, -1, dtype=np.int64)
    sims = np.full(top_t, -np.inf)
    if candidates.size == 0 or top_t == 0:
        return idx, sims, 0
    dots = latents[candidates].astype(np.float64) @ query
    denom = norms[candidates] * qnorm
    safe = np.where(denom == 0.0, 1.0, denom)
    s = np.where(denom == 0.0, 0.0, dots / safe)
    order = np.argsort(-s, kind="stable")[:top_t]
    count = order.size
    idx[:count] = candidates[order]
    sims[:count] = s[order]
    return idx, sims, count
