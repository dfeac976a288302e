"""Kernel backend selection.

The hot inner loops (fused optimizer update, cluster assignment, in-cluster
neighbor scans) exist twice: numba-jitted loops and pure numpy. The env var
NRE_BACKEND picks one at import time:

    NRE_BACKEND=numba   require numba, fail loudly if it cannot compile
    NRE_BACKEND=numpy   force the pure-numpy path
    NRE_BACKEND=auto    (default) prefer numba, fall back to numpy

Both backends are deterministic run to run; results may differ between
backends by float rounding only, so the chosen backend is part of a run's
reproducibility recipe. `benchmarks/bench_backends.py` times them side by
side.
"""

import os
import warnings

import numpy as np

from . import _kernels_numpy

_choice = os.environ.get("NRE_BACKEND", "auto").strip().lower() or "auto"
if _choice not in ("auto", "numba", "numpy"):
    warnings.warn(
        f"NRE_BACKEND={_choice!r} is not one of auto/numba/numpy; using auto",
        stacklevel=1,
    )
    _choice = "auto"

_USING_NUMBA = False
if _choice in ("auto", "numba"):
    try:
        from . import _kernels_numba as _impl

        _USING_NUMBA = True
    except ImportError:
        if _choice == "numba":
            raise
        _impl = _kernels_numpy
else:
    _impl = _kernels_numpy


def backend_name() -> str:
    return "numba" if _USING_NUMBA else "numpy"


def adam_update(param, grad, m, v, *, lr, beta1, beta2, eps, step):
    """Adam step with bias correction, in place on param/m/v.

    Arrays must be C-contiguous and share shape and dtype; the per-element
    arithmetic runs in that dtype on both backends.
    """
    ty = param.dtype.type
    _impl.adam_update(
        param.ravel(),
        grad.ravel(),
        m.ravel(),
        v.ravel(),
        ty(lr),
        ty(beta1),
        ty(1.0) - ty(beta1),
        ty(beta2),
        ty(1.0) - ty(beta2),
        ty(eps),
        ty(1.0 - beta1**step),
        ty(1.0 - beta2**step),
    )


def assign_centers(points, centers):
    """Nearest center per point under squared Euclidean distance.

    Returns (labels int64 (N,), squared distances float64 (N,)).
    """
    return _impl.assign_centers(points, centers)


def cosine_topk(latents, norms, candidates, query, qnorm, top_t, exclude=-1):
    """Top `top_t` of `candidates` by cosine similarity to `query`.

    latents: (Z, d) array; norms: float64 (Z,) row norms; query: float64 (d,)
    with norm `qnorm`. Rows with zero norm score 0. Returns (indices, sims)
    sorted by descending similarity, at most top_t entries after dropping
    `exclude`.
    """
    idx, sims, count = _impl.cosine_topk(
        latents,
        norms,
        np.ascontiguousarray(candidates, dtype=np.int64),
        query,
        float(qnorm),
        int(top_t),
        int(exclude),
    )
    return idx[:count], sims[:count]
