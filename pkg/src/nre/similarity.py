"""Latent-space similarity: encoder tables, k-means partition, neighbor and
farthest queries under cosine similarity.

All similarities are cosine on nonnegative vectors (the similarity encoder
ends in a relu), so values live in [0, 1] and distance is 1 - similarity.
Similarity to or from an all-zero vector is defined as 0: a dead latent
carries no direction, and treating it as maximally dissimilar keeps the
distance well defined.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .nn import Network


def _as_query(vec) -> np.ndarray:
    q = np.asarray(vec, dtype=np.float64).ravel()
    if (q < 0).any():
        raise ValueError("cosine similarity here is defined on nonnegative vectors")
    return q


def cosine_sim(a, b) -> float:
    """a.b / (|a||b|) on nonnegative vectors, clipped to [0, 1]; 0 when
    either vector is all zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if (a < 0).any() or (b < 0).any():
        raise ValueError("negative component: cosine similarity contract requires nonnegative vectors")
    ma = float(a.max())
    mb = float(b.max())
    if ma == 0.0 or mb == 0.0:
        return 0.0
    # Scale by the max component so squared norms cannot underflow, and use
    # sqrt(na2 * nb2) instead of sqrt(na2) * sqrt(nb2): identical vectors
    # then divide out exactly, so sim(a, a) == 1.0 and dist(a, a) == 0.0.
    a = a / ma
    b = b / mb
    na2 = float(a @ a)
    nb2 = float(b @ b)
    return float(min(1.0, max(0.0, float(a @ b) / np.sqrt(na2 * nb2))))


def cosine_dist(a, b) -> float:
    """1 - cosine_sim(a, b)."""
    return 1.0 - cosine_sim(a, b)


@dataclass
class LatentTable:
    """Encoded dataset latents: (Z, d) float32, componentwise >= 0."""

    latents: np.ndarray
    dataset_id: str
    fingerprint: str
    norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.latents.ndim != 2:
            raise ValueError(f"latents must be (Z, d), got {self.latents.shape}")
        self.latents = np.ascontiguousarray(self.latents, dtype=np.float32)
        if (self.latents < 0).any():
            raise ValueError("latent table contains negative components")
        self.latents.setflags(write=False)
        self.norms = np.linalg.norm(self.latents.astype(np.float64), axis=1)
        self.norms.setflags(write=False)

    def __len__(self) -> int:
        return self.latents.shape[0]

    @property
    def dim(self) -> int:
        return self.latents.shape[1]


def encode_all(encoder: Network, ds, batch_size: int = 512) -> LatentTable:
    """Encode every sample with the frozen similarity encoder, in order."""
    if not encoder.frozen:
        raise ValueError("encode_all requires a frozen encoder")
    flat = ds.flat()
    rows = [encoder.forward(flat[s:s + batch_size]) for s in range(0, flat.shape[0], batch_size)]
    latents = np.concatenate(rows, axis=0) if rows else np.zeros((0, encoder.out_dim), np.float32)
    return LatentTable(latents=latents, dataset_id=ds.name, fingerprint=encoder.fingerprint())


@dataclass
class ClusterModel:
    """k-means partition of a latent table (fit with Euclidean Lloyd)."""

    centers: np.ndarray
    assignment: np.ndarray
    seed: int
    members: list[np.ndarray] = field(init=False, repr=False)
    center_norms: np.ndarray = field(init=False, repr=False)
    objective_history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float64)
        self.assignment = np.ascontiguousarray(self.assignment, dtype=np.int64)
        k = self.centers.shape[0]
        if self.assignment.size and not (0 <= self.assignment.min() and self.assignment.max() < k):
            raise ValueError("assignment out of range")
        if not np.isfinite(self.centers).all():
            raise ValueError("non-finite cluster center")
        self.members = [np.flatnonzero(self.assignment == j) for j in range(k)]
        if any(m.size == 0 for m in self.members):
            raise ValueError("empty cluster after fitting")
        self.center_norms = np.linalg.norm(self.centers, axis=1)

    @property
    def k(self) -> int:
        return self.centers.shape[0]


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    z = x.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(z)
    d2 = np.square(x - x[chosen[0]]).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(z, p=d2 / total)
        else:
            remaining = np.setdiff1d(np.arange(z), chosen[:j])
            idx = rng.choice(remaining)
        chosen[j] = idx
        d2 = np.minimum(d2, np.square(x - x[idx]).sum(axis=1))
    return x[chosen].copy()


def kmeans(table: LatentTable, k: int, seed: int, max_iters: int = 100) -> ClusterModel:
    """Seeded k-means++ then Lloyd iterations to an assignment fixpoint.

    Empty clusters are re-seeded from the point farthest from its own
    center before the next update.
    """
    z = len(table)
    if not 1 <= k <= z:
        raise ValueError(f"k must be in [1, {z}], got {k}")
    x = table.latents.astype(np.float64)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(x, k, rng)
    labels = np.full(z, -1, dtype=np.int64)
    history: list[float] = []
    for _ in range(max_iters):
        new_labels, d2 = backend.assign_centers(table.latents, centers)
        history.append(float(d2.sum()))
        counts = np.bincount(new_labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            steal = int(np.argmax(d2))
            new_labels[steal] = j
            d2[steal] = 0.0
            counts = np.bincount(new_labels, minlength=k)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            centers[j] = x[labels == j].mean(axis=0)
    model = ClusterModel(centers=centers, assignment=labels, seed=seed)
    model.objective_history = history
    return model


def _cluster_order(query: np.ndarray, qnorm: float, clusters: ClusterModel, descending: bool) -> np.ndarray:
    sims = clusters.centers @ query
    denom = clusters.center_norms * qnorm
    safe = np.where(denom == 0.0, 1.0, denom)
    sims = np.where(denom == 0.0, 0.0, sims / safe)
    key = -sims if descending else sims
    return np.argsort(key, kind="stable")


def nearest(query_latent, table: LatentTable, clusters: ClusterModel, t: int = 1,
            exclude_index: int | None = None):
    """Indices of the `t` highest-similarity rows in the query's cluster,
    topping up from the next-nearest clusters when it runs short.

    The query is assigned to a cluster by cosine similarity to the centers;
    with a single cluster this is exactly the brute-force scan. Returns
    (indices, similarities) in descending-similarity order.
    """
    if len(table) == 0:
        raise ValueError("empty latent table")
    if t < 1:
        raise ValueError("t must be >= 1")
    q = _as_query(query_latent)
    qnorm = float(np.linalg.norm(q))
    excl = -1 if exclude_index is None else int(exclude_index)
    order = _cluster_order(q, qnorm, clusters, descending=True)
    got_idx: list[np.ndarray] = []
    got_sims: list[np.ndarray] = []
    need = t
    for c in order:
        idx, sims = backend.cosine_topk(table.latents, table.norms,
                                        clusters.members[c], q, qnorm, need, excl)
        got_idx.append(idx)
        got_sims.append(sims)
        need -= idx.size
        if need == 0:
            break
    return np.concatenate(got_idx), np.concatenate(got_sims)


def _sims_to_query(table: LatentTable, indices: np.ndarray, q: np.ndarray, qnorm: float) -> np.ndarray:
    dots = table.latents[indices].astype(np.float64) @ q
    denom = table.norms[indices] * qnorm
    safe = np.where(denom == 0.0, 1.0, denom)
    return np.where(denom == 0.0, 0.0, dots / safe)


def farthest_exact(query_latent, table: LatentTable, t: int = 1, exclude=()):
    """Brute-force `t` lowest-similarity rows over the whole table."""
    if len(table) == 0:
        raise ValueError("empty latent table")
    q = _as_query(query_latent)
    qnorm = float(np.linalg.norm(q))
    candidates = np.arange(len(table), dtype=np.int64)
    if len(exclude):
        candidates = candidates[~np.isin(candidates, np.fromiter(exclude, dtype=np.int64))]
    sims = _sims_to_query(table, candidates, q, qnorm)
    order = np.argsort(sims, kind="stable")[:t]
    return candidates[order], sims[order]


def farthest(query_latent, table: LatentTable, clusters: ClusterModel, t: int = 1,
             rng: np.random.Generator | None = None, exclude=()):
    """Seeded sample of `t` rows from the least-similar quartile of clusters.

    Clusters are ranked by ascending center similarity to the query and the
    lowest ceil(K/4) form the sampling pool (extended to further clusters if
    the pool cannot fill `t` after exclusions). With a single cluster this
    falls back to the exact brute-force scan. Returns (indices, sims).
    """
    if len(table) == 0:
        raise ValueError("empty latent table")
    if t < 1:
        raise ValueError("t must be >= 1")
    if clusters.k == 1:
        return farthest_exact(query_latent, table, t, exclude)
    if rng is None:
        raise ValueError("farthest sampling over clusters needs an rng")
    q = _as_query(query_latent)
    qnorm = float(np.linalg.norm(q))
    order = _cluster_order(q, qnorm, clusters, descending=False)
    take = int(np.ceil(clusters.k / 4))
    excl = np.fromiter(exclude, dtype=np.int64) if len(exclude) else np.empty(0, np.int64)
    pool = np.empty(0, np.int64)
    for upto in range(take, clusters.k + 1):
        pool = np.concatenate([clusters.members[c] for c in order[:upto]])
        if len(excl):
            pool = pool[~np.isin(pool, excl)]
        if pool.size >= t or upto == clusters.k:
            break
    if pool.size == 0:
        raise ValueError("no faraway candidates left after exclusions")
    picks = rng.choice(pool, size=t, replace=pool.size < t)
    return picks.astype(np.int64), _sims_to_query(table, picks.astype(np.int64), q, qnorm)


@dataclass
class NeighborQueryResult:
    """Per-query mining outcome: neighbor and faraway rows with their
    similarities. The excluded query index appears in neither list and the
    two index sets are disjoint."""

    neighbor_indices: np.ndarray
    neighbor_sims: np.ndarray
    far_indices: np.ndarray
    far_sims: np.ndarray
    excluded: int | None = None

    def __post_init__(self):
        near = set(int(i) for i in self.neighbor_indices)
        far = set(int(i) for i in self.far_indices)
        if self.excluded is not None and (self.excluded in near or self.excluded in far):
            raise ValueError("excluded query index leaked into a result set")
        if near & far:
            raise ValueError(f"neighbor and faraway sets intersect: {sorted(near & far)}")


def mine(query_latent, table: LatentTable, clusters: ClusterModel, t: int,
         rng: np.random.Generator | None = None,
         exclude_index: int | None = None) -> NeighborQueryResult:
    """Neighbors then faraway samples for one query, with the faraway draw
    excluding both the query row and the mined neighbors."""
    nbr_idx, nbr_sims = nearest(query_latent, table, clusters, t, exclude_index)
    excl = set(int(i) for i in nbr_idx)
    if exclude_index is not None:
        excl.add(int(exclude_index))
    far_idx, far_sims = farthest(query_latent, table, clusters, t, rng, exclude=excl)
    return NeighborQueryResult(nbr_idx, nbr_sims, far_idx, far_sims, excluded=exclude_index)


def export_csv(table: LatentTable, path) -> None:
    """Write the table as CSV: a header of index plus one column per latent
    component, one row per sample."""
    d = table.dim
    header = "index," + ",".join(f"latent_{j}" for j in range(d))
    with open(path, "w", encoding="utf-8") as f:
        f.write(header + "\n")
        for i in range(len(table)):
            vals = ",".join(repr(float(v)) for v in table.latents[i])
            f.write(f"{i},{vals}\n")
