"""Encoder-decoder training.

Two stages: plain reconstruction pretraining, then fine-tuning with the
neighborhood-relational loss. The fine-tune stage keeps a frozen copy of the
pretrained encoder as the similarity encoder; its latent space defines all
distances, both for the loss terms and for mining neighbor/faraway samples.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .data import Dataset, batch_indices
from .errors import DivergenceError
from .nn import Adam, Network, mlp
from .similarity import (
    ClusterModel,
    LatentTable,
    encode_all,
    farthest,
    farthest_exact,
    kmeans,
    nearest,
)

QUERY_MODES = ("by-reconstruction", "by-input")


@dataclass(frozen=True)
class LossWeights:
    """The (lam1, lam2, lam3) triplet weighting reconstruction-similarity,
    neighbor-distance, and faraway-similarity terms. Must lie on the unit
    simplex."""

    lam1: float
    lam2: float
    lam3: float

    def __post_init__(self):
        if min(self.lam1, self.lam2, self.lam3) < 0:
            raise ValueError("loss weights must be nonnegative")
        if abs(self.lam1 + self.lam2 + self.lam3 - 1.0) > 1e-9:
            raise ValueError(
                f"loss weights must sum to 1, got {self.lam1 + self.lam2 + self.lam3!r}"
            )
        if not (self.lam1 > self.lam2 and self.lam1 > self.lam3):
            warnings.warn(
                "reconstruction weight lam1 should dominate lam2 and lam3; "
                "training proceeds but reconstructions may drift",
                stacklevel=2,
            )

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.lam1, self.lam2, self.lam3)


@dataclass(frozen=True)
class TrainConfig:
    """Fine-tuning knobs. `t` and `k` are the neighbor count and cluster
    count for mining; `refresh_interval` is how many epochs a mined
    neighbor/faraway assignment stays in use."""

    epochs: int = 10
    batch_size: int = 100
    lr: float = 1e-4
    t: int = 1
    k: int = 10
    refresh_interval: int = 1
    seed: int = 0
    query_mode: str = "by-reconstruction"
    normalize_terms: bool = False

    def __post_init__(self):
        if self.t < 1 or self.k < 1 or self.refresh_interval < 1:
            raise ValueError("t, k, and refresh_interval must all be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"query_mode must be one of {QUERY_MODES}, got {self.query_mode!r}")


class LossTerms(NamedTuple):
    loss: float
    term1: float
    term2: float
    term3: float


@dataclass
class NREModel:
    """Trained relational autoencoder: trainable encoder/decoder plus the
    frozen similarity encoder they were tuned against."""

    encoder: Network
    decoder: Network
    sim_encoder: Network
    weights: LossWeights
    config: TrainConfig

    def __post_init__(self):
        if not self.sim_encoder.frozen:
            raise ValueError("similarity encoder must be frozen")
        if self.encoder.out_dim != self.decoder.in_dim:
            raise ValueError(
                f"encoder output dim {self.encoder.out_dim} != decoder input dim {self.decoder.in_dim}"
            )

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.encoder.forward(x)

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.decoder.forward(self.encoder.forward(x))


def encode(model: NREModel, x: np.ndarray) -> np.ndarray:
    return model.encode(x)


def reconstruct(model: NREModel, x: np.ndarray) -> np.ndarray:
    return model.reconstruct(x)


def build_autoencoder(dims: list[int], seed: int, dtype=np.float32) -> tuple[Network, Network]:
    """Mirrored encoder/decoder MLPs from a dimension list.

    The encoder ends in relu (nonnegative latents, as the similarity module
    requires); the decoder ends in sigmoid (pixels in [0, 1]).
    """
    rng = np.random.default_rng(seed)
    encoder = mlp(list(dims), hidden="relu", final="relu", rng=rng, dtype=dtype)
    decoder = mlp(list(reversed(dims)), hidden="relu", final="sigmoid", rng=rng, dtype=dtype)
    return encoder, decoder


def mse_loss_grad(x: np.ndarray, x_rec: np.ndarray) -> tuple[float, np.ndarray]:
    diff = x_rec - x
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return loss, grad


def pretrain_ae(ds: Dataset, dims: list[int], epochs: int, lr: float, seed: int,
                batch_size: int = 100,
                on_epoch: Callable[[dict], None] | None = None) -> tuple[Network, Network, list[float]]:
    """Train a plain autoencoder on mean-squared pixel reconstruction.

    Returns (encoder, decoder, per-epoch mean loss). Deterministic given the
    seed; a non-finite loss aborts with DivergenceError.
    """
    flat = ds.flat()
    if dims[0] != flat.shape[1]:
        raise ValueError(f"architecture input dim {dims[0]} != data dim {flat.shape[1]}")
    encoder, decoder = build_autoencoder(dims, seed)
    params = encoder.parameters() + decoder.parameters()
    adam = Adam(params, lr=lr)
    history: list[float] = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        total = 0.0
        count = 0
        for idx in batch_indices(len(ds), batch_size, seed=_epoch_seed(seed, epoch)):
            x = flat[idx]
            x_rec = decoder.forward(encoder.forward(x))
            loss, grad = mse_loss_grad(x, x_rec)
            dec_grads, dh = decoder.backward(grad)
            enc_grads, _ = encoder.backward(dh)
            adam.step(params, enc_grads + dec_grads)
            total += loss * len(idx)
            count += len(idx)
        mean_loss = total / count
        if not np.isfinite(mean_loss):
            raise DivergenceError(f"pretraining diverged at epoch {epoch}: loss={mean_loss}")
        history.append(mean_loss)
        if on_epoch is not None:
            on_epoch({"epoch": epoch, "loss": mean_loss,
                      "wall_ms": (time.perf_counter() - t0) * 1000.0})
    return encoder, decoder, history


def _epoch_seed(seed: int, epoch: int) -> list[int]:
    return [seed, 0x5E0C, epoch]


def _safe_inv(x: np.ndarray) -> np.ndarray:
    return np.where(x == 0.0, 0.0, 1.0 / np.where(x == 0.0, 1.0, x))


def relational_terms(u: np.ndarray, a: np.ndarray,
                     nbr: np.ndarray | None, far: np.ndarray | None,
                     normalize: bool = False):
    """Per-sample loss terms and their gradients with respect to `u`.

    u: (B, d) latents of the reconstructions (the differentiable side).
    a: (B, d) latents of the inputs; nbr/far: (B, T, d) mined latents. All
    treated as constants except u. Terms: distance(a, u), summed distance to
    neighbors, summed similarity to faraway samples; `normalize` divides the
    two sums by T. Returns (t1, t2, t3, g1, g2, g3) with t* of shape (B,)
    and g* of shape (B, d).
    """
    u = u.astype(np.float64, copy=False)
    b, d = u.shape
    unorm = np.linalg.norm(u, axis=1)
    uinv = _safe_inv(unorm)
    uhat = u * uinv[:, None]

    def sims(v):
        vnorm = np.linalg.norm(v, axis=-1)
        vhat = v * _safe_inv(vnorm)[..., None]
        s = np.einsum("bd,btd->bt", uhat, vhat)
        grad = (vhat - s[..., None] * uhat[:, None, :]) * uinv[:, None, None]
        return s, grad

    s1, g1 = sims(a.astype(np.float64, copy=False)[:, None, :])
    t1 = 1.0 - np.clip(s1[:, 0], 0.0, 1.0)
    g1 = -g1[:, 0, :]
    if nbr is not None:
        sn, gn = sims(nbr.astype(np.float64, copy=False))
        t2 = (1.0 - np.clip(sn, 0.0, 1.0)).sum(axis=1)
        g2 = -gn.sum(axis=1)
        if normalize:
            t2 /= nbr.shape[1]
            g2 /= nbr.shape[1]
    else:
        t2 = np.zeros(b)
        g2 = np.zeros((b, d))
    if far is not None:
        sf, gf = sims(far.astype(np.float64, copy=False))
        t3 = np.clip(sf, 0.0, 1.0).sum(axis=1)
        g3 = gf.sum(axis=1)
        if normalize:
            t3 /= far.shape[1]
            g3 /= far.shape[1]
    else:
        t3 = np.zeros(b)
        g3 = np.zeros((b, d))
    return t1, t2, t3, g1, g2, g3


def nre_loss(x: np.ndarray, encoder: Network, decoder: Network, sim_encoder: Network,
             nbr_latents: np.ndarray | None, far_latents: np.ndarray | None,
             weights: LossWeights, normalize_terms: bool = False):
    """Relational loss over a batch and its parameter gradients.

    Runs x through encoder+decoder, maps both x and the reconstruction into
    the frozen similarity space, and combines the three weighted terms
    (batch mean). Gradients flow through the frozen similarity encoder into
    the decoder and encoder; the similarity encoder's own parameters are
    untouched. When lam2/lam3 is zero the corresponding latents may be None
    and that term is skipped.

    Returns (LossTerms, encoder grads, decoder grads).
    """
    if not sim_encoder.frozen:
        raise ValueError("similarity encoder must be frozen")
    b = x.shape[0]
    if weights.lam2 > 0 and nbr_latents is None:
        raise ValueError("lam2 > 0 requires neighbor latents")
    if weights.lam3 > 0 and far_latents is None:
        raise ValueError("lam3 > 0 requires faraway latents")
    if nbr_latents is not None and far_latents is not None \
            and nbr_latents.shape != far_latents.shape:
        raise ValueError(
            f"neighbor/faraway latent shapes differ: {nbr_latents.shape} vs {far_latents.shape}"
        )
    for name, lat in (("neighbor", nbr_latents), ("faraway", far_latents)):
        if lat is not None and (lat.ndim != 3 or lat.shape[0] != b):
            raise ValueError(f"{name} latents must be (batch, T, d), got {lat.shape}")

    h = encoder.forward(x)
    x_rec = decoder.forward(h)
    a = sim_encoder.forward(x)
    u = sim_encoder.forward(x_rec)

    t1, t2, t3, g1, g2, g3 = relational_terms(
        u, a,
        nbr_latents if weights.lam2 > 0 else None,
        far_latents if weights.lam3 > 0 else None,
        normalize=normalize_terms,
    )
    terms = LossTerms(
        loss=float(np.mean(weights.lam1 * t1 + weights.lam2 * t2 + weights.lam3 * t3)),
        term1=float(np.mean(weights.lam1 * t1)),
        term2=float(np.mean(weights.lam2 * t2)),
        term3=float(np.mean(weights.lam3 * t3)),
    )
    if not np.isfinite(terms.loss):
        raise DivergenceError(f"non-finite relational loss: {terms}")
    du = (weights.lam1 * g1 + weights.lam2 * g2 + weights.lam3 * g3) / b
    _, dx_rec = sim_encoder.backward(du.astype(u.dtype, copy=False), need_param_grads=False)
    dec_grads, dh = decoder.backward(dx_rec)
    enc_grads, _ = encoder.backward(dh)
    return terms, enc_grads, dec_grads


def model_loss(x: np.ndarray, model: NREModel,
               nbr_latents: np.ndarray | None, far_latents: np.ndarray | None,
               weights: LossWeights | None = None):
    """nre_loss against a model's own networks and (by default) weights."""
    w = weights or model.weights
    return nre_loss(x, model.encoder, model.decoder, model.sim_encoder,
                    nbr_latents, far_latents, w, model.config.normalize_terms)


def _mine_epoch(table: LatentTable, clusters: ClusterModel, queries: np.ndarray,
                t: int, seed: int, refresh_index: int,
                exclude_self: bool):
    """Mined neighbor/faraway index arrays, (Z, t) each, for all queries.

    Faraway sampling draws from a per-query stream seeded by (seed, refresh
    index, query index) so results do not depend on iteration order. Any
    query whose sampled faraway similarity exceeds its weakest neighbor
    similarity is repaired with the exact brute-force faraway scan, keeping
    mined neighbors at least as similar as mined faraway samples.
    """
    z = queries.shape[0]
    nbr_idx = np.empty((z, t), dtype=np.int64)
    far_idx = np.empty((z, t), dtype=np.int64)
    for i in range(z):
        exclude = i if exclude_self else None
        n_i, n_s = nearest(queries[i], table, clusters, t, exclude_index=exclude)
        if n_i.size < t:
            raise ValueError(f"table too small to mine {t} neighbors for query {i}")
        excl = set(int(v) for v in n_i)
        if exclude is not None:
            excl.add(i)
        rng = np.random.default_rng([seed, 0xFA7, refresh_index, i])
        f_i, f_s = farthest(queries[i], table, clusters, t, rng=rng, exclude=excl)
        if f_s.max() > n_s.min():
            f_i, f_s = farthest_exact(queries[i], table, t, exclude=excl)
            if f_s.max() > n_s.min():
                raise ValueError(
                    f"mining degenerate at query {i}: exact faraway similarity "
                    f"{f_s.max():.6f} exceeds weakest neighbor {n_s.min():.6f}"
                )
        nbr_idx[i] = n_i
        far_idx[i] = f_i
    return nbr_idx, far_idx


def _reconstruction_queries(encoder: Network, decoder: Network, sim_encoder: Network,
                            flat: np.ndarray, batch_size: int = 512) -> np.ndarray:
    rows = []
    for s in range(0, flat.shape[0], batch_size):
        x = flat[s:s + batch_size]
        rows.append(sim_encoder.forward(decoder.forward(encoder.forward(x))))
    return np.concatenate(rows, axis=0)


def train_nre(pretrained_ae: tuple[Network, Network], ds: Dataset,
              config: TrainConfig, weights: LossWeights,
              on_epoch: Callable[[dict, NREModel], None] | None = None) -> NREModel:
    """Fine-tune a pretrained autoencoder with the relational loss.

    The similarity encoder is a frozen copy of the pretrained encoder; the
    trainable encoder/decoder start from the pretrained weights. Neighbors
    and faraway samples are re-mined every `refresh_interval` epochs; with
    lam2 = lam3 = 0 mining is skipped entirely. `on_epoch` receives a
    metrics dict and a live view of the model after each epoch (so callers
    can checkpoint mid-run).
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    enc0, dec0 = pretrained_ae
    sim_encoder = enc0.copy(frozen=True)
    encoder = enc0.copy(frozen=False)
    decoder = dec0.copy(frozen=False)
    sim_fp = sim_encoder.fingerprint()
    model = NREModel(encoder=encoder, decoder=decoder, sim_encoder=sim_encoder,
                     weights=weights, config=config)

    flat = ds.flat()
    mining = weights.lam2 > 0 or weights.lam3 > 0
    table = clusters = None
    if mining:
        table = encode_all(sim_encoder, ds)
        clusters = kmeans(table, config.k, config.seed)

    params = encoder.parameters() + decoder.parameters()
    adam = Adam(params, lr=config.lr)
    nbr_idx = far_idx = None
    refresh_index = 0
    first_loss = None
    high_streak = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        if mining and epoch % config.refresh_interval == 0:
            if config.query_mode == "by-reconstruction":
                queries = _reconstruction_queries(encoder, decoder, sim_encoder, flat)
                exclude_self = False
            else:
                queries = table.latents
                exclude_self = True
            nbr_idx, far_idx = _mine_epoch(table, clusters, queries, config.t,
                                           config.seed, refresh_index, exclude_self)
            refresh_index += 1
        sums = np.zeros(4)
        count = 0
        for idx in batch_indices(len(ds), config.batch_size, seed=_epoch_seed(config.seed, epoch)):
            x = flat[idx]
            nbr = table.latents[nbr_idx[idx]] if mining else None
            far = table.latents[far_idx[idx]] if mining else None
            terms, enc_grads, dec_grads = nre_loss(
                x, encoder, decoder, sim_encoder,
                nbr, far, weights, config.normalize_terms,
            )
            adam.step(params, enc_grads + dec_grads)
            sums += np.array(terms) * len(idx)
            count += len(idx)
        mean_terms = sums / count
        if not np.isfinite(mean_terms[0]):
            raise DivergenceError(f"training diverged at epoch {epoch}")
        if first_loss is None:
            first_loss = mean_terms[0]
        high_streak = high_streak + 1 if mean_terms[0] > 10.0 * max(first_loss, 1e-12) else 0
        if high_streak >= 3:
            raise DivergenceError(
                f"loss stayed above 10x its initial value for 3 epochs (epoch {epoch})"
            )
        if on_epoch is not None:
            on_epoch({
                "epoch": epoch,
                "loss": float(mean_terms[0]),
                "term1": float(mean_terms[1]),
                "term2": float(mean_terms[2]),
                "term3": float(mean_terms[3]),
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
            }, model)
    if sim_encoder.fingerprint() != sim_fp:
        raise RuntimeError("similarity encoder parameters changed during training")
    return model
