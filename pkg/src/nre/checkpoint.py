"""Checkpoint container, bit-exact.

Layout: 8-byte magic "NRECKPT1", u32 little-endian version, u64
little-endian metadata length, UTF-8 JSON metadata (tensor names, shapes,
byte offsets, network structure, config, loss weights, seed, encoder
fingerprint), then the concatenated little-endian float32 tensor payloads.

Writes are atomic (temp file + rename), so an interrupted run never leaves
a half-written checkpoint at the target path. JSON is serialized with
sorted keys and no whitespace, so save -> load -> save round-trips byte
identically.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    FingerprintMismatchError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .nn import Affine, Layer, Network, activation
from .training import LossWeights, NREModel, TrainConfig

MAGIC = b"NRECKPT1"
VERSION = 1


def _network_spec(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        if isinstance(layer, Affine):
            layers.append({"kind": "affine", "in": layer.in_dim, "out": layer.out_dim})
        else:
            layers.append({"kind": layer.kind})
    return {"frozen": net.frozen, "layers": layers}


def _network_tensors(name: str, net: Network) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Affine):
            out.append((f"{name}.{i}.weight", layer.weight))
            out.append((f"{name}.{i}.bias", layer.bias))
    return out


def _rebuild_network(spec: dict, name: str, tensors: dict[str, np.ndarray]) -> Network:
    layers: list[Layer] = []
    for i, ls in enumerate(spec["layers"]):
        if ls["kind"] == "affine":
            w = tensors[f"{name}.{i}.weight"]
            b = tensors[f"{name}.{i}.bias"]
            if w.shape != (ls["out"], ls["in"]):
                raise TruncatedPayloadError(
                    f"tensor {name}.{i}.weight has shape {w.shape}, metadata says {(ls['out'], ls['in'])}"
                )
            layers.append(Affine(w, b))
        else:
            layers.append(activation(ls["kind"]))
    return Network(layers, frozen=spec["frozen"])


def write_container(path, meta: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    """Serialize metadata + named float32 tensors atomically."""
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    meta = dict(meta)
    meta["tensors"] = entries
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(meta_bytes)))
        f.write(meta_bytes)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a container back into (metadata, name -> float32 array)."""
    with open(path, "rb") as f:
        head = f.read(len(MAGIC))
        if head != MAGIC:
            raise BadMagicError(f"bad checkpoint magic: {head!r}")
        raw = f.read(4)
        if len(raw) != 4:
            raise TruncatedPayloadError("truncated payload: missing version field")
        (version,) = struct.unpack("<I", raw)
        if version != VERSION:
            raise VersionMismatchError(f"unsupported checkpoint version {version}, expected {VERSION}")
        raw = f.read(8)
        if len(raw) != 8:
            raise TruncatedPayloadError("truncated payload: missing metadata length")
        (meta_len,) = struct.unpack("<Q", raw)
        meta_bytes = f.read(meta_len)
        if len(meta_bytes) != meta_len:
            raise TruncatedPayloadError(
                f"truncated payload: metadata claims {meta_len} bytes, got {len(meta_bytes)}"
            )
        meta = json.loads(meta_bytes.decode("utf-8"))
        payload = f.read()
    tensors: dict[str, np.ndarray] = {}
    for entry in meta["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise TruncatedPayloadError(
                f"truncated payload: tensor {entry['name']} needs bytes up to "
                f"{start + nbytes}, file holds {len(payload)}"
            )
        arr = np.frombuffer(payload[start:start + nbytes], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return meta, tensors


def save_ae(path, encoder: Network, decoder: Network, config: dict | None = None,
            seed: int | None = None) -> None:
    """Checkpoint a plain pretrained autoencoder."""
    meta = {
        "kind": "ae",
        "networks": {"encoder": _network_spec(encoder), "decoder": _network_spec(decoder)},
        "config": config or {},
        "loss_weights": None,
        "seed": seed,
        "encoder_fingerprint": encoder.fingerprint(),
    }
    write_container(path, meta, _network_tensors("encoder", encoder) + _network_tensors("decoder", decoder))


def load_ae(path) -> tuple[Network, Network, dict]:
    meta, tensors = read_container(path)
    if meta.get("kind") != "ae":
        raise BadMagicError(f"expected an autoencoder checkpoint, got kind={meta.get('kind')!r}")
    encoder = _rebuild_network(meta["networks"]["encoder"], "encoder", tensors)
    decoder = _rebuild_network(meta["networks"]["decoder"], "decoder", tensors)
    if encoder.fingerprint() != meta["encoder_fingerprint"]:
        raise FingerprintMismatchError("encoder fingerprint does not match checkpoint payload")
    return encoder, decoder, meta


def save_nre(path, model: NREModel) -> None:
    """Checkpoint a trained relational model (all three networks)."""
    cfg = {
        "epochs": model.config.epochs,
        "batch_size": model.config.batch_size,
        "lr": model.config.lr,
        "t": model.config.t,
        "k": model.config.k,
        "refresh_interval": model.config.refresh_interval,
        "seed": model.config.seed,
        "query_mode": model.config.query_mode,
        "normalize_terms": model.config.normalize_terms,
    }
    meta = {
        "kind": "nre",
        "networks": {
            "encoder": _network_spec(model.encoder),
            "decoder": _network_spec(model.decoder),
            "sim_encoder": _network_spec(model.sim_encoder),
        },
        "config": cfg,
        "loss_weights": list(model.weights.as_tuple()),
        "seed": model.config.seed,
        "encoder_fingerprint": model.sim_encoder.fingerprint(),
    }
    tensors = (_network_tensors("encoder", model.encoder)
               + _network_tensors("decoder", model.decoder)
               + _network_tensors("sim_encoder", model.sim_encoder))
    write_container(path, meta, tensors)


def load_nre(path) -> NREModel:
    meta, tensors = read_container(path)
    if meta.get("kind") != "nre":
        raise BadMagicError(f"expected a relational-model checkpoint, got kind={meta.get('kind')!r}")
    encoder = _rebuild_network(meta["networks"]["encoder"], "encoder", tensors)
    decoder = _rebuild_network(meta["networks"]["decoder"], "decoder", tensors)
    sim_encoder = _rebuild_network(meta["networks"]["sim_encoder"], "sim_encoder", tensors)
    if sim_encoder.fingerprint() != meta["encoder_fingerprint"]:
        raise FingerprintMismatchError("similarity-encoder fingerprint does not match checkpoint payload")
    weights = LossWeights(*meta["loss_weights"])
    config = TrainConfig(**meta["config"])
    return NREModel(encoder=encoder, decoder=decoder, sim_encoder=sim_encoder,
                    weights=weights, config=config)


def load_any(path):
    """Load either checkpoint kind; returns ("ae", (enc, dec, meta)) or
    ("nre", model)."""
    meta, _ = read_container(path)
    if meta.get("kind") == "ae":
        return "ae", load_ae(path)
    return "nre", load_nre(path)
