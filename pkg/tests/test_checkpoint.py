import numpy as np
import pytest

from nre import checkpoint
from nre.errors import (
    BadMagicError,
    FingerprintMismatchError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from nre.training import LossWeights, NREModel, TrainConfig, build_autoencoder


@pytest.fixture
def model():
    enc, dec = build_autoencoder([12, 8, 4], seed=3)
    sim_enc, _ = build_autoencoder([12, 8, 4], seed=4)
    return NREModel(encoder=enc, decoder=dec, sim_encoder=sim_enc.copy(frozen=True),
                    weights=LossWeights(0.6, 0.2, 0.2),
                    config=TrainConfig(epochs=2, batch_size=16, t=2, k=3, seed=5))


def test_ae_round_trip_byte_identical(tmp_path):
    enc, dec = build_autoencoder([10, 6, 3], seed=1)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    checkpoint.save_ae(p1, enc, dec, config={"arch": [10, 6, 3]}, seed=1)
    enc2, dec2, meta = checkpoint.load_ae(p1)
    checkpoint.save_ae(p2, enc2, dec2, config=meta["config"], seed=meta["seed"])
    assert p1.read_bytes() == p2.read_bytes()


def test_nre_round_trip_byte_identical_and_bit_exact_encode(tmp_path, model):
    p1 = tmp_path / "m.ckpt"
    p2 = tmp_path / "m2.ckpt"
    checkpoint.save_nre(p1, model)
    loaded = checkpoint.load_nre(p1)
    checkpoint.save_nre(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()

    x = np.random.default_rng(0).uniform(size=(4, 12)).astype(np.float32)
    assert np.array_equal(model.encode(x), loaded.encode(x))
    assert loaded.weights == model.weights
    assert loaded.config == model.config
    assert loaded.sim_encoder.frozen


def test_bad_magic(tmp_path, model):
    path = tmp_path / "m.ckpt"
    checkpoint.save_nre(path, model)
    data = bytearray(path.read_bytes())
    data[:8] = b"NOTACKPT"
    path.write_bytes(bytes(data))
    with pytest.raises(BadMagicError, match="magic"):
        checkpoint.read_container(path)


def test_version_mismatch(tmp_path, model):
    path = tmp_path / "m.ckpt"
    checkpoint.save_nre(path, model)
    data = bytearray(path.read_bytes())
    data[8] = 99
    path.write_bytes(bytes(data))
    with pytest.raises(VersionMismatchError, match="version"):
        checkpoint.read_container(path)


def test_truncated_payload(tmp_path, model):
    path = tmp_path / "m.ckpt"
    checkpoint.save_nre(path, model)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 64])
    with pytest.raises(TruncatedPayloadError, match="truncated"):
        checkpoint.load_nre(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(checkpoint.MAGIC + b"\x01")
    with pytest.raises(TruncatedPayloadError):
        checkpoint.read_container(path)


def test_corrupted_payload_fingerprint(tmp_path, model):
    path = tmp_path / "m.ckpt"
    checkpoint.save_nre(path, model)
    data = bytearray(path.read_bytes())
    data[-4] ^= 0xFF  # flip a bit inside the last tensor (sim encoder bias)
    path.write_bytes(bytes(data))
    with pytest.raises(FingerprintMismatchError, match="fingerprint"):
        checkpoint.load_nre(path)


def test_wrong_kind_rejected(tmp_path, model):
    path = tmp_path / "m.ckpt"
    checkpoint.save_nre(path, model)
    with pytest.raises(BadMagicError, match="kind"):
        checkpoint.load_ae(path)


def test_atomic_write_leaves_no_temp(tmp_path, model):
    path = tmp_path / "m.ckpt"
    checkpoint.save_nre(path, model)
    checkpoint.save_nre(path, model)  # overwrite in place
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.ckpt"]


def test_metadata_carries_config_and_weights(tmp_path, model):
    path = tmp_path / "m.ckpt"
    checkpoint.save_nre(path, model)
    meta, tensors = checkpoint.read_container(path)
    assert meta["loss_weights"] == [0.6, 0.2, 0.2]
    assert meta["config"]["k"] == 3
    assert meta["seed"] == 5
    names = [t["name"] for t in meta["tensors"]]
    assert "encoder.0.weight" in names and "sim_encoder.0.weight" in names
    total = sum(t["nbytes"] for t in meta["tensors"])
    assert all(t["offset"] < total for t in meta["tensors"])
