"""Run configuration: flat `key = value` files with CLI overrides.

Precedence is CLI flag > config file > NRE_SEED (seed only) > built-in
default. Unknown keys are rejected, and the loss-weight simplex is
validated at parse time. Artifacts land in a run directory named by the
config hash plus the seed, so identical configs collide into the same
(reproducible) outputs.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .data import Dataset, SplitSpec, find_mnist, handwritten_digits, load_idx, split, synth_blobs
from .errors import ConfigError
from .training import LossWeights, TrainConfig

DATA_SOURCES = ("digits", "mnist", "blobs", "pgm")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _parse_float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


# key -> (parser, default). The single source of truth for known keys.
SCHEMA: dict[str, tuple] = {
    "data": (str, "digits"),
    "mnist_dir": (str, ""),
    "pgm_dir": (str, ""),
    "n_train": (int, 10000),
    "n_test": (int, 2000),
    "n_substitute": (int, 150),
    "digits_size": (int, 28),
    "blob_classes": (int, 3),
    "blob_per_class": (int, 200),
    "blob_dim": (int, 16),
    "blob_separation": (float, 0.35),
    "exclude_labels": (_parse_int_tuple, ()),
    "patch_h": (int, 0),
    "patch_w": (int, 0),
    "patch_stride": (int, 1),
    "arch": (_parse_int_tuple, (784, 128, 32)),
    "lambda1": (float, 0.5),
    "lambda2": (float, 0.25),
    "lambda3": (float, 0.25),
    "normalize_terms": (_parse_bool, False),
    "pretrain_epochs": (int, 40),
    "epochs": (int, 40),
    "batch_size": (int, 100),
    "lr": (float, 0.0001),
    "t": (int, 1),
    "k": (int, 10),
    "refresh_interval": (int, 1),
    "query_mode": (str, "by-reconstruction"),
    "seed": (int, 0),
    "epsilons": (_parse_float_tuple, (0.01, 0.1, 0.2, 0.3)),
    "noise_sigma": (float, 0.2),
    "probe_epochs": (int, 300),
    "probe_lr": (float, 0.05),
    "probe_l2": (float, 1e-4),
    "classifier_hidden": (_parse_int_tuple, (256,)),
    "classifier_epochs": (int, 30),
    "classifier_lr": (float, 0.001),
    "substitute_hidden": (_parse_int_tuple, (64,)),
    "substitute_epochs": (int, 60),
    "anomaly_holdout": (int, 9),
    "out_dir": (str, "runs"),
    "pretrain_ckpt": (str, ""),
    "nre_ckpt": (str, ""),
}


@dataclass(frozen=True)
class RunConfig:
    data: str
    mnist_dir: str
    pgm_dir: str
    n_train: int
    n_test: int
    n_substitute: int
    digits_size: int
    blob_classes: int
    blob_per_class: int
    blob_dim: int
    blob_separation: float
    exclude_labels: tuple[int, ...]
    patch_h: int
    patch_w: int
    patch_stride: int
    arch: tuple[int, ...]
    lambda1: float
    lambda2: float
    lambda3: float
    normalize_terms: bool
    pretrain_epochs: int
    epochs: int
    batch_size: int
    lr: float
    t: int
    k: int
    refresh_interval: int
    query_mode: str
    seed: int
    epsilons: tuple[float, ...]
    noise_sigma: float
    probe_epochs: int
    probe_lr: float
    probe_l2: float
    classifier_hidden: tuple[int, ...]
    classifier_epochs: int
    classifier_lr: float
    substitute_hidden: tuple[int, ...]
    substitute_epochs: int
    anomaly_holdout: int
    out_dir: str
    pretrain_ckpt: str
    nre_ckpt: str

    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(self.lambda1, self.lambda2, self.lambda3)
        except ValueError as e:
            raise ConfigError(f"lambda1/lambda2/lambda3: {e}") from e

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                t=self.t, k=self.k, refresh_interval=self.refresh_interval,
                seed=self.seed, query_mode=self.query_mode,
                normalize_terms=self.normalize_terms,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def canonical(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            lines.append(f"{f.name} = {value!r}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.out_dir) / f"{self.config_hash()}-s{self.seed}"


def parse_kv_lines(lines, origin: str) -> dict[str, str]:
    """`key = value` pairs, '#' comments, blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        out[key] = value.strip()
    return out


def load_config(config_path=None, overrides=(), env=None) -> RunConfig:
    """Assemble a validated RunConfig from file + CLI overrides + env."""
    env = os.environ if env is None else env
    raw: dict[str, str] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw.update(parse_kv_lines(path.read_text(encoding="utf-8").splitlines(), str(path)))
    cli_pairs = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cli_pairs.append(item)
    raw.update(parse_kv_lines(cli_pairs, "--set"))
    if "seed" not in raw and env.get("NRE_SEED"):
        raw["seed"] = env["NRE_SEED"]

    values = {}
    for key, (parser, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = parser(raw[key])
            except (ValueError, TypeError) as e:
                raise ConfigError(f"bad value for {key!r}: {raw[key]!r} ({e})") from e
        else:
            values[key] = default
    cfg = RunConfig(**values)
    if cfg.data not in DATA_SOURCES:
        raise ConfigError(f"data must be one of {DATA_SOURCES}, got {cfg.data!r}")
    cfg.loss_weights()
    cfg.train_config()
    return cfg


def load_source(cfg: RunConfig) -> Dataset:
    """The full dataset named by the config, before splitting."""
    if cfg.data == "mnist":
        if not cfg.mnist_dir:
            raise ConfigError("mnist_dir: data = mnist needs the directory with the IDX files")
        paths = find_mnist(cfg.mnist_dir)
        if paths is None:
            raise ConfigError(f"mnist_dir: no complete IDX file set under {cfg.mnist_dir!r}")
        return load_idx(paths["train_images"], paths["train_labels"], name="mnist-train")
    if cfg.data == "digits":
        total = cfg.n_train + cfg.n_test + cfg.n_substitute
        return handwritten_digits(total, seed=cfg.seed, size=cfg.digits_size)
    if cfg.data == "blobs":
        return synth_blobs(cfg.blob_classes, cfg.blob_per_class, cfg.blob_dim,
                           cfg.blob_separation, seed=cfg.seed)
    if cfg.data == "pgm":
        if not cfg.pgm_dir:
            raise ConfigError("pgm_dir: data = pgm needs an image folder")
        from .data import extract_patches, load_pgm_folder

        ds = load_pgm_folder(cfg.pgm_dir)
        if cfg.patch_h and cfg.patch_w:
            ds = extract_patches(ds, cfg.patch_h, cfg.patch_w, cfg.patch_stride)
        return ds
    raise ConfigError(f"unhandled data source {cfg.data!r}")


def filter_excluded(ds: Dataset, exclude_labels) -> Dataset:
    """Drop the listed labels (for normal-only anomaly training)."""
    if not exclude_labels or ds.labels is None:
        return ds
    import numpy as np

    keep = ~np.isin(ds.labels, np.asarray(exclude_labels))
    return ds.subset(np.flatnonzero(keep), name=f"{ds.name}-filtered")


def three_way_split(cfg: RunConfig, ds: Dataset):
    """(train, test, substitute) per the configured counts and seed; the
    train and substitute splits drop `exclude_labels`, the test split keeps
    everything (so holdout-label anomalies stay scoreable)."""
    train, test, sub = split(ds, SplitSpec(cfg.n_train, cfg.n_test, cfg.n_substitute, cfg.seed))
    train = filter_excluded(train, cfg.exclude_labels)
    if sub is not None:
        sub = filter_excluded(sub, cfg.exclude_labels)
    return train, test, sub
