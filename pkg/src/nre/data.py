"""Datasets: ingestion, synthesis, splits, batching, patches.

A Dataset is immutable once built (the arrays are marked read-only) so it is
safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import idx
from .errors import BadMagicError, DataError, TruncatedPayloadError


@dataclass
class Dataset:
    """(Z, H, W) float32 images in [0, 1] plus optional integer labels.

    `source_indices` is set on patch datasets and records which source image
    each patch was cut from.
    """

    images: np.ndarray
    labels: np.ndarray | None = None
    name: str = "dataset"
    source_indices: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 3:
            raise DataError(f"images must be (Z, H, W), got shape {self.images.shape}")
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("pixel values outside [0, 1]")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.images.shape[0],):
                raise DataError(
                    f"labels length {self.labels.shape[0]} != dataset size {self.images.shape[0]}"
                )
            self.labels.setflags(write=False)
        if self.source_indices is not None:
            self.source_indices = np.ascontiguousarray(self.source_indices, dtype=np.int64)
            self.source_indices.setflags(write=False)
        self.images.setflags(write=False)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def flat(self) -> np.ndarray:
        """(Z, H*W) read-only view."""
        return self.images.reshape(len(self), -1)

    def subset(self, indices, name: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            images=self.images[indices].copy(),
            labels=None if self.labels is None else self.labels[indices].copy(),
            name=name or self.name,
            source_indices=None if self.source_indices is None else self.source_indices[indices].copy(),
        )


@dataclass(frozen=True)
class SplitSpec:
    train: int
    test: int
    substitute: int = 0
    seed: int = 0

    def __post_init__(self):
        if min(self.train, self.test, self.substitute) < 0:
            raise DataError("split counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.train + self.test + self.substitute


def load_idx(image_path, label_path=None, name: str | None = None) -> Dataset:
    """Dataset from IDX files; u8 pixels are rescaled to [0, 1]."""
    images_u8 = idx.read_idx_images(image_path)
    labels = None
    if label_path is not None:
        labels_u8 = idx.read_idx_labels(label_path)
        idx.check_counts(images_u8, labels_u8)
        labels = labels_u8.astype(np.int64)
    return Dataset(
        images=images_u8.astype(np.float32) / 255.0,
        labels=labels,
        name=name or Path(image_path).stem,
    )


def to_u8(ds: Dataset) -> np.ndarray:
    """Recover the uint8 pixel tensor (inverse of the /255 rescale)."""
    return np.rint(ds.images * 255.0).astype(np.uint8)


def save_idx(ds: Dataset, image_path, label_path=None) -> None:
    idx.write_idx_images(image_path, to_u8(ds))
    if label_path is not None:
        if ds.labels is None:
            raise DataError("dataset has no labels to save")
        idx.write_idx_labels(label_path, ds.labels.astype(np.uint8))


def synth_blobs(n_classes: int, per_class: int, dim: int, separation: float,
                seed: int, noise: float = 0.03) -> Dataset:
    """Gaussian clusters around distinct centers, clipped to [0, 1].

    Centers are rejection-sampled in [0.2, 0.8]^dim until pairwise distances
    reach `separation`; labels are the cluster ids. Images get shape
    (Z, 1, dim).
    """
    if separation <= 0:
        raise DataError("separation must be > 0")
    rng = np.random.default_rng(seed)
    centers = np.empty((n_classes, dim))
    placed = 0
    for _ in range(5000):
        cand = rng.uniform(0.2, 0.8, size=dim)
        if placed == 0 or np.linalg.norm(centers[:placed] - cand, axis=1).min() >= separation:
            centers[placed] = cand
            placed += 1
            if placed == n_classes:
                break
    if placed < n_classes:
        raise DataError(
            f"could not place {n_classes} centers with separation {separation} in [0.2,0.8]^{dim}"
        )
    samples = centers[:, None, :] + rng.normal(0.0, noise, size=(n_classes, per_class, dim))
    images = np.clip(samples.reshape(-1, 1, dim), 0.0, 1.0)
    labels = np.repeat(np.arange(n_classes), per_class)
    return Dataset(images=images, labels=labels, name=f"blobs{n_classes}x{per_class}")


def _apportion(available: np.ndarray, take: int) -> np.ndarray:
    """Largest-remainder apportionment of `take` over class pools, capped at
    what each pool still holds."""
    total = int(available.sum())
    if take > total:
        raise DataError(f"split requests {take} samples but only {total} remain")
    quota = available * (take / total) if total else available * 0.0
    counts = np.floor(quota).astype(np.int64)
    counts = np.minimum(counts, available)
    deficit = take - int(counts.sum())
    order = np.argsort(-(quota - counts), kind="stable")
    for c in order:
        if deficit == 0:
            break
        room = int(available[c] - counts[c])
        if room > 0:
            add = min(room, deficit)
            counts[c] += add
            deficit -= add
    return counts


def split(ds: Dataset, spec: SplitSpec):
    """Disjoint seeded (train, test, substitute) subsets.

    Stratified by label when labels exist, so each split approximately
    preserves the class distribution. The substitute element is None when
    spec.substitute == 0.
    """
    z = len(ds)
    if spec.total > z:
        raise DataError(f"split total {spec.total} exceeds dataset size {z}")
    rng = np.random.default_rng(spec.seed)
    takes = (spec.train, spec.test, spec.substitute)
    parts: list[np.ndarray] = []
    if ds.labels is None:
        perm = rng.permutation(z)
        start = 0
        for take in takes:
            parts.append(np.sort(perm[start:start + take]))
            start += take
    else:
        classes = np.unique(ds.labels)
        pools = []
        for c in classes:
            pool = np.flatnonzero(ds.labels == c)
            pools.append(pool[rng.permutation(pool.size)])
        cursors = np.zeros(len(classes), dtype=np.int64)
        sizes = np.array([p.size for p in pools], dtype=np.int64)
        for take in takes:
            counts = _apportion(sizes - cursors, take)
            chosen = [pools[i][cursors[i]:cursors[i] + counts[i]] for i in range(len(classes))]
            cursors += counts
            parts.append(np.sort(np.concatenate(chosen)) if chosen else np.array([], dtype=np.int64))
    train = ds.subset(parts[0], name=f"{ds.name}-train")
    test = ds.subset(parts[1], name=f"{ds.name}-test")
    substitute = ds.subset(parts[2], name=f"{ds.name}-sub") if spec.substitute else None
    return train, test, substitute


def batch_indices(n: int, batch_size: int, seed: int):
    """One epoch of seeded-shuffle batch index arrays; the final partial
    batch is included."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    perm = np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def batches(ds: Dataset, batch_size: int, seed: int):
    """One epoch of flattened image batches in seeded-shuffle order."""
    flat = ds.flat()
    for indices in batch_indices(len(ds), batch_size, seed):
        yield flat[indices]


def extract_patches(ds: Dataset, patch_h: int, patch_w: int, stride: int) -> Dataset:
    """Sliding-window patches as a new Dataset.

    Patches inherit their source image's label, and source_indices records
    the originating image per patch.
    """
    h, w = ds.image_shape
    if patch_h > h or patch_w > w:
        raise DataError(f"patch {patch_h}x{patch_w} larger than image {h}x{w}")
    if stride < 1:
        raise DataError("stride must be >= 1")
    ys = range(0, h - patch_h + 1, stride)
    xs = range(0, w - patch_w + 1, stride)
    out = []
    src = []
    for i in range(len(ds)):
        img = ds.images[i]
        for y in ys:
            for x in xs:
                out.append(img[y:y + patch_h, x:x + patch_w])
                src.append(i)
    images = np.stack(out) if out else np.zeros((0, patch_h, patch_w), dtype=np.float32)
    src_arr = np.asarray(src, dtype=np.int64)
    labels = None if ds.labels is None else ds.labels[src_arr]
    return Dataset(images=images, labels=labels, name=f"{ds.name}-patches",
                   source_indices=src_arr)


def _read_pgm(path) -> np.ndarray:
    """Binary (P5) 8-bit grayscale PGM."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise BadMagicError(f"{path}: not a binary PGM (P5) file")
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments running to end of line.
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise TruncatedPayloadError(f"{path}: header ended early")
        ch = data[pos:pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            fields.append(int(data[pos:end]))
            pos = end
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval > 255:
        raise DataError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    payload = data[pos:pos + width * height]
    if len(payload) != width * height:
        raise TruncatedPayloadError(f"{path}: expected {width * height} pixel bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width)


def write_pgm(path, image_u8: np.ndarray) -> None:
    if image_u8.dtype != np.uint8 or image_u8.ndim != 2:
        raise ValueError("expected a 2-D uint8 image")
    h, w = image_u8.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(image_u8.tobytes())


def load_pgm_folder(folder, name: str | None = None) -> Dataset:
    """Dataset from a directory of binary grayscale PGM files, one image per
    file, all the same size, in sorted filename order."""
    paths = sorted(Path(folder).glob("*.pgm"))
    if not paths:
        raise DataError(f"no .pgm files in {folder}")
    images = [_read_pgm(p) for p in paths]
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataError(f"inconsistent image sizes in {folder}: {sorted(shapes)}")
    stack = np.stack(images).astype(np.float32) / 255.0
    return Dataset(images=stack, name=name or Path(folder).name)


_DIGIT_TEMPLATES: np.ndarray | None = None
_DIGIT_LABELS: np.ndarray | None = None


def _digit_templates(size: int):
    """28x28 templates from the bundled 8x8 handwritten-digit corpus."""
    global _DIGIT_TEMPLATES, _DIGIT_LABELS
    if _DIGIT_TEMPLATES is None or _DIGIT_TEMPLATES.shape[1] != size:
        from scipy import ndimage
        from sklearn.datasets import load_digits

        raw = load_digits()
        base = raw.images / 16.0
        zoomed = ndimage.zoom(base, (1, size / 8.0, size / 8.0), order=3)
        _DIGIT_TEMPLATES = np.clip(zoomed, 0.0, 1.0).astype(np.float32)
        _DIGIT_LABELS = raw.target.astype(np.int64)
    return _DIGIT_TEMPLATES, _DIGIT_LABELS


def handwritten_digits(n: int, seed: int, size: int = 28) -> Dataset:
    """Desk-scale handwritten-digit benchmark.

    Upsamples the bundled 8x8 digit corpus to `size` x `size` and draws n
    samples with seeded affine jitter (rotation, isotropic scale, shift).
    Use this when a larger digit corpus is not on disk; the class structure
    (10 digits, handwriting confusability) is preserved.
    """
    from scipy import ndimage

    templates, template_labels = _digit_templates(size)
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, templates.shape[0], size=n)
    angles = rng.uniform(-12.0, 12.0, size=n) * np.pi / 180.0
    scales = rng.uniform(0.9, 1.1, size=n)
    shifts = rng.uniform(-2.0, 2.0, size=(n, 2))
    center = (size - 1) / 2.0
    images = np.empty((n, size, size), dtype=np.float32)
    for i in range(n):
        c, s = np.cos(angles[i]), np.sin(angles[i])
        mat = np.array([[c, -s], [s, c]]) / scales[i]
        offset = center - mat @ (center + shifts[i])
        images[i] = ndimage.affine_transform(
            templates[picks[i]], mat, offset=offset, order=1, mode="constant", cval=0.0,
        )
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images=images, labels=template_labels[picks].copy(),
                   name=f"digits{size}-{n}")


MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def find_mnist(root) -> dict[str, Path] | None:
    """Locate the four canonical MNIST IDX files (optionally .gz) under
    `root`; None when any is missing."""
    root = Path(root)
    found = {}
    for key, stem in MNIST_FILES.items():
        plain, gz = root / stem, root / (stem + ".gz")
        if plain.exists():
            found[key] = plain
        elif gz.exists():
            found[key] = gz
        else:
            return None
    return found
