"""Seeded synthetic datasets, IDX (MNIST container) loading, and splits."""

from dataclasses import dataclass, field
import math
import struct

import numpy as np

from . import rng

SPLITS = ("train", "valid", "test")
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# class-size thresholds for the long-tail report
MANY_SHOT_ABOVE = 100
FEW_SHOT_BELOW = 20


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: np.ndarray  # one of SPLITS per row
    shot_category: dict = field(default_factory=dict)  # class -> many/medium/few

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=object)
        n = len(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] != n or self.split.shape != (n,):
            raise ValueError("features, labels and split tags must have one row per example")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        bad = set(self.split.tolist()) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.features.shape[1]

    def indices(self, name):
        return np.flatnonzero(self.split == name)

    def subset(self, name):
        idx = self.indices(name)
        return self.features[idx], self.labels[idx]

    def class_counts(self, name=None):
        y = self.labels if name is None else self.subset(name)[1]
        return np.bincount(y, minlength=self.num_classes)


@dataclass(frozen=True)
class BlobSpec:
    means: tuple  # K rows of D coordinates
    stddevs: tuple  # one per class
    counts: tuple  # one per class
    seed: int = 0
    fractions: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        k = len(self.means)
        if k < 2:
            raise ValueError("need at least two classes")
        if len(self.stddevs) != k or len(self.counts) != k:
            raise ValueError("one stddev and one count per class")
        if any(c <= 0 for c in self.counts):
            raise ValueError("class counts must be positive")
        if any(s < 0 for s in self.stddevs):
            raise ValueError("stddev must be non-negative")
        if len({len(m) for m in self.means}) != 1:
            raise ValueError("all class means must share one dimension")


def circle_means(num_classes, dim=2, radius=3.0):
    """Class centres evenly spaced on a circle in the first two coordinates."""
    if dim < 2:
        raise ValueError("dim must be >= 2")
    means = []
    for k in range(num_classes):
        angle = 2.0 * math.pi * k / num_classes
        means.append((radius * math.cos(angle), radius * math.sin(angle)) + (0.0,) * (dim - 2))
    return tuple(means)


def gen_blobs(spec):
    """Gaussian clusters, shuffled and split by ``spec.fractions``."""
    gen = rng.stream(spec.seed, "data/blobs")
    xs, ys = [], []
    for k, (mean, std, count) in enumerate(zip(spec.means, spec.stddevs, spec.counts)):
        mean = np.asarray(mean, dtype=np.float64)
        xs.append(mean + std * rng.normal(gen, (int(count), len(mean))))
        ys.append(np.full(int(count), k))
    X = np.concatenate(xs)
    y = np.concatenate(ys)
    ds = LabeledDataset(X, y, len(spec.means), np.full(len(y), "train", dtype=object))
    return split(ds, spec.fractions, spec.seed)


def imbalanced_counts(n0, ratio, num_classes):
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must be in (0,1]")
    # the small slack keeps e.g. 100 * 0.1**2 from rounding up to 2
    return tuple(max(1, math.ceil(n0 * ratio ** k - 1e-9)) for k in range(num_classes))


def shot_category(count):
    if count > MANY_SHOT_ABOVE:
        return "many"
    if count < FEW_SHOT_BELOW:
        return "few"
    return "medium"


@dataclass(frozen=True)
class ImbalancedBlobSpec:
    means: tuple
    stddevs: tuple
    n0: int
    ratio: float
    seed: int = 0
    fractions: tuple = (0.8, 0.1, 0.1)

    def blob_spec(self):
        counts = imbalanced_counts(self.n0, self.ratio, len(self.means))
        return BlobSpec(self.means, self.stddevs, counts, self.seed, self.fractions)


def gen_imbalanced_blobs(spec):
    """Class k gets ceil(n0 * ratio**k) points; classes are tagged many/medium/few."""
    blob = spec.blob_spec()
    ds = gen_blobs(blob)
    ds.shot_category = {k: shot_category(c) for k, c in enumerate(blob.counts)}
    return ds


def split(dataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Shuffle rows with a seeded permutation and tag them train/valid/test in order.

    Returns a new dataset whose rows are in the shuffled order.
    """
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    if fr[0] <= 0 or fr[2] <= 0:
        raise ValueError("train and test fractions must be positive")
    n = len(dataset)
    n_train = int(round(fr[0] * n))
    n_valid = int(round(fr[1] * n))
    n_test = n - n_train - n_valid
    if n_train < 1 or n_test < 1:
        raise ValueError(f"fractions {fr} leave no train or no test rows for {n} examples")
    perm = rng.permutation(rng.stream(seed, "data/split"), n)
    tags = np.array(["train"] * n_train + ["valid"] * n_valid + ["test"] * n_test, dtype=object)
    return LabeledDataset(dataset.features[perm], dataset.labels[perm], dataset.num_classes,
                          tags, dict(dataset.shot_category))


def _read_header(buf, magic, ndims, path):
    need = 4 + 4 * ndims
    if len(buf) < need:
        raise IdxTruncatedError(f"{path}: truncated header")
    found = struct.unpack(">I", buf[:4])[0]
    if found != magic:
        raise IdxMagicError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndims}I", buf[4:need])
    size = int(np.prod(dims))
    if len(buf) - need < size:
        raise IdxTruncatedError(f"{path}: expected {size} data bytes, found {len(buf) - need}")
    return dims, np.frombuffer(buf, dtype=np.uint8, count=size, offset=need)


def read_idx_images(path):
    with open(path, "rb") as f:
        buf = f.read()
    dims, data = _read_header(buf, IDX_IMAGES_MAGIC, 3, path)
    return data.reshape(dims)


def read_idx_labels(path):
    with open(path, "rb") as f:
        buf = f.read()
    _, data = _read_header(buf, IDX_LABELS_MAGIC, 1, path)
    return data.copy()


def load_idx(images_path, labels_path, num_classes=None):
    """Load an IDX image/label pair; pixels are scaled to [0, 1].

    Every row is tagged ``train``; apply :func:`split` afterwards.
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"count mismatch: {images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    if num_classes is None:
        num_classes = max(2, int(labels.max()) + 1 if len(labels) else 2)
    return LabeledDataset(X, labels, num_classes, np.full(len(labels), "train", dtype=object))


def write_idx(images_path, labels_path, images, labels):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be (count, rows, cols)")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())
