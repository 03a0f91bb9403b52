"""Synthetic datasets, retain/forget splits and dataset file I/O.

Binary layout (little-endian)::

    magic  b"OFMD"
    u32    version (1)
    u32    class_count
    u32    feature_dim
    u32    count
    f32    inputs, count x feature_dim, row-major
    i32    labels, count

CSV layout: header ``label,x0,x1,...`` then one sample per row, label first.
"""

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .diffcore import LabeledBatch
from .errors import ContractViolation, InvalidArgument

MAGIC = b"OFMD"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")

CLASS_WISE = "class-wise"
RANDOM = "random"


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ContractViolation(f"inconsistent dataset shapes {x.shape} / {y.shape}")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise ContractViolation("labels must lie in [0, class_count)")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    @property
    def feature_dim(self):
        return self.inputs.shape[1]

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count, self.provenance)

    def as_batch(self):
        return LabeledBatch(self.inputs, self.labels)

    def take(self, indices):
        """Batch of the given rows; samplers read data only through here."""
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledBatch(self.inputs[idx], self.labels[idx])

    def equals(self, other):
        return (
            self.class_count == other.class_count
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.labels, other.labels)
        )


def class_means(class_count, feature_dim, separation):
    """Cluster centres with every pair at least ``separation`` apart.

    Uses a scaled simplex when there are enough dimensions, otherwise a
    regular polygon in the first two coordinates (a line in 1-D).
    """
    means = np.zeros((class_count, feature_dim))
    if class_count == 1:
        return means
    if feature_dim >= class_count:
        means[:, :class_count] = np.eye(class_count) * (separation / np.sqrt(2.0))
    elif feature_dim == 1:
        means[:, 0] = separation * (np.arange(class_count) - (class_count - 1) / 2.0)
    else:
        radius = separation / (2.0 * np.sin(np.pi / class_count))
        angles = 2.0 * np.pi * np.arange(class_count) / class_count
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
    return means


def gen_blobs(seed, class_count, samples_per_class, feature_dim, separation, noise=1.0):
    """Isotropic Gaussian clusters around :func:`class_means`.

    Samples are rounded to float32 so the binary file format round-trips
    exactly; rows are grouped by class in ascending label order.
    """
    if class_count < 1 or samples_per_class < 1 or feature_dim < 1:
        raise InvalidArgument("class_count, samples_per_class and feature_dim must be >= 1")
    if separation <= 0 or noise <= 0:
        raise InvalidArgument("separation and noise must be positive")
    rng = np.random.default_rng(seed)
    means = class_means(class_count, feature_dim, separation)
    labels = np.repeat(np.arange(class_count), samples_per_class)
    x = means[labels] + noise * rng.standard_normal((labels.size, feature_dim))
    x = x.astype(np.float32).astype(np.float64)
    provenance = {
        "generator": "blobs",
        "seed": int(seed),
        "class_count": int(class_count),
        "samples_per_class": int(samples_per_class),
        "feature_dim": int(feature_dim),
        "separation": float(separation),
        "noise": float(noise),
    }
    return Dataset(x, labels, class_count, provenance)


def regenerate(provenance):
    """Rebuild a dataset from its provenance record."""
    if provenance.get("generator") != "blobs":
        raise InvalidArgument(f"cannot regenerate from provenance {provenance!r}")
    args = {k: v for k, v in provenance.items() if k != "generator"}
    return gen_blobs(**args)


@dataclass(frozen=True)
class UnlearnSplit:
    source: Dataset
    retain_idx: np.ndarray
    forget_idx: np.ndarray
    mode: str
    parameters: dict

    @property
    def retain(self):
        return self.source.subset(self.retain_idx)

    @property
    def forget(self):
        return self.source.subset(self.forget_idx)


def split_classwise(data, target_classes):
    targets = sorted({int(c) for c in target_classes})
    if not targets:
        raise InvalidArgument("target class set is empty")
    if any(c < 0 or c >= data.class_count for c in targets):
        raise InvalidArgument(f"target classes {targets} outside [0, {data.class_count})")
    if len(targets) >= data.class_count:
        raise InvalidArgument("cannot forget every class")
    mask = np.isin(data.labels, targets)
    return UnlearnSplit(
        data,
        np.flatnonzero(~mask),
        np.flatnonzero(mask),
        CLASS_WISE,
        {"classes": targets},
    )


def split_random(data, fraction, seed):
    if not 0.0 < fraction < 1.0:
        raise InvalidArgument("fraction must lie strictly between 0 and 1")
    n = len(data)
    k = int(round(fraction * n))
    if k == 0 or k == n:
        raise InvalidArgument(f"fraction {fraction} gives a degenerate forget set of {k}/{n}")
    rng = np.random.default_rng(seed)
    forget = np.sort(rng.choice(n, size=k, replace=False))
    mask = np.zeros(n, dtype=bool)
    mask[forget] = True
    return UnlearnSplit(
        data,
        np.flatnonzero(~mask),
        forget,
        RANDOM,
        {"fraction": float(fraction), "seed": int(seed)},
    )


def feature_stats(data):
    """Per-feature mean and scale; constant features get scale 1."""
    mean = data.inputs.mean(axis=0)
    scale = data.inputs.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return mean, scale


def standardize(data, mean, scale):
    """Affine feature rescaling ``(x - mean) / scale``; labels untouched."""
    prov = dict(data.provenance, standardized=True)
    return Dataset((data.inputs - mean) / scale, data.labels, data.class_count, prov)


# -- file formats ----------------------------------------------------------

def write_binary(path, data):
    n, d = data.inputs.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, data.class_count, d, n))
        fh.write(data.inputs.astype("<f4").tobytes())
        fh.write(data.labels.astype("<i4").tobytes())


def read_binary(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ContractViolation(f"{path}: truncated header")
    magic, version, class_count, d, n = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ContractViolation(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ContractViolation(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * n * d + 4 * n
    if len(blob) != expected:
        raise ContractViolation(f"{path}: size {len(blob)} != expected {expected}")
    off = _HEADER.size
    x = np.frombuffer(blob, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    y = np.frombuffer(blob, dtype="<i4", count=n, offset=off + 4 * n * d)
    return Dataset(x.astype(np.float64), y.astype(np.int64), class_count, {"file": str(path)})


def write_csv(path, data):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"x{j}" for j in range(data.feature_dim)])
        for label, row in zip(data.labels.tolist(), data.inputs.tolist()):
            w.writerow([label] + [repr(v) for v in row])


def read_csv(path, class_count=None):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "label":
        raise ContractViolation(f"{path}: expected a header starting with 'label'")
    body = [r for r in rows[1:] if r]
    labels = np.array([int(r[0]) for r in body], dtype=np.int64)
    x = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64)
    if class_count is None:
        class_count = int(labels.max()) + 1
    return Dataset(x.reshape(len(body), -1), labels, class_count, {"file": str(path)})


def load_dataset(path, class_count=None):
    path = str(path)
    if path.endswith(".csv"):
        return read_csv(path, class_count)
    return read_binary(path)
