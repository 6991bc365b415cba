"""Labelled datasets: synthetic generators and the CIFAR-10 binary layout."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ProvenanceError
from .nn_core import philox

SPLITS = ("train", "validation", "test")
CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072


@dataclass
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    sample_ids: list[str]
    split: str = "train"
    n_classes: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_ids = list(self.sample_ids)
        if self.samples.ndim != 2:
            raise ValueError("samples must be an N x d matrix")
        n = len(self.samples)
        if self.labels.shape != (n,) or len(self.sample_ids) != n:
            raise ValueError("samples, labels and sample_ids must have equal length")
        if n and (self.samples.min() < 0.0 or self.samples.max() > 1.0):
            raise ValueError("features must lie in [0, 1]")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if n else 0
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels must lie in [0, n_classes)")
        if len(set(self.sample_ids)) != n:
            raise ValueError("sample ids must be unique")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(
            self.samples[index],
            self.labels[index],
            [self.sample_ids[i] for i in np.arange(len(self))[index]],
            self.split,
            self.n_classes,
        )

    def save(self, path) -> None:
        np.savez(
            Path(path),
            samples=self.samples,
            labels=self.labels,
            sample_ids=np.array(self.sample_ids),
            split=np.array(self.split),
            n_classes=np.array(self.n_classes),
        )

    @classmethod
    def load(cls, path, expected_split: str | None = None) -> "LabeledDataset":
        with np.load(Path(path)) as z:
            ds = cls(z["samples"], z["labels"], [str(s) for s in z["sample_ids"]],
                     str(z["split"]), int(z["n_classes"]))
        if expected_split is not None and ds.split != expected_split:
            raise ProvenanceError(f"{path} holds split {ds.split!r}, expected {expected_split!r}")
        return ds


def make_synthetic(
    n_classes: int = 10,
    dim: int = 32,
    n_per_class: int = 600,
    spread: float = 1.0,
    seed: int = 0,
    test_fraction: float = 1 / 6,
    validation_fraction: float = 0.2,
    mean_scale: float = 1.0,
) -> dict[str, LabeledDataset]:
    """Gaussian blobs squashed into [0, 1]^d and split train/validation/test.

    Class means are drawn ``N(0, mean_scale^2 I)``; samples add isotropic
    noise of standard deviation ``spread``.  A single affine map, fitted on
    the whole draw, sends the data into the unit box.  Per class,
    ``test_fraction`` of samples is held out as test and the remainder split
    ``1 - validation_fraction`` / ``validation_fraction`` into train and
    validation.
    """
    _check_split_args(n_classes, dim, n_per_class, test_fraction, validation_fraction)
    if spread < 0:
        raise ConfigError("spread must be nonnegative")
    rng = philox(seed)
    means = rng.normal(0.0, mean_scale, size=(n_classes, dim))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    raw = means[labels] + spread * rng.normal(size=(len(labels), dim))
    lo, hi = raw.min(), raw.max()
    samples = (raw - lo) / (hi - lo) if hi > lo else np.full_like(raw, 0.5)
    samples = np.clip(samples, 0.0, 1.0)
    return _split(samples, labels, n_classes, rng, f"syn{seed}", test_fraction, validation_fraction)


def make_two_scale(
    n_classes: int = 10,
    dim: int = 32,
    n_per_class: int = 600,
    seed: int = 0,
    n_sparse: int | None = None,
    sparse_width: int = 2,
    sparse_gap: float = 0.4,
    sparse_noise: float = 0.1,
    dense_amplitude: float = 0.08,
    dense_noise: float = 0.03,
    test_fraction: float = 1 / 6,
    validation_fraction: float = 0.2,
) -> dict[str, LabeledDataset]:
    """Classes told apart at two different geometric scales.

    The first ``n_sparse`` classes (half by default) each own ``sparse_width``
    coordinates, raised by ``sparse_gap`` above the shared level, with noise
    ``sparse_noise`` there.  The remaining classes share the other coordinates
    and differ by a random sign pattern of size ``dense_amplitude`` under
    noise ``dense_noise``.  Dense classes end up confidently classified yet
    close to their decision boundaries in l-inf; sparse ones the reverse, so
    classifier confidence alone does not rank l-inf robustness.
    """
    _check_split_args(n_classes, dim, n_per_class, test_fraction, validation_fraction)
    n_sparse = n_classes // 2 if n_sparse is None else n_sparse
    block = n_sparse * sparse_width
    if not 0 <= n_sparse <= n_classes or block >= dim:
        raise ConfigError("sparse blocks must leave at least one shared coordinate")
    if min(sparse_noise, dense_noise) < 0 or min(sparse_gap, dense_amplitude) <= 0:
        raise ConfigError("noise must be nonnegative and separations positive")
    rng = philox(seed)
    means = np.empty((n_classes, dim))
    sigma = np.empty(dim)
    means[:, :block] = 0.5 - sparse_gap / 2
    sigma[:block] = sparse_noise
    for k in range(n_sparse):
        means[k, k * sparse_width : (k + 1) * sparse_width] = 0.5 + sparse_gap / 2
    means[:, block:] = 0.5
    sigma[block:] = dense_noise
    if n_classes - n_sparse > 2 ** (dim - block):
        raise ConfigError("too few shared coordinates for distinct dense classes")
    patterns = set()
    for k in range(n_sparse, n_classes):
        # redraw on collision so no two dense classes coincide
        while (signs := tuple(rng.choice([-1.0, 1.0], size=dim - block))) in patterns:
            pass
        patterns.add(signs)
        means[k, block:] += dense_amplitude * np.array(signs)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    samples = np.clip(means[labels] + sigma * rng.normal(size=(len(labels), dim)), 0.0, 1.0)
    return _split(samples, labels, n_classes, rng, f"two{seed}", test_fraction, validation_fraction)


def _check_split_args(n_classes, dim, n_per_class, test_fraction, validation_fraction):
    if n_classes < 2 or dim < 2:
        raise ConfigError("need at least 2 classes and 2 dimensions")
    if n_per_class < 1:
        raise ConfigError("n_per_class must be positive")
    if not (0 < test_fraction < 1 and 0 < validation_fraction < 1):
        raise ConfigError("split fractions must lie in (0, 1)")
    n_test = max(1, int(round(n_per_class * test_fraction)))
    n_val = max(1, int(round((n_per_class - n_test) * validation_fraction)))
    if n_test + n_val >= n_per_class:
        raise ConfigError("n_per_class too small for the requested splits")


def _split(samples, labels, n_classes, rng, prefix, test_fraction, validation_fraction):
    """Per class: hold out a test share, then split the rest train / validation."""
    n_per_class = np.bincount(labels, minlength=n_classes)
    ids = [f"{prefix}-{i:06d}" for i in range(len(labels))]
    parts = {s: [] for s in SPLITS}
    for k in range(n_classes):
        n = int(n_per_class[k])
        n_test = max(1, int(round(n * test_fraction)))
        n_val = max(1, int(round((n - n_test) * validation_fraction)))
        members = np.flatnonzero(labels == k)[rng.permutation(n)]
        parts["test"].append(members[:n_test])
        parts["validation"].append(members[n_test : n_test + n_val])
        parts["train"].append(members[n_test + n_val :])
    out = {}
    for split, chunks in parts.items():
        idx = np.sort(np.concatenate(chunks))
        out[split] = LabeledDataset(samples[idx], labels[idx], [ids[i] for i in idx], split, n_classes)
    return out


def ingest_cifar10(path, split: str = "train") -> LabeledDataset:
    """Read a CIFAR-10 binary batch file.

    Each 3073-byte record is one label byte followed by 1024 red, 1024 green
    and 1024 blue pixel bytes (row-major 32x32).  Pixels are scaled by 1/255.
    """
    path = Path(path)
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        offset = (raw.size // CIFAR_RECORD) * CIFAR_RECORD
        raise FormatError(
            f"{path.name}: {raw.size} bytes is not a whole number of {CIFAR_RECORD}-byte "
            f"records; trailing partial record starts at byte offset {offset}"
        )
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(
            f"{path.name}: label byte {labels[bad[0]]} at byte offset {bad[0] * CIFAR_RECORD}"
        )
    samples = records[:, 1:].astype(np.float64) / 255.0
    ids = [f"{path.name}:{i}" for i in range(len(labels))]
    return LabeledDataset(samples, labels, ids, split, 10)
