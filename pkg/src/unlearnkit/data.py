"""Datasets: synthetic class blobs, IDX and CIFAR-10 binary loaders, the
retain/forget split, and seeded sampling helpers.

Datasets are immutable after construction; every sampling operation is a
pure function of its seed arguments.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, IntegrityError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W), float32 in [0, 1]
    labels: np.ndarray  # (N,), int64 in [0, class_count)
    name: str
    class_count: int

    def __len__(self):
        return self.images.shape[0]

    def validate(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise IntegrityError(
                f"{self.name}: {self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise IntegrityError(f"{self.name}: label outside [0,{self.class_count})")
        return self

    def subset(self, indices, name=None):
        return Dataset(self.images[indices], self.labels[indices], name or self.name, self.class_count)


@dataclass
class ClassSplit:
    """The four datasets an unlearning run needs: retain/forget partitions
    of the train set and the matching test partitions."""

    forget_class: int
    dr: Dataset
    df: Dataset
    test_retain: Dataset
    test_forget: Dataset


def gen_synthetic_blobs(seed, class_count, n_per_class, channels=3, height=16, width=16,
                        spread=0.8):
    """Per-class mean images plus Gaussian noise, clamped to [0,1].

    Each class mean is a coarse 4x4 random pattern upsampled to full
    resolution: spatially coherent signatures a conv net generalizes from
    (i.i.d.-pixel means just get memorized). Task difficulty scales with
    the noise `spread`; spread=0 reproduces each class mean exactly.
    """
    if class_count < 2:
        raise ConfigError(f"need at least 2 classes, got {class_count}")
    if spread < 0:
        raise ConfigError(f"spread must be non-negative, got {spread}")
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.0, 1.0, size=(class_count, channels, 4, 4))
    cell_h = -(-height // 4)
    cell_w = -(-width // 4)
    means = np.repeat(np.repeat(coarse, cell_h, axis=2), cell_w, axis=3)[:, :, :height, :width]
    images = np.empty((class_count * n_per_class, channels, height, width), dtype=np.float32)
    labels = np.empty(class_count * n_per_class, dtype=np.int64)
    for k in range(class_count):
        noise = rng.normal(0.0, spread, size=(n_per_class, channels, height, width)) if spread > 0 else 0.0
        block = np.clip(means[k] + noise, 0.0, 1.0)
        images[k * n_per_class : (k + 1) * n_per_class] = block.astype(np.float32)
        labels[k * n_per_class : (k + 1) * n_per_class] = k
    return Dataset(images, labels, f"blobs-{seed}", class_count).validate()


def blob_train_test(seed, class_count, n_train_per_class, n_test_per_class, channels=3,
                    height=16, width=16, spread=0.8):
    """Train/test blob pair drawn around the same class means: one draw,
    sliced per class so the test noise is disjoint from the train noise."""
    full = gen_synthetic_blobs(
        seed, class_count, n_train_per_class + n_test_per_class, channels, height, width, spread
    )
    per = n_train_per_class + n_test_per_class
    train_idx, test_idx = [], []
    for k in range(class_count):
        train_idx.extend(range(k * per, k * per + n_train_per_class))
        test_idx.extend(range(k * per + n_train_per_class, (k + 1) * per))
    train = full.subset(np.array(train_idx), f"blobs-{seed}-train")
    test = full.subset(np.array(test_idx), f"blobs-{seed}-test")
    return train, test


def _read_idx_header(f, path, expected_magic, ndim):
    raw = f.read(4 * (1 + ndim))
    if len(raw) != 4 * (1 + ndim):
        raise IntegrityError(f"{path}: truncated IDX header")
    fields = struct.unpack(f">{1 + ndim}I", raw)
    if fields[0] != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{fields[0]:08x}, expected 0x{expected_magic:08x}")
    return fields[1:]


def load_idx(images_path, labels_path, class_count=10):
    """Load an IDX image/label file pair (the MNIST container format)."""
    with open(images_path, "rb") as f:
        n, h, w = _read_idx_header(f, images_path, IDX_IMAGE_MAGIC, 3)
        raw = f.read(n * h * w)
        if len(raw) != n * h * w:
            raise IntegrityError(f"{images_path}: expected {n * h * w} pixel bytes, got {len(raw)}")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w).astype(np.float32) / 255.0
    with open(labels_path, "rb") as f:
        (n_labels,) = _read_idx_header(f, labels_path, IDX_LABEL_MAGIC, 1)
        raw = f.read(n_labels)
        if len(raw) != n_labels:
            raise IntegrityError(f"{labels_path}: expected {n_labels} label bytes, got {len(raw)}")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if n != n_labels:
        raise IntegrityError(f"IDX pair mismatch: {n} images vs {n_labels} labels")
    return Dataset(images, labels, "idx", class_count).validate()


def load_cifar10_bin(paths):
    """Load CIFAR-10 binary batches: per record one label byte followed by
    32x32 R, G, B planes."""
    if isinstance(paths, (str, bytes)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
            raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        batch_labels = records[:, 0].astype(np.int64)
        if batch_labels.max() >= 10:
            raise IntegrityError(f"{path}: label byte {batch_labels.max()} out of range")
        images.append(records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
        labels.append(batch_labels)
    return Dataset(np.concatenate(images), np.concatenate(labels), "cifar10", 10).validate()


def split_by_class(train, test, forget_class):
    """Partition train/test into retain and forget subsets, order preserved."""
    if not (0 <= forget_class < train.class_count):
        raise ConfigError(f"forget class {forget_class} outside [0,{train.class_count})")
    if not np.any(train.labels == forget_class):
        raise ConfigError(f"class {forget_class} absent from the training set")
    tr_forget = train.labels == forget_class
    te_forget = test.labels == forget_class
    return ClassSplit(
        forget_class=forget_class,
        dr=train.subset(~tr_forget, f"{train.name}-retain"),
        df=train.subset(tr_forget, f"{train.name}-forget"),
        test_retain=test.subset(~te_forget, f"{test.name}-retain"),
        test_forget=test.subset(te_forget, f"{test.name}-forget"),
    )


def balanced_mia_sample(dr, test_retain, n_per_side, seed):
    """Equal-size member/non-member samples drawn without replacement from
    the retain-train and retain-test sets."""
    if n_per_side > min(len(dr), len(test_retain)):
        raise ConfigError(
            f"n_per_side={n_per_side} exceeds min(|Dr|={len(dr)}, |test_retain|={len(test_retain)})"
        )
    rng = np.random.default_rng(seed)
    member_idx = rng.choice(len(dr), size=n_per_side, replace=False)
    nonmember_idx = rng.choice(len(test_retain), size=n_per_side, replace=False)
    return dr.subset(member_idx, "mia-members"), test_retain.subset(nonmember_idx, "mia-nonmembers")


def batch_iter(dataset, batch_size, shuffle_seed, epoch):
    """Yield (images, labels) batches in a permutation determined entirely
    by (shuffle_seed, epoch); the final short batch is included."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    rng = np.random.default_rng([shuffle_seed, epoch])
    order = rng.permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = order[start : start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
