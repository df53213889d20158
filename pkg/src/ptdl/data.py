"""Datasets: IDX ingestion, synthetic blobs and disjoint per-agent partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Raised for malformed IDX files or inconsistent image/label pairs."""


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix ``X`` (n, d) in [0, 1], labels ``y`` (n,), and example ids.

    ``ids`` identify examples in the dataset they were drawn from, so shard
    disjointness can be checked after partitioning.
    """

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str = "dataset"
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ValueError(f"inconsistent shapes X{X.shape} y{y.shape}")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        ids = np.arange(len(y)) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return self.y.shape[0]

    def __getitem__(self, i: int) -> Example:
        return Example(self.X[i], int(self.y[i]))

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes, name or self.name, self.ids[idx])

    def with_labels(self, y: np.ndarray) -> "Dataset":
        return Dataset(self.X, y, self.num_classes, self.name, self.ids)

    @staticmethod
    def concat(parts: list["Dataset"], name: str = "pooled") -> "Dataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        return Dataset(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            parts[0].num_classes,
            name,
            np.concatenate([p.ids for p in parts]),
        )


# ------------------------------------------------------------------- IDX


def _read_idx(path: Path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataFormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(shape))
    if len(raw) - header < count:
        raise DataFormatError(f"{path}: payload has {len(raw) - header} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(shape)


def load_idx(images_path, labels_path, num_classes: int = 10, name: str | None = None) -> Dataset:
    """Load an IDX image/label file pair (MNIST layout) into a :class:`Dataset`."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), num_classes, name or Path(images_path).stem)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(f">{images.ndim}I", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# ------------------------------------------------------------------- synthetic


def synth_blobs(
    num_examples: int,
    num_classes: int,
    dim: int,
    separation: float,
    seed: int,
) -> Dataset:
    """Class-conditional unit-variance Gaussians, min-max scaled to [0, 1].

    Class centres are drawn from N(0, separation^2 I); labels cycle through
    the classes so every class is present once ``num_examples >= num_classes``.
    """
    if num_examples < num_classes:
        raise ValueError("need at least one example per class")
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, separation, size=(num_classes, dim))
    y = np.arange(num_examples) % num_classes
    y = y[rng.permutation(num_examples)]
    X = centres[y] + rng.normal(size=(num_examples, dim))
    lo, hi = X.min(axis=0), X.max(axis=0)
    X = (X - lo) / np.where(hi > lo, hi - lo, 1.0)
    return Dataset(X, y, num_classes, f"blobs-{num_classes}x{dim}")


# ------------------------------------------------------------------- partition


@dataclass(frozen=True)
class PartitionPlan:
    num_agents: int
    bias_rate: float = 0.0
    majority_labels: tuple[int, ...] | None = None
    train_fraction: float = 6 / 7
    seed: int = 0

    def __post_init__(self):
        if self.num_agents < 1:
            raise ValueError("num_agents must be >= 1")
        if not 0.0 <= self.bias_rate <= 1.0:
            raise ValueError("bias_rate must lie in [0, 1]")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in (0, 1]")
        if self.majority_labels is not None and len(self.majority_labels) != self.num_agents:
            raise ValueError("one majority label per agent required")

    def majority_label(self, agent: int, num_classes: int) -> int:
        if self.majority_labels is not None:
            return self.majority_labels[agent]
        return agent % num_classes


def partition(dataset: Dataset, plan: PartitionPlan) -> list[tuple[Dataset, Dataset]]:
    """Split ``dataset`` into ``plan.num_agents`` disjoint (train, test) shards.

    Every agent gets ``n // K`` examples; the remainder is dropped. With a
    positive bias rate the train part of agent ``a`` holds exactly
    ``floor(bias_rate * n_train)`` examples of its majority label and the rest
    is spread as evenly over the other labels as the remaining supply allows.
    Test parts are always drawn uniformly.
    """
    n, K = len(dataset), plan.num_agents
    if n < K:
        raise ValueError(f"{n} examples cannot feed {K} agents")
    rng = np.random.default_rng(plan.seed)
    n_a = n // K
    n_train = int(round(n_a * plan.train_fraction))
    n_test = n_a - n_train
    order = rng.permutation(n)

    if plan.bias_rate == 0.0:
        shards = []
        for a in range(K):
            idx = order[a * n_a : (a + 1) * n_a]
            shards.append(_split(dataset, idx[:n_train], idx[n_train:], a))
        return shards

    test_idx = order[: K * n_test].reshape(K, n_test)
    pool = order[K * n_test :]
    used = np.zeros(n, dtype=bool)
    C = dataset.num_classes
    n_major = int(np.floor(plan.bias_rate * n_train))
    # reserve every agent's majority block before filling remainders, so
    # early agents cannot starve later ones of their majority label
    majors = [plan.majority_label(a, C) for a in range(K)]
    blocks = []
    for a, major in enumerate(majors):
        avail = pool[~used[pool]]
        major_pool = avail[dataset.y[avail] == major]
        if major_pool.size < n_major:
            raise ValueError(
                f"agent {a}: needs {n_major} examples of label {major}, {major_pool.size} left"
            )
        used[major_pool[:n_major]] = True
        blocks.append(major_pool[:n_major])
    avail = pool[~used[pool]]
    counts = _remainder_counts(majors, n_train - n_major, np.bincount(dataset.y[avail], minlength=C))
    by_label = [rng.permutation(avail[dataset.y[avail] == c]) for c in range(C)]
    cursor = np.zeros(C, dtype=int)
    shards = []
    for a in range(K):
        parts = [blocks[a]]
        for c in np.flatnonzero(counts[a]):
            parts.append(by_label[c][cursor[c] : cursor[c] + counts[a, c]])
            cursor[c] += counts[a, c]
        take = np.concatenate(parts)
        take = take[rng.permutation(take.size)]
        shards.append(_split(dataset, take, test_idx[a], a))
    return shards


def _remainder_counts(majors, need: int, supply: np.ndarray) -> np.ndarray:
    """Integer (agent, label) counts: each row sums to ``need``, avoids the
    agent's majority label, spreads evenly over the other labels where supply
    allows, and never exceeds a label's supply."""
    K, C = len(majors), supply.size
    allowed = np.ones((K, C))
    allowed[np.arange(K), majors] = 0.0
    if need == 0:
        return np.zeros((K, C), dtype=int)
    if C < 2 or need * K > supply.sum():
        raise ValueError("not enough non-majority examples left")
    # proportional fitting with column capacities
    M = allowed * need / allowed.sum(axis=1, keepdims=True)
    for _ in range(500):
        col = M.sum(axis=0)
        over = col > supply
        M[:, over] *= supply[over] / col[over]
        M *= need / M.sum(axis=1, keepdims=True)
        if np.all(M.sum(axis=0) <= supply + 1e-9):
            break
    counts = np.floor(M).astype(int)
    for a in range(K):  # largest remainder per row
        short = need - counts[a].sum()
        order = np.argsort(-(M[a] - counts[a]), kind="stable")
        for c in order[:short]:
            counts[a, c] += 1
    # repair columns pushed over capacity by rounding
    for c in np.flatnonzero(counts.sum(axis=0) > supply):
        while counts[:, c].sum() > supply[c]:
            moved = False
            for a in np.flatnonzero(counts[:, c]):
                slack = supply - counts.sum(axis=0)
                targets = np.flatnonzero((slack > 0) & (allowed[a] > 0))
                if targets.size:
                    counts[a, c] -= 1
                    counts[a, targets[np.argmax(slack[targets])]] += 1
                    moved = True
                    break
            if not moved:
                raise ValueError("not enough non-majority examples left")
    return counts


def _split(dataset: Dataset, train_idx, test_idx, agent: int) -> tuple[Dataset, Dataset]:
    return (
        dataset.subset(train_idx, f"{dataset.name}/agent{agent}/train"),
        dataset.subset(test_idx, f"{dataset.name}/agent{agent}/test"),
    )
