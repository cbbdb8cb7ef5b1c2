"""Long-tailed class profiles, label priors and synthetic Gaussian-blob datasets."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANY_THRESHOLD = 100
FEW_THRESHOLD = 20


class DataError(ValueError):
    """Invalid dataset specification or malformed dataset file."""


@dataclass(frozen=True)
class LongTailSpec:
    num_classes: int
    n_max: int
    gamma: float
    seed: int = 0

    def __post_init__(self):
        if int(self.num_classes) != self.num_classes or self.num_classes < 2:
            raise DataError(f"num_classes must be an integer >= 2, got {self.num_classes}")
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise DataError(f"n_max must be an integer >= 1, got {self.n_max}")
        if not self.gamma >= 1:
            raise DataError(f"gamma must be >= 1, got {self.gamma}")


@dataclass(frozen=True)
class ClassPrior:
    """Train (source) and test (target) label distributions plus the BC bias scale."""

    p_source: np.ndarray
    p_target: np.ndarray
    tau_bc: float = 1.0

    def __post_init__(self):
        ps = np.asarray(self.p_source, dtype=np.float64)
        pt = np.asarray(self.p_target, dtype=np.float64)
        if ps.ndim != 1 or ps.shape != pt.shape or ps.size < 2:
            raise DataError("p_source and p_target must be vectors of equal length >= 2")
        for name, p in (("p_source", ps), ("p_target", pt)):
            if not np.all(p > 0):
                raise DataError(f"{name} must be strictly positive")
            if abs(p.sum() - 1.0) > 1e-9:
                raise DataError(f"{name} must sum to 1 (got {p.sum()!r})")
        if not self.tau_bc >= 0:
            raise DataError("tau_bc must be >= 0")
        ps.setflags(write=False)
        pt.setflags(write=False)
        object.__setattr__(self, "p_source", ps)
        object.__setattr__(self, "p_target", pt)

    @property
    def num_classes(self) -> int:
        return self.p_source.size

    @property
    def log_gap(self) -> np.ndarray:
        """log p_s(y) - log p_t(y), one entry per class."""
        return np.log(self.p_source) - np.log(self.p_target)

    @classmethod
    def from_counts(cls, counts, tau_bc=1.0, p_target=None) -> "ClassPrior":
        ps = compute_prior(counts)
        if p_target is None:
            pt = np.full(ps.size, 1.0 / ps.size)
        else:
            pt = np.asarray(p_target, dtype=np.float64)
        return cls(ps, pt, tau_bc)

    @classmethod
    def balanced(cls, num_classes: int, tau_bc=1.0) -> "ClassPrior":
        u = np.full(num_classes, 1.0 / num_classes)
        return cls(u, u.copy(), tau_bc)


@dataclass(frozen=True)
class GroupAssignment:
    many: frozenset
    medium: frozenset
    few: frozenset

    def as_dict(self) -> dict:
        return {k: sorted(getattr(self, k)) for k in ("many", "medium", "few")}


@dataclass(frozen=True)
class TwoViewBatch:
    view_a: np.ndarray
    view_b: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


@dataclass(frozen=True)
class LTDataset:
    """Immutable long-tailed train split and balanced test split."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            object.__setattr__(
                self, "counts", np.bincount(self.y_train, minlength=self.num_classes)
            )
        for name in ("x_train", "y_train", "x_test", "y_test", "counts"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def feature_dim(self) -> int:
        return self.x_train.shape[1]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_class_counts(spec: LongTailSpec) -> np.ndarray:
    """Exponential profile n_i = n_max * gamma^(-i/(C-1)), rounded half-up, floored at 1."""
    c = spec.num_classes
    counts = [
        max(1, _round_half_up(spec.n_max * spec.gamma ** (-i / (c - 1)))) for i in range(c)
    ]
    return np.array(counts, dtype=np.int64)


def compute_prior(counts) -> np.ndarray:
    counts = np.asarray(counts)
    if counts.ndim != 1 or counts.size < 2:
        raise DataError("need counts for at least 2 classes")
    if np.any(counts < 1):
        raise DataError("all class counts must be >= 1")
    counts = counts.astype(np.float64)
    return counts / counts.sum()


def group_classes(counts) -> GroupAssignment:
    counts = np.asarray(counts)
    if counts.ndim != 1 or np.any(counts < 0):
        raise DataError("counts must be a non-negative vector")
    many = {i for i, n in enumerate(counts) if n > MANY_THRESHOLD}
    few = {i for i, n in enumerate(counts) if n < FEW_THRESHOLD}
    medium = set(range(counts.size)) - many - few
    return GroupAssignment(frozenset(many), frozenset(medium), frozenset(few))


def _class_means(rng, num_classes, dim, separation):
    # random directions scaled so the closest pair sits exactly `separation` apart
    dirs = rng.standard_normal((num_classes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    diff = dirs[:, None, :] - dirs[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    dmin = dist[np.triu_indices(num_classes, 1)].min()
    return dirs * (separation / dmin)


def build_synthetic_lt_dataset(
    spec: LongTailSpec,
    feature_dim: int = 16,
    class_separation: float = 3.0,
    test_per_class: int = 100,
) -> LTDataset:
    """Isotropic unit-variance Gaussian blobs, long-tailed train split, balanced test split."""
    if int(feature_dim) != feature_dim or feature_dim < 2:
        raise DataError(f"feature_dim must be >= 2, got {feature_dim}")
    if not class_separation > 0:
        raise DataError(f"class_separation must be > 0, got {class_separation}")
    if test_per_class < 1:
        raise DataError("test_per_class must be >= 1")
    counts = make_class_counts(spec)
    ss = np.random.SeedSequence(spec.seed)
    mean_ss, train_ss, test_ss = ss.spawn(3)
    means = _class_means(
        np.random.default_rng(mean_ss), spec.num_classes, feature_dim, class_separation
    )
    rng_tr = np.random.default_rng(train_ss)
    rng_te = np.random.default_rng(test_ss)
    y_train = np.repeat(np.arange(spec.num_classes), counts)
    x_train = means[y_train] + rng_tr.standard_normal((y_train.size, feature_dim))
    y_test = np.repeat(np.arange(spec.num_classes), test_per_class)
    x_test = means[y_test] + rng_te.standard_normal((y_test.size, feature_dim))
    return LTDataset(x_train, y_train, x_test, y_test, spec.num_classes, counts)


def two_view_batch(dataset: LTDataset, batch_indices, jitter_sigma: float, seed) -> TwoViewBatch:
    """Two independently jittered copies of the selected train rows."""
    if jitter_sigma < 0:
        raise DataError("jitter_sigma must be >= 0")
    idx = np.asarray(batch_indices, dtype=np.int64)
    n = dataset.x_train.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"batch index out of range [0, {n})")
    x = dataset.x_train[idx]
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((2,) + x.shape)
    if jitter_sigma == 0:
        view_a, view_b = x.copy(), x.copy()
    else:
        view_a = x + jitter_sigma * noise[0]
        view_b = x + jitter_sigma * noise[1]
    return TwoViewBatch(view_a, view_b, dataset.y_train[idx].copy(), idx)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

_HEADER = "ecl-dataset v1, C={C}, d={d}"


def save_dataset(dataset: LTDataset, path) -> None:
    lines = [_HEADER.format(C=dataset.num_classes, d=dataset.feature_dim)]
    for split, xs, ys in (
        ("train", dataset.x_train, dataset.y_train),
        ("test", dataset.x_test, dataset.y_test),
    ):
        for row, label in zip(xs, ys):
            lines.append(",".join([split, str(int(label))] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> LTDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    with path.open() as fh:
        header = fh.readline().strip()
        parts = [p.strip() for p in header.split(",")]
        if len(parts) != 3 or parts[0] != "ecl-dataset v1":
            raise DataError(f"bad dataset header: {header!r}")
        try:
            c = int(parts[1].removeprefix("C="))
            d = int(parts[2].removeprefix("d="))
        except ValueError as exc:
            raise DataError(f"bad dataset header: {header!r}") from exc
        rows = {"train": ([], []), "test": ([], [])}
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split(",")
            if len(fields) != d + 2 or fields[0] not in rows:
                raise DataError(f"malformed row at line {lineno}")
            label = int(fields[1])
            if not 0 <= label < c:
                raise DataError(f"label {label} out of range at line {lineno}")
            rows[fields[0]][0].append([float(v) for v in fields[2:]])
            rows[fields[0]][1].append(label)
    xtr, ytr = rows["train"]
    xte, yte = rows["test"]
    if not ytr:
        raise DataError("dataset has an empty train split")
    return LTDataset(
        np.array(xtr, dtype=np.float64).reshape(-1, d),
        np.array(ytr, dtype=np.int64),
        np.array(xte, dtype=np.float64).reshape(-1, d),
        np.array(yte, dtype=np.int64),
        c,
    )


def save_counts(counts, gamma: float, path) -> None:
    payload = {"counts": [int(n) for n in counts], "gamma": gamma}
    Path(path).write_text(json.dumps(payload) + "\n")
