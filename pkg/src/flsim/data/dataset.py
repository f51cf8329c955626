from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from flsim.errors import InputError


class LabeledExample(NamedTuple):
    features: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix ``X`` (rows are examples), integer labels ``y`` in [0, C).

    Arrays are stored read-only so that shards handed to the simulator cannot be
    mutated after construction.
    """

    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, copy=True)
        y = np.array(self.y, dtype=np.int64, copy=True).reshape(-1)
        if X.ndim == 1:
            X = X.reshape(len(y), -1) if len(y) else X.reshape(0, 0)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise InputError(f"feature rows {X.shape} do not match {y.shape[0]} labels")
        if self.num_classes < 1:
            raise InputError("num_classes must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def dim(self) -> int:
        return int(self.X.shape[1])

    def __iter__(self) -> Iterator[LabeledExample]:
        for x, y in zip(self.X, self.y):
            yield LabeledExample(x, int(y))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
        )

    __hash__ = None

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes)

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.X, labels, self.num_classes)

    def fingerprint(self) -> str:
        """Content hash; used to check that offline-poisoned shards never change."""
        import hashlib

        h = hashlib.sha256()
        h.update(np.int64(self.num_classes).tobytes())
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample], num_classes: int) -> "Dataset":
        if not examples:
            raise InputError("cannot infer feature dimension from an empty example list")
        X = np.stack([np.asarray(e.features, dtype=np.float64) for e in examples])
        y = np.array([e.label for e in examples], dtype=np.int64)
        return cls(X, y, num_classes)

    @classmethod
    def empty(cls, dim: int, num_classes: int) -> "Dataset":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), num_classes)


def concat(datasets: Sequence[Dataset]) -> Dataset:
    if not datasets:
        raise InputError("nothing to concatenate")
    C = datasets[0].num_classes
    if any(d.num_classes != C for d in datasets):
        raise InputError("datasets disagree on num_classes")
    X = np.concatenate([d.X for d in datasets], axis=0)
    y = np.concatenate([d.y for d in datasets])
    return Dataset(X, y, C)
