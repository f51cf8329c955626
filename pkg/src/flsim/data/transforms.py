from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from flsim import model as mdl
from flsim.data.dataset import Dataset
from flsim.errors import InputError


class Rounding(str, enum.Enum):
    none = "none"
    round_to_int = "round_to_int"


@dataclass(frozen=True)
class Partition:
    shards: list
    indices: list  # per-shard index arrays into the source dataset

    def __len__(self):
        return len(self.shards)


def _largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort on negative remainders: lowest client index wins ties
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(src: Dataset, N: int, alpha: float, rng: np.random.Generator) -> Partition:
    """Split ``src`` across ``N`` clients with per-class Dirichlet(alpha) proportions."""
    if N < 1:
        raise InputError("N must be >= 1")
    if not alpha > 0:
        raise InputError("alpha must be positive")
    if len(src) == 0:
        raise InputError("source dataset is empty")
    buckets = [[] for _ in range(N)]
    for c in range(src.num_classes):
        idx = np.flatnonzero(src.y == c)
        # shuffle so that which examples go where is random, not just how many
        idx = idx[rng.permutation(len(idx))]
        props = rng.dirichlet(np.full(N, float(alpha)))
        if len(idx) == 0:
            continue
        counts = _largest_remainder(len(idx), props)
        start = 0
        for k, cnt in enumerate(counts):
            buckets[k].append(idx[start:start + cnt])
            start += cnt
    indices = [np.sort(np.concatenate(b)) if b else np.zeros(0, dtype=np.int64) for b in buckets]
    shards = [src.subset(ix) for ix in indices]
    return Partition(shards, indices)


def static_flip_labels(y, C: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if C % 2 == 0:
        return C - 1 - y
    # odd C: (C - y) mod C, which leaves y = 0 at 0
    return (C - y) % C


def flip_static(ds: Dataset) -> Dataset:
    if ds.num_classes < 2:
        raise InputError("label flipping needs at least 2 classes")
    return ds.with_labels(static_flip_labels(ds.y, ds.num_classes))


def flip_dynamic(ds: Dataset, surrogate) -> Dataset:
    """Relabel each example with the surrogate's least probable class."""
    spec, params = surrogate
    if spec.num_classes != ds.num_classes:
        raise InputError("surrogate output classes differ from dataset classes")
    if len(ds) and ds.dim != spec.input_dim:
        raise InputError(f"feature dim {ds.dim} does not match surrogate input {spec.input_dim}")
    if len(ds) == 0:
        return ds
    p = mdl.predict_proba(spec, params, ds.X)
    return ds.with_labels(np.argmin(p, axis=1))


def default_noise_sigma(ds: Dataset) -> np.ndarray:
    """0.05 x per-feature standard deviation."""
    return 0.05 * ds.X.std(axis=0)


def augment_gaussian(ds: Dataset, noise_sigma, target_size: int, rng: np.random.Generator,
                     rounding: Rounding = Rounding.none) -> Dataset:
    """Grow ``ds`` to ``target_size`` with noisy copies of uniformly chosen examples.

    ``noise_sigma`` may be a scalar or per-feature vector; ``None`` uses the
    default of 0.05 per-feature standard deviations.
    """
    if len(ds) == 0:
        raise InputError("cannot augment an empty dataset")
    if target_size < len(ds):
        raise InputError(f"target_size {target_size} < dataset size {len(ds)}")
    if noise_sigma is None:
        noise_sigma = default_noise_sigma(ds)
    sigma = np.broadcast_to(np.asarray(noise_sigma, dtype=np.float64), (ds.dim,))
    if np.any(sigma < 0):
        raise InputError("noise_sigma must be non-negative")
    extra = target_size - len(ds)
    base = rng.integers(0, len(ds), size=extra)
    noise = rng.standard_normal((extra, ds.dim)) * sigma
    X_new = ds.X[base] + noise
    if Rounding(rounding) is Rounding.round_to_int:
        X_new = np.rint(X_new)
    X = np.concatenate([ds.X, X_new], axis=0)
    y = np.concatenate([ds.y, ds.y[base]])
    return Dataset(X, y, ds.num_classes)


def synth_mixture(C: int, dim: int, per_class: int, separation: float,
                  rng: np.random.Generator) -> Dataset:
    """``C`` unit-covariance Gaussian clusters whose means sit at norm ``separation``.

    Means are distinct random directions (orthonormal when ``C <= dim``).
    """
    if C < 2 or dim < 1 or per_class < 1:
        raise InputError("need C >= 2, dim >= 1, per_class >= 1")
    g = rng.standard_normal((dim, max(C, dim)))
    if C <= dim:
        q, _ = np.linalg.qr(g)
        dirs = q[:, :C].T
    else:
        dirs = rng.standard_normal((C, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = separation * dirs
    y = np.repeat(np.arange(C), per_class)
    X = means[y] + rng.standard_normal((C * per_class, dim))
    return Dataset(X, y, C)
