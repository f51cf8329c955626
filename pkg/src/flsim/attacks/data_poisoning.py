"""Nobox offline data-poisoning: label-flipped poisoned sets and their sizing.

The adversary never sees the global model. Everything here is built from the
compromised clients' own shards and, for dynamic flipping or tuning, from a
surrogate trained on those shards.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from flsim import model as mdl
from flsim.aggregation import AggregationRule, RuleKind, agg_multi_krum, agg_trimmed_mean
from flsim.data import transforms as tf
from flsim.data.dataset import Dataset, concat
from flsim.errors import ConfigError, InputError
from flsim.rng import substream

log = logging.getLogger(__name__)


class FlipKind(str, enum.Enum):
    slf = "slf"
    dlf = "dlf"


@dataclass(frozen=True)
class DpaPlan:
    flip: FlipKind = FlipKind.slf
    per_client_size: int = 1
    size_cap: Optional[int] = None
    surrogate_spec: Optional[mdl.ModelSpec] = None
    noise_sigma: Optional[float] = None  # None: 0.05 x per-feature std of the pooled data
    rounding: tf.Rounding = tf.Rounding.none

    def __post_init__(self):
        object.__setattr__(self, "flip", FlipKind(self.flip))
        object.__setattr__(self, "rounding", tf.Rounding(self.rounding))
        if self.per_client_size < 1:
            raise ConfigError("|D_p| must be >= 1", "attack/dp_size")
        if self.size_cap is not None and self.size_cap < 1:
            raise ConfigError("size_cap must be positive", "attack/size_cap")

    @property
    def effective_size(self) -> int:
        if self.size_cap is None:
            return self.per_client_size
        return min(self.per_client_size, self.size_cap)


def default_size_cap(d_avg: float) -> int:
    return int(math.floor(100 * d_avg))


@dataclass
class SurrogateResult:
    spec: mdl.ModelSpec
    params: np.ndarray
    rounds_trained: int


def _nonempty(datasets: Sequence[Dataset]) -> list:
    if not datasets:
        raise InputError("no compromised data")
    shards = [d for d in datasets if len(d)]
    if not shards:
        raise InputError("all compromised shards are empty")
    return shards


def train_surrogate(compromised_data: Sequence[Dataset], spec: mdl.ModelSpec, rounds: int,
                    train_cfg: mdl.TrainConfig, rng: np.random.Generator,
                    server_lr: float = 1.0) -> SurrogateResult:
    """Private FedAvg over the compromised clients' benign shards."""
    shards = _nonempty(compromised_data)
    params = mdl.init_params(spec, rng)
    cfg = train_cfg.with_direction(mdl.Direction.descent)
    for _ in range(rounds):
        updates = [mdl.client_update(spec, params, shard, cfg, rng) for shard in shards]
        params = params + server_lr * np.mean(updates, axis=0)
    return SurrogateResult(spec, params, rounds)


def flip_with(plan_flip, ds: Dataset, surrogate: Optional[SurrogateResult]) -> Dataset:
    if FlipKind(plan_flip) is FlipKind.slf:
        return tf.flip_static(ds)
    if surrogate is None:
        raise ConfigError("dynamic label flipping needs a surrogate model", "attack/flip")
    return tf.flip_dynamic(ds, (surrogate.spec, surrogate.params))


def _resize(pool: Dataset, size: int, plan: DpaPlan, rng: np.random.Generator) -> Dataset:
    if size == len(pool):
        return pool
    if size < len(pool):
        return pool.subset(np.sort(rng.choice(len(pool), size=size, replace=False)))
    return tf.augment_gaussian(pool, plan.noise_sigma, size, rng, plan.rounding)


def _build_large(compromised_data, plan: DpaPlan, surrogate, rng) -> list:
    if plan.flip is FlipKind.dlf and surrogate is None:
        raise ConfigError("dynamic label flipping needs a surrogate model", "attack/flip")
    pooled = concat(_nonempty(compromised_data))
    size = plan.effective_size
    out = []
    for _ in compromised_data:
        # enlarge benign features first, then flip, so DLF labels every synthetic point
        grown = _resize(pooled, size, plan, rng)
        out.append(flip_with(plan.flip, grown, surrogate))
    return out


def build_dpa_avg_normb(compromised_data: Sequence[Dataset], plan: DpaPlan,
                        surrogate: Optional[SurrogateResult], rng: np.random.Generator) -> list:
    """One large label-flipped ``D_p`` per compromised client (Average / Norm-bound targets)."""
    return _build_large(compromised_data, plan, surrogate, rng)


def build_dpa_trmean(compromised_data: Sequence[Dataset], plan: DpaPlan,
                     surrogate: Optional[SurrogateResult], rng: np.random.Generator) -> list:
    """Trimmed-mean deviation grows with ``|D_p|``, so the same large-set policy applies."""
    return _build_large(compromised_data, plan, surrogate, rng)


def trmean_deviation(poisoned_update, benign_updates, m: int, m_assumed: int) -> float:
    benign = [np.asarray(u, dtype=np.float64) for u in benign_updates]
    agg = agg_trimmed_mean([poisoned_update] * m + benign, m_assumed).aggregate
    return float(np.linalg.norm(np.mean(benign, axis=0) - agg))


def mkrum_candidate_sizes(d_avg: float) -> list:
    lo = math.ceil(0.5 * d_avg)
    hi = math.floor(3 * d_avg)
    if hi < lo:
        hi = lo
    return sorted({int(round(s)) for s in np.linspace(lo, hi, 11)})


@dataclass
class TuneResult:
    dataset: Dataset
    selected_count: int
    deviation: float
    log: list = field(default_factory=list)


def mkrum_selected(update, benign_updates, m: int, rule: AggregationRule):
    """How many of the ``m`` poisoned copies Multi-krum keeps, and the resulting deviation."""
    benign = [np.asarray(u, dtype=np.float64) for u in benign_updates]
    out = agg_multi_krum([update] * m + benign, rule.m_assumed, rule.c)
    count = sum(1 for i in out.selected_indices if i < m)
    dev = float(np.linalg.norm(np.mean(benign, axis=0) - out.aggregate))
    return count, dev


def tune_dp_mkrum(compromised_data: Sequence[Dataset], benign_update_estimates, d_avg: float,
                  global_spec: mdl.ModelSpec, theta_estimate, rule: AggregationRule,
                  repeats: int, rng: np.random.Generator, *, m: int,
                  flip=FlipKind.slf, surrogate: Optional[SurrogateResult] = None,
                  train_cfg: Optional[mdl.TrainConfig] = None) -> TuneResult:
    """Monte-Carlo search over ``|D_p|`` in [0.5, 3] x ``d_avg`` for Multi-krum.

    For each of 11 candidate sizes, ``repeats`` random subsets of the flipped pool
    are tried; the subset whose update gets the most copies selected wins, with
    larger deviation breaking ties and earlier candidates winning exact ties.
    """
    if RuleKind(rule.kind) is not RuleKind.multi_krum:
        raise ConfigError("tune_dp_mkrum targets multi_krum only", "rule/kind")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1", "attack/repeats")
    train_cfg = train_cfg or mdl.TrainConfig()
    pool = flip_with(flip, concat(_nonempty(compromised_data)), surrogate)
    if len(pool) < 0.5 * d_avg:
        raise InputError(f"flipped pool has {len(pool)} examples, fewer than 0.5 x d_avg")
    base_seed = int(rng.integers(2**63))
    best = None
    records = []
    for si, size in enumerate(mkrum_candidate_sizes(d_avg)):
        for trial in range(repeats):
            sub = substream(base_seed, "mkrum-sample", si, trial)
            if size <= len(pool):
                dp = pool.subset(np.sort(sub.choice(len(pool), size=size, replace=False)))
            else:
                dp = flip_with(flip, tf.augment_gaussian(
                    concat(_nonempty(compromised_data)), None, size, sub), surrogate)
            upd = mdl.client_update(global_spec, theta_estimate, dp, train_cfg,
                                    substream(base_seed, "mkrum-train", si, trial))
            count, dev = mkrum_selected(upd, benign_update_estimates, m, rule)
            records.append({"size": size, "trial": trial, "selected_count": count, "deviation": dev})
            if best is None or (count, dev) > (best.selected_count, best.deviation):
                best = TuneResult(dp, count, dev)
    best.log = records
    return best


@dataclass
class SignAlignResult:
    dataset: Dataset
    best_distance: float
    distances: list
    exhausted: bool = False


def mc_sign_align(sampler: Callable[[np.random.Generator, int], Optional[Dataset]], size: int,
                  target_sign, trials: int, global_spec: mdl.ModelSpec, theta_estimate,
                  train_cfg: mdl.TrainConfig, rng: np.random.Generator) -> SignAlignResult:
    """Keep the sampled ``D_p`` whose update signs sit closest (L1) to ``target_sign``.

    ``sampler(rng, size)`` returns a candidate set or ``None`` once exhausted.
    ``distances`` records the running best after each trial.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1", "attack/trials")
    target = np.asarray(target_sign, dtype=np.float64)
    base_seed = int(rng.integers(2**63))
    best_ds, best_dist = None, np.inf
    running = []
    exhausted = False
    for t in range(trials):
        dp = sampler(substream(base_seed, "sign-sample", t), size)
        if dp is None:
            exhausted = True
            log.warning("poisoned-set sampler exhausted after %d of %d trials", t, trials)
            break
        upd = mdl.client_update(global_spec, theta_estimate, dp, train_cfg,
                                substream(base_seed, "sign-train", t))
        dist = float(np.abs(np.sign(upd) - target).sum())
        if dist < best_dist:
            best_ds, best_dist = dp, dist
        running.append(best_dist)
    if best_ds is None:
        raise InputError("sampler produced no candidates")
    return SignAlignResult(best_ds, best_dist, running, exhausted)


def subset_sampler(pool: Dataset, plan: Optional[DpaPlan] = None):
    """Sampler drawing uniform subsets (augmenting when ``size`` exceeds the pool)."""
    plan = plan or DpaPlan()

    def sample(rng: np.random.Generator, size: int) -> Dataset:
        return _resize(pool, size, plan, rng)

    return sample
