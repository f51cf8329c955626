"""Server-side aggregation rules over a list of flat client updates.

All rules break ties toward the lowest update index.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from flsim.errors import ConfigError, InputError


class RuleKind(str, enum.Enum):
    average = "average"
    norm_bound = "norm_bound"
    multi_krum = "multi_krum"
    trimmed_mean = "trimmed_mean"
    median = "median"


@dataclass(frozen=True)
class AggregationRule:
    kind: RuleKind = RuleKind.average
    tau: Optional[float] = None
    m_assumed: int = 0
    c: Optional[int] = None
    weighted: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", RuleKind(self.kind))
        if self.tau is not None and not self.tau > 0:
            raise ConfigError("tau must be positive", "rule/tau")
        if self.m_assumed < 0:
            raise ConfigError("m_assumed must be non-negative", "rule/m_assumed")
        if self.c is not None and self.c < 1:
            raise ConfigError("c must be positive", "rule/c")

    def with_tau(self, tau: float) -> "AggregationRule":
        return AggregationRule(self.kind, tau, self.m_assumed, self.c, self.weighted)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "tau": self.tau, "m_assumed": self.m_assumed,
                "c": self.c, "weighted": self.weighted}


@dataclass
class AggregationOutcome:
    aggregate: np.ndarray
    selected_indices: Optional[list] = None
    per_update_scale: Optional[np.ndarray] = None


def _stack(updates: Sequence[np.ndarray]) -> np.ndarray:
    if len(updates) == 0:
        raise InputError("need at least one update")
    arrs = [np.asarray(u, dtype=np.float64) for u in updates]
    d = arrs[0].shape
    if any(a.ndim != 1 or a.shape != d for a in arrs):
        raise InputError("updates must be 1-D vectors of equal dimension")
    return np.stack(arrs)


def agg_average(updates, weights=None) -> AggregationOutcome:
    U = _stack(updates)
    if weights is None:
        return AggregationOutcome(U.mean(axis=0))
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (U.shape[0],) or np.any(w <= 0):
        raise InputError("weights must be positive, one per update")
    return AggregationOutcome((w[:, None] * U).sum(axis=0) / w.sum())


def agg_norm_bound(updates, tau: float) -> AggregationOutcome:
    if tau is None or not tau > 0:
        raise ConfigError("norm_bound requires tau > 0", "rule/tau")
    U = _stack(updates)
    norms = np.linalg.norm(U, axis=1)
    scale = np.ones(len(U))
    over = norms > tau
    scale[over] = tau / norms[over]
    clipped = U.copy()
    clipped[over] = U[over] * scale[over, None]
    return AggregationOutcome(clipped.mean(axis=0), per_update_scale=scale)


def _sq_dists(U: np.ndarray) -> np.ndarray:
    diff = U[:, None, :] - U[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def krum_scores(updates, m_assumed: int) -> np.ndarray:
    """Sum of squared distances to the ``n - m - 2`` nearest other updates."""
    U = _stack(updates)
    n = len(U)
    k = n - m_assumed - 2
    if k < 1:
        raise ConfigError(f"krum needs n - m - 2 >= 1 (n={n}, m={m_assumed})", "rule/m_assumed")
    D = _sq_dists(U)
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(D[i], i)
        scores[i] = np.sort(others)[:k].sum()
    return scores


def default_krum_c(n: int, m_assumed: int) -> int:
    return n - 2 * m_assumed - 3


def agg_multi_krum(updates, m_assumed: int, c: Optional[int] = None) -> AggregationOutcome:
    U = _stack(updates)
    n = len(U)
    if c is None:
        c = default_krum_c(n, m_assumed)
    if not (c >= 1 and n - c > 2 * m_assumed + 2):
        raise ConfigError(f"multi_krum needs n - c > 2m + 2 (n={n}, c={c}, m={m_assumed})", "rule/c")
    D = _sq_dists(U)
    remaining = list(range(n))
    selected = []
    while len(selected) < c:
        r = len(remaining)
        k = r - m_assumed - 2
        sub = D[np.ix_(remaining, remaining)]
        best, best_score = None, np.inf
        for pos in range(r):
            score = np.sort(np.delete(sub[pos], pos))[:k].sum()
            if score < best_score:
                best, best_score = pos, score
        selected.append(remaining.pop(best))
    return AggregationOutcome(U[selected].mean(axis=0), selected_indices=selected)


def agg_trimmed_mean(updates, m_assumed: int) -> AggregationOutcome:
    U = _stack(updates)
    n = len(U)
    if not 2 * m_assumed < n:
        raise ConfigError(f"trimmed_mean needs 2m < n (n={n}, m={m_assumed})", "rule/m_assumed")
    S = np.sort(U, axis=0, kind="stable")
    return AggregationOutcome(S[m_assumed:n - m_assumed].mean(axis=0))


def agg_median(updates) -> AggregationOutcome:
    U = _stack(updates)
    S = np.sort(U, axis=0)
    n = len(U)
    if n % 2:
        agg = S[n // 2].copy()
    else:
        agg = 0.5 * (S[n // 2 - 1] + S[n // 2])
    return AggregationOutcome(agg)


def aggregate(rule: AggregationRule, updates, weights=None) -> AggregationOutcome:
    """Dispatch on ``rule.kind``."""
    kind = rule.kind
    if kind is RuleKind.average:
        return agg_average(updates, weights if rule.weighted else None)
    if kind is RuleKind.norm_bound:
        return agg_norm_bound(updates, rule.tau)
    if kind is RuleKind.multi_krum:
        return agg_multi_krum(updates, rule.m_assumed, rule.c)
    if kind is RuleKind.trimmed_mean:
        return agg_trimmed_mean(updates, rule.m_assumed)
    if kind is RuleKind.median:
        return agg_median(updates)
    raise ConfigError(f"unknown rule {kind!r}", "rule/kind")
