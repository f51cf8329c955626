"""Whitebox online model-poisoning attacks: LIE, STAT-OPT, DYN-OPT and PGA.

Each attack returns a single poisoned update; the caller submits ``m``
copies of it. Poisoned copies are placed before the benign updates when the
attacker evaluates the target rule, mirroring ``f_agr(poisoned x m, benign)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from flsim import model as mdl
from flsim.aggregation import AggregationRule, RuleKind, aggregate
from flsim.data.dataset import Dataset
from flsim.errors import AttackInfeasible, ConfigError, DegenerateDirectionError, InputError

AVERAGE_BLOWUP = 1e20


class OmegaKind(str, enum.Enum):
    inv_unit = "inv_unit"
    inv_std = "inv_std"
    inv_sign = "inv_sign"


@dataclass
class MpaContext:
    global_params: np.ndarray
    benign_updates: list
    m: int
    target_rule: AggregationRule
    n_total: Optional[int] = None  # clients per round, for LIE's z; defaults to len(benign) + m

    def __post_init__(self):
        if len(self.benign_updates) == 0:
            raise InputError("adversary needs at least one benign update")
        self.benign_updates = [np.asarray(u, dtype=np.float64) for u in self.benign_updates]
        d = self.benign_updates[0].shape
        if any(u.shape != d or u.ndim != 1 for u in self.benign_updates):
            raise InputError("benign updates must share one dimension")
        if self.m < 1:
            raise InputError("m must be >= 1")

    @property
    def benign_mean(self) -> np.ndarray:
        return np.mean(self.benign_updates, axis=0)

    @property
    def mean_benign_norm(self) -> float:
        return float(np.mean([np.linalg.norm(u) for u in self.benign_updates]))


@dataclass(frozen=True)
class ProjectConfig:
    gamma_max: float = 50.0
    gamma_step: float = 0.5

    def __post_init__(self):
        if not self.gamma_max >= 1:
            raise ConfigError("gamma_max must be >= 1", "attack/gamma_max")
        if not self.gamma_step > 0:
            raise ConfigError("gamma_step must be positive", "attack/gamma_step")


def gamma_grid(start: float, step: float, stop: float) -> np.ndarray:
    """``start, start+step, ...`` up to ``stop`` inclusive (index-based, no drift)."""
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(max(count, 0))


def _poisoned_aggregate(ctx: MpaContext, poisoned: np.ndarray):
    updates = [poisoned] * ctx.m + list(ctx.benign_updates)
    return aggregate(ctx.target_rule, updates)


def deviation(ctx: MpaContext, poisoned) -> float:
    """L2 distance between the benign average and the poisoned aggregate."""
    poisoned = np.asarray(poisoned, dtype=np.float64)
    if poisoned.shape != ctx.benign_updates[0].shape:
        raise InputError("poisoned update dimension mismatch")
    return float(np.linalg.norm(ctx.benign_mean - _poisoned_aggregate(ctx, poisoned).aggregate))


def all_copies_selected(ctx: MpaContext, poisoned) -> bool:
    out = _poisoned_aggregate(ctx, np.asarray(poisoned, dtype=np.float64))
    return set(range(ctx.m)) <= set(out.selected_indices or ())


def norm_ppf(p: float) -> float:
    """Inverse standard-normal CDF: Acklam's rational approximation plus one Halley step."""
    if not 0.0 < p < 1.0:
        raise InputError(f"quantile must be in (0, 1), got {p}")
    a = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
         1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
    b = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
         6.680131188771972e01, -1.328068155288572e01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
         -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
         3.754408661907416e00)
    lo = 0.02425
    if p < lo:
        q = math.sqrt(-2 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1)
    elif p <= 1 - lo:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1)
    else:
        q = math.sqrt(-2 * math.log(1 - p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1)
    # Halley refinement brings the ~1e-9 approximation to near machine precision
    e = 0.5 * math.erfc(-x / math.sqrt(2)) - p
    u = e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


def lie_z(n: int, m: int) -> float:
    s = math.floor(n / 2 + 1) - m
    return norm_ppf((n - m - s) / (n - m))


def lie_attack(ctx: MpaContext, z: Optional[float] = None) -> np.ndarray:
    U = np.stack(ctx.benign_updates)
    if z is None:
        if len(U) < 2:
            raise InputError("LIE needs >= 2 benign updates to derive z")
        n = ctx.n_total if ctx.n_total is not None else len(U) + ctx.m
        z = lie_z(n, ctx.m)
    mean = U.mean(axis=0)
    sigma = U.std(axis=0)  # population std
    return mean + z * sigma


def _unit_scale(ctx: MpaContext) -> float:
    return ctx.mean_benign_norm


def _normalize(direction: np.ndarray, length: float) -> np.ndarray:
    norm = np.linalg.norm(direction)
    if norm == 0:
        return direction
    return direction * (length / norm)


def _argmax_deviation(ctx: MpaContext, candidates) -> int:
    best, best_d = 0, -np.inf
    for i, cand in enumerate(candidates):
        d = deviation(ctx, cand)
        if d > best_d:
            best, best_d = i, d
    return best


def stat_opt(ctx: MpaContext, cfg: ProjectConfig) -> np.ndarray:
    """Static direction ``-sign(mean benign)`` with a grid-searched magnitude.

    The direction is rescaled to the mean benign norm, so gamma is measured in
    units of a typical benign update.
    """
    omega = _normalize(-np.sign(ctx.benign_mean), _unit_scale(ctx))
    grid = gamma_grid(cfg.gamma_step, cfg.gamma_step, cfg.gamma_max)
    candidates = [g * omega for g in grid]
    if ctx.target_rule.kind is RuleKind.multi_krum:
        admissible = [cand for cand in candidates if all_copies_selected(ctx, cand)]
        if not admissible:
            raise AttackInfeasible("no grid point gets every poisoned copy selected")
        candidates = admissible
    if not candidates:
        raise AttackInfeasible("empty gamma grid")
    return candidates[_argmax_deviation(ctx, candidates)]


def dyn_opt_direction(ctx: MpaContext, omega_kind) -> np.ndarray:
    kind = OmegaKind(omega_kind)
    mean = ctx.benign_mean
    if kind is OmegaKind.inv_unit:
        norm = np.linalg.norm(mean)
        if norm == 0:
            raise DegenerateDirectionError("benign mean is zero; unit direction undefined")
        direction = -mean / norm
    elif kind is OmegaKind.inv_std:
        direction = -np.std(np.stack(ctx.benign_updates), axis=0)
    else:
        direction = -np.sign(mean)
    return _normalize(direction, _unit_scale(ctx))


def dyn_opt(ctx: MpaContext, cfg: ProjectConfig, omega_kind=OmegaKind.inv_unit) -> np.ndarray:
    mean = ctx.benign_mean
    omega = dyn_opt_direction(ctx, omega_kind)
    grid = gamma_grid(cfg.gamma_step, cfg.gamma_step, cfg.gamma_max)
    if ctx.target_rule.kind is RuleKind.multi_krum:
        for g in grid[::-1]:
            cand = mean + g * omega
            if all_copies_selected(ctx, cand):
                return cand
        return mean.copy()
    candidates = [mean + g * omega for g in grid]
    return candidates[_argmax_deviation(ctx, candidates)]


def f_project(ctx: MpaContext, raw, tau: float, cfg: ProjectConfig) -> np.ndarray:
    """Scale a raw poisoned update so that it survives (and exploits) the target rule."""
    if not tau > 0:
        raise InputError("tau must be positive")
    raw = np.asarray(raw, dtype=np.float64)
    norm = np.linalg.norm(raw)
    if norm == 0 or not np.isfinite(norm):
        raise DegenerateDirectionError("raw poisoned update has zero or non-finite norm")
    base = raw * (tau / norm)
    kind = ctx.target_rule.kind
    if kind is RuleKind.average:
        return AVERAGE_BLOWUP * base
    if kind is RuleKind.norm_bound:
        return base
    grid = gamma_grid(1.0, cfg.gamma_step, cfg.gamma_max)
    if kind is RuleKind.multi_krum:
        for g in grid[::-1]:
            if all_copies_selected(ctx, g * base):
                return g * base
        raise AttackInfeasible("multi-krum rejects the poisoned update at every scale")
    best_g, best_d = 1.0, 0.0
    for g in grid:
        d = deviation(ctx, g * base)
        if d > best_d:
            best_g, best_d = g, d
    return best_g * base


def pga_tau(ctx: MpaContext) -> float:
    """Projection radius: the known norm-bound threshold, else the mean benign norm."""
    rule = ctx.target_rule
    if rule.kind is RuleKind.norm_bound and rule.tau is not None:
        return float(rule.tau)
    return ctx.mean_benign_norm


def pga_raw(ctx: MpaContext, spec: mdl.ModelSpec, adv_data: Dataset, train_cfg: mdl.TrainConfig,
            rng: np.random.Generator) -> np.ndarray:
    """Unprojected poisoned update from stochastic gradient ascent on ``adv_data``."""
    if len(adv_data) == 0:
        raise InputError("PGA needs the compromised clients' data")
    theta = mdl.local_train(spec, ctx.global_params, adv_data,
                            train_cfg.with_direction(mdl.Direction.ascent), rng)
    return theta - np.asarray(ctx.global_params, dtype=np.float64)


def pga(ctx: MpaContext, spec: mdl.ModelSpec, adv_data: Dataset, train_cfg: mdl.TrainConfig,
        cfg: ProjectConfig, rng: np.random.Generator) -> np.ndarray:
    raw = pga_raw(ctx, spec, adv_data, train_cfg, rng)
    return f_project(ctx, raw, pga_tau(ctx), cfg)
