"""FL orchestration under a configured threat model.

Randomness is drawn from hashed substreams ``(seed, tag, round, client)`` so a
clean run and an attacked run with the same seed share every benign draw.
The adversary only ever consumes its own tags.
"""
from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from flsim import model as mdl
from flsim.aggregation import AggregationRule, RuleKind, aggregate
from flsim.attacks import data_poisoning as dp
from flsim.attacks import model_poisoning as mp
from flsim.data import transforms as tf
from flsim.data.dataset import Dataset, concat
from flsim.data.loaders import load_csv, load_idx
from flsim.errors import AttackInfeasible, ConfigError, InputError, NumericError
from flsim.rng import substream

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    cross_device = "cross_device"
    cross_silo = "cross_silo"


class ThreatKind(str, enum.Enum):
    none = "none"
    whitebox_online_mp = "whitebox_online_mp"
    nobox_offline_dp = "nobox_offline_dp"


class AttackKind(str, enum.Enum):
    none = "none"
    lie = "lie"
    stat_opt = "stat_opt"
    dyn_opt = "dyn_opt"
    pga = "pga"
    dpa = "dpa"


MP_ATTACKS = {AttackKind.lie, AttackKind.stat_opt, AttackKind.dyn_opt, AttackKind.pga}


class Placement(str, enum.Enum):
    uniform = "uniform"
    concentrated = "concentrated"


@dataclass(frozen=True)
class AttackConfig:
    kind: AttackKind = AttackKind.none
    # model poisoning
    z: Optional[float] = None
    omega_kind: mp.OmegaKind = mp.OmegaKind.inv_unit
    gamma_max: float = 50.0
    gamma_step: float = 0.5
    project_for: Optional[RuleKind] = None  # tailor the projection to this rule instead of the server's
    # data poisoning
    flip: dp.FlipKind = dp.FlipKind.slf
    dp_mult: float = 100.0  # |D_p| = dp_mult x |D|_avg
    size_cap_mult: float = 100.0
    surrogate_rounds: int = 20
    surrogate_layer_sizes: Optional[tuple] = None
    mkrum_repeats: int = 10
    sign_align_trials: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        object.__setattr__(self, "omega_kind", mp.OmegaKind(self.omega_kind))
        object.__setattr__(self, "flip", dp.FlipKind(self.flip))
        if self.project_for is not None:
            object.__setattr__(self, "project_for", RuleKind(self.project_for))
        if self.surrogate_layer_sizes is not None:
            object.__setattr__(self, "surrogate_layer_sizes", tuple(self.surrogate_layer_sizes))
        if self.dp_mult <= 0:
            raise ConfigError("dp_mult must be positive", "attack/dp_mult")

    @property
    def project(self) -> mp.ProjectConfig:
        return mp.ProjectConfig(self.gamma_max, self.gamma_step)


@dataclass(frozen=True)
class ThreatModel:
    kind: ThreatKind = ThreatKind.none
    M_percent: float = 0.0
    attack: AttackConfig = field(default_factory=AttackConfig)

    def __post_init__(self):
        object.__setattr__(self, "kind", ThreatKind(self.kind))
        if self.M_percent < 0 or self.M_percent > 100:
            raise ConfigError("M_percent must lie in [0, 100]", "threat/M_percent")
        if self.kind is ThreatKind.none and self.M_percent != 0:
            raise ConfigError("threat kind 'none' requires M_percent = 0", "threat/M_percent")
        kind = self.attack.kind
        if self.kind is ThreatKind.whitebox_online_mp and kind not in MP_ATTACKS:
            raise ConfigError(f"{kind.value} is not a model-poisoning attack", "threat/attack/kind")
        if self.kind is ThreatKind.nobox_offline_dp and kind is not AttackKind.dpa:
            raise ConfigError("nobox_offline_dp requires attack kind 'dpa'", "threat/attack/kind")


@dataclass(frozen=True)
class FlConfig:
    spec: mdl.ModelSpec
    mode: Mode = Mode.cross_device
    N: int = 200
    n: int = 10
    rounds: int = 100
    server_lr: float = 1.0
    lr_decay: float = 1.0
    train_cfg: mdl.TrainConfig = field(default_factory=mdl.TrainConfig)
    rule: AggregationRule = field(default_factory=AggregationRule)
    seed: int = 0
    alpha: float = 1.0
    users_per_silo: int = 1
    placement: Placement = Placement.concentrated
    tau_calibration_rounds: int = 3

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "placement", Placement(self.placement))
        if self.N < 1:
            raise ConfigError("N must be >= 1", "fl/N")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1", "fl/rounds")
        if self.mode is Mode.cross_silo and self.n != self.N:
            raise ConfigError("cross_silo selects every client each round (n must equal N)", "mode/n")
        if not 1 <= self.n <= self.N:
            raise ConfigError("need 1 <= n <= N", "fl/n")
        if self.users_per_silo < 1:
            raise ConfigError("users_per_silo must be >= 1", "fl/users_per_silo")


@dataclass(frozen=True)
class DataLayout:
    """Where the train/test data comes from.

    ``source='synthetic'`` draws a Gaussian mixture; ``'csv'`` and ``'idx'``
    read files (``test_fraction`` of the rows are held out).
    """

    source: str = "synthetic"
    num_classes: int = 10
    dim: int = 20
    train_per_class: int = 1000
    test_per_class: int = 200
    separation: float = 3.0
    paths: tuple = ()
    label_column: int = -1
    test_fraction: float = 0.2

    def build(self, seed: int) -> tuple:
        rng = substream(seed, "data")
        if self.source == "synthetic":
            full = tf.synth_mixture(self.num_classes, self.dim, self.train_per_class + self.test_per_class,
                                    self.separation, rng)
            is_test = np.zeros(len(full), dtype=bool)
            per = self.train_per_class + self.test_per_class
            for c in range(self.num_classes):
                is_test[c * per + self.train_per_class:(c + 1) * per] = True
            return full.subset(np.flatnonzero(~is_test)), full.subset(np.flatnonzero(is_test))
        if self.source == "csv":
            full = load_csv(self.paths[0], self.label_column)
        elif self.source == "idx":
            full = load_idx(self.paths[0], self.paths[1])
        else:
            raise ConfigError(f"unknown data source {self.source!r}", "data/source")
        order = rng.permutation(len(full))
        n_test = max(1, int(round(self.test_fraction * len(full))))
        return full.subset(np.sort(order[n_test:])), full.subset(np.sort(order[:n_test]))


@dataclass
class RoundRecord:
    t: int
    selected: list
    compromised_selected: int
    accuracy: float
    mean_benign_norm: float
    aggregate_norm: float
    attack_fallback: bool = False
    diverged: bool = False


@dataclass
class ExperimentResult:
    records: list
    A_theta_star: float
    config: dict
    wallclock: float
    diverged_at: Optional[int] = None
    poisoned_fingerprints: dict = field(default_factory=dict)
    final_fingerprints: dict = field(default_factory=dict)
    final_params: Optional[np.ndarray] = None

    @property
    def accuracies(self) -> list:
        return [r.accuracy for r in self.records]


def compromised_count(M_percent: float, total: int) -> int:
    # half-up rounding; Python's round() is banker's rounding
    return int(math.floor(M_percent * total / 100.0 + 0.5))


def sample_clients(N: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` distinct ids from ``range(N)``, uniformly without replacement, sorted."""
    if not 1 <= n <= N:
        raise ConfigError(f"cannot sample n={n} of N={N} clients", "fl/n")
    return np.sort(rng.choice(N, size=n, replace=False))


def place_compromised_cross_silo(N_silos: int, N_users: int, M_percent: float, mode,
                                 rng: Optional[np.random.Generator] = None) -> list:
    """Per-silo compromised-user counts. ``rng`` is accepted for interface symmetry; placement is deterministic."""
    if N_silos < 1 or N_users % N_silos:
        raise ConfigError("users must divide evenly across silos", "fl/users_per_silo")
    capacity = N_users // N_silos
    total = compromised_count(M_percent, N_users)
    if total > N_users:
        raise ConfigError("more compromised users than users", "threat/M_percent")
    counts = [0] * N_silos
    if Placement(mode) is Placement.uniform:
        base, extra = divmod(total, N_silos)
        counts = [base + (1 if s < extra else 0) for s in range(N_silos)]
    else:
        left = total
        for s in range(N_silos):
            counts[s] = min(capacity, left)
            left -= counts[s]
    return counts


def attack_impact(clean: ExperimentResult, attacked: ExperimentResult) -> float:
    """``A_theta - A*_theta``: drop in best accuracy caused by the attack."""
    a, b = dict(clean.config), dict(attacked.config)
    a.pop("threat", None)
    b.pop("threat", None)
    if a != b:
        raise InputError("results differ in more than the threat model")
    return clean.A_theta_star - attacked.A_theta_star


# --------------------------------------------------------------------------- setup


@dataclass
class _State:
    config: FlConfig
    threat: ThreatModel
    train: Dataset
    test: Dataset
    client_data: list  # what each client trains on (poisoned for offline-DP compromised clients)
    benign_data: list  # true shards, used by the model-poisoning adversary
    compromised: list  # sorted client ids
    rule: AggregationRule
    params: np.ndarray
    d_avg: float
    fingerprints: dict = field(default_factory=dict)

    @property
    def compromised_set(self):
        return set(self.compromised)


def _config_echo(config: FlConfig, threat: ThreatModel, layout: DataLayout) -> dict:
    def plain(obj):
        if isinstance(obj, enum.Enum):
            return obj.value
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        return obj

    return {"fl": plain(asdict(config)), "threat": plain(asdict(threat)), "data": plain(asdict(layout))}


def _partition(config: FlConfig, train: Dataset):
    users = config.N * (config.users_per_silo if config.mode is Mode.cross_silo else 1)
    part = tf.dirichlet_partition(train, users, config.alpha, substream(config.seed, "partition"))
    return part.shards


def _calibrate_tau(config: FlConfig, client_data: list, params: np.ndarray) -> float:
    """Median benign update norm over a short clean average-rule run."""
    spec = config.spec
    norms = []
    theta = params.copy()
    for t in range(config.tau_calibration_rounds):
        ids = _select(config, t)
        ups = [mdl.client_update(spec, theta, client_data[k], config.train_cfg,
                                 substream(config.seed, "calib", t, int(k)))
               for k in ids if len(client_data[k])]
        if not ups:
            continue
        norms.extend(float(np.linalg.norm(u)) for u in ups)
        theta = theta + config.server_lr * np.mean(ups, axis=0)
    if not norms or np.median(norms) <= 0:
        raise ConfigError("could not calibrate norm_bound tau", "rule/tau")
    return float(np.median(norms))


def _select(config: FlConfig, t: int) -> np.ndarray:
    if config.mode is Mode.cross_silo:
        return np.arange(config.N)
    return sample_clients(config.N, config.n, substream(config.seed, "sample", t))


def _expected_m(config: FlConfig, threat: ThreatModel) -> int:
    return max(1, compromised_count(threat.M_percent, config.n))


def _surrogate_spec(config: FlConfig, attack: AttackConfig) -> mdl.ModelSpec:
    if attack.surrogate_layer_sizes is None:
        return config.spec
    return mdl.ModelSpec(attack.surrogate_layer_sizes, config.spec.activation)


def _build_poison(config: FlConfig, threat: ThreatModel, rule: AggregationRule,
                  sources: list, d_avg: float) -> list:
    """Offline DPA: one poisoned set per compromised source, built once before round 0."""
    attack = threat.attack
    rng = substream(config.seed, "dpa")
    needs_surrogate = attack.flip is dp.FlipKind.dlf or rule.kind is RuleKind.multi_krum
    surrogate = None
    if needs_surrogate:
        surrogate = dp.train_surrogate(sources, _surrogate_spec(config, attack), attack.surrogate_rounds,
                                       config.train_cfg, substream(config.seed, "surrogate"))
    size = max(1, int(round(attack.dp_mult * d_avg)))
    cap = max(1, int(math.floor(attack.size_cap_mult * d_avg)))
    plan = dp.DpaPlan(attack.flip, size, cap, surrogate.spec if surrogate else None)
    if rule.kind is RuleKind.multi_krum and config.mode is Mode.cross_device:
        est_spec, theta_hat = surrogate.spec, surrogate.params
        if est_spec != config.spec:
            # tuning evaluates updates of the true architecture; fall back to a fresh estimate
            est_spec = config.spec
            theta_hat = dp.train_surrogate(sources, config.spec, attack.surrogate_rounds, config.train_cfg,
                                           substream(config.seed, "surrogate-global")).params
        pooled = concat([s for s in sources if len(s)])
        m = _expected_m(config, threat)
        chunk = max(1, int(round(d_avg)))
        est_rng = substream(config.seed, "dpa-estimates")
        estimates = []
        for i in range(config.n - m):
            idx = est_rng.choice(len(pooled), size=min(chunk, len(pooled)), replace=False)
            estimates.append(mdl.client_update(est_spec, theta_hat, pooled.subset(np.sort(idx)),
                                               config.train_cfg, substream(config.seed, "dpa-est-train", i)))
        tuned = dp.tune_dp_mkrum(sources, estimates, d_avg, est_spec, theta_hat, rule, attack.mkrum_repeats,
                                 rng, m=m, flip=attack.flip, surrogate=surrogate, train_cfg=config.train_cfg)
        poison = [tuned.dataset] * len(sources)
    elif rule.kind in (RuleKind.trimmed_mean, RuleKind.median):
        poison = dp.build_dpa_trmean(sources, plan, surrogate, rng)
    else:
        poison = dp.build_dpa_avg_normb(sources, plan, surrogate, rng)

    if attack.sign_align_trials > 0:
        sur = surrogate or dp.train_surrogate(sources, config.spec, attack.surrogate_rounds, config.train_cfg,
                                              substream(config.seed, "surrogate"))
        if sur.spec == config.spec:
            pooled = concat([s for s in sources if len(s)])
            ests = [mdl.client_update(config.spec, sur.params, s, config.train_cfg,
                                      substream(config.seed, "sign-est", i))
                    for i, s in enumerate(sources) if len(s)]
            target = -np.sign(np.mean(ests, axis=0))
            flipped_pool = dp.flip_with(attack.flip, pooled, surrogate)
            aligned = dp.mc_sign_align(dp.subset_sampler(flipped_pool, plan), len(poison[0]), target,
                                       attack.sign_align_trials, config.spec, sur.params, config.train_cfg,
                                       substream(config.seed, "sign-align"))
            poison = [aligned.dataset] * len(sources)
    return poison


def setup(config: FlConfig, threat: ThreatModel, layout: DataLayout) -> _State:
    train, test = layout.build(config.seed)
    if train.dim != config.spec.input_dim or train.num_classes != config.spec.num_classes:
        raise ConfigError("model spec does not match the data (input dim / classes)", "model/layer_sizes")
    shards = _partition(config, train)
    params = mdl.init_params(config.spec, substream(config.seed, "init"))
    rule = config.rule
    attack_active = threat.kind is not ThreatKind.none

    if config.mode is Mode.cross_device:
        benign = list(shards)
        d_avg = float(np.mean([len(s) for s in shards]))
        n_bad = compromised_count(threat.M_percent, config.N) if attack_active else 0
        compromised = sorted(int(i) for i in substream(config.seed, "compromised")
                             .choice(config.N, size=n_bad, replace=False)) if n_bad else []
        client_data = list(benign)
        fingerprints = {}
        if threat.kind is ThreatKind.nobox_offline_dp and compromised:
            sources = [benign[k] for k in compromised]
            poison = _build_poison(config, threat, rule, sources, d_avg)
            for k, p in zip(compromised, poison):
                client_data[k] = p
                fingerprints[k] = p.fingerprint()
    else:
        U = config.users_per_silo
        d_avg = float(np.mean([len(s) for s in shards]))
        n_users = config.N * U
        counts = (place_compromised_cross_silo(config.N, n_users, threat.M_percent, config.placement)
                  if attack_active else [0] * config.N)
        compromised_users = [s * U + j for s in range(config.N) for j in range(counts[s])]
        user_data = list(shards)
        fingerprints = {}
        if threat.kind is ThreatKind.nobox_offline_dp and compromised_users:
            sources = [shards[u] for u in compromised_users]
            poison = _build_poison(config, threat, rule, sources, d_avg)
            for u, p in zip(compromised_users, poison):
                user_data[u] = p
        benign = [concat(shards[s * U:(s + 1) * U]) for s in range(config.N)]
        client_data = [concat(user_data[s * U:(s + 1) * U]) for s in range(config.N)]
        compromised = [s for s in range(config.N) if counts[s] > 0]
        for s in compromised:
            fingerprints[s] = client_data[s].fingerprint()

    if rule.kind is RuleKind.norm_bound and rule.tau is None:
        # calibrated on benign shards only, so clean and attacked twins share tau
        rule = rule.with_tau(_calibrate_tau(config, benign, params))
    return _State(config, threat, train, test, client_data, benign, compromised, rule, params, d_avg,
                  fingerprints)


# --------------------------------------------------------------------------- rounds


def _craft_mp(state: _State, t: int, m: int, selected_bad: list, honest: dict) -> np.ndarray:
    """Poisoned update for this round, or raise AttackInfeasible."""
    config, attack = state.config, state.threat.attack
    spec = config.spec
    # adversary's benign view: its own clients' honest updates, selected ones first
    budget = max(1, config.n - m)
    views = [honest[k] for k in selected_bad]
    for k in state.compromised:
        if len(views) >= budget:
            break
        if k in honest or not len(state.benign_data[k]):
            continue
        views.append(mdl.client_update(spec, state.params, state.benign_data[k], config.train_cfg,
                                       substream(config.seed, "adv-train", t, k)))
    views = views[:budget]
    target = state.rule
    if attack.project_for is not None:
        target = AggregationRule(attack.project_for, state.rule.tau, state.rule.m_assumed, state.rule.c)
    ctx = mp.MpaContext(state.params, views, m, target, n_total=config.n)
    try:
        if attack.kind is AttackKind.lie:
            return mp.lie_attack(ctx, attack.z)
        if attack.kind is AttackKind.stat_opt:
            return mp.stat_opt(ctx, attack.project)
        if attack.kind is AttackKind.dyn_opt:
            return mp.dyn_opt(ctx, attack.project, attack.omega_kind)
        adv = concat([state.benign_data[k] for k in state.compromised if len(state.benign_data[k])])
        return mp.pga(ctx, spec, adv, config.train_cfg, attack.project, substream(config.seed, "pga", t))
    except (ConfigError, InputError) as exc:
        # too few views for the target rule, degenerate directions, ...
        raise AttackInfeasible(str(exc)) from exc


def run_round(state: _State, t: int):
    """One FL round; returns ``(new_params, RoundRecord)`` without mutating ``state``."""
    config, threat = state.config, state.threat
    spec = config.spec
    selected = [int(k) for k in _select(config, t)]
    bad = state.compromised_set
    selected_bad = [k for k in selected if k in bad]
    updates, weights, honest = {}, {}, {}
    for k in selected:
        data = state.client_data[k]
        weights[k] = max(len(data), 1)
        if not len(data):
            # a client with no data returns a zero update
            updates[k] = np.zeros(spec.num_params)
            continue
        updates[k] = mdl.client_update(spec, state.params, data, config.train_cfg,
                                       substream(config.seed, "train", t, k))
    fallback = False
    if threat.kind is ThreatKind.whitebox_online_mp and selected_bad:
        honest = {k: updates[k] for k in selected_bad}
        try:
            poisoned = _craft_mp(state, t, len(selected_bad), selected_bad, honest)
            for k in selected_bad:
                updates[k] = poisoned
        except AttackInfeasible as exc:
            log.debug("round %d: attack infeasible (%s); compromised clients act honestly", t, exc)
            fallback = True
    ordered = [updates[k] for k in selected]
    outcome = aggregate(state.rule, ordered, [weights[k] for k in selected])
    lr = config.server_lr * config.lr_decay ** t
    with np.errstate(over="ignore", invalid="ignore"):
        new_params = state.params + lr * outcome.aggregate
        agg_norm = float(np.linalg.norm(outcome.aggregate))
    diverged = not np.all(np.isfinite(new_params))
    benign_norms = [float(np.linalg.norm(updates[k])) for k in selected if k not in bad]
    record = RoundRecord(
        t=t,
        selected=selected,
        compromised_selected=len(selected_bad),
        accuracy=mdl.evaluate(spec, new_params, state.test),
        mean_benign_norm=float(np.mean(benign_norms)) if benign_norms else 0.0,
        aggregate_norm=agg_norm,
        attack_fallback=fallback,
        diverged=diverged,
    )
    return new_params, record


def run_experiment(config: FlConfig, threat: ThreatModel, layout: DataLayout) -> ExperimentResult:
    start = time.perf_counter()
    state = setup(config, threat, layout)
    records = []
    diverged_at = None
    for t in range(config.rounds):
        if diverged_at is not None:
            # a non-finite model stays non-finite; training on it is meaningless
            prev = records[-1]
            selected = [int(k) for k in _select(config, t)]
            records.append(replace(prev, t=t, selected=selected,
                                   compromised_selected=sum(k in state.compromised_set for k in selected),
                                   mean_benign_norm=float("nan"),
                                   aggregate_norm=float("nan"), attack_fallback=False))
            continue
        try:
            new_params, rec = run_round(state, t)
        except NumericError as exc:
            # the model is finite but overflows float64 when trained: it has diverged
            log.warning("round %d: %s", t, exc)
            new_params = state.params
            selected = [int(k) for k in _select(config, t)]
            rec = RoundRecord(t, selected, sum(k in state.compromised_set for k in selected),
                              mdl.evaluate(config.spec, state.params, state.test),
                              float("nan"), float("nan"), diverged=True)
        records.append(rec)
        state.params = new_params
        if rec.diverged:
            diverged_at = t
            log.warning("global model diverged at round %d", t)
    final = {k: state.client_data[k].fingerprint() for k in state.fingerprints}
    return ExperimentResult(
        records=records,
        A_theta_star=max(r.accuracy for r in records),
        config=_config_echo(config, threat, layout),
        wallclock=time.perf_counter() - start,
        diverged_at=diverged_at,
        poisoned_fingerprints=dict(state.fingerprints),
        final_fingerprints=final,
        final_params=state.params,
    )
