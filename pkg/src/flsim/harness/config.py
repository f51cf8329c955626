"""Experiment config files (YAML) and their expansion into sweep cells."""
from __future__ import annotations

import copy
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import yaml

from flsim import model as mdl
from flsim.aggregation import AggregationRule
from flsim.errors import ConfigError, FlsimError
from flsim.simulator import AttackConfig, AttackKind, DataLayout, FlConfig, ThreatKind, ThreatModel

# (default, description) for every accepted key; gen-config renders this table.
SCHEMA: dict = {
    "fl": {
        "mode": ("cross_device", "cross_device | cross_silo (cross_silo requires n == N)"),
        "N": (200, "total clients (silos in cross_silo mode)"),
        "n": (10, "clients sampled per round"),
        "rounds": (100, "number of FL rounds"),
        "server_lr": (1.0, "server learning rate applied to the aggregate"),
        "lr_decay": (1.0, "per-round multiplier on server_lr"),
        "seed": (0, "master seed (overridden by the seeds axis and --seed)"),
        "alpha": (1.0, "Dirichlet concentration for non-iid partitioning"),
        "users_per_silo": (1, "users per silo (cross_silo only)"),
        "placement": ("concentrated", "cross_silo compromised-user placement: uniform | concentrated"),
        "tau_calibration_rounds": (3, "clean rounds used to calibrate norm_bound tau when unset"),
    },
    "model": {
        "layer_sizes": ([20, 32, 10], "input dim, hidden sizes, number of classes"),
        "activation": ("relu", "relu | tanh"),
    },
    "train": {
        "local_epochs": (1, "local epochs E"),
        "batch_size": (10, "minibatch size"),
        "learning_rate": (0.05, "client learning rate"),
    },
    "rule": {
        "kind": ("average", "average | norm_bound | multi_krum | trimmed_mean | median"),
        "tau": (None, "norm_bound threshold; null = median benign norm from a calibration run"),
        "m_assumed": (1, "attackers the rule is configured to tolerate (multi_krum, trimmed_mean)"),
        "c": (None, "multi_krum selection size; null = n - 2m - 3"),
        "weighted": (False, "average weighted by shard size"),
    },
    "threat": {
        "kind": ("none", "none | whitebox_online_mp | nobox_offline_dp (derived from attack.kind in sweeps)"),
        "M_percent": (0.0, "compromised clients as a percentage of N"),
    },
    "attack": {
        "kind": ("none", "none | lie | stat_opt | dyn_opt | pga | dpa"),
        "z": (None, "LIE coefficient; null = derived from n and m"),
        "omega_kind": ("inv_unit", "DYN-OPT direction: inv_unit | inv_std | inv_sign"),
        "gamma_max": (50.0, "largest scaling factor on the projection grid"),
        "gamma_step": (0.5, "grid step"),
        "project_for": (None, "tailor the projection to this rule instead of the server's"),
        "flip": ("slf", "label flipping for DPA: slf | dlf"),
        "dp_mult": (100.0, "|D_p| per compromised client as a multiple of |D|_avg"),
        "size_cap_mult": (100.0, "cap on |D_p| as a multiple of |D|_avg"),
        "surrogate_rounds": (20, "FedAvg rounds used to train the surrogate"),
        "surrogate_layer_sizes": (None, "surrogate architecture; null = same as the global model"),
        "mkrum_repeats": (10, "Monte-Carlo repeats per candidate |D_p| against multi_krum"),
        "sign_align_trials": (0, "extra Monte-Carlo sign-alignment trials (0 = off)"),
    },
    "data": {
        "source": ("synthetic", "synthetic | csv | idx"),
        "num_classes": (10, "classes (synthetic)"),
        "dim": (20, "feature dimension (synthetic)"),
        "train_per_class": (1000, "training examples per class (synthetic)"),
        "test_per_class": (200, "test examples per class (synthetic)"),
        "separation": (3.0, "norm of cluster means (synthetic)"),
        "paths": ([], "csv: [file]; idx: [images, labels]"),
        "label_column": (-1, "csv label column"),
        "test_fraction": (0.2, "held-out fraction for file sources"),
    },
    "sweep": {
        "attack": ([], "attack kinds to sweep"),
        "rule": ([], "rule kinds to sweep"),
        "M_percent": ([], "compromised percentages"),
        "dp_mult": ([], "|D_p| multipliers"),
        "N": ([], "total clients (varies |D|_avg)"),
        "n": ([], "clients per round"),
        "alpha": ([], "Dirichlet alphas"),
        "seeds": ([], "seeds; empty = [fl.seed]"),
    },
}

AXES = ("attack", "rule", "M_percent", "dp_mult", "N", "n", "alpha", "seeds")


def default_config() -> dict:
    return {sec: {k: copy.deepcopy(v[0]) for k, v in keys.items()} for sec, keys in SCHEMA.items()}


def render_default_config() -> str:
    """Annotated default config; doubles as the key reference."""
    lines = ["# flsim experiment config. Every key is optional; values shown are defaults."]
    for sec, keys in SCHEMA.items():
        lines.append(f"{sec}:")
        for k, (default, doc) in keys.items():
            lines.append(f"  # {doc}")
            lines.append(f"  {k}: {json.dumps(default)}")
    return "\n".join(lines) + "\n"


def _merge(base: dict, raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping of sections", "")
    out = copy.deepcopy(base)
    for sec, body in raw.items():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section {sec!r}", sec)
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError("section must be a mapping", sec)
        for k, v in body.items():
            if k not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {k!r}", f"{sec}/{k}")
            out[sec][k] = v
    return out


@dataclass
class Cell:
    cell_id: int
    fl: FlConfig
    threat: ThreatModel
    layout: DataLayout
    coords: dict


@dataclass
class SweepSpec:
    config: dict
    axes: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        total = 1
        for values in self._axis_values().values():
            total *= len(values)
        return total

    def _axis_values(self) -> dict:
        fl, cfg = self.config["fl"], self.config
        defaults = {
            "attack": [cfg["attack"]["kind"]],
            "rule": [cfg["rule"]["kind"]],
            "M_percent": [cfg["threat"]["M_percent"]],
            "dp_mult": [cfg["attack"]["dp_mult"]],
            "N": [fl["N"]],
            "n": [fl["n"]],
            "alpha": [fl["alpha"]],
            "seeds": [fl["seed"]],
        }
        return {a: list(self.axes.get(a) or defaults[a]) for a in AXES}

    def cells(self) -> Iterator[Cell]:
        values = self._axis_values()
        for cell_id, combo in enumerate(itertools.product(*(values[a] for a in AXES))):
            coords = dict(zip(AXES, combo))
            yield build_cell(self.config, coords, cell_id)

    def cell(self, cell_id: int) -> Cell:
        for c in self.cells():
            if c.cell_id == cell_id:
                return c
        raise ConfigError(f"no cell {cell_id} (sweep has {self.size})", "cell")


def _threat_for(attack_kind: AttackKind, explicit: str) -> ThreatKind:
    if attack_kind is AttackKind.none:
        derived = ThreatKind.none
    elif attack_kind is AttackKind.dpa:
        derived = ThreatKind.nobox_offline_dp
    else:
        derived = ThreatKind.whitebox_online_mp
    # threat.kind may be left at 'none'; anything else must agree with the attack
    if explicit not in (None, "none", derived.value):
        raise ConfigError(f"threat kind {explicit!r} does not fit attack {attack_kind.value!r}", "threat/kind")
    return derived


def build_cell(config: dict, coords: dict, cell_id: int = 0) -> Cell:
    fl, mdl_c, tr, rl, th, at, da = (config[s] for s in ("fl", "model", "train", "rule", "threat", "attack", "data"))
    try:
        spec = mdl.ModelSpec(tuple(mdl_c["layer_sizes"]), mdl_c["activation"])
    except (FlsimError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc), "model") from None
    try:
        attack_kind = AttackKind(coords["attack"])
    except ValueError as exc:
        raise ConfigError(str(exc), "attack/kind") from None
    threat_kind = _threat_for(attack_kind, th["kind"])
    M = float(coords["M_percent"]) if threat_kind is not ThreatKind.none else 0.0
    try:
        rule = AggregationRule(coords["rule"], rl["tau"], int(rl["m_assumed"]), rl["c"], bool(rl["weighted"]))
        attack = AttackConfig(
            kind=attack_kind, z=at["z"], omega_kind=at["omega_kind"], gamma_max=float(at["gamma_max"]),
            gamma_step=float(at["gamma_step"]), project_for=at["project_for"], flip=at["flip"],
            dp_mult=float(coords["dp_mult"]), size_cap_mult=float(at["size_cap_mult"]),
            surrogate_rounds=int(at["surrogate_rounds"]), surrogate_layer_sizes=at["surrogate_layer_sizes"],
            mkrum_repeats=int(at["mkrum_repeats"]), sign_align_trials=int(at["sign_align_trials"]),
        )
        threat = ThreatModel(threat_kind, M, attack)
        train_cfg = mdl.TrainConfig(int(tr["local_epochs"]), int(tr["batch_size"]), float(tr["learning_rate"]))
        flc = FlConfig(
            spec=spec, mode=fl["mode"], N=int(coords["N"]), n=int(coords["n"]), rounds=int(fl["rounds"]),
            server_lr=float(fl["server_lr"]), lr_decay=float(fl["lr_decay"]), train_cfg=train_cfg, rule=rule,
            seed=int(coords["seeds"]), alpha=float(coords["alpha"]), users_per_silo=int(fl["users_per_silo"]),
            placement=fl["placement"], tau_calibration_rounds=int(fl["tau_calibration_rounds"]),
        )
        layout = DataLayout(
            source=da["source"], num_classes=int(da["num_classes"]), dim=int(da["dim"]),
            train_per_class=int(da["train_per_class"]), test_per_class=int(da["test_per_class"]),
            separation=float(da["separation"]), paths=tuple(da["paths"]), label_column=int(da["label_column"]),
            test_fraction=float(da["test_fraction"]),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), "config") from None
    return Cell(cell_id, flc, threat, layout, coords)


def load_config_text(text: str, source: str = "<string>") -> SweepSpec:
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else "?"
        raise ConfigError(f"{source}: parse error at line {line}: {getattr(exc, 'problem', exc)}") from None
    config = _merge(default_config(), raw)
    axes = {a: config["sweep"][a] for a in AXES if config["sweep"].get(a)}
    spec = SweepSpec(config, axes)
    # build every cell once so semantic errors surface before anything runs
    for _ in spec.cells():
        pass
    return spec


def parse_config(path) -> SweepSpec:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return load_config_text(path.read_text(), str(path))


def apply_overrides(spec: SweepSpec, seed: Optional[int] = None, rounds: Optional[int] = None) -> SweepSpec:
    config = copy.deepcopy(spec.config)
    axes = dict(spec.axes)
    if seed is not None:
        config["fl"]["seed"] = int(seed)
        axes.pop("seeds", None)
        config["sweep"]["seeds"] = []
    if rounds is not None:
        config["fl"]["rounds"] = int(rounds)
    return SweepSpec(config, axes)
