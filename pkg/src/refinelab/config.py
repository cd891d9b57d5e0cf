"""Experiment configuration: YAML file -> validated ExperimentConfig.

Schema (every section and key is optional; unknown keys are rejected):

    experiment_id: str
    out: output directory
    seeds:      {data, trigger, poison, classifier, refine, mapping}
    dataset:    {name, root, format, train_split, test_split, n_train, n_test}
    attack:     {variant: badnets|blended|rotation, target_label, poison_rate,
                 patch_size, anchor, ratio, angle}
    classifier: {arch, arch_kwargs, epochs, batch_size, lr, momentum, weight_decay,
                 decay_epochs, decay_factor}
    refine:     {lam, tau, lr, momentum, weight_decay, epochs, batch_size,
                 decay_epochs, decay_factor, optimizer, width, depth,
                 normalize_embeddings, supcon_reduction, unlabeled_fraction}
    ablation:   {no_hrf, no_scl}
    sweep:      {pad_sizes}
    adaptive:   {gamma, inner_steps}
    blackbox:   {surrogate_arch, url, query_batch, distill: <classifier keys>}
    diagnostics: {max_points}

Precedence is flags > config file > defaults. Relative dataset roots resolve
against $REFINELAB_DATA_ROOT when it is set.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__
from .attacks import PoisonPlan, TriggerSpec, badnets_trigger, blend_trigger, rotation_trigger
from .classifier import TrainConfig
from .data import DatasetDescriptor
from .refine import RefineConfig

DATA_ROOT_ENV = "REFINELAB_DATA_ROOT"
ATTACKS = ("badnets", "blended", "rotation")


class ConfigError(ValueError):
    """Invalid configuration; `keys` lists the offending dotted keys."""

    def __init__(self, keys: list[str], detail: str):
        self.keys = keys
        super().__init__(f"invalid config keys: {', '.join(keys)}\n{detail}")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Seeds(_Section):
    data: int = 0
    trigger: int = 0
    poison: int = 0
    classifier: int = 0
    refine: int = 0
    mapping: int = 0


class DatasetSection(_Section):
    name: str = "synthetic-shapes"
    root: str | None = None
    format: Literal["synthetic", "folders", "cifar", "auto"] = "synthetic"
    train_split: str = "train"
    test_split: str = "test"
    n_train: int = Field(5000, gt=0)
    n_test: int = Field(1000, gt=0)


class AttackSection(_Section):
    variant: Literal["badnets", "blended", "rotation"] = "badnets"
    target_label: int = Field(0, ge=0)
    poison_rate: float = Field(0.1, gt=0, le=1)
    patch_size: int = Field(3, gt=0)
    anchor: tuple[int, int] = (-3, -3)
    ratio: float = Field(0.1, gt=0, le=1)
    angle: float = 16.0


class TrainSection(_Section):
    arch: str = "resnet_small"
    arch_kwargs: dict = {}
    epochs: int = Field(150, ge=0)
    batch_size: int = Field(128, gt=0)
    lr: float = Field(0.1, gt=0)
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(5e-4, ge=0)
    decay_epochs: list[int] = [100, 130]
    decay_factor: float = Field(0.1, gt=0)

    @model_validator(mode="after")
    def _milestones(self):
        if self.epochs and any(e <= 0 or e >= self.epochs for e in self.decay_epochs):
            raise ValueError(f"decay_epochs {self.decay_epochs} must lie in (0, epochs={self.epochs})")
        return self


class RefineSection(_Section):
    lam: float = Field(0.5, ge=0)
    tau: float = Field(0.1, gt=0)
    lr: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(5e-4, ge=0)
    epochs: int = Field(150, ge=0)
    batch_size: int = Field(256, gt=1)
    decay_epochs: list[int] = [100, 130]
    decay_factor: float = Field(0.8, gt=0)
    optimizer: Literal["sgd", "adam"] = "sgd"
    width: int = Field(32, gt=0)
    depth: int = Field(2, ge=1)
    normalize_embeddings: bool = True
    supcon_reduction: Literal["sum", "mean"] = "sum"
    unlabeled_fraction: float = Field(0.5, gt=0, le=1)


class AblationSection(_Section):
    no_hrf: bool = False
    no_scl: bool = False


class SweepSection(_Section):
    pad_sizes: list[int] = [0, 2, 4, 6]


class AdaptiveSection(_Section):
    gamma: float = Field(0.1, ge=0)
    inner_steps: int = Field(10, ge=0)


class BlackboxSection(_Section):
    surrogate_arch: str = "resnet_small"
    url: str | None = None
    query_batch: int = Field(500, gt=0)
    distill: TrainSection = TrainSection()


class DiagnosticsSection(_Section):
    max_points: int = Field(256, gt=0)


class ExperimentConfig(_Section):
    experiment_id: str = "experiment"
    out: str = "runs/experiment"
    seeds: Seeds = Seeds()
    dataset: DatasetSection = DatasetSection()
    attack: AttackSection = AttackSection()
    classifier: TrainSection = TrainSection()
    refine: RefineSection = RefineSection()
    ablation: AblationSection = AblationSection()
    sweep: SweepSection = SweepSection()
    adaptive: AdaptiveSection = AdaptiveSection()
    blackbox: BlackboxSection = BlackboxSection()
    diagnostics: DiagnosticsSection = DiagnosticsSection()

    # ---------------------------------------------------------------- builders

    def descriptor(self) -> DatasetDescriptor:
        d = self.dataset
        root = d.root
        base = os.environ.get(DATA_ROOT_ENV)
        if root is None and base and d.format != "synthetic":
            root = base
        elif root is not None and base and not Path(root).is_absolute():
            root = str(Path(base) / root)
        return DatasetDescriptor(d.name, root, d.format, d.train_split, d.test_split,
                                 d.n_train, d.n_test, self.seeds.data)

    def trigger(self, image_shape) -> TriggerSpec:
        a = self.attack
        if a.variant == "badnets":
            return badnets_trigger(a.patch_size, image_shape[-1], seed=self.seeds.trigger, anchor=a.anchor)
        if a.variant == "blended":
            return blend_trigger(tuple(image_shape), a.ratio, seed=self.seeds.trigger)
        return rotation_trigger(a.angle)

    def plan(self, image_shape) -> PoisonPlan:
        return PoisonPlan(self.trigger(image_shape), self.attack.target_label, self.attack.poison_rate)

    def train_config(self, section: TrainSection | None = None, seed: int | None = None) -> TrainConfig:
        s = section or self.classifier
        return TrainConfig(s.epochs, s.batch_size, s.lr, s.momentum, s.weight_decay, list(s.decay_epochs),
                           s.decay_factor, self.seeds.classifier if seed is None else seed)

    def refine_config(self, no_scl: bool | None = None) -> RefineConfig:
        r = self.refine
        no_scl = self.ablation.no_scl if no_scl is None else no_scl
        return RefineConfig(r.lam, r.tau, r.lr, r.momentum, r.weight_decay, r.epochs, r.batch_size,
                            list(r.decay_epochs), r.decay_factor, r.optimizer, r.width, r.depth,
                            r.normalize_embeddings, r.supcon_reduction, not no_scl, self.seeds.refine)

    # ---------------------------------------------------------------- provenance

    def echo(self) -> dict:
        return self.model_dump(mode="json")

    def config_hash(self) -> str:
        """Short digest of everything except the output directory."""
        body = self.echo()
        body.pop("out")
        blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def section_hash(self, *sections: str, **extra) -> str:
        """Digest of selected sections, used to decide whether a checkpoint is reusable."""
        body = self.echo()
        blob = json.dumps({**{s: body[s] for s in sections}, **extra}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.config_hash(), "seeds": self.seeds.model_dump(), "code_version": __version__}


def _set_dotted(raw: dict, key: str, value):
    node = raw
    *parents, leaf = key.split(".")
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError([key], f"cannot override {key}: {p} is not a section")
    node[leaf] = value


def _trim_milestones(raw: dict, section: list[str], epochs: int):
    node = raw
    for p in section:
        node = node.setdefault(p, {})
    defaults = TrainSection().decay_epochs if section[-1] != "refine" else RefineSection().decay_epochs
    node["decay_epochs"] = [e for e in node.get("decay_epochs", defaults) if 0 < e < epochs]


def flag_overrides(seed=None, out=None, attack=None, pad_sizes=None, lam=None, tau=None,
                   no_hrf=False, no_scl=False, epochs=None) -> dict:
    """Translate CLI flags into dotted config keys. `None`/False means not given."""
    o = {}
    if seed is not None:
        for k in Seeds.model_fields:
            o[f"seeds.{k}"] = seed
    if out is not None:
        o["out"] = str(out)
    if attack is not None:
        o["attack.variant"] = attack
    if pad_sizes is not None:
        o["sweep.pad_sizes"] = list(pad_sizes)
    if lam is not None:
        o["refine.lam"] = lam
    if tau is not None:
        o["refine.tau"] = tau
    if no_hrf:
        o["ablation.no_hrf"] = True
    if no_scl:
        o["ablation.no_scl"] = True
    if epochs is not None:
        for k in ("classifier.epochs", "refine.epochs", "blackbox.distill.epochs"):
            o[k] = epochs
    return o


def build_config(raw: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    raw = json.loads(json.dumps(raw or {}))
    if not isinstance(raw, dict):
        raise ConfigError(["<root>"], "config file must hold a mapping")
    for key, value in (overrides or {}).items():
        _set_dotted(raw, key, value)
        if key.endswith(".epochs"):
            # an epoch override drops schedule milestones it would cut off
            _trim_milestones(raw, key.split(".")[:-1], value)
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        keys = sorted({".".join(str(p) for p in e["loc"]) or "<root>" for e in exc.errors()})
        raise ConfigError(keys, str(exc)) from None


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(["<file>"], f"{path}: {exc}") from None
    return build_config(raw, overrides)
