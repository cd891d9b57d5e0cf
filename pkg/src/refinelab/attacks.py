"""Trigger injection, poisoned-dataset construction and the adaptive backdoor trainer."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import LabeledDataset, save_folders

log = logging.getLogger(__name__)

VARIANTS = ("patch", "blend", "rotation")


@dataclass
class TriggerSpec:
    """One of three trigger families.

    patch: `pattern` (h, w, C) stamped with its top-left corner at `anchor`
        (negative anchors count from the bottom/right edge).
    blend: `pattern` (H, W, C) mixed in as (1 - ratio) * x + ratio * pattern.
    rotation: rotate by `angle` degrees about the center, zero fill.
    """

    variant: str
    pattern: np.ndarray | None = None
    anchor: tuple[int, int] = (-3, -3)
    ratio: float = 0.1
    angle: float = 16.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown trigger variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant in ("patch", "blend"):
            if self.pattern is None:
                raise ValueError(f"{self.variant} trigger needs a pattern image")
            self.pattern = np.asarray(self.pattern, dtype=np.float32)
            if self.pattern.ndim == 2:
                self.pattern = self.pattern[..., None]
            if self.pattern.min() < 0 or self.pattern.max() > 1:
                raise ValueError("trigger pattern pixels must lie in [0, 1]")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"blend ratio must lie in [0, 1], got {self.ratio}")
        self.anchor = tuple(int(a) for a in self.anchor)

    def to_dict(self) -> dict:
        d = {"variant": self.variant}
        if self.variant == "patch":
            d.update(pattern=self.pattern.tolist(), anchor=list(self.anchor))
        elif self.variant == "blend":
            d.update(pattern=self.pattern.tolist(), ratio=self.ratio)
        else:
            d.update(angle=self.angle)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        d = dict(d)
        if d.get("pattern") is not None:
            d["pattern"] = np.asarray(d["pattern"], dtype=np.float32)
        return cls(**d)


def badnets_trigger(size: int = 3, channels: int = 3, seed: int = 0, anchor=None) -> TriggerSpec:
    """Seeded random size x size square in the bottom-right corner."""
    rng = np.random.default_rng(seed)
    pattern = rng.integers(0, 2, size=(size, size, channels)).astype(np.float32)
    return TriggerSpec("patch", pattern=pattern, anchor=anchor or (-size, -size))


def blend_trigger(shape=(32, 32, 3), ratio: float = 0.1, seed: int = 0, pattern=None) -> TriggerSpec:
    """Blend trigger. Without a user pattern, a fixed seeded uniform-noise image is used."""
    if pattern is None:
        pattern = np.random.default_rng(seed).uniform(0.0, 1.0, size=shape).astype(np.float32)
    return TriggerSpec("blend", pattern=pattern, ratio=ratio)


def rotation_trigger(angle: float = 16.0) -> TriggerSpec:
    return TriggerSpec("rotation", angle=angle)


def _patch_box(shape, trigger: TriggerSpec) -> tuple[int, int, int, int]:
    h, w = shape[:2]
    ph, pw = trigger.pattern.shape[:2]
    r, c = trigger.anchor
    r = r + h if r < 0 else r
    c = c + w if c < 0 else c
    if r < 0 or c < 0 or r + ph > h or c + pw > w:
        raise ValueError(f"{ph}x{pw} patch at anchor {trigger.anchor} does not fit a {h}x{w} image")
    if trigger.pattern.shape[2] != shape[2]:
        raise ValueError("patch channels do not match the image")
    return r, c, ph, pw


def inject_trigger(images: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Apply `trigger` to one HWC image or an NHWC batch; returns a new array."""
    x = np.asarray(images, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    out = x.copy()
    if trigger.variant == "patch":
        r, c, ph, pw = _patch_box(x.shape[1:], trigger)
        out[:, r : r + ph, c : c + pw, :] = trigger.pattern
    elif trigger.variant == "blend":
        if trigger.pattern.shape != x.shape[1:]:
            raise ValueError(f"blend pattern {trigger.pattern.shape} does not match images {x.shape[1:]}")
        out = (1.0 - trigger.ratio) * x + trigger.ratio * trigger.pattern
        out = np.clip(out, 0.0, 1.0).astype(np.float32)
    else:
        if trigger.angle % 360 != 0:
            out = ndimage.rotate(x, trigger.angle, axes=(2, 1), reshape=False, order=1,
                                 mode="constant", cval=0.0)
            out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return out[0] if single else out


@dataclass
class PoisonPlan:
    trigger: TriggerSpec
    target_label: int = 0
    poison_rate: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ValueError(f"poison_rate must lie in [0, 1], got {self.poison_rate}")
        if self.target_label < 0:
            raise ValueError("target_label must be nonnegative")

    def validate_for(self, num_classes: int, shape) -> None:
        if self.target_label >= num_classes:
            raise ValueError(f"target label {self.target_label} outside [0, {num_classes})")
        probe = np.zeros(tuple(shape), dtype=np.float32)
        inject_trigger(probe, self.trigger)

    def to_dict(self) -> dict:
        return {"trigger": self.trigger.to_dict(), "target_label": self.target_label,
                "poison_rate": self.poison_rate}


@dataclass(frozen=True)
class PoisonedDataset:
    images: np.ndarray
    labels: np.ndarray
    poisoned: np.ndarray
    plan: PoisonPlan
    num_classes: int
    metadata: dict = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.images)

    def export(self, root: str | Path, class_names=None) -> Path:
        """Class-folder layout plus a `poison_index.json` sidecar of poisoned indices."""
        root = Path(root)
        save_folders(LabeledDataset(self.images, self.labels, self.num_classes), root, class_names)
        sidecar = {"poisoned": np.flatnonzero(self.poisoned).tolist(), "plan": self.plan.to_dict()}
        (root / "poison_index.json").write_text(json.dumps(sidecar))
        return root


def build_poisoned_dataset(clean: LabeledDataset, plan: PoisonPlan, seed: int = 0) -> PoisonedDataset:
    """Stamp the trigger on a seeded random ceil(rate * N) subset and relabel it to the target."""
    plan.validate_for(clean.num_classes, clean.shape)
    n = len(clean)
    k = math.ceil(plan.poison_rate * n)
    idx = np.sort(np.random.default_rng(seed).permutation(n)[:k])
    images = clean.images.copy()
    labels = clean.labels.copy()
    if k:
        images[idx] = inject_trigger(images[idx], plan.trigger)
        labels[idx] = plan.target_label
    flags = np.zeros(n, dtype=bool)
    flags[idx] = True
    for a in (images, labels, flags):
        a.setflags(write=False)
    return PoisonedDataset(images, labels, flags, plan, clean.num_classes, {"seed": seed})


def poison_test_set(clean_test: LabeledDataset, plan: PoisonPlan) -> LabeledDataset | None:
    """Triggered copies of every non-target test sample, keeping true labels.

    Returns None (with a warning) when every sample belongs to the target class.
    """
    plan.validate_for(clean_test.num_classes, clean_test.shape)
    keep = clean_test.labels != plan.target_label
    if not keep.any():
        warnings.warn("poisoned test set is empty: every test sample has the target label")
        return None
    images = inject_trigger(clean_test.images[keep], plan.trigger)
    return LabeledDataset(images, clean_test.labels[keep], clean_test.num_classes,
                          {"triggered": True, "target_label": plan.target_label})


def train_adaptive_backdoor(clean: LabeledDataset, plan: PoisonPlan, gamma: float, refine_cfg, train_cfg,
                            arch: str = "resnet_small", poison_seed: int = 0, inner_steps: int = 10, **arch_kwargs):
    """Backdoor training that also minimizes a simulated defense loss.

    Minimizes L_b + gamma * L_refine, where L_b is cross-entropy on the
    poisoned set and L_refine is the reprogramming loss through an
    attacker-side transform and label derangement. Once per epoch the mapping
    is re-drawn and the transform gets `inner_steps` updates with the
    classifier frozen. `model.history` records L_b, L_refine and L_adap.
    """
    import torch
    import torch.nn.functional as F

    from .classifier import batches, build_classifier, make_sgd, to_tensor, train_classifier
    from .refine import _optimizer, frozen, make_output_mapping, make_transform, refine_loss

    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    poisoned = build_poisoned_dataset(clean, plan, seed=poison_seed)
    if gamma == 0:
        model = train_classifier(poisoned, train_cfg, arch, **arch_kwargs)
        for h in model.history:
            h.update(L_b=h["loss"], L_refine=0.0, L_adap=h["loss"])
        return model

    model = build_classifier(arch, clean.num_classes, clean.shape, seed=train_cfg.seed, **arch_kwargs)
    module = make_transform(clean.shape, refine_cfg)
    x = to_tensor(poisoned.images)
    y = torch.tensor(np.asarray(poisoned.labels), dtype=torch.long)
    opt, sched = make_sgd(model.parameters(), train_cfg.lr, train_cfg.momentum, train_cfg.weight_decay,
                          train_cfg.epochs, train_cfg.decay_epochs, train_cfg.decay_factor)
    t_opt, _ = _optimizer(module.parameters(), refine_cfg)
    gen = torch.Generator().manual_seed(train_cfg.seed)
    lam = refine_cfg.effective_lam
    kw = dict(normalize=refine_cfg.normalize_embeddings, reduction=refine_cfg.supcon_reduction)

    for epoch in range(train_cfg.epochs):
        # refresh the simulated defense against the current classifier
        mapping = make_output_mapping(clean.num_classes, seed=refine_cfg.seed + 1000 * (epoch + 1))
        module.train()
        with frozen(model):
            for step, idx in enumerate(batches(len(x), refine_cfg.batch_size, gen)):
                if step >= inner_steps:
                    break
                loss = refine_loss(model, mapping, module, x[idx], lam, refine_cfg.tau, **kw).total
                t_opt.zero_grad()
                loss.backward()
                t_opt.step()
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)

        model.train()
        sums, n = np.zeros(3), 0
        for idx in batches(len(x), train_cfg.batch_size, gen):
            out = model(x[idx])
            l_b = F.cross_entropy(out, y[idx])
            l_ref = refine_loss(model, mapping, module, x[idx], lam, refine_cfg.tau,
                                pseudo=out.argmax(1).detach(), **kw).total
            loss = l_b + gamma * l_ref
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += np.array([l_b.item(), l_ref.item(), loss.item()]) * len(idx)
            n += len(idx)
        for p in module.parameters():
            p.requires_grad_(True)
        sched.step()
        l_b, l_ref, l_adap = sums / n
        model.history.append({"epoch": epoch + 1, "loss": l_adap, "L_b": l_b, "L_refine": l_ref, "L_adap": l_adap})
        log.info("adaptive epoch %d/%d L_adap %.4f = L_b %.4f + %.3g * L_refine %.4f",
                 epoch + 1, train_cfg.epochs, l_adap, l_b, gamma, l_ref)
    model.eval()
    model.train_config = {**vars(train_cfg), "gamma": gamma}
    return model
