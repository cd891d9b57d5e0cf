"""Reprogramming defense: label derangement, U-Net input transform, losses and trainer.

The defended predictor is argmax M(F(T(x))): a trainable image-to-image
transform T, the frozen classifier F, and a fixed label permutation M.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .classifier import Classifier, batches, make_sgd, to_numpy, to_tensor
from .data import UnlabeledDataset

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

# Example remapping over the CIFAR-10 class order
# (airplane, automobile, bird, cat, deer, dog, frog, horse, ship, truck):
# airplane->cat, automobile->deer, bird->automobile, cat->ship, deer->frog,
# dog->bird, frog->horse, horse->truck, ship->airplane, truck->dog.
CIFAR10_EXAMPLE_PERMUTATION = (3, 4, 1, 8, 6, 2, 7, 9, 0, 5)


# --------------------------------------------------------------------------- mapping


@dataclass(frozen=True)
class OutputMapping:
    """Label permutation `perm`: source label l~ is reported as perm[l~]."""

    perm: tuple[int, ...]
    seed: int | None = None
    allow_fixed_points: bool = False

    def __post_init__(self):
        perm = tuple(int(p) for p in self.perm)
        object.__setattr__(self, "perm", perm)
        if sorted(perm) != list(range(len(perm))):
            raise ValueError(f"{perm} is not a permutation of 0..{len(perm) - 1}")
        if not self.allow_fixed_points and any(p == i for i, p in enumerate(perm)):
            raise ValueError(f"{perm} has a fixed point; output mappings must be derangements")

    @property
    def num_classes(self) -> int:
        return len(self.perm)

    @property
    def inverse(self) -> tuple[int, ...]:
        inv = [0] * len(self.perm)
        for src, dst in enumerate(self.perm):
            inv[dst] = src
        return tuple(inv)

    def inverted(self) -> "OutputMapping":
        return OutputMapping(self.inverse, allow_fixed_points=self.allow_fixed_points)


def make_output_mapping(num_classes: int, seed: int = 0) -> OutputMapping:
    """Uniformly random derangement of range(num_classes), by rejection sampling."""
    if num_classes < 2:
        raise ValueError("a derangement needs at least 2 classes")
    rng = np.random.default_rng(seed)
    idx = np.arange(num_classes)
    while True:
        perm = rng.permutation(num_classes)
        if not (perm == idx).any():
            return OutputMapping(tuple(perm.tolist()), seed=seed)


def identity_mapping(num_classes: int) -> OutputMapping:
    """Mapping bypass for the no-remapping ablation."""
    return OutputMapping(tuple(range(num_classes)), allow_fixed_points=True)


def apply_mapping(scores, mapping: OutputMapping):
    """Permute the last axis so that out[..., perm[l]] = scores[..., l].

    Works on numpy arrays and torch tensors (differentiable).
    """
    if scores.shape[-1] != mapping.num_classes:
        raise ValueError(f"scores have {scores.shape[-1]} classes, mapping has {mapping.num_classes}")
    inv = list(mapping.inverse)
    if isinstance(scores, torch.Tensor):
        return scores[..., torch.as_tensor(inv, device=scores.device)]
    return np.asarray(scores)[..., inv]


# --------------------------------------------------------------------------- transform


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder with skip connections and a sigmoid output head.

    `depth` downsampling stages; stage i has width * 2**i channels.
    """

    arch_id = "unet"

    def __init__(self, channels: int = 3, width: int = 32, depth: int = 2):
        super().__init__()
        self.channels, self.width, self.depth = channels, width, depth
        self.inc = _double_conv(channels, width)
        self.down = nn.ModuleList(_double_conv(width * 2**i, width * 2 ** (i + 1)) for i in range(depth))
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(width * 2 ** (i + 1), width * 2**i, 2, stride=2) for i in reversed(range(depth))
        )
        self.dec = nn.ModuleList(_double_conv(width * 2 ** (i + 1), width * 2**i) for i in reversed(range(depth)))
        self.outc = nn.Conv2d(width, channels, 1)

    def forward(self, x):
        skips = [self.inc(x)]
        for down in self.down:
            skips.append(down(F.max_pool2d(skips[-1], 2)))
        h = skips.pop()
        for up, dec in zip(self.up, self.dec):
            h = dec(torch.cat([skips.pop(), up(h)], dim=1))
        return torch.sigmoid(self.outc(h))

    def spec(self) -> dict:
        return {"arch": self.arch_id, "channels": self.channels, "width": self.width, "depth": self.depth}


class TransformModule(nn.Module):
    """Image-to-image transform bound to fixed input dims (H, W, C)."""

    def __init__(self, input_shape=(32, 32, 3), width: int = 32, depth: int = 2, net: nn.Module | None = None):
        super().__init__()
        self.input_shape = tuple(input_shape)
        h, w, c = self.input_shape
        if net is None:
            if h % 2**depth or w % 2**depth:
                raise ValueError(f"image side must be divisible by 2**depth={2**depth}")
            net = UNet(c, width, depth)
        self.net = net
        self.history: list[dict] = []

    def check_input(self, x: torch.Tensor) -> None:
        h, w, c = self.input_shape
        if x.ndim != 4 or tuple(x.shape[1:]) != (c, h, w):
            raise ValueError(f"transform expects (N, {c}, {h}, {w}), got {tuple(x.shape)}")

    def forward(self, x):
        self.check_input(x)
        return self.net(x)

    def spec(self) -> dict:
        base = self.net.spec() if hasattr(self.net, "spec") else {"arch": type(self.net).__name__}
        return {**base, "input_shape": list(self.input_shape)}


def transform(images, module: TransformModule, batch_size: int = 500) -> np.ndarray:
    """Run the transform in inference mode on NHWC images; returns NHWC in [0, 1]."""
    x = to_tensor(images)
    module.check_input(x)
    module.eval()
    with torch.no_grad():
        out = torch.cat([module(x[s : s + batch_size]) for s in range(0, len(x), batch_size)])
    return to_numpy(out)


# --------------------------------------------------------------------------- losses


def pseudo_labels(model: Classifier, images) -> np.ndarray:
    """Frozen-model argmax on raw inputs (first index wins ties)."""
    from .classifier import predict_probs

    return np.argmax(predict_probs(model, images), axis=1)


def ce_loss(pseudo, mapped_scores):
    """Mean of -log(max(p[i, pseudo_i], 1e-12)) over the batch. Torch or numpy."""
    if len(pseudo) != len(mapped_scores):
        raise ValueError(f"{len(pseudo)} labels for {len(mapped_scores)} score rows")
    if isinstance(mapped_scores, torch.Tensor):
        pseudo = torch.as_tensor(pseudo, dtype=torch.long, device=mapped_scores.device)
        picked = mapped_scores.gather(1, pseudo[:, None]).squeeze(1)
        return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()
    mapped_scores = np.asarray(mapped_scores, dtype=np.float64)
    picked = mapped_scores[np.arange(len(pseudo)), np.asarray(pseudo)]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def supcon_loss(transformed, pseudo, tau: float, normalize: bool = True, reduction: str = "sum"):
    """Supervised contrastive loss over a batch of transformed images.

    Positives of i are the other samples sharing its pseudo-label; the
    denominator runs over every sample except i. Anchors without positives
    contribute 0. `reduction="sum"` adds the per-anchor terms, "mean" averages
    them over anchors that have positives.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = transformed if isinstance(transformed, torch.Tensor) else torch.as_tensor(np.asarray(transformed))
    n = z.shape[0]
    if n < 2:
        raise ValueError("supervised contrastive loss needs a batch of at least 2")
    z = z.reshape(n, -1)
    if normalize:
        z = F.normalize(z, dim=1)
    labels = torch.as_tensor(np.asarray(pseudo) if not isinstance(pseudo, torch.Tensor) else pseudo,
                             device=z.device).reshape(-1)
    sim = z @ z.T / tau
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(eye, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = pos.sum(1)
    has_pos = n_pos > 0
    per_anchor = -(log_prob.masked_fill(~pos, 0.0).sum(1)) / n_pos.clamp_min(1)
    per_anchor = per_anchor * has_pos
    if reduction == "sum":
        return per_anchor.sum()
    if reduction == "mean":
        return per_anchor.sum() / has_pos.sum().clamp_min(1)
    raise ValueError(f"unknown reduction {reduction!r}")


class RefineLoss(NamedTuple):
    total: torch.Tensor
    ce: torch.Tensor
    sup: torch.Tensor


@contextlib.contextmanager
def frozen(model: nn.Module):
    """Eval mode with gradients disabled on `model`'s parameters; restores flags on exit."""
    flags = [p.requires_grad for p in model.parameters()]
    was_training = model.training
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        yield model
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
        model.train(was_training)


def refine_loss(model, mapping: OutputMapping, module: nn.Module, raw_batch: torch.Tensor,
                lam: float, tau: float, *, pseudo=None, normalize: bool = True,
                reduction: str = "sum") -> RefineLoss:
    """Combined loss L = L_ce + lam * L_sup for one raw batch (NCHW tensor).

    Pseudo-labels come from the model on the raw batch unless given. The
    caller decides which parameters receive gradients.
    """
    if mapping.num_classes != getattr(model, "num_classes", mapping.num_classes):
        raise ValueError("mapping size does not match the model's class count")
    if pseudo is None:
        with torch.no_grad():
            pseudo = model(raw_batch).argmax(1)
    x_t = module(raw_batch)
    mapped = apply_mapping(torch.softmax(model(x_t), dim=1), mapping)
    ce = ce_loss(pseudo, mapped)
    if lam:
        sup = supcon_loss(x_t, pseudo, tau, normalize=normalize, reduction=reduction)
    else:
        sup = torch.zeros((), dtype=ce.dtype)
    return RefineLoss(ce + lam * sup, ce, sup)


# --------------------------------------------------------------------------- training


@dataclass
class RefineConfig:
    lam: float = 0.5
    tau: float = 0.1
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 150
    batch_size: int = 256
    decay_epochs: list[int] = field(default_factory=lambda: [100, 130])
    decay_factor: float = 0.8
    optimizer: str = "sgd"
    width: int = 32
    depth: int = 2
    normalize_embeddings: bool = True
    supcon_reduction: str = "sum"
    use_scl: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.supcon_reduction not in ("sum", "mean"):
            raise ValueError(f"unknown supcon reduction {self.supcon_reduction!r}")

    @property
    def effective_lam(self) -> float:
        return self.lam if self.use_scl else 0.0


def make_transform(input_shape, cfg: RefineConfig) -> TransformModule:
    torch.manual_seed(cfg.seed)
    return TransformModule(input_shape, cfg.width, cfg.depth)


def _optimizer(params, cfg: RefineConfig):
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        sched = torch.optim.lr_scheduler.MultiStepLR(opt, cfg.decay_epochs, cfg.decay_factor)
        return opt, sched
    return make_sgd(params, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.epochs,
                    cfg.decay_epochs, cfg.decay_factor)


def train_refine(model: Classifier, data: UnlabeledDataset, mapping: OutputMapping, cfg: RefineConfig,
                 module: TransformModule | None = None, labeler: Callable | None = None,
                 on_epoch: Callable | None = None) -> TransformModule:
    """Optimize the transform against a frozen classifier on unlabeled data.

    Per batch: transform, score with the frozen model, remap, take pseudo-labels
    from the model on the raw batch (or from `labeler`, a callable
    NCHW -> labels), and step the transform on L_ce + lam * L_sup.
    `on_epoch(epoch, module)` is called after every epoch with the module in eval mode.
    """
    if data is None or len(data) == 0:
        raise ValueError("unlabeled dataset is empty")
    if mapping.num_classes != model.num_classes:
        raise ValueError(f"mapping covers {mapping.num_classes} classes, model has {model.num_classes}")
    if module is None:
        module = make_transform(data.shape, cfg)
    x_all = to_tensor(data.images)
    module.check_input(x_all[:1])
    lam = cfg.effective_lam
    opt, sched = _optimizer(module.parameters(), cfg)
    gen = torch.Generator().manual_seed(cfg.seed)

    with frozen(model):
        if labeler is None:
            with torch.no_grad():
                pseudo_all = torch.cat([model(x_all[s : s + 500]).argmax(1) for s in range(0, len(x_all), 500)])
        else:
            pseudo_all = torch.as_tensor(np.asarray(labeler(x_all)), dtype=torch.long)
        for epoch in range(cfg.epochs):
            module.train()
            sums = np.zeros(3)
            nb = 0
            for idx in batches(len(x_all), cfg.batch_size, gen):
                if len(idx) < 2:
                    continue
                out = refine_loss(model, mapping, module, x_all[idx], lam, cfg.tau, pseudo=pseudo_all[idx],
                                  normalize=cfg.normalize_embeddings, reduction=cfg.supcon_reduction)
                opt.zero_grad()
                out.total.backward()
                opt.step()
                sums += [out.total.item(), out.ce.item(), out.sup.item()]
                nb += 1
            sched.step()
            total, ce, sup = sums / max(nb, 1)
            module.history.append({"epoch": epoch + 1, "loss": total, "ce": ce, "sup": sup})
            log.info("refine epoch %d/%d loss %.4f (ce %.4f, sup %.4f)", epoch + 1, cfg.epochs, total, ce, sup)
            if on_epoch is not None:
                module.eval()
                on_epoch(epoch + 1, module)
    module.eval()
    module.refine_config = asdict(cfg)
    return module


# --------------------------------------------------------------------------- inference


@dataclass
class DefendedModel:
    """T, then a scorer (classifier or black-box oracle), then M.

    `model` is either a Classifier or any object exposing `predict_probs(images)`
    and `num_classes`.
    """

    transform: TransformModule
    model: object
    mapping: OutputMapping

    def __post_init__(self):
        k = getattr(self.model, "num_classes", None)
        if k is not None and k != self.mapping.num_classes:
            raise ValueError(f"mapping size {self.mapping.num_classes} != model classes {k}")
        in_shape = getattr(self.model, "input_shape", None)
        if in_shape is not None and tuple(in_shape) != self.transform.input_shape:
            raise ValueError("transform and model input dimensions differ")

    def scores(self, images) -> np.ndarray:
        from .classifier import predict_probs

        x_t = transform(images, self.transform)
        if isinstance(self.model, Classifier):
            probs = predict_probs(self.model, x_t)
        else:
            probs = np.asarray(self.model.predict_probs(x_t))
        return apply_mapping(probs, self.mapping)


def defended_predict(defended: DefendedModel, images) -> tuple[np.ndarray, np.ndarray]:
    """Labels (original label space) and remapped probability rows for each image."""
    probs = defended.scores(images)
    return probs.argmax(axis=1), probs


def save_defense(path, module: TransformModule, mapping: OutputMapping, extra: dict | None = None):
    header = {
        "num_classes": mapping.num_classes,
        "permutation": list(mapping.perm),
        "allow_fixed_points": mapping.allow_fixed_points,
        "mapping_seed": mapping.seed,
        "transform": module.spec(),
        "refine_config": getattr(module, "refine_config", None),
        "history": module.history,
        **(extra or {}),
    }
    return checkpoint.write(path, checkpoint.DEFENSE_MAGIC, header, module.state_dict())


def load_defense(path) -> tuple[TransformModule, OutputMapping, dict]:
    header, state = checkpoint.read(path, checkpoint.DEFENSE_MAGIC)
    spec = header["transform"]
    if spec.get("arch") != "unet":
        raise checkpoint.CheckpointError(f"unknown transform architecture {spec.get('arch')!r}")
    module = TransformModule(spec["input_shape"], spec["width"], spec["depth"])
    module.load_state_dict(state)
    module.history = header.get("history", [])
    module.refine_config = header.get("refine_config")
    module.eval()
    mapping = OutputMapping(tuple(header["permutation"]), header.get("mapping_seed"),
                            header.get("allow_fixed_points", False))
    return module, mapping, header
