"""K-class image classifiers, the (backdoored) trainer and inference helpers.

Models take NCHW float tensors in [0, 1]; channel standardization happens
inside the network so triggers and transforms operate on raw pixels.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_epochs: list[int] = field(default_factory=lambda: [100, 130])
    decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigurationError("epochs must be >= 0; batch_size and lr must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.decay_factor <= 0:
            raise ConfigurationError("momentum, weight_decay and decay_factor must be nonnegative")
        if self.epochs and any(e >= self.epochs or e <= 0 for e in self.decay_epochs):
            raise ConfigurationError(
                f"decay epochs {self.decay_epochs} must lie in (0, epochs={self.epochs})"
            )


def to_tensor(images) -> torch.Tensor:
    """NHWC numpy (or NCHW tensor, passed through) -> NCHW float tensor."""
    if isinstance(images, torch.Tensor):
        return images
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_numpy(images: torch.Tensor) -> np.ndarray:
    return images.detach().cpu().numpy().transpose(0, 2, 3, 1)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Classifier(nn.Module):
    """Base class: subclasses implement `features`; logits come from a linear head."""

    arch_id = "base"

    def __init__(self, num_classes: int, input_shape=(32, 32, 3), **arch_kwargs):
        super().__init__()
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.arch_kwargs = arch_kwargs
        c = self.input_shape[2]
        self.register_buffer("mean", torch.full((1, c, 1, 1), 0.5))
        self.register_buffer("std", torch.full((1, c, 1, 1), 0.25))
        self.history: list[dict] = []

    @property
    def feature_dim(self) -> int:
        return self.fc.in_features

    def check_input(self, x: torch.Tensor) -> None:
        h, w, c = self.input_shape
        if x.ndim != 4 or tuple(x.shape[1:]) != (c, h, w):
            raise ValueError(f"expected inputs of shape (N, {c}, {h}, {w}), got {tuple(x.shape)}")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x))

    def metadata(self) -> dict:
        return {
            "arch": self.arch_id,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "arch_kwargs": self.arch_kwargs,
            "feature_dim": self.feature_dim,
        }


class SmallResNet(Classifier):
    """Residual net with one basic block per stage; ResNet-18 layout at smaller scale."""

    arch_id = "resnet_small"

    def __init__(self, num_classes, input_shape=(32, 32, 3), widths=(16, 32, 64, 128), blocks=1):
        super().__init__(num_classes, input_shape, widths=list(widths), blocks=blocks)
        self.stem = nn.Sequential(
            nn.Conv2d(input_shape[2], widths[0], 3, 1, 1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        layers, cin = [], widths[0]
        for i, w in enumerate(widths):
            for j in range(blocks):
                layers.append(BasicBlock(cin, w, 2 if (i > 0 and j == 0) else 1))
                cin = w
        self.layers = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, num_classes)

    def features(self, x):
        x = (x - self.mean) / self.std
        x = self.layers(self.stem(x))
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


class ConvNet(Classifier):
    """Plain VGG-style conv stack."""

    arch_id = "convnet"

    def __init__(self, num_classes, input_shape=(32, 32, 3), widths=(32, 64, 128)):
        super().__init__(num_classes, input_shape, widths=list(widths))
        layers, cin = [], input_shape[2]
        for w in widths:
            layers += [nn.Conv2d(cin, w, 3, 1, 1), nn.BatchNorm2d(w), nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            cin = w
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, num_classes)

    def features(self, x):
        x = self.body((x - self.mean) / self.std)
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


class DeepResNet(SmallResNet):
    """Two basic blocks per stage."""

    arch_id = "resnet_deep"

    def __init__(self, num_classes, input_shape=(32, 32, 3), widths=(16, 32, 64, 128), blocks=2):
        super().__init__(num_classes, input_shape, widths, blocks)


ARCHITECTURES: dict[str, type[Classifier]] = {
    "resnet_small": SmallResNet,
    "resnet_deep": DeepResNet,
    "convnet": ConvNet,
}


def build_classifier(arch: str, num_classes: int, input_shape=(32, 32, 3), seed: int | None = None, **kw) -> Classifier:
    if arch not in ARCHITECTURES:
        raise ConfigurationError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    if seed is not None:
        torch.manual_seed(seed)
    return ARCHITECTURES[arch](num_classes, tuple(input_shape), **kw)


def make_sgd(params, lr, momentum, weight_decay, epochs, decay_epochs, decay_factor):
    opt = torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(decay_epochs), gamma=decay_factor)
    return opt, sched


def batches(n: int, batch_size: int, generator: torch.Generator | None = None):
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


def train_classifier(data, cfg: TrainConfig, arch: str = "resnet_small", model: Classifier | None = None, **arch_kwargs) -> Classifier:
    """Train a classifier on a labeled (possibly poisoned) dataset with SGD + step decay.

    `data` needs `images` (NHWC in [0, 1]), `labels` and `num_classes`. Per-epoch
    mean loss is appended to `model.history`.
    """
    if len(data.images) == 0:
        raise ConfigurationError("training data is empty")
    if model is None:
        model = build_classifier(arch, data.num_classes, data.images.shape[1:], seed=cfg.seed, **arch_kwargs)
    if model.num_classes != data.num_classes or tuple(model.input_shape) != tuple(data.images.shape[1:]):
        raise ConfigurationError(
            f"model expects K={model.num_classes}, dims={model.input_shape}; "
            f"data has K={data.num_classes}, dims={tuple(data.images.shape[1:])}"
        )
    x = to_tensor(data.images)
    y = torch.tensor(np.asarray(data.labels), dtype=torch.long)
    opt, sched = make_sgd(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay,
                          cfg.epochs, cfg.decay_epochs, cfg.decay_factor)
    gen = torch.Generator().manual_seed(cfg.seed)
    for epoch in range(cfg.epochs):
        model.train()
        total, seen = 0.0, 0
        for idx in batches(len(x), cfg.batch_size, gen):
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        sched.step()
        model.history.append({"epoch": epoch + 1, "loss": total / seen})
        log.info("classifier epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, total / seen)
    model.eval()
    model.train_config = asdict(cfg)
    return model


@torch.no_grad()
def logits(model: Classifier, images, batch_size: int = 500) -> torch.Tensor:
    x = to_tensor(images)
    model.check_input(x)
    model.eval()
    return torch.cat([model(x[s : s + batch_size]) for s in range(0, len(x), batch_size)])


def predict_probs(model: Classifier, images, batch_size: int = 500) -> np.ndarray:
    """Softmax scores, one length-K row per image."""
    return torch.softmax(logits(model, images, batch_size).double(), dim=1).numpy()


@torch.no_grad()
def extract_features(model: Classifier, images, batch_size: int = 500) -> np.ndarray:
    """Penultimate-layer (input of the FC head) representation per image."""
    x = to_tensor(images)
    model.check_input(x)
    model.eval()
    return torch.cat([model.features(x[s : s + batch_size]) for s in range(0, len(x), batch_size)]).numpy()


def parameter_blob(model: nn.Module) -> bytes:
    """Concatenated raw bytes of all parameters and buffers, in state-dict order."""
    return b"".join(t.detach().cpu().contiguous().numpy().tobytes() for t in model.state_dict().values())


def save_classifier(model: Classifier, path, extra: dict | None = None):
    header = {**model.metadata(), "train_config": getattr(model, "train_config", None),
              "history": model.history, **(extra or {})}
    return checkpoint.write(path, checkpoint.CLASSIFIER_MAGIC, header, model.state_dict())


def load_classifier(path) -> tuple[Classifier, dict]:
    header, state = checkpoint.read(path, checkpoint.CLASSIFIER_MAGIC)
    model = build_classifier(header["arch"], header["num_classes"], header["input_shape"], **header["arch_kwargs"])
    model.load_state_dict(state)
    model.history = header.get("history", [])
    model.train_config = header.get("train_config")
    model.eval()
    return model, header
