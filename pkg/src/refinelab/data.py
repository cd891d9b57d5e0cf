"""Dataset ingestion, validation and the defender's unlabeled split."""

from __future__ import annotations

import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import synthetic

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class IngestionError(OSError):
    """A dataset source is missing, empty or unreadable."""


class DatasetValidationError(ValueError):
    """Loaded samples violate a dataset invariant."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _check_images(images: np.ndarray) -> None:
    if images.ndim != 4:
        raise DatasetValidationError(f"expected N x H x W x C images, got shape {images.shape}")
    if len(images) == 0:
        raise DatasetValidationError("dataset is empty")
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise DatasetValidationError("pixel values must lie in [0, 1]")


@dataclass(frozen=True)
class LabeledDataset:
    """Images (N, H, W, C) float32 in [0, 1] with integer labels in [0, K)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        _check_images(images)
        if labels.shape != (len(images),):
            raise DatasetValidationError("labels must be a vector with one entry per image")
        if self.num_classes < 1:
            raise DatasetValidationError("num_classes must be positive")
        bad = (labels < 0) | (labels >= self.num_classes)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DatasetValidationError(
                f"label {labels[i]} at index {i} outside [0, {self.num_classes})"
            )
        object.__setattr__(self, "images", _freeze(images))
        object.__setattr__(self, "labels", _freeze(labels))
        if "class_counts" not in self.metadata:
            self.metadata["class_counts"] = np.bincount(labels, minlength=self.num_classes).tolist()

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class UnlabeledDataset:
    images: np.ndarray

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        _check_images(images)
        object.__setattr__(self, "images", _freeze(images))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass
class DatasetDescriptor:
    """Where and how to load a train/test pair.

    `format` is one of "synthetic", "folders", "cifar" or "auto" (inspect `root`).
    For "synthetic", `root` is ignored and `n_train`/`n_test` are per-split totals.
    """

    name: str = "synthetic-shapes"
    root: str | None = None
    format: str = "synthetic"
    train_split: str = "train"
    test_split: str = "test"
    n_train: int = 5000
    n_test: int = 1000
    seed: int = 0


def _load_folder_split(root: Path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    if not root.is_dir():
        raise IngestionError(f"dataset split directory not found: {root}")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise IngestionError(f"no class folders under {root}")
    images, labels = [], []
    for k, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with PILImage.open(f) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            except OSError as exc:
                raise IngestionError(f"cannot read image {f}: {exc}") from exc
            images.append(arr)
            labels.append(k)
    if not images:
        raise IngestionError(f"no images found under {root}")
    shapes = {a.shape for a in images}
    if len(shapes) != 1:
        raise DatasetValidationError(f"images under {root} have mixed shapes {sorted(shapes)}")
    return np.stack(images), np.asarray(labels, dtype=np.int64), classes


def _load_cifar_split(root: Path, files: list[str]) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for name in files:
        path = root / name
        try:
            with open(path, "rb") as fh:
                batch = pickle.load(fh, encoding="bytes")
            data = np.asarray(batch[b"data"], dtype=np.uint8)
            labels = batch.get(b"labels", batch.get(b"fine_labels"))
        except (OSError, pickle.UnpicklingError, KeyError, EOFError) as exc:
            raise IngestionError(f"corrupt or missing archive member {path}: {exc}") from exc
        xs.append(data.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        ys.append(np.asarray(labels, dtype=np.int64))
    return np.concatenate(xs).astype(np.float32) / 255.0, np.concatenate(ys)


def _detect_format(root: Path) -> str:
    if not root.exists():
        raise IngestionError(f"dataset root not found: {root}")
    if (root / "data_batch_1").exists() or (root / "cifar-10-batches-py").exists():
        return "cifar"
    return "folders"


def load_dataset(desc: DatasetDescriptor) -> tuple[LabeledDataset, LabeledDataset]:
    """Load the (train, test) pair described by `desc` with pixels scaled to [0, 1]."""
    fmt = desc.format
    if fmt == "synthetic":
        k = len(synthetic.CLASS_NAMES)
        xtr, ytr = synthetic.generate(math.ceil(desc.n_train / k), seed=desc.seed)
        xte, yte = synthetic.generate(math.ceil(desc.n_test / k), seed=desc.seed + 1)
        meta = {"source": "synthetic", "class_names": list(synthetic.CLASS_NAMES)}
        return (
            LabeledDataset(xtr[: desc.n_train], ytr[: desc.n_train], k, dict(meta)),
            LabeledDataset(xte[: desc.n_test], yte[: desc.n_test], k, dict(meta)),
        )

    if desc.root is None:
        raise IngestionError(f"dataset {desc.name!r} needs a root path")
    root = Path(desc.root)
    if fmt == "auto":
        fmt = _detect_format(root)
    if not root.exists():
        raise IngestionError(f"dataset root not found: {root}")

    if fmt == "cifar":
        if (root / "cifar-10-batches-py").exists():
            root = root / "cifar-10-batches-py"
        xtr, ytr = _load_cifar_split(root, [f"data_batch_{i}" for i in range(1, 6)])
        xte, yte = _load_cifar_split(root, ["test_batch"])
        k = int(max(ytr.max(), yte.max())) + 1
        meta = {"source": str(root)}
        return LabeledDataset(xtr, ytr, k, dict(meta)), LabeledDataset(xte, yte, k, dict(meta))

    if fmt == "folders":
        xtr, ytr, ctr = _load_folder_split(root / desc.train_split)
        xte, yte, cte = _load_folder_split(root / desc.test_split)
        if ctr != cte:
            raise DatasetValidationError(f"train/test class folders differ: {ctr} vs {cte}")
        if xtr.shape[1:] != xte.shape[1:]:
            raise DatasetValidationError("train and test image dimensions differ")
        meta = {"source": str(root), "class_names": ctr}
        k = len(ctr)
        return LabeledDataset(xtr, ytr, k, dict(meta)), LabeledDataset(xte, yte, k, dict(meta))

    raise IngestionError(f"unknown dataset format {fmt!r}")


def save_folders(dataset: LabeledDataset, root: str | Path, class_names=None) -> Path:
    """Write `dataset` as root/<class>/<index>.png (8-bit quantized)."""
    root = Path(root)
    names = class_names or dataset.metadata.get("class_names") or [
        f"class_{k:03d}" for k in range(dataset.num_classes)
    ]
    for name in names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for i, (img, y) in enumerate(zip(dataset.images, dataset.labels)):
        arr = np.round(img * 255.0).astype(np.uint8)
        PILImage.fromarray(arr).save(root / names[int(y)] / f"{i:06d}.png")
    return root


def strip_labels(dataset: LabeledDataset, fraction: float = 1.0, seed: int = 0) -> UnlabeledDataset:
    """Seeded shuffle, keep the first ceil(fraction * N) images, drop labels."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = math.ceil(fraction * len(dataset))
    order = np.random.default_rng(seed).permutation(len(dataset))
    return UnlabeledDataset(dataset.images[order[:n]])
