"""Black-box path: distill a surrogate from a score-only oracle, defend the oracle.

The oracle is only ever called through `query`; nothing here touches its
parameters.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import asdict

import numpy as np
import torch

from .classifier import Classifier, TrainConfig, batches, build_classifier, make_sgd, predict_probs, to_tensor
from .data import UnlabeledDataset
from .refine import DefendedModel, OutputMapping, RefineConfig, make_output_mapping, train_refine

log = logging.getLogger(__name__)


class OracleError(RuntimeError):
    pass


class ScoreOracle:
    """Query-only scorer: NHWC images -> probability rows. Counts batch queries."""

    def __init__(self, num_classes: int, input_shape):
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.queries = 0
        self._lock = threading.Lock()

    def _score(self, images: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def query(self, images) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or tuple(images.shape[1:]) != self.input_shape:
            raise ValueError(f"oracle expects (N, {', '.join(map(str, self.input_shape))}) images")
        with self._lock:
            index = self.queries
            self.queries += 1
            try:
                probs = np.asarray(self._score(images), dtype=np.float64)
            except Exception as exc:
                raise OracleError(f"oracle query {index} failed: {exc}") from exc
        if probs.shape != (len(images), self.num_classes):
            raise OracleError(f"oracle query {index} returned shape {probs.shape}")
        return probs

    def predict_probs(self, images) -> np.ndarray:
        return self.query(images)


class LocalOracle(ScoreOracle):
    """Wraps an in-process classifier behind the query-only interface."""

    def __init__(self, model: Classifier):
        super().__init__(model.num_classes, model.input_shape)
        self.__model = model

    def _score(self, images):
        return predict_probs(self.__model, images)


class RemoteOracle(ScoreOracle):
    """HTTP scoring endpoint (see `refinelab.service`).

    Request: {"shape": [n, h, w, c], "images": [flattened floats]}.
    Response: {"probs": [[p_1 .. p_K], ...]}. Batches larger than
    `batch_limit` are split; each HTTP request counts as one query.
    """

    def __init__(self, url: str, num_classes: int | None = None, input_shape=None,
                 batch_limit: int = 256, client=None, timeout: float = 60.0):
        import httpx

        self.url = url.rstrip("/")
        self.batch_limit = batch_limit
        self.client = client or httpx.Client(timeout=timeout)
        if num_classes is None or input_shape is None:
            info = self.client.get(f"{self.url}/info").json()
            num_classes = info["num_classes"]
            input_shape = info["input_shape"]
            self.batch_limit = min(batch_limit, info.get("batch_limit", batch_limit))
        super().__init__(num_classes, input_shape)

    def _post(self, chunk: np.ndarray) -> np.ndarray:
        body = {"shape": list(chunk.shape), "images": chunk.reshape(-1).tolist()}
        resp = self.client.post(f"{self.url}/score", json=body)
        resp.raise_for_status()
        return np.asarray(resp.json()["probs"], dtype=np.float64)

    def query(self, images) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        lim = self.batch_limit
        return np.concatenate([super(RemoteOracle, self).query(images[s : s + lim])
                               for s in range(0, max(len(images), 1), lim)])

    def _score(self, images):
        return self._post(images)


def oracle_labels(oracle: ScoreOracle, images, batch_size: int = 500) -> np.ndarray:
    x = np.asarray(images, dtype=np.float32)
    return np.concatenate([oracle.query(x[s : s + batch_size]).argmax(1) for s in range(0, len(x), batch_size)])


def distill_surrogate(oracle: ScoreOracle, data: UnlabeledDataset, surrogate_arch: str, cfg: TrainConfig,
                      model: Classifier | None = None, query_batch: int = 500, **arch_kwargs) -> Classifier:
    """Fit a surrogate by squared error between its softmax scores and the oracle's.

    Loss per sample is ||F(x) - F_s(x)||^2 summed over classes, averaged over the batch.

    Oracle scores are collected once up front (ceil(N / query_batch) queries).
    """
    if data is None or len(data) == 0:
        raise ValueError("distillation data is empty")
    if tuple(data.shape) != oracle.input_shape:
        raise ValueError(f"data dims {data.shape} differ from oracle dims {oracle.input_shape}")
    images = np.asarray(data.images)
    targets = torch.as_tensor(np.concatenate(
        [oracle.query(images[s : s + query_batch]) for s in range(0, len(images), query_batch)]
    ), dtype=torch.float32)
    if model is None:
        model = build_classifier(surrogate_arch, oracle.num_classes, oracle.input_shape, seed=cfg.seed, **arch_kwargs)
    if model.num_classes != oracle.num_classes:
        raise ValueError("surrogate class count differs from the oracle's")
    x = to_tensor(images)
    opt, sched = make_sgd(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay,
                          cfg.epochs, cfg.decay_epochs, cfg.decay_factor)
    gen = torch.Generator().manual_seed(cfg.seed)
    model.distill_history = []
    for epoch in range(cfg.epochs):
        model.train()
        total = 0.0
        for idx in batches(len(x), cfg.batch_size, gen):
            loss = ((torch.softmax(model(x[idx]), 1) - targets[idx]) ** 2).sum(1).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        model.distill_history.append({"epoch": epoch + 1, "loss": total / len(x)})
        log.info("distill epoch %d/%d mse %.6f", epoch + 1, cfg.epochs, total / len(x))
    model.eval()
    model.train_config = asdict(cfg)
    return model


def distillation_loss(model: Classifier, oracle: ScoreOracle, data: UnlabeledDataset) -> float:
    """Current mean squared score distance between surrogate and oracle over `data`."""
    diff = predict_probs(model, data.images) - oracle.query(data.images)
    return float(np.mean(np.sum(diff**2, axis=1)))


def blackbox_defend(oracle: ScoreOracle, data: UnlabeledDataset, refine_cfg: RefineConfig,
                    surrogate: Classifier | None = None, surrogate_arch: str = "resnet_small",
                    distill_cfg: TrainConfig | None = None, mapping: OutputMapping | None = None):
    """Train the transform on a surrogate with oracle pseudo-labels; deploy on the oracle.

    Returns (defended model over the oracle, surrogate).
    """
    if surrogate is None:
        surrogate = distill_surrogate(oracle, data, surrogate_arch, distill_cfg or TrainConfig())
    mapping = mapping or make_output_mapping(oracle.num_classes, refine_cfg.seed)
    labeler = lambda x: oracle_labels(oracle, x.numpy().transpose(0, 2, 3, 1))
    module = train_refine(surrogate, data, mapping, refine_cfg, labeler=labeler)
    return DefendedModel(module, oracle, mapping), surrogate
