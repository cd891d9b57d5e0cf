"""BA / ASR, feature-cloud diagnostics, exact empirical W1 and report emission."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

EXACT_W1_CAP = 512

CSV_FIELDS = ("experiment_id", "attack", "defense", "BA", "ASR", "lhs", "w1", "ratio")


@dataclass
class MetricsReport:
    BA: float
    ASR: float
    n_benign: int
    n_triggered: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("BA", "ASR"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass
class FeatureCloud:
    """n x d matrix of feature vectors plus bookkeeping tags."""

    points: np.ndarray
    class_tag: int | None = None
    provenance: str = ""

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if len(self.points) < 1:
            raise ValueError("feature cloud needs at least one point")


def _points(c) -> np.ndarray:
    return c.points if isinstance(c, FeatureCloud) else np.atleast_2d(np.asarray(c, dtype=np.float64))


def benign_accuracy(predict_fn, test) -> float:
    """Fraction of `test` whose prediction equals the true label."""
    if test is None or len(test.labels) == 0:
        raise ValueError("benign test set is empty")
    pred = np.asarray(predict_fn(test.images))
    return float(np.mean(pred == np.asarray(test.labels)))


def attack_success_rate(predict_fn, triggered_test, target_label: int) -> float:
    """Fraction of triggered (non-target-class) samples predicted as the target."""
    if triggered_test is None or len(triggered_test.labels) == 0:
        raise ValueError(
            "triggered test set is empty: every test sample had the target label and was excluded"
        )
    pred = np.asarray(predict_fn(triggered_test.images))
    return float(np.mean(pred == target_label))


def centroid_shift(before, after) -> float:
    a, b = _points(before), _points(after)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    return float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))


def w1_empirical(a, b, seed: int = 0, cap: int = EXACT_W1_CAP) -> float:
    """Exact Wasserstein-1 between two uniform empirical clouds (Euclidean cost).

    Equal sizes reduce to an assignment problem. A larger cloud is first
    subsampled without replacement (seeded) down to the smaller one's size.
    """
    pa, pb = _points(a), _points(b)
    if pa.shape[1] != pb.shape[1]:
        raise ValueError(f"feature widths differ: {pa.shape[1]} vs {pb.shape[1]}")
    n = min(len(pa), len(pb))
    if n > cap:
        raise ValueError(f"{n} points exceed the exact solver cap of {cap}; subsample the clouds first")
    rng = np.random.default_rng(seed)
    if len(pa) > n:
        pa = pa[np.sort(rng.choice(len(pa), n, replace=False))]
    if len(pb) > n:
        pb = pb[np.sort(rng.choice(len(pb), n, replace=False))]
    cost = cdist(pa, pb)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / n)


def theorem_diagnostics(model, transform_fn, samples, max_points: int = EXACT_W1_CAP, seed: int = 0) -> dict:
    """Measured sides of the prediction-shift vs feature-W1 bound.

    lhs: mean ||F(x) - F(T(x))||_2 over samples; w1: exact W1 between f(x) and
    f(T(x)); ratio = lhs / (2 sqrt(K) w1), None when w1 == 0. The density-ratio
    constant is not estimated, so no inequality is checked.
    """
    from .classifier import extract_features, predict_probs

    samples = np.asarray(samples, dtype=np.float32)
    if len(samples) < 2:
        raise ValueError("theorem diagnostics need at least 2 samples")
    if len(samples) > max_points:
        idx = np.sort(np.random.default_rng(seed).choice(len(samples), max_points, replace=False))
        samples = samples[idx]
    transformed = np.asarray(transform_fn(samples), dtype=np.float32)
    p, pt = predict_probs(model, samples), predict_probs(model, transformed)
    lhs = float(np.linalg.norm(p - pt, axis=1).mean())
    w1 = w1_empirical(extract_features(model, samples), extract_features(model, transformed), seed=seed)
    k = p.shape[1]
    ratio = lhs / (2.0 * math.sqrt(k) * w1) if w1 > 0 else None
    return {"lhs": lhs, "w1": w1, "ratio": ratio, "alpha": "not estimated", "n": len(samples)}


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_csv(path, rows: list[dict], append: bool = False, fields=CSV_FIELDS) -> Path:
    """Metric rows with a fixed column set; floats at 6 decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fields})
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def markdown_table(rows: list[dict], columns=CSV_FIELDS, percent=("BA", "ASR")) -> str:
    """Aligned Markdown table; BA/ASR shown in percent like the usual defense tables."""

    def cell(r, c):
        v = r.get(c, "")
        if c in percent and v not in ("", None):
            return f"{100 * float(v):.2f}"
        return _fmt(float(v)) if c in ("lhs", "w1", "ratio") and v not in ("", None) else str(v)

    body = [[cell(r, c) for c in columns] for r in rows]
    header = [f"{c} (%)" if c in percent else c for c in columns]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    line = lambda cells: "| " + " | ".join(s.ljust(w) for s, w in zip(cells, widths)) + " |"
    out = [line(header), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    out += [line(b) for b in body]
    return "\n".join(out) + "\n"
