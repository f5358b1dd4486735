"""Metrics, confusion matrices, mutual-information diagnostics and the leakage probe."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import OptimState, Tape, Tensor
from .layers import ArchSpec, ParamSet, forward_f, forward_g, forward_h, init_params

HISTORY_HEADER = ("epoch", "method", "class_loss", "bias_loss", "neg_entropy", "train_acc",
                  "train_bias_acc", "test_acc", "test_bias_acc")
CENTER_CELL = (3, 3)


@dataclass
class EpochRecord:
    epoch: int
    method: str
    class_loss: float
    bias_loss: float
    neg_entropy: float
    train_acc: float
    train_bias_acc: float
    test_acc: float | None = None
    test_bias_acc: float | None = None


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows true class, columns prediction

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / max(self.total, 1))

    def normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return self.counts / np.maximum(rows, 1)


@dataclass
class RunReport:
    method: str = ""
    config: dict = field(default_factory=dict)
    history: list[EpochRecord] = field(default_factory=list)
    final_test_acc: float | None = None
    confusions: dict[str, ConfusionMatrix] = field(default_factory=dict)
    probe_acc: float | None = None
    mi: dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# basic metrics


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        return 0.0
    return float(np.mean(preds == labels))


def argmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """Ties go to the lowest index."""
    return np.asarray(scores).argmax(axis=axis)


def confusion(preds, labels, k: int) -> ConfusionMatrix:
    preds, labels = np.asarray(preds, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    for name, v in (("prediction", preds), ("label", labels)):
        if v.size and (v.min() < 0 or v.max() >= k):
            raise ValueError(f"{name} outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def discrete_mi(joint_counts) -> float:
    """Plug-in mutual information (nats) of a table of co-occurrence counts."""
    joint = np.asarray(joint_counts, dtype=np.float64)
    total = joint.sum()
    if total <= 0:
        raise ValueError("joint table must contain at least one count")
    p = joint / total
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(max((p[nz] * np.log(p[nz] / (pa @ pb)[nz])).sum(), 0.0))


def joint_counts(a, b, ka: int | None = None, kb: int | None = None) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)
    ka = int(a.max()) + 1 if ka is None else ka
    kb = int(b.max()) + 1 if kb is None else kb
    table = np.zeros((ka, kb), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def color_code(bias_labels: np.ndarray, cell=CENTER_CELL) -> np.ndarray:
    """Joint (R, G, B) level code of one grid cell, in [0, levels**3)."""
    r, g, b = (bias_labels[:, c, cell[0], cell[1]].astype(np.int64) for c in range(3))
    return (r * 8 + g) * 8 + b


def label_color_mi(labels, bias_labels, cell=CENTER_CELL) -> float:
    return discrete_mi(joint_counts(labels, color_code(bias_labels, cell), 10, 512))


def grid_mi(labels, bias_labels) -> float:
    """Label/colour MI averaged over every grid cell."""
    _, _, gh, gw = bias_labels.shape
    return float(np.mean([label_color_mi(labels, bias_labels, (i, j)) for i in range(gh) for j in range(gw)]))


# ---------------------------------------------------------------------------
# inference


class Prediction(NamedTuple):
    digits: np.ndarray
    bias_levels: np.ndarray
    logits: np.ndarray


def predict(ps: ParamSet, images: np.ndarray, batch: int = 500) -> Prediction:
    """Eval-mode forward; batches are independent so chunking does not matter."""
    digits, levels, logits = [], [], []
    for start in range(0, len(images), batch):
        x = Tensor(np.asarray(images[start : start + batch], dtype=ps.dtype))
        feat = forward_f(x, ps, "eval")
        out = forward_g(feat, ps, "eval").data
        logits.append(out)
        digits.append(argmax(out))
        levels.append(argmax(forward_h(feat, ps, "eval").data, axis=2))
    if not digits:
        return Prediction(np.zeros(0, np.int64), np.zeros((0,), np.int64), np.zeros((0, ps.arch.n_classes)))
    return Prediction(np.concatenate(digits), np.concatenate(levels), np.concatenate(logits))


def features(ps: ParamSet, images: np.ndarray, batch: int = 500) -> np.ndarray:
    chunks = [forward_f(Tensor(np.asarray(images[s : s + batch], dtype=ps.dtype)), ps, "eval").data
              for s in range(0, len(images), batch)]
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# leakage probe


def bias_leakage_probe(train_features: np.ndarray, train_bias: np.ndarray,
                       test_features: np.ndarray, test_bias: np.ndarray,
                       arch: ArchSpec | None = None, *, epochs: int = 10, batch_size: int = 128,
                       lr: float = 0.001, momentum: float = 0.9, weight_decay: float = 1e-4,
                       seed: int = 1000) -> float:
    """Train a fresh bias head on frozen features; held-out per-cell level accuracy."""
    if len(train_features) == 0 or len(test_features) == 0:
        raise ValueError("probe needs non-empty train and test features")
    if arch is None:
        arch = ArchSpec()
    dtype = train_features.dtype if np.issubdtype(train_features.dtype, np.floating) else np.float64
    ps = init_params(arch, seed, dtype)
    names = ps.names("h.")
    opt = OptimState(lr, momentum, weight_decay)
    rng = np.random.default_rng(seed)
    from .objectives import bias_loss, iterate_batches

    for _ in range(epochs):
        for idx in iterate_batches(len(train_features), batch_size, rng):
            with Tape() as tape:
                feat = Tensor(train_features[idx].astype(dtype, copy=False))
                loss = bias_loss(forward_h(feat, ps, "train"), train_bias[idx])
            grads = ad.backward(loss, tape)
            for name in names:
                ad.sgd_momentum_step(ps.params[name], ad.grad_of(grads, ps.params[name]), opt, name)
    hits = 0
    for start in range(0, len(test_features), 500):
        feat = Tensor(test_features[start : start + 500].astype(dtype, copy=False))
        levels = argmax(forward_h(feat, ps, "eval").data, axis=2)
        hits += int((levels == test_bias[start : start + 500]).sum())
    return hits / test_bias.size


# ---------------------------------------------------------------------------
# report files


def history_csv(history: list[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_HEADER)
    for rec in history:
        w.writerow([_cell(getattr(rec, f.name)) for f in fields(EpochRecord)])
    return buf.getvalue()


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def confusion_csv(cm: ConfusionMatrix) -> str:
    k = len(cm.counts)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred"] + [str(i) for i in range(k)])
    for i, row in enumerate(cm.counts):
        w.writerow([str(i)] + [str(int(v)) for v in row])
    return buf.getvalue()


def heatmap_ppm(matrix: np.ndarray, cell: int = 16) -> bytes:
    """Row-normalised matrix as a white-to-blue P6 image, ``cell`` pixels per entry."""
    v = np.clip(np.asarray(matrix, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([1 - 0.9 * v, 1 - 0.7 * v, np.ones_like(v) - 0.3 * v], axis=-1)
    img = np.kron(rgb, np.ones((cell, cell, 1)))
    pixels = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    h, w = pixels.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes()


def summary_text(report: RunReport) -> str:
    lines = [f"method: {report.method}"]
    for key in sorted(report.config):
        lines.append(f"config.{key}: {report.config[key]}")
    lines.append(f"epochs: {len(report.history)}")
    if report.final_test_acc is not None:
        lines.append(f"final_test_acc: {report.final_test_acc:.6f}")
    for name in sorted(report.confusions):
        lines.append(f"confusion.{name}.accuracy: {report.confusions[name].accuracy:.6f}")
    if report.probe_acc is not None:
        lines.append(f"probe_acc: {report.probe_acc:.6f}")
    for key in sorted(report.mi):
        lines.append(f"mi.{key}: {report.mi[key]:.6f}")
    return "\n".join(lines) + "\n"


def emit_report(report: RunReport, out_dir) -> list[Path]:
    """Write history.csv, per-name confusion CSV + PPM, and summary.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, data):
        path = out / name
        if isinstance(data, str):
            path.write_text(data)
        else:
            path.write_bytes(data)
        written.append(path)

    put("history.csv", history_csv(report.history))
    for name in sorted(report.confusions):
        cm = report.confusions[name]
        put(f"confusion_{name}.csv", confusion_csv(cm))
        put(f"confusion_{name}.ppm", heatmap_ppm(cm.normalized()))
    put("summary.txt", summary_text(report))
    return written


def is_finite_report(report: RunReport) -> bool:
    for rec in report.history:
        for f in fields(EpochRecord):
            v = getattr(rec, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                return False
    return True
