"""Losses, the single-pass minimax update and the training loop.

The full objective for method ``ours``::

    L_c(g(f(x)), y) + lam * sum_b q log q  +  mu * L_B(h(GRL(f(x))), b(x))

where ``q = softmax(h(f(x)))`` is evaluated with h's parameters held fixed.
h descends ``L_B``; the gradient reversal layer hands f the negated (and
scaled) gradient, so f ascends it.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import OptimState, Tape, Tensor
from .datagen import BiasedDataset, grayscale_dataset
from .evaluate import EpochRecord, RunReport, predict
from .layers import ArchSpec, ParamSet, forward_f, forward_g, forward_h, init_params

log = logging.getLogger(__name__)

METHODS = ("baseline", "ours", "confusion", "grl_only", "grayscale")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    method: str = "ours"
    lam: float = 0.1
    mu: float = 1.0
    grl_scale: float = 0.1
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 20
    seed: int = 0
    sigma2: float = 0.02
    adversarial: str = "grl"  # or "alternating"
    dtype: str = "float32"
    eval_every: int = 1

    def __post_init__(self):
        self.method = self.method.replace("-", "_")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if min(self.lam, self.mu, self.grl_scale) < 0:
            raise ValueError("lam, mu and grl_scale must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.adversarial not in ("grl", "alternating"):
            raise ValueError("adversarial must be 'grl' or 'alternating'")

    def weights(self) -> tuple[float, float]:
        """(entropy/confusion weight, bias-loss weight) actually used by the method."""
        if self.method in ("baseline", "grayscale"):
            return 0.0, 0.0
        if self.method == "grl_only":
            return 0.0, self.mu
        return self.lam, self.mu

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepMetrics:
    class_loss: float
    bias_loss: float
    neg_entropy: float
    digit_acc: float
    bias_acc: float


# ---------------------------------------------------------------------------
# losses


def classification_loss(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return -ad.mean(ad.pick(ad.log_softmax(logits), labels))


def bias_loss(bias_logits: Tensor, bias_labels) -> Tensor:
    """Cross-entropy over the level axis (axis 2), averaged over every cell."""
    bias_labels = np.asarray(bias_labels)
    levels = bias_logits.shape[2]
    if bias_labels.size and (bias_labels.min() < 0 or bias_labels.max() >= levels):
        raise ValueError(f"bias levels must lie in [0, {levels})")
    return -ad.mean(ad.pick(ad.log_softmax(bias_logits, axis=2), bias_labels, axis=2))


def negative_conditional_entropy(bias_logits: Tensor) -> Tensor:
    """Mean over cells of sum_levels q log q; lies in [-ln L, 0]."""
    logq = ad.log_softmax(bias_logits, axis=2)
    return ad.mean(ad.tsum(ad.exp(logq) * logq, axis=2))


def confusion_loss(bias_logits: Tensor) -> Tensor:
    """Cross-entropy against the uniform distribution over levels."""
    return -ad.mean(ad.log_softmax(bias_logits, axis=2))


def _regularizer(method: str):
    return confusion_loss if method == "confusion" else negative_conditional_entropy


# ---------------------------------------------------------------------------
# one update


def _as_batch(batch, dtype):
    images, labels, bias_labels = batch
    return Tensor(np.asarray(images, dtype=dtype)), np.asarray(labels), np.asarray(bias_labels)


def _finite(name: str, t: Tensor) -> float:
    v = float(t.data)
    if not math.isfinite(v):
        raise NonFiniteLoss(f"{name} became {v}")
    return v


def _apply(ps: ParamSet, grads, opt: OptimState, names) -> None:
    for name in names:
        p = ps.params[name]
        ad.sgd_momentum_step(p, ad.grad_of(grads, p), opt, name)


def minimax_step(batch, ps: ParamSet, opt: OptimState, cfg: TrainConfig) -> StepMetrics:
    """One update of f, g and h on a batch ``(images, labels, bias_labels)``."""
    if cfg.adversarial == "alternating" and cfg.weights()[1] > 0:
        return _alternating_step(batch, ps, opt, cfg)
    x, y, b = _as_batch(batch, ps.dtype)
    lam, mu = cfg.weights()
    reg_fn = _regularizer(cfg.method)
    with Tape() as tape:
        feat = forward_f(x, ps, "train")
        logits = forward_g(feat, ps, "train")
        lc = classification_loss(logits, y)
        total = lc
        if mu > 0:
            blog = forward_h(ad.gradient_reversal(feat, cfg.grl_scale), ps, "train")
            lb = bias_loss(blog, b)
            total = total + lb * mu
        else:
            blog = forward_h(ad.stop_gradient(feat), ps, "train", frozen=True)
            lb = bias_loss(blog, b)
        if lam > 0:
            reg = reg_fn(forward_h(feat, ps, "train", frozen=True))
            total = total + reg * lam
        negent = negative_conditional_entropy(ad.stop_gradient(blog))
    values = (_finite("L_c", lc), _finite("L_B", lb), _finite("neg-entropy", negent))
    grads = ad.backward(total, tape)
    # without a bias term h has no training signal; leave it (and its decay) alone
    names = list(ps.params) if mu > 0 else ps.names("f.") + ps.names("g.")
    _apply(ps, grads, opt, names)
    return StepMetrics(*values, _acc(logits.data, y), _acc(blog.data, b, axis=2))


def _alternating_step(batch, ps: ParamSet, opt: OptimState, cfg: TrainConfig) -> StepMetrics:
    # h first, on detached features; then f and g with -mu * L_B through a frozen h
    x, y, b = _as_batch(batch, ps.dtype)
    lam, mu = cfg.weights()
    with Tape() as tape:
        feat = forward_f(x, ps, "train")
        blog = forward_h(ad.stop_gradient(feat), ps, "train")
        lb = bias_loss(blog, b)
        loss_h = lb * mu
    lb_value = _finite("L_B", lb)
    grads = ad.backward(loss_h, tape)
    _apply(ps, grads, opt, ps.names("h."))
    with Tape() as tape:
        feat = forward_f(x, ps, "train")
        logits = forward_g(feat, ps, "train")
        lc = classification_loss(logits, y)
        frozen = forward_h(feat, ps, "train", frozen=True)
        total = lc - bias_loss(frozen, b) * mu
        if lam > 0:
            total = total + _regularizer(cfg.method)(frozen) * lam
        negent = negative_conditional_entropy(ad.stop_gradient(frozen))
    values = (_finite("L_c", lc), lb_value, _finite("neg-entropy", negent))
    grads = ad.backward(total, tape)
    _apply(ps, grads, opt, ps.names("f.") + ps.names("g."))
    return StepMetrics(*values, _acc(logits.data, y), _acc(blog.data, b, axis=2))


def _acc(scores: np.ndarray, labels, axis: int = -1) -> float:
    return float(np.mean(scores.argmax(axis=axis) == labels))


# ---------------------------------------------------------------------------
# training loop


def make_optimizer(cfg: TrainConfig) -> OptimState:
    return OptimState(cfg.lr, cfg.momentum, cfg.weight_decay)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) >= 2:
            yield idx


def train(train_set: BiasedDataset, test_set: BiasedDataset | None, cfg: TrainConfig,
          arch: ArchSpec | None = None) -> tuple[ParamSet, RunReport]:
    """Train f, g, h from scratch; evaluate on ``test_set`` after every epoch."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if cfg.method == "grayscale":
        train_set = grayscale_dataset(train_set)
        test_set = grayscale_dataset(test_set) if test_set is not None else None
    dtype = np.dtype(cfg.dtype)
    ps = init_params(arch or ArchSpec(), cfg.seed, dtype)
    opt = make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    report = RunReport(method=cfg.method, config=cfg.to_dict())
    images = train_set.images.astype(dtype, copy=False)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(5)
        count = 0
        for idx in iterate_batches(len(train_set), cfg.batch_size, rng):
            m = minimax_step((images[idx], train_set.labels[idx], train_set.bias_labels[idx]), ps, opt, cfg)
            sums += len(idx) * np.array([m.class_loss, m.bias_loss, m.neg_entropy, m.digit_acc, m.bias_acc])
            count += len(idx)
        means = sums / count
        rec = EpochRecord(epoch, cfg.method, *means.tolist())
        if test_set is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            out = predict(ps, test_set.images)
            rec.test_acc = float(np.mean(out.digits == test_set.labels))
            rec.test_bias_acc = float(np.mean(out.bias_levels == test_set.bias_labels))
        report.history.append(rec)
        log.info("epoch %d %s L_c=%.4f L_B=%.4f negH=%.4f train=%.3f test=%s (%.1fs)",
                 epoch, cfg.method, rec.class_loss, rec.bias_loss, rec.neg_entropy,
                 rec.train_acc, _fmt(rec.test_acc), time.perf_counter() - t0)
    if report.history:
        report.final_test_acc = report.history[-1].test_acc
    return ps, report


def _fmt(v):
    return "n/a" if v is None else f"{v:.3f}"


def config_with(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, **changes)
