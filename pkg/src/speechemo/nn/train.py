"""Mini-batch training with validation-accuracy checkpointing, prediction and gradient checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .layers import softmax_cross_entropy
from .model import ModelSpec, Network
from .optim import SGD, Adam

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    optimizer: str = "adam"  # adam | sgd
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return SGD(self.lr, self.momentum)
        return Adam(self.lr, self.beta1, self.beta2, self.eps)


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def rows(self):
        for e, (l, a, v) in enumerate(zip(self.train_loss, self.train_acc, self.val_acc)):
            yield e + 1, l, a, v


def accuracy_of(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 32) -> float:
    if len(x) == 0:
        return float("nan")
    pred = np.argmax(net.logits(x, batch_size), axis=1)
    return float(np.mean(pred == y))


def train(
    spec_or_net: ModelSpec | Network,
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray | None,
    val_y: np.ndarray | None,
    cfg: TrainConfig,
) -> tuple[Network, History]:
    """Train and return the snapshot with the best validation accuracy (earliest on ties).

    Without a validation set the last epoch is kept. Inputs must already be
    normalized and shaped ``(N,) + input_shape``.
    """
    train_y = np.asarray(train_y, dtype=np.int64)
    net = spec_or_net if isinstance(spec_or_net, Network) else Network(spec_or_net, train_x.shape[1:])
    if len(train_x) == 0:
        raise TrainingError("empty training set")
    if train_y.max() >= net.n_classes or train_y.min() < 0:
        raise TrainingError(f"labels must lie in 0..{net.n_classes - 1}")
    train_x = np.asarray(train_x, dtype=net.dtype)
    has_val = val_x is not None and len(val_x) > 0
    if has_val:
        val_x = np.asarray(val_x, dtype=net.dtype)
        val_y = np.asarray(val_y, dtype=np.int64)
    opt = cfg.make_optimizer()
    rng = np.random.default_rng(cfg.seed)
    hist = History()
    best = net.copy()
    best_val = -1.0
    n = len(train_x)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            logits = net.forward(train_x[idx])
            loss, dlogits = softmax_cross_entropy(logits, train_y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {bi + 1}")
            grads = net.backward(dlogits)
            opt.step(net.params, grads)
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == train_y[idx]))
        hist.train_loss.append(loss_sum / n)
        hist.train_acc.append(correct / n)
        va = accuracy_of(net, val_x, val_y) if has_val else float("nan")
        hist.val_acc.append(va)
        if not has_val or va > best_val:
            best_val = va
            best = net.copy()
            hist.best_epoch = epoch + 1
        logger.info(
            "epoch %d/%d loss %.4f train_acc %.3f val_acc %.3f",
            epoch + 1, cfg.epochs, hist.train_loss[-1], hist.train_acc[-1], va,
        )
    best.norm_mean, best.norm_std = net.norm_mean, net.norm_std
    return best, hist


def predict(net: Network, features: np.ndarray) -> np.ndarray:
    """Probability vector(s) for raw (un-normalized) input(s).

    A single sample of shape ``input_shape`` returns a 1-D vector.
    """
    x = np.asarray(features)
    single = x.ndim == len(net.input_shape)
    if single:
        x = x[None]
    p = net.predict_proba(net.normalize(x).astype(net.dtype))
    return p[0] if single else p


def grad_check(
    spec_or_net: ModelSpec | Network,
    x: np.ndarray,
    labels: np.ndarray,
    eps: float = 1e-3,
    dtype=np.float32,
    max_entries: int = 64,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Checks every parameter tensor (sampling up to ``max_entries`` entries each)
    and the input. The error of a tensor is ``max|analytic - numeric|``
    divided by the largest gradient magnitude in that tensor. Entries whose
    ``+-eps`` probes flip a relu mask or a pooling argmax straddle a kink,
    where no derivative exists, and are skipped.
    """
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    x = np.asarray(x)
    if isinstance(spec_or_net, Network):
        net = spec_or_net.astype(dtype)
    else:
        net = Network(spec_or_net, x.shape[1:], dtype=dtype)
    x = x.astype(dtype)
    rng = np.random.default_rng(seed)

    def probe() -> tuple[float, list[np.ndarray]]:
        loss = softmax_cross_entropy(net.forward(x), labels)[0]
        return loss, net.activation_pattern()

    logits = net.forward(x)
    _, dlogits = softmax_cross_entropy(logits, labels)
    grads = net.backward(dlogits, need_input_grad=True)
    targets = dict(net.params)
    targets["input"] = x
    worst = 0.0
    skipped = 0
    for name, arr in targets.items():
        g = grads[name]
        flat = arr.reshape(-1)
        picks = np.arange(flat.size) if flat.size <= max_entries else rng.choice(flat.size, max_entries, replace=False)
        num = np.full(len(picks), np.nan)
        for j, k in enumerate(picks):
            old = flat[k]
            flat[k] = old + eps
            lp, pat_p = probe()
            flat[k] = old - eps
            lm, pat_m = probe()
            flat[k] = old
            if all(np.array_equal(a, b) for a, b in zip(pat_p, pat_m)):
                num[j] = (lp - lm) / (2 * eps)
            else:
                skipped += 1
        ok = ~np.isnan(num)
        if not ok.any():
            continue
        ana = g.reshape(-1)[picks[ok]].astype(np.float64)
        scale = max(np.abs(g).max(), np.abs(num[ok]).max(), 1e-12)
        worst = max(worst, float(np.max(np.abs(ana - num[ok])) / scale))
    net._cache = []
    if skipped:
        logger.debug("grad_check skipped %d entries at relu/maxpool kinks", skipped)
    return worst
