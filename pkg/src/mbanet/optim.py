"""Momentum SGD with weight decay, the exponential learning-rate schedule,
and epoch-level training and evaluation loops."""

import math
import time
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .data import AugmentConfig, augment_batch, multi_crop_views
from .network import softmax, softmax_xent
from .tensor import ShapeError

__all__ = [
    "TrainConfig",
    "OptState",
    "EpochMetrics",
    "sgd_step",
    "lr_at_epoch",
    "train_epoch",
    "predict_scores",
    "vote",
    "evaluate",
    "per_class_error",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.005
    lr_drop_factor: float = 0.1
    lr_drop_period: float = 40.0
    lr_floor: float = 1e-4
    batch_size: int = 100
    max_epochs: int = 100
    seed: int = 0
    augment: bool = False
    augment_cfg: AugmentConfig = field(default_factory=AugmentConfig)
    deterministic: bool = True

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr_floor <= 0:
            raise ValueError("lr_floor must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_drop_period <= 0:
            raise ValueError("lr_drop_period must be positive")


@dataclass
class OptState:
    """Velocities mirror the parameters; ``rng`` drives dropout masks."""

    velocity: dict
    epoch: int = 0
    step: int = 0
    rng: np.random.Generator = None

    @classmethod
    def for_params(cls, params, seed=0):
        velocity = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(velocity, rng=np.random.Generator(np.random.PCG64(seed)))


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_error: float
    val_error: float = float("nan")
    wall_seconds: float = 0.0

    def row(self):
        return [self.epoch, self.lr, self.train_loss, self.train_error, self.val_error,
                self.wall_seconds]


def lr_at_epoch(epoch, cfg):
    """``max(lr_floor, base_lr * lr_drop_factor ** (epoch / lr_drop_period))``.

    ``epoch`` may be fractional; the decay is continuous.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return max(cfg.lr_floor, cfg.base_lr * cfg.lr_drop_factor ** (epoch / cfg.lr_drop_period))


def sgd_step(params, grads, state, lr, cfg, decayed=None):
    """In place: ``v = mu*v - lr*(g + wd*w); w = w + v``.

    Weight decay is applied only to names in ``decayed`` (defaults to names
    ending in ``weight``), so activation parameters are never decayed.
    """
    if decayed is None:
        decayed = {k for k in params if k.endswith("weight")}
    for name, w in params.items():
        g = grads[name]
        v = state.velocity[name]
        if g.shape != w.shape or v.shape != w.shape:
            raise ShapeError(
                f"{name}: param {w.shape}, grad {g.shape}, velocity {v.shape} must agree"
            )
        step = g + cfg.weight_decay * w if name in decayed else g
        v *= cfg.momentum
        v -= lr * step
        w += v
    state.step += 1
    return params, state


def _batch_images(data, rows, cfg, epoch, dtype):
    x = data.images[rows]
    if cfg.augment:
        x = augment_batch(x, cfg.augment_cfg, cfg.seed, epoch, data.index[rows])
    return x.astype(dtype, copy=False)


def _limits(cfg):
    return threadpool_limits(1) if cfg.deterministic else nullcontext()


def train_epoch(net, data, cfg, state, epoch=None):
    """One pass over ``data`` in a reshuffled order; returns :class:`EpochMetrics`."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    epoch = state.epoch if epoch is None else epoch
    n = len(data)
    order = np.random.default_rng(cfg.seed + epoch).permutation(n)
    n_batches = math.ceil(n / cfg.batch_size)
    params = net.named_params()
    decayed = net.decayed()
    total_loss = 0.0
    wrong = 0
    start = time.perf_counter()
    with _limits(cfg):
        for b in range(n_batches):
            rows = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x = _batch_images(data, rows, cfg, epoch, net.dtype)
            y = data.labels[rows]
            logits = net.forward(x, training=True, rng=state.rng)
            loss, g = softmax_xent(logits, y)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = net.backward(g)
            lr = lr_at_epoch(epoch + b / n_batches, cfg)
            sgd_step(params, grads, state, lr, cfg, decayed)
            total_loss += loss * len(rows)
            wrong += int((logits.argmax(axis=1) != y).sum())
    state.epoch = epoch + 1
    return EpochMetrics(
        epoch=epoch,
        lr=lr_at_epoch(epoch, cfg),
        train_loss=total_loss / n,
        train_error=wrong / n,
        wall_seconds=time.perf_counter() - start,
    )


def vote(crop_scores):
    """Average class scores over crops (axis 0) and take the argmax per sample."""
    return np.asarray(crop_scores).mean(axis=0).argmax(axis=1)


def predict_scores(net, images, multi_crop=False, aug_cfg=None, batch_size=500):
    """Eval-mode class probabilities; with ``multi_crop`` the five-crop average."""
    if not multi_crop:
        return net.predict_scores(images.astype(net.dtype, copy=False), batch_size)
    aug_cfg = aug_cfg or AugmentConfig()
    out = []
    for start in range(0, len(images), batch_size):
        views = multi_crop_views(images[start:start + batch_size], aug_cfg)
        scores = [net.predict_scores(v.astype(net.dtype, copy=False), batch_size) for v in views]
        out.append(np.mean(scores, axis=0))
    return np.concatenate(out)


def evaluate(net, data, multi_crop=False, aug_cfg=None, return_predictions=False):
    """Classification error rate of ``net`` on ``data``."""
    if len(data) == 0:
        return (float("nan"), np.zeros(0, dtype=int)) if return_predictions else float("nan")
    pred = predict_scores(net, data.images, multi_crop, aug_cfg).argmax(axis=1)
    err = float((pred != data.labels).mean())
    return (err, pred) if return_predictions else err


def per_class_error(pred, labels, n_classes):
    out = []
    for c in range(n_classes):
        mask = labels == c
        out.append(float((pred[mask] != c).mean()) if mask.any() else None)
    return out


def train(net, train_data, val_data, cfg, state=None, on_epoch=None, multi_crop=False):
    """Run epochs ``state.epoch .. cfg.max_epochs - 1``; yields :class:`EpochMetrics`.

    ``on_epoch(metrics, state)`` runs after each epoch, e.g. to checkpoint.
    """
    if state is None:
        state = OptState.for_params(net.named_params(), cfg.seed)
    while state.epoch < cfg.max_epochs:
        t0 = time.perf_counter()
        metrics = train_epoch(net, train_data, cfg, state)
        if val_data is not None and len(val_data):
            with _limits(cfg):
                metrics.val_error = evaluate(net, val_data, multi_crop, cfg.augment_cfg)
        metrics.wall_seconds = time.perf_counter() - t0
        if on_epoch is not None:
            on_epoch(metrics, state)
        yield metrics
