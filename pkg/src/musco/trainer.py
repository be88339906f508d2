"""Forward/backward propagation and SGD fine-tuning for model graphs.

Everything runs in float64 numpy on CPU. Backpropagation is implemented
directly per layer kind (conv via shifted-slice accumulation, which is exact
and fast enough at the scales this package targets). Fine-tuning updates the
weights of whatever layers the graph currently has; decomposed layers are
therefore trained inside their factorized parametrization and their ranks
never change.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .modelgraph import (
    CONV2D,
    FC,
    FLATTEN,
    GROUPED_CONV2D,
    MAXPOOL2D,
    RELU,
    SOFTMAX_XENT_HEAD,
    LayerSpec,
    ModelGraph,
)

__all__ = [
    "Batch",
    "TrainConfig",
    "TrainHistory",
    "forward",
    "loss_and_grad",
    "softmax_cross_entropy",
    "sgd_step",
    "fine_tune",
    "evaluate",
]


@dataclass(frozen=True)
class Batch:
    """A batch of inputs ``(n, H, W, C)`` with integer class targets ``(n,)``."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("batch sizes of inputs and targets differ")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0
    # Stop when eval accuracy has not improved for this many epochs
    # (None trains for the full epoch budget).
    patience: Optional[int] = 3

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid training configuration")


@dataclass
class TrainHistory:
    """Per-epoch metrics for the epochs actually executed."""

    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    eval_loss: list[float] = field(default_factory=list)
    eval_acc: list[float] = field(default_factory=list)
    diverged: bool = False


# ---------------------------------------------------------------------------
# Per-layer forward / backward
# ---------------------------------------------------------------------------


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def _conv_forward(x, layer: LayerSpec):
    d, s, p = layer.d, layer.stride, layer.padding
    xp = _pad(x, p)
    n, hp, wp, _ = xp.shape
    ho = (hp - d) // s + 1
    wo = (wp - d) // s + 1
    y = np.zeros((n * ho * wo, layer.c_out))
    # One flat GEMM per spatial offset keeps the matrices large.
    for dh in range(d):
        for dw in range(d):
            xs = xp[:, dh : dh + s * ho : s, dw : dw + s * wo : s, :]
            y += xs.reshape(-1, layer.c_in) @ layer.weights[dh, dw].T
    y = y.reshape(n, ho, wo, layer.c_out)
    if layer.bias is not None:
        y += layer.bias
    return y, xp


def _conv_backward(dy, xp, layer: LayerSpec, x_shape):
    d, s, p = layer.d, layer.stride, layer.padding
    ho, wo = dy.shape[1], dy.shape[2]
    dy_flat = dy.reshape(-1, layer.c_out)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(layer.weights)
    for dh in range(d):
        for dw_ in range(d):
            sl = np.s_[:, dh : dh + s * ho : s, dw_ : dw_ + s * wo : s, :]
            xs = xp[sl].reshape(-1, layer.c_in)
            dw[dh, dw_] = dy_flat.T @ xs
            dxp[sl] += (dy_flat @ layer.weights[dh, dw_]).reshape(
                dy.shape[0], ho, wo, layer.c_in
            )
    db = None if layer.bias is None else dy.sum(axis=(0, 1, 2))
    dx = dxp if p == 0 else dxp[:, p : p + x_shape[1], p : p + x_shape[2], :]
    return dx, dw, db


def _depthwise_forward(x, layer: LayerSpec):
    d, s, p = layer.d, layer.stride, layer.padding
    xp = _pad(x, p)
    n, hp, wp, c = xp.shape
    ho = (hp - d) // s + 1
    wo = (wp - d) // s + 1
    y = np.zeros((n, ho, wo, c))
    for dh in range(d):
        for dw in range(d):
            xs = xp[:, dh : dh + s * ho : s, dw : dw + s * wo : s, :]
            y += xs * layer.weights[dh, dw]
    if layer.bias is not None:
        y += layer.bias
    return y, xp


def _depthwise_backward(dy, xp, layer: LayerSpec, x_shape):
    d, s, p = layer.d, layer.stride, layer.padding
    ho, wo = dy.shape[1], dy.shape[2]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(layer.weights)
    for dh in range(d):
        for dw_ in range(d):
            xs = xp[:, dh : dh + s * ho : s, dw_ : dw_ + s * wo : s, :]
            dw[dh, dw_] = np.sum(dy * xs, axis=(0, 1, 2))
            dxp[:, dh : dh + s * ho : s, dw_ : dw_ + s * wo : s, :] += (
                dy * layer.weights[dh, dw_]
            )
    db = None if layer.bias is None else dy.sum(axis=(0, 1, 2))
    dx = dxp if p == 0 else dxp[:, p : p + x_shape[1], p : p + x_shape[2], :]
    return dx, dw, db


def _maxpool_forward(x, layer: LayerSpec):
    k, s = layer.d, layer.stride
    n, h, w, c = x.shape
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    stacked = np.stack(
        [
            x[:, dh : dh + s * ho : s, dw : dw + s * wo : s, :]
            for dh in range(k)
            for dw in range(k)
        ],
        axis=-1,
    )
    winner = np.argmax(stacked, axis=-1)
    return np.max(stacked, axis=-1), (winner, x.shape)


def _maxpool_backward(dy, cache, layer: LayerSpec):
    k, s = layer.d, layer.stride
    winner, x_shape = cache
    ho, wo = dy.shape[1], dy.shape[2]
    dx = np.zeros(x_shape)
    for idx in range(k * k):
        dh, dw = divmod(idx, k)
        mask = winner == idx
        dx[:, dh : dh + s * ho : s, dw : dw + s * wo : s, :] += dy * mask
    return dx


def forward(g: ModelGraph, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Propagate a batch through the graph; returns logits and layer caches."""
    x = np.asarray(x, dtype=np.float64)
    expected = (x.shape[0],) + tuple(g.input_shape)
    if x.shape != expected:
        raise ValueError(f"input shape {x.shape} does not match {expected}")
    caches: list = []
    for layer in g.layers:
        if layer.kind == CONV2D:
            y, xp = _conv_forward(x, layer)
            caches.append((xp, x.shape))
        elif layer.kind == GROUPED_CONV2D:
            y, xp = _depthwise_forward(x, layer)
            caches.append((xp, x.shape))
        elif layer.kind == FC:
            y = x @ layer.weights
            if layer.bias is not None:
                y = y + layer.bias
            caches.append(x)
        elif layer.kind == RELU:
            mask = x > 0
            y = x * mask
            caches.append(mask)
        elif layer.kind == MAXPOOL2D:
            y, cache = _maxpool_forward(x, layer)
            caches.append(cache)
        elif layer.kind == FLATTEN:
            y = x.reshape(x.shape[0], -1)
            caches.append(x.shape)
        elif layer.kind == SOFTMAX_XENT_HEAD:
            y = x
            caches.append(None)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        x = y
    return x, caches


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy of softmax(logits) and its gradient in the logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    log_p = shifted - log_z[:, None]
    loss = float(-np.mean(log_p[np.arange(n), targets]))
    probs = np.exp(log_p)
    grad = probs
    grad[np.arange(n), targets] -= 1.0
    return loss, grad / n


def loss_and_grad(g: ModelGraph, batch: Batch):
    """Mean softmax cross-entropy and gradients for every weight and bias.

    Returns ``(loss, grads)`` with ``grads[layer_id] = (d_weights, d_bias)``
    for each weight-bearing layer.
    """
    logits, caches = forward(g, batch.inputs)
    loss, dy = softmax_cross_entropy(logits, batch.targets)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return loss, _backward_pass(g, caches, dy)


def _backward_pass(g: ModelGraph, caches: list, dy: np.ndarray):
    grads: dict[int, tuple[np.ndarray, Optional[np.ndarray]]] = {}
    for layer, cache in zip(reversed(g.layers), reversed(caches)):
        if layer.kind == CONV2D:
            xp, x_shape = cache
            dy, dw, db = _conv_backward(dy, xp, layer, x_shape)
            grads[layer.id] = (dw, db)
        elif layer.kind == GROUPED_CONV2D:
            xp, x_shape = cache
            dy, dw, db = _depthwise_backward(dy, xp, layer, x_shape)
            grads[layer.id] = (dw, db)
        elif layer.kind == FC:
            x = cache
            dw = x.T @ dy
            db = None if layer.bias is None else dy.sum(axis=0)
            dy = dy @ layer.weights.T
            grads[layer.id] = (dw, db)
        elif layer.kind == RELU:
            dy = dy * cache
        elif layer.kind == MAXPOOL2D:
            dy = _maxpool_backward(dy, cache, layer)
        elif layer.kind == FLATTEN:
            dy = dy.reshape(cache)
        elif layer.kind == SOFTMAX_XENT_HEAD:
            pass
    return grads


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


def sgd_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    cfg: TrainConfig,
    velocity: Optional[list[np.ndarray]] = None,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """One momentum-SGD update; returns new parameters and velocity."""
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_params, new_velocity = [], []
    for p, gr, v in zip(params, grads, velocity):
        if p.shape != gr.shape:
            raise ValueError(f"gradient shape {gr.shape} != parameter shape {p.shape}")
        step = gr if cfg.weight_decay == 0 else gr + cfg.weight_decay * p
        v = cfg.momentum * v + step
        new_params.append(p - cfg.learning_rate * v)
        new_velocity.append(v)
    return new_params, new_velocity


def _trainable_ids(g: ModelGraph) -> list[int]:
    return [l.id for l in g.layers if l.kind in (CONV2D, GROUPED_CONV2D, FC)]


def _swap_weights(g: ModelGraph, weights: dict[int, tuple]) -> ModelGraph:
    layers = tuple(
        replace(l, weights=weights[l.id][0], bias=weights[l.id][1])
        if l.id in weights
        else l
        for l in g.layers
    )
    return replace(g, layers=layers)


def _clear_orthonormal_flags(g: ModelGraph) -> ModelGraph:
    groups = tuple(
        replace(gr, orthonormal=False) if gr.scheme == "tucker2" else gr
        for gr in g.groups
    )
    return replace(g, groups=groups)


def evaluate(g: ModelGraph, data: tuple[np.ndarray, np.ndarray], batch_size: int = 256):
    """(accuracy, mean loss) over a dataset; never mutates weights."""
    x, y = data
    n = x.shape[0]
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        xb = x[start : start + batch_size]
        yb = y[start : start + batch_size]
        logits, _ = forward(g, xb)
        loss, _ = softmax_cross_entropy(logits, yb)
        loss_sum += loss * xb.shape[0]
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
    return correct / n, loss_sum / n


def fine_tune(
    g: ModelGraph,
    train_data: tuple[np.ndarray, np.ndarray],
    eval_data: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
) -> tuple[ModelGraph, TrainHistory]:
    """Momentum-SGD training of the graph's current weights.

    Layer shapes (and hence any decomposition ranks) are invariant; only
    weight values change. Deterministic given ``cfg.seed``. Returns the
    weights with the best eval accuracy seen, including the starting point.
    On a non-finite loss the run aborts and returns the history so far.
    """
    history = TrainHistory()
    if cfg.epochs == 0:
        return g, history

    rng = np.random.default_rng(cfg.seed)
    x_train, y_train = train_data
    n = x_train.shape[0]
    ids = _trainable_ids(g)
    current = {
        i: (g.layer_by_id(i).weights.copy(),
            None if g.layer_by_id(i).bias is None else g.layer_by_id(i).bias.copy())
        for i in ids
    }
    velocity: dict[int, tuple] = {
        i: (np.zeros_like(w), None if b is None else np.zeros_like(b))
        for i, (w, b) in current.items()
    }

    work = _swap_weights(g, current)
    best_acc, _ = evaluate(work, eval_data)
    best_weights = copy.deepcopy(current)
    stale = 0

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        diverged = False
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = Batch(x_train[idx], y_train[idx])
            logits, caches = forward(work, batch.inputs)
            loss, dy = softmax_cross_entropy(logits, batch.targets)
            if not np.isfinite(loss):
                diverged = True
                break
            loss_sum += loss * idx.shape[0]
            correct += int(np.sum(np.argmax(logits, axis=1) == batch.targets))
            grads = _backward_pass(work, caches, dy)
            for i in ids:
                dw, db = grads[i]
                w, b = current[i]
                vw, vb = velocity[i]
                (w2,), (vw2,) = sgd_step([w], [dw], cfg, [vw])
                if b is not None and db is not None:
                    (b2,), (vb2,) = sgd_step([b], [db], cfg, [vb])
                else:
                    b2, vb2 = b, vb
                current[i] = (w2, b2)
                velocity[i] = (vw2, vb2)
            work = _swap_weights(work, current)
        if diverged:
            history.diverged = True
            break

        # Train metrics are running averages over the epoch's minibatches;
        # the eval split gets a fresh full pass.
        eval_acc, eval_loss = evaluate(work, eval_data)
        history.train_loss.append(loss_sum / n)
        history.train_acc.append(correct / n)
        history.eval_loss.append(eval_loss)
        history.eval_acc.append(eval_acc)

        if eval_acc > best_acc:
            best_acc = eval_acc
            best_weights = copy.deepcopy(current)
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break

    out = _swap_weights(g, best_weights)
    if cfg.learning_rate > 0:
        out = _clear_orthonormal_flags(out)
    return out, history
