"""Exact-arithmetic reference trainer (mini-batch SGD, softmax cross-entropy).

The batch forward here mirrors :mod:`approxcnn.engine` with the exact kernel
but keeps the intermediates needed for reverse accumulation.  Gradients are
returned as a list aligned with ``net.layers``: ``(d_weights, d_biases)`` for
conv/dense layers and ``None`` elsewhere.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datasets import Dataset
from .engine import LayerSpec, NetworkSpec
from .errors import EmptyDataset, InvalidParam, ShapeError


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    lr_decay: float = 1.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InvalidParam("learning rate must be non-negative")
        if self.epochs < 1:
            raise InvalidParam("epochs must be at least 1")
        if self.batch_size < 1:
            raise InvalidParam("batch size must be at least 1")
        if not 0 < self.lr_decay <= 1:
            raise InvalidParam("lr decay must be in (0, 1]")


def _trainable_layers(net: NetworkSpec) -> list[LayerSpec]:
    layers = list(net.layers)
    if layers and layers[-1].kind == "softmax":
        layers = layers[:-1]
    if any(l.kind == "softmax" for l in layers):
        raise ShapeError("softmax is only supported as the final layer")
    return layers


def _forward(net: NetworkSpec, x: np.ndarray, start: int = 0):
    """Batch forward ``(N, C, H, W) -> (N, classes)`` logits plus caches.

    With ``start > 0``, ``x`` is the activation entering layer ``start`` and
    only the caches of the remaining layers are returned.
    """
    if start == 0 and x.shape[1:] != net.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    caches = []
    for layer in _trainable_layers(net)[start:]:
        if layer.kind == "conv2d":
            o, c, kh, kw = layer.weights.shape
            n, _, h, w = x.shape
            oh, ow = h - kh + 1, w - kw + 1
            win = sliding_window_view(x, (kh, kw), axis=(2, 3))
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
            out = cols @ layer.weights.reshape(o, -1).T + layer.biases
            caches.append((cols, x.shape))
            x = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
        elif layer.kind == "dense":
            caches.append(x)
            x = x @ layer.weights.T + layer.biases
        elif layer.kind == "relu":
            mask = x > 0
            caches.append(mask)
            x = x * mask
        elif layer.kind == "maxpool2d":
            wh, ww = layer.window
            n, c, h, w = x.shape
            oh, ow = h // wh, w // ww
            blocks = (x[:, :, :oh * wh, :ow * ww]
                      .reshape(n, c, oh, wh, ow, ww)
                      .transpose(0, 1, 2, 4, 3, 5)
                      .reshape(n, c, oh, ow, wh * ww))
            arg = blocks.argmax(axis=-1)
            caches.append((arg, x.shape))
            x = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        else:  # flatten
            caches.append(x.shape)
            x = x.reshape(len(x), -1)
    return x, caches


def _backward(net: NetworkSpec, caches, grad: np.ndarray) -> list:
    layers = _trainable_layers(net)
    grads: list = [None] * len(net.layers)
    for i in range(len(layers) - 1, -1, -1):
        layer, cache = layers[i], caches[i]
        if layer.kind == "conv2d":
            cols, in_shape = cache
            o, c, kh, kw = layer.weights.shape
            n, _, h, w = in_shape
            oh, ow = h - kh + 1, w - kw + 1
            flat = grad.transpose(0, 2, 3, 1).reshape(-1, o)
            grads[i] = ((flat.T @ cols).reshape(layer.weights.shape), flat.sum(axis=0))
            if i == 0:
                break
            dcols = (flat @ layer.weights.reshape(o, -1)).reshape(n, oh, ow, c, kh, kw)
            grad = np.zeros(in_shape)
            for r in range(kh):
                for s in range(kw):
                    grad[:, :, r:r + oh, s:s + ow] += dcols[:, :, :, :, r, s].transpose(0, 3, 1, 2)
        elif layer.kind == "dense":
            grads[i] = (grad.T @ cache, grad.sum(axis=0))
            grad = grad @ layer.weights
        elif layer.kind == "relu":
            grad = grad * cache
        elif layer.kind == "maxpool2d":
            arg, in_shape = cache
            wh, ww = layer.window
            n, c, oh, ow = arg.shape
            routed = (np.arange(wh * ww) == arg[..., None]) * grad[..., None]
            routed = routed.reshape(n, c, oh, ow, wh, ww).transpose(0, 1, 2, 4, 3, 5)
            grad = np.zeros(in_shape)
            grad[:, :, :oh * wh, :ow * ww] = routed.reshape(n, c, oh * wh, ow * ww)
        else:
            grad = grad.reshape(cache)
    return grads


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -log_p[np.arange(n), labels].mean()
    d = np.exp(log_p)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def batch_loss(net: NetworkSpec, images: np.ndarray, labels) -> float:
    logits, _ = _forward(net, np.asarray(images, dtype=np.float64))
    return float(_softmax_xent(logits, np.asarray(labels, dtype=np.int64))[0])


def loss_and_gradients(net: NetworkSpec, images: np.ndarray, labels) -> tuple[float, list]:
    """Mean cross-entropy over the batch and its gradients."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    logits, caches = _forward(net, images)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeError(f"labels must be in [0, {logits.shape[1]})")
    loss, d_logits = _softmax_xent(logits, labels)
    return float(loss), _backward(net, caches, d_logits)


def network_backward(net: NetworkSpec, x: np.ndarray, label: int) -> list:
    """Gradients of one sample's cross-entropy loss."""
    return loss_and_gradients(net, np.asarray(x)[None], [label])[1]


def sgd_step(net: NetworkSpec, gradients: list, lr: float) -> NetworkSpec:
    """``w <- w - lr * g`` for every parameter; returns a new network."""
    if len(gradients) != len(net.layers):
        raise ShapeError("gradient list does not match network layers")
    layers = []
    for layer, g in zip(net.layers, gradients):
        if g is None:
            layers.append(layer)
            continue
        gw, gb = g
        if gw.shape != layer.weights.shape or gb.shape != layer.biases.shape:
            raise ShapeError(f"gradient shape mismatch for {layer.kind} layer")
        layers.append(dataclasses.replace(layer, weights=layer.weights - lr * gw,
                                          biases=layer.biases - lr * gb))
    return NetworkSpec(net.input_shape, layers, net.name)


def predict(net: NetworkSpec, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Exact-arithmetic class predictions (ties go to the lowest index)."""
    images = np.asarray(images, dtype=np.float64)
    out = [
        _forward(net, images[i:i + batch_size])[0].argmax(axis=1)
        for i in range(0, len(images), batch_size)
    ]
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def accuracy(net: NetworkSpec, ds: Dataset) -> float:
    if not len(ds):
        raise EmptyDataset("cannot score an empty dataset")
    return 100.0 * float(np.mean(predict(net, ds.images) == ds.labels))


def train(net: NetworkSpec, dataset: Dataset, cfg: TrainConfig, holdout: Dataset | None = None):
    """Mini-batch SGD. Returns ``(trained_net, history)``.

    ``history`` holds one dict per epoch with the mean training loss and,
    when ``holdout`` is given, its exact accuracy in percent.
    """
    if not len(dataset):
        raise EmptyDataset("cannot train on an empty dataset")
    if dataset.labels.max() >= net.num_classes:
        raise ShapeError(f"labels exceed the network's {net.num_classes} classes")
    rng = np.random.default_rng(cfg.seed)
    history = []
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay ** epoch
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_gradients(net, dataset.images[idx], dataset.labels[idx])
            net = sgd_step(net, grads, lr)
            losses.append(loss * len(idx))
        record = {"epoch": epoch + 1, "lr": lr, "train_loss": sum(losses) / n}
        if holdout is not None:
            record["holdout_accuracy"] = accuracy(net, holdout)
        history.append(record)
    return net, history


# ----------------------------------------------------------------------------
# gradient checking

def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradient(loss_fn, params: list[np.ndarray], analytic: list[np.ndarray],
                   eps: float = 1e-4, floor: float = 1e-7, accept=None) -> float:
    """Max relative error between ``analytic`` and central differences.

    ``loss_fn()`` is re-evaluated after perturbing each entry of ``params`` in
    place.  ``accept(index)`` may veto an entry (returning False) after the
    loss evaluations, e.g. when the perturbation crossed a kink.
    """
    if not 0 < eps <= 1e-2:
        raise InvalidParam("eps must be in (0, 1e-2]")
    worst = 0.0
    for p_idx, (p, g) in enumerate(zip(params, analytic)):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            up = loss_fn()
            ok = accept is None or accept()
            flat[j] = old - eps
            down = loss_fn()
            ok = ok and (accept is None or accept())
            flat[j] = old
            if not ok:
                continue
            numeric = (up - down) / (2 * eps)
            worst = max(worst, relative_error(gflat[j], numeric, floor))
    return worst


def _pattern(layers: list[LayerSpec], caches: list) -> list:
    """ReLU masks and pooling argmaxes: the piecewise-linear region of a forward."""
    out = []
    for layer, cache in zip(layers, caches):
        if layer.kind == "relu":
            out.append(cache)
        elif layer.kind == "maxpool2d":
            out.append(cache[0])
    return out


def grad_check(net: NetworkSpec, sample: tuple[np.ndarray, int], eps: float = 1e-4,
               floor: float = 1e-7) -> float:
    """Max relative gradient error over all parameters for one sample.

    Perturbations that flip a ReLU or move a pooling argmax are skipped, so
    only points where the loss is differentiable are compared.  Each
    perturbed layer re-runs only itself and the layers after it.
    """
    x, label = sample
    x = np.asarray(x, dtype=np.float64)[None]
    labels = np.array([label], dtype=np.int64)
    net = NetworkSpec(net.input_shape, [dataclasses.replace(l) for l in net.layers], net.name)
    grads = loss_and_gradients(net, x, labels)[1]
    layers = _trainable_layers(net)

    # activation entering each layer, so a perturbation only replays the tail
    inputs = [x]
    for i in range(1, len(layers)):
        inputs.append(_forward(NetworkSpec(net.input_shape, layers[:i], net.name), x)[0])

    worst = 0.0
    for i, (layer, g) in enumerate(zip(layers, grads)):
        if g is None:
            continue
        layer.weights = layer.weights.copy()
        layer.biases = layer.biases.copy()
        tail = layers[i:]
        base = _pattern(tail, _forward(net, inputs[i], i)[1])
        state = {}

        def loss_fn(i=i, tail=tail, base=base, state=state):
            logits, caches = _forward(net, inputs[i], i)
            state["ok"] = all(np.array_equal(a, b) for a, b in zip(base, _pattern(tail, caches)))
            return float(_softmax_xent(logits, labels)[0])

        err = check_gradient(loss_fn, [layer.weights, layer.biases], list(g), eps, floor,
                             lambda state=state: state["ok"])
        worst = max(worst, err)
    return worst
