"""Minimal CNN inference with a pluggable multiplier per layer.

Tensors are plain float64 numpy arrays: ``(channels, height, width)`` for
feature maps, 1-D after ``flatten``.  Convolutions are valid-padding,
stride 1; max pooling uses stride = window and drops remainder rows/cols.

Operation accounting: each scalar product is charged by its kernel, each
multiply-accumulate adds one ``add``, and each bias adds one more.  Pooling,
ReLU and softmax are free.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidParam, ShapeError
from .kernels import EXACT, KernelKind, MulKernel, OpCount, multiply_with_cost

LAYER_KINDS = ("conv2d", "maxpool2d", "relu", "flatten", "dense", "softmax")

# upper bound on broadcast products materialised at once
_CHUNK_ELEMENTS = 1 << 21


@dataclass
class LayerSpec:
    kind: str
    weights: np.ndarray | None = None
    biases: np.ndarray | None = None
    window: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "dense"):
            if self.weights is None or self.biases is None:
                raise ShapeError(f"{self.kind} needs weights and biases")
            self.weights = np.asarray(self.weights, dtype=np.float64)
            self.biases = np.asarray(self.biases, dtype=np.float64)
            want = 4 if self.kind == "conv2d" else 2
            if self.weights.ndim != want:
                raise ShapeError(f"{self.kind} weights must be {want}-D, got {self.weights.shape}")
            if self.biases.shape != (self.weights.shape[0],):
                raise ShapeError(
                    f"{self.kind} biases {self.biases.shape} do not match {self.weights.shape[0]} outputs"
                )
        if self.kind == "maxpool2d":
            if self.window is None or len(self.window) != 2 or min(self.window) < 1:
                raise ShapeError(f"maxpool2d needs a positive (h, w) window, got {self.window}")
            self.window = (int(self.window[0]), int(self.window[1]))

    @property
    def is_parametric(self) -> bool:
        return self.kind in ("conv2d", "dense")

    def output_shape(self, shape: tuple) -> tuple:
        if self.kind == "conv2d":
            if len(shape) != 3:
                raise ShapeError(f"conv2d expects (C, H, W), got {shape}")
            o, c, kh, kw = self.weights.shape
            if c != shape[0]:
                raise ShapeError(f"conv2d expects {c} input channels, got {shape[0]}")
            if shape[1] < kh or shape[2] < kw:
                raise ShapeError(f"conv2d kernel {kh}x{kw} larger than input {shape[1:]}")
            return (o, shape[1] - kh + 1, shape[2] - kw + 1)
        if self.kind == "maxpool2d":
            if len(shape) != 3:
                raise ShapeError(f"maxpool2d expects (C, H, W), got {shape}")
            wh, ww = self.window
            if shape[1] < wh or shape[2] < ww:
                raise ShapeError(f"pool window {self.window} larger than input {shape[1:]}")
            return (shape[0], shape[1] // wh, shape[2] // ww)
        if self.kind == "flatten":
            return (int(np.prod(shape)),)
        if self.kind == "dense":
            if len(shape) != 1 or shape[0] != self.weights.shape[1]:
                raise ShapeError(f"dense expects ({self.weights.shape[1]},), got {shape}")
            return (self.weights.shape[0],)
        return tuple(shape)


def conv2d(weights, biases) -> LayerSpec:
    return LayerSpec("conv2d", weights=weights, biases=biases)


def dense(weights, biases) -> LayerSpec:
    return LayerSpec("dense", weights=weights, biases=biases)


def maxpool2d(h: int = 2, w: int = 2) -> LayerSpec:
    return LayerSpec("maxpool2d", window=(h, w))


def relu_layer() -> LayerSpec:
    return LayerSpec("relu")


def flatten_layer() -> LayerSpec:
    return LayerSpec("flatten")


def softmax_layer() -> LayerSpec:
    return LayerSpec("softmax")


@dataclass
class NetworkSpec:
    input_shape: tuple
    layers: list[LayerSpec]
    name: str = "custom"

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.layer_shapes()

    def layer_shapes(self) -> list[tuple]:
        """Output shape of every layer; raises ShapeError if they don't chain."""
        shapes, shape = [], self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        return shapes

    @property
    def conv_positions(self) -> list[int]:
        """Layer-list positions of the conv layers, in order (conv 1 first)."""
        return [i for i, l in enumerate(self.layers) if l.kind == "conv2d"]

    @property
    def num_classes(self) -> int:
        return self.layer_shapes()[-1][0]


@dataclass(frozen=True)
class LayerAssignment:
    """Kernel per conv layer (``conv[0]`` is conv layer 1) plus one for dense layers.

    Conv layers beyond ``len(conv)`` run exact.
    """

    conv: tuple[MulKernel, ...] = (EXACT, EXACT, EXACT, EXACT)
    dense: MulKernel = EXACT

    @classmethod
    def from_mapping(cls, mapping: dict[int, MulKernel], n_conv: int = 4, dense: MulKernel = EXACT):
        for idx in mapping:
            if not 1 <= idx <= n_conv:
                raise InvalidParam(f"conv layer index {idx} outside 1..{n_conv}")
        return cls(tuple(mapping.get(i, EXACT) for i in range(1, n_conv + 1)), dense)

    def kernel_for_conv(self, index: int) -> MulKernel:
        """Kernel for 1-based conv layer ``index``."""
        return self.conv[index - 1] if index <= len(self.conv) else EXACT

    @property
    def id(self) -> str:
        text = ",".join(k.id for k in self.conv)
        return text if self.dense == EXACT else f"{text};dense={self.dense.id}"


# Letters used for layer-combination shorthands like "RTF".
ALIASES = {
    "SX": "shift_xor", "SA": "shift_add",
    "R": "rounded", "L": "lns", "F": "famm", "Q": "quantize", "T": "tirud", "E": "exact",
}


def parse_assignment(text: str, n_conv: int = 4) -> LayerAssignment:
    """Parse ``"1=rounded,2=tirud"`` or a shorthand like ``"RTF"``.

    Unlisted conv layers run exact.
    """
    text = text.strip()
    if not text:
        raise InvalidParam("empty assignment")
    mapping: dict[int, MulKernel] = {}
    dense_kernel = EXACT
    if "=" not in text:
        tokens = re.findall(r"SX|SA|[RLFQTE]|.", text.upper())
        bad = [t for t in tokens if t not in ALIASES]
        if bad:
            raise InvalidParam(f"unknown kernel shorthand {bad[0]!r} in {text!r}")
        if len(tokens) > n_conv:
            raise InvalidParam(f"shorthand {text!r} names more than {n_conv} layers")
        mapping = {i + 1: MulKernel.from_id(ALIASES[t]) for i, t in enumerate(tokens)}
    else:
        for part in text.split(","):
            key, sep, value = part.partition("=")
            if not sep:
                raise InvalidParam(f"malformed assignment entry {part!r}")
            key = key.strip().lower()
            if key == "dense":
                dense_kernel = MulKernel.from_id(value)
                continue
            try:
                idx = int(key)
            except ValueError:
                raise InvalidParam(f"bad layer index {key!r}") from None
            if idx in mapping:
                raise InvalidParam(f"layer {idx} assigned twice")
            mapping[idx] = MulKernel.from_id(value)
    return LayerAssignment.from_mapping(mapping, n_conv, dense_kernel)


# ----------------------------------------------------------------------------
# layer operations

def _mac(kernel: MulKernel, weights: np.ndarray, cols: np.ndarray, counter: OpCount | None) -> np.ndarray:
    """``out[o, p] = sum_k kernel(weights[o, k], cols[p, k])``."""
    o, k = weights.shape
    p = cols.shape[0]
    if kernel.kind is KernelKind.EXACT:
        out = weights @ cols.T
        ops = OpCount(mul=o * p * k)
    else:
        if kernel.scale_a is None or kernel.scale_b is None:
            kernel = kernel.bind_scales(weights, cols)
        p_step = max(1, min(p, _CHUNK_ELEMENTS // max(k, 1)))
        o_step = max(1, _CHUNK_ELEMENTS // max(p_step * k, 1))
        out = np.empty((o, p))
        ops = OpCount()
        for ps in range(0, p, p_step):
            c_chunk = cols[None, ps:ps + p_step, :]
            for os_ in range(0, o, o_step):
                w = weights[os_:os_ + o_step, None, :]
                prod, c = multiply_with_cost(kernel, w, c_chunk)
                out[os_:os_ + o_step, ps:ps + p_step] = prod.sum(axis=-1)
                ops += c
    ops += OpCount(add=o * p * k)
    if counter is not None:
        counter += ops
    return out


def _per_image_scales(kernel: MulKernel) -> bool:
    # data-dependent scales are bound per image, so batches must be split
    return kernel.kind is KernelKind.QUANTIZE and (kernel.scale_a is None or kernel.scale_b is None)


def _conv_batch(x: np.ndarray, layer: LayerSpec, kernel: MulKernel, counter: OpCount | None) -> np.ndarray:
    n = x.shape[0]
    o, c, kh, kw = layer.weights.shape
    _, oh, ow = layer.output_shape(x.shape[1:])
    w2 = layer.weights.reshape(o, -1)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # (N, C, oh, ow, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)
    if _per_image_scales(kernel) and n > 1:
        out = np.stack([_mac(kernel, w2, cols[i], counter) for i in range(n)], axis=1)
    else:
        out = _mac(kernel, w2, cols.reshape(n * oh * ow, -1), counter).reshape(o, n, oh * ow)
    out = out + layer.biases[:, None, None]
    if counter is not None:
        counter += OpCount(add=out.size)
    return out.reshape(o, n, oh, ow).transpose(1, 0, 2, 3)


def _dense_batch(x: np.ndarray, layer: LayerSpec, kernel: MulKernel, counter: OpCount | None) -> np.ndarray:
    layer.output_shape(x.shape[1:])
    if _per_image_scales(kernel) and len(x) > 1:
        out = np.stack([_mac(kernel, layer.weights, x[i:i + 1], counter)[:, 0] for i in range(len(x))])
    else:
        out = _mac(kernel, layer.weights, x, counter).T
    out = out + layer.biases
    if counter is not None:
        counter += OpCount(add=out.size)
    return out


def _pool_batch(x: np.ndarray, window: tuple[int, int]) -> np.ndarray:
    wh, ww = window
    n, c, h, w = x.shape
    if h < wh or w < ww:
        raise ShapeError(f"pool window {window} larger than input {(h, w)}")
    oh, ow = h // wh, w // ww
    return x[:, :, :oh * wh, :ow * ww].reshape(n, c, oh, wh, ow, ww).max(axis=(3, 5))


def conv2d_forward(x: np.ndarray, layer: LayerSpec, kernel: MulKernel = EXACT,
                   counter: OpCount | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    layer.output_shape(x.shape)
    return _conv_batch(x[None], layer, kernel, counter)[0]


def dense_forward(x: np.ndarray, layer: LayerSpec, kernel: MulKernel = EXACT,
                  counter: OpCount | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    layer.output_shape(x.shape)
    return _dense_batch(x[None], layer, kernel, counter)[0]


def maxpool2d_forward(x: np.ndarray, window: tuple[int, int]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"maxpool2d expects (C, H, W), got {x.shape}")
    return _pool_batch(x[None], window)[0]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def flatten(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)


def softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    e = np.exp(x - x.max())
    return e / e.sum()


# ----------------------------------------------------------------------------
# whole network

def forward_batch(net: NetworkSpec, assign: LayerAssignment, xs: np.ndarray,
                  include_softmax: bool = False, start: int = 0, stop: int | None = None):
    """Run ``(N, ...)`` inputs, returning ``(outputs, per_layer_opcounts)``.

    Op counts are summed over the batch.  A trailing softmax is skipped unless
    ``include_softmax`` is set, so the default output is ``(N, classes)`` logits.
    ``start``/``stop`` run only ``net.layers[start:stop]``; ``xs`` is then the
    activation entering layer ``start``.
    """
    x = np.asarray(xs, dtype=np.float64)
    if start == 0 and (x.ndim != len(net.input_shape) + 1 or x.shape[1:] != net.input_shape):
        raise ShapeError(f"batch shape {x.shape} does not match network input {net.input_shape}")
    layers = net.layers
    if not include_softmax and layers and layers[-1].kind == "softmax":
        layers = layers[:-1]
    conv_index = sum(1 for layer in layers[:start] if layer.kind == "conv2d")
    per_layer = []
    for layer in layers[start:stop]:
        ops = OpCount()
        if layer.kind == "conv2d":
            conv_index += 1
            x = _conv_batch(x, layer, assign.kernel_for_conv(conv_index), ops)
        elif layer.kind == "dense":
            x = _dense_batch(x, layer, assign.dense, ops)
        elif layer.kind == "maxpool2d":
            x = _pool_batch(x, layer.window)
        elif layer.kind == "relu":
            x = np.maximum(x, 0.0)
        elif layer.kind == "flatten":
            x = x.reshape(len(x), -1)
        else:
            e = np.exp(x - x.max(axis=1, keepdims=True))
            x = e / e.sum(axis=1, keepdims=True)
        per_layer.append(ops)
    return x, per_layer


def forward_layers(net: NetworkSpec, assign: LayerAssignment, x: np.ndarray,
                   include_softmax: bool = False):
    """Run one input, returning ``(output, per_layer_opcounts)``.

    A trailing softmax is skipped unless ``include_softmax`` is set, so the
    default output is the logit vector.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match network input {net.input_shape}")
    out, per_layer = forward_batch(net, assign, x[None], include_softmax)
    return out[0], per_layer


def network_forward(net: NetworkSpec, assign: LayerAssignment, x: np.ndarray):
    """Logits and total :class:`OpCount` for one input image."""
    out, per_layer = forward_layers(net, assign, x)
    total = OpCount()
    for ops in per_layer:
        total += ops
    return out, total


def exact_op_count(net: NetworkSpec) -> OpCount:
    """Closed-form op count of one all-exact forward pass."""
    macs = outputs = 0
    shape = net.input_shape
    for layer in net.layers:
        out = layer.output_shape(shape)
        if layer.is_parametric:
            fan_in = int(np.prod(layer.weights.shape[1:]))
            n_out = int(np.prod(out))
            macs += n_out * fan_in
            outputs += n_out
        shape = out
    return OpCount(mul=macs, add=macs + outputs)


# ----------------------------------------------------------------------------
# reference architectures

# ("conv", out_channels, k) | ("pool", k) | ("dense", out) | ("relu",) | ("flatten",)
ARCHITECTURES = {
    "appsign-30": {
        "input_shape": (3, 30, 30),
        "plan": [("conv", 32, 5), ("relu",), ("conv", 32, 5), ("relu",), ("pool", 2),
                 ("conv", 64, 3), ("relu",), ("conv", 64, 3), ("relu",), ("pool", 2),
                 ("flatten",), ("dense", 256), ("relu",), ("dense", None), ("softmax",)],
        "classes": 43,
    },
    "appsign-tiny": {
        "input_shape": (3, 16, 16),
        "plan": [("conv", 8, 3), ("relu",), ("conv", 8, 3), ("relu",), ("pool", 2),
                 ("conv", 16, 3), ("relu",), ("conv", 16, 3), ("relu",), ("pool", 2),
                 ("flatten",), ("dense", 32), ("relu",), ("dense", None), ("softmax",)],
        "classes": 8,
    },
}


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_network(arch: str, classes: int | None = None, seed: int = 0) -> NetworkSpec:
    """Instantiate a named architecture with seeded Glorot-uniform weights, zero biases."""
    if arch not in ARCHITECTURES:
        raise InvalidParam(f"unknown architecture {arch!r}; known: {', '.join(ARCHITECTURES)}")
    spec = ARCHITECTURES[arch]
    classes = spec["classes"] if classes is None else int(classes)
    if classes < 2:
        raise InvalidParam("need at least two classes")
    rng = np.random.default_rng(seed)
    shape = spec["input_shape"]
    layers = []
    for step in spec["plan"]:
        kind = step[0]
        if kind == "conv":
            o, k = step[1], step[2]
            w = glorot_uniform(rng, (o, shape[0], k, k), shape[0] * k * k, o * k * k)
            layer = conv2d(w, np.zeros(o))
        elif kind == "dense":
            o = classes if step[1] is None else step[1]
            layer = dense(glorot_uniform(rng, (o, shape[0]), shape[0], o), np.zeros(o))
        elif kind == "pool":
            layer = maxpool2d(step[1], step[1])
        elif kind == "relu":
            layer = relu_layer()
        elif kind == "flatten":
            layer = flatten_layer()
        else:
            layer = softmax_layer()
        shape = layer.output_shape(shape)
        layers.append(layer)
    return NetworkSpec(spec["input_shape"], layers, name=arch)
