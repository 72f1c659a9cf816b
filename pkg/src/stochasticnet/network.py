"""Masked convolutional networks with hand-written backpropagation.

Layers follow a small protocol: ``forward(x)`` returns ``(y, cache)`` and
``backward(cache, grad_out)`` returns ``(grad_x, param_grads)`` where
``param_grads`` is ``None`` for parameter-free layers. Convolution is
cross-correlation (no kernel flip) over NCHW tensors.
"""
from __future__ import annotations

import copy
import hashlib
import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng
from .connectivity import (
    ConnectivityMask,
    GaussianConnectivityModel,
    probability_map,
    realize_conv_mask,
    realize_dense_mask,
)
from .tensor import DTYPE, ShapeError

DEFAULT_CONV_CHANNELS = (32, 32, 64)
DEFAULT_HIDDEN = 64
DEFAULT_KERNEL = 5


def _check_mask(weights: np.ndarray, mask: ConnectivityMask):
    if mask.shape != weights.shape:
        raise ShapeError(f"mask shape {mask.shape} != weight shape {weights.shape}")


class SparseConv:
    kind = "conv"
    has_params = True

    def __init__(self, weights, bias, mask: ConnectivityMask, stride: int = 1,
                 padding: int = 0, rho: float = 1.0, frozen: bool = False):
        self.weights = np.ascontiguousarray(weights, dtype=DTYPE)
        self.bias = np.ascontiguousarray(bias, dtype=DTYPE)
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeError(f"conv weights must be [oc, ic, k, k], got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} filters")
        _check_mask(self.weights, mask)
        self.mask = mask
        self.stride = int(stride)
        self.padding = int(padding)
        self.rho = float(rho)
        self.frozen = frozen
        self.weights = np.where(mask.bits == 1, self.weights, 0.0)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} input channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        if h + 2 * p < k or w + 2 * p < k:
            raise ShapeError(f"input {h}x{w} smaller than kernel {k} after padding {p}")
        return (self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def _w2(self):
        # [oc, ky*kx*ic] to match the channels-last column layout
        w = self.weights * self.mask.bits
        return w.transpose(0, 2, 3, 1).reshape(self.out_channels, -1)

    def _cols(self, x):
        n = x.shape[0]
        _, oh, ow = self.output_shape(x.shape[1:])
        k, s, p = self.kernel_size, self.stride, self.padding
        xh = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(xh, (k, k), axis=(1, 2))[:, ::s, ::s][:, :oh, :ow]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, k * k * self.in_channels)
        return cols, oh, ow

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 4:
            raise ShapeError(f"conv input must be NCHW, got shape {x.shape}")
        cols, oh, ow = self._cols(x)
        y = cols @ self._w2().T + self.bias
        y = y.reshape(x.shape[0], oh, ow, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (x.shape, cols, oh, ow)

    def backward(self, cache, grad_out, need_grad_x: bool = True):
        x_shape, cols, oh, ow = cache
        n, ic, h, w = x_shape
        oc, k, s, p = self.out_channels, self.kernel_size, self.stride, self.padding
        if grad_out.shape != (n, oc, oh, ow):
            raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, oc, oh, ow)}")
        g = grad_out.transpose(0, 2, 3, 1).reshape(n * oh * ow, oc)
        grad_w = (g.T @ cols).reshape(oc, k, k, ic).transpose(0, 3, 1, 2) * self.mask.bits
        grad_b = g.sum(axis=0)
        if not need_grad_x:
            return None, (grad_w, grad_b)
        if s == 1 and oc <= ic:
            grad_x = self._grad_x_flipped(grad_out, h, w)
        else:
            grad_x = self._grad_x_col2im(g, n, h, w, oh, ow)
        return np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2)), (grad_w, grad_b)

    def _grad_x_col2im(self, g, n, h, w, oh, ow):
        ic, k, s, p = self.in_channels, self.kernel_size, self.stride, self.padding
        dcols = (g @ self._w2()).reshape(n, oh, ow, k, k, ic)
        gxp = np.zeros((n, h + 2 * p, w + 2 * p, ic), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + s * oh:s, j:j + s * ow:s, :] += dcols[:, :, :, i, j, :]
        return gxp[:, p:p + h, p:p + w, :]

    def _grad_x_flipped(self, grad_out, h, w):
        # stride 1: grad_x is grad_out correlated with the spatially flipped,
        # channel-swapped kernel under padding k - 1 - p
        oc, ic, k, p = self.out_channels, self.in_channels, self.kernel_size, self.padding
        q = k - 1 - p
        gh = np.pad(grad_out.transpose(0, 2, 3, 1), ((0, 0), (q, q), (q, q), (0, 0)))
        win = sliding_window_view(gh, (k, k), axis=(1, 2))[:, :h, :w]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * oc)
        wf = (self.weights * self.mask.bits)[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(ic, -1)
        return (cols @ wf.T).reshape(grad_out.shape[0], h, w, ic)


class SparseDense:
    kind = "dense"
    has_params = True

    def __init__(self, weights, bias, mask: ConnectivityMask, rho: float = 1.0,
                 frozen: bool = False):
        self.weights = np.ascontiguousarray(weights, dtype=DTYPE)
        self.bias = np.ascontiguousarray(bias, dtype=DTYPE)
        if self.weights.ndim != 2:
            raise ShapeError(f"dense weights must be [out, in], got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs")
        _check_mask(self.weights, mask)
        self.mask = mask
        self.rho = float(rho)
        self.frozen = frozen
        self.weights = np.where(mask.bits == 1, self.weights, 0.0)

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_dim,):
            raise ShapeError(f"dense expects input ({self.in_dim},), got {tuple(in_shape)}")
        return (self.out_dim,)

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"dense expects [n, {self.in_dim}], got {x.shape}")
        return x @ (self.weights * self.mask.bits).T + self.bias, x

    def backward(self, cache, grad_out, need_grad_x: bool = True):
        x = cache
        if grad_out.shape != (x.shape[0], self.out_dim):
            raise ShapeError(f"grad_out shape {grad_out.shape} != {(x.shape[0], self.out_dim)}")
        grad_w = (grad_out.T @ x) * self.mask.bits
        grad_b = grad_out.sum(axis=0)
        grad_x = grad_out @ (self.weights * self.mask.bits) if need_grad_x else None
        return grad_x, (grad_w, grad_b)


class MaxPool2:
    """2x2 max pooling, stride 2. Ties go to the first cell in row-major order."""

    kind = "pool"
    has_params = False

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, x):
        n, c, h, w = x.shape
        self.output_shape((c, h, w))
        a, b = x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2]
        cc, d = x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]
        y = np.maximum(np.maximum(a, b), np.maximum(cc, d))
        return y, (x, y)

    def backward(self, cache, grad_out, need_grad_x: bool = True):
        x, y = cache
        gx = np.zeros_like(x)
        taken = np.zeros(y.shape, dtype=bool)
        for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
            hit = (x[:, :, dy::2, dx::2] == y) & ~taken
            gx[:, :, dy::2, dx::2] = np.where(hit, grad_out, 0.0)
            taken |= hit
        return gx, None


class ReLU:
    """max(0, x); the subgradient at exactly 0 is 0."""

    kind = "relu"
    has_params = False

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        return np.where(x > 0, x, 0.0), x

    def backward(self, cache, grad_out, need_grad_x: bool = True):
        return np.where(cache > 0, grad_out, 0.0), None


class Flatten:
    kind = "flatten"
    has_params = False

    def output_shape(self, in_shape):
        return (math.prod(in_shape),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad_out, need_grad_x: bool = True):
        return grad_out.reshape(cache), None


# Functional entry points -------------------------------------------------

def conv_forward(layer: SparseConv, x):
    return layer.forward(x)[0]


def conv_backward(layer: SparseConv, x, grad_out):
    """Returns ``(grad_x, grad_w, grad_b)``; ``grad_w`` is zero off-mask."""
    _, cache = layer.forward(x)
    gx, (gw, gb) = layer.backward(cache, np.asarray(grad_out, dtype=DTYPE))
    return gx, gw, gb


def dense_forward(layer: SparseDense, x):
    return layer.forward(x)[0]


def dense_backward(layer: SparseDense, x, grad_out):
    _, cache = layer.forward(x)
    gx, (gw, gb) = layer.backward(cache, np.asarray(grad_out, dtype=DTYPE))
    return gx, gw, gb


def maxpool2_forward(x):
    return MaxPool2().forward(np.asarray(x, dtype=DTYPE))[0]


def maxpool2_backward(x, grad_out):
    pool = MaxPool2()
    _, cache = pool.forward(np.asarray(x, dtype=DTYPE))
    return pool.backward(cache, np.asarray(grad_out, dtype=DTYPE))[0]


def relu_forward(x):
    return ReLU().forward(np.asarray(x, dtype=DTYPE))[0]


def relu_backward(x, grad_out):
    return ReLU().backward(np.asarray(x, dtype=DTYPE), np.asarray(grad_out, dtype=DTYPE))[0]


def flatten_forward(x):
    return Flatten().forward(np.asarray(x, dtype=DTYPE))[0]


def flatten_backward(x, grad_out):
    return Flatten().backward(np.shape(x), np.asarray(grad_out, dtype=DTYPE))[0]


def loss_forward(logits, labels):
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    # non-finite logits yield a NaN loss, which the training loop reports
    with np.errstate(invalid="ignore", over="ignore"):
        z = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=1))
        rows = np.arange(n)
        loss = float(np.mean(log_norm - z[rows, labels]))
        grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


# Network -----------------------------------------------------------------

class Network:
    """Ordered layer stack ending in a softmax cross-entropy head."""

    def __init__(self, layers: Sequence, num_classes: int, input_shape,
                 rho: float = 1.0, seed: int = 0):
        self.layers = list(layers)
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.rho = float(rho)
        self.seed = int(seed)
        out = self.shape_chain()[-1]
        if out != (self.num_classes,):
            raise ShapeError(f"network output {out} does not match {self.num_classes} classes")

    def shape_chain(self, batch: Optional[int] = None):
        """Per-sample output shape after every layer (input first)."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        if batch is not None:
            shapes = [(batch,) + s for s in shapes]
        return shapes

    @property
    def masked_layers(self):
        return [l for l in self.layers if l.has_params]

    @property
    def conv_layers(self):
        return [l for l in self.layers if l.kind == "conv"]

    @property
    def dense_layers(self):
        return [l for l in self.layers if l.kind == "dense"]

    def forward(self, x, start: int = 0, stop: Optional[int] = None):
        x = np.asarray(x, dtype=DTYPE)
        for layer in self.layers[start:stop]:
            x = layer.forward(x)[0]
        return x

    def forward_train(self, x, start: int = 0):
        caches = []
        x = np.asarray(x, dtype=DTYPE)
        for layer in self.layers[start:]:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, caches, grad, start: int = 0, need_input_grad: bool = False):
        """Reverse pass over ``layers[start:]``.

        Returns ``(param_grads, grad_input)``; ``param_grads[i]`` belongs to
        ``layers[start + i]`` and is ``None`` for frozen or parameter-free
        layers. Frozen layers still pass gradients through to their inputs.
        """
        layers = self.layers[start:]
        grads = [None] * len(layers)
        for i in range(len(layers) - 1, -1, -1):
            layer = layers[i]
            need_x = i > 0 or need_input_grad
            if not need_x and (not layer.has_params or layer.frozen):
                break
            gx, pg = layer.backward(caches[i], grad, need_grad_x=need_x)
            if layer.has_params and not layer.frozen:
                grads[i] = pg
            grad = gx
        return grads, (grad if need_input_grad else None)

    def loss_and_grads(self, x, labels, start: int = 0):
        logits, caches = self.forward_train(x, start)
        loss, g = loss_forward(logits, labels)
        grads, _ = self.backward(caches, g, start)
        return loss, logits, grads

    def predict(self, x, batch_size: int = 64):
        x = np.asarray(x, dtype=DTYPE)
        out = [self.forward(x[i:i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def clone(self) -> "Network":
        return copy.deepcopy(self)

    def parameter_count(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.masked_layers)

    def surviving_count(self) -> int:
        return sum(l.mask.surviving + l.bias.size for l in self.masked_layers)


def layer_digest(layer) -> str:
    """SHA-256 over a masked layer's mask bits, weights and biases."""
    h = hashlib.sha256()
    h.update(layer.mask.pack())
    h.update(layer.weights.astype("<f8").tobytes())
    h.update(layer.bias.astype("<f8").tobytes())
    return h.hexdigest()


def init_weights(mask: ConnectivityMask, key: int) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)) over surviving taps."""
    bits = mask.bits
    fan_in = bits.reshape(bits.shape[0], -1).sum(axis=1).mean()
    fan_out = np.moveaxis(bits, 1, 0).reshape(bits.shape[1], -1).sum(axis=1).mean()
    a = math.sqrt(6.0 / max(fan_in + fan_out, 1.0))
    u = rng.uniform_stream(key, bits.size).reshape(bits.shape)
    return np.where(bits == 1, (2.0 * u - 1.0) * a, 0.0)


def make_conv(in_ch: int, out_ch: int, k: int, rho: float, seed: int, ordinal: int,
              padding: Optional[int] = None) -> SparseConv:
    pm = probability_map(GaussianConnectivityModel.preset(k, rho))
    mask = realize_conv_mask(pm, out_ch, in_ch, rng.derive_seed(seed, ordinal, rng.STREAM_MASK))
    w = init_weights(mask, rng.derive_seed(seed, ordinal, rng.STREAM_INIT))
    pad = k // 2 if padding is None else padding
    return SparseConv(w, np.zeros(out_ch), mask, stride=1, padding=pad, rho=rho)


def make_dense(in_dim: int, out_dim: int, rho: float, seed: int, ordinal: int) -> SparseDense:
    mask = realize_dense_mask(in_dim, out_dim, rho, rng.derive_seed(seed, ordinal, rng.STREAM_MASK))
    w = init_weights(mask, rng.derive_seed(seed, ordinal, rng.STREAM_INIT))
    return SparseDense(w, np.zeros(out_dim), mask, rho=rho)


def build_network(in_channels: int, input_hw: int, num_classes: int, rho: float, seed: int,
                  conv_channels: Sequence[int] = DEFAULT_CONV_CHANNELS,
                  hidden: int = DEFAULT_HIDDEN, kernel_size: int = DEFAULT_KERNEL) -> Network:
    """conv-relu-pool blocks, then flatten, a hidden ReLU layer and the output layer.

    Masked layers are numbered in stack order; each one's mask and init
    streams are keyed by ``(seed, ordinal)``.
    """
    depth = len(conv_channels)
    if input_hw % (2 ** depth):
        raise ShapeError(f"input_hw={input_hw} must be divisible by {2 ** depth}")
    layers = []
    ch = in_channels
    for i, oc in enumerate(conv_channels):
        layers += [make_conv(ch, oc, kernel_size, rho, seed, i), ReLU(), MaxPool2()]
        ch = oc
    flat = ch * (input_hw // 2 ** depth) ** 2
    layers += [
        Flatten(),
        make_dense(flat, hidden, rho, seed, depth),
        ReLU(),
        make_dense(hidden, num_classes, rho, seed, depth + 1),
    ]
    return Network(layers, num_classes, (in_channels, input_hw, input_hw), rho=rho, seed=seed)


def build_paper_architecture(in_channels: int, input_hw: int, num_classes: int,
                             rho: float, seed: int) -> Network:
    """32/32/64 filters of 5x5, one 64-unit hidden layer."""
    return build_network(in_channels, input_hw, num_classes, rho, seed)
