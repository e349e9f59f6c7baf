"""Deterministic float64 feed-forward networks with hand-derived backprop.

Layers: Dense, Conv2D (valid padding, NHWC), ReLU, MaxPool2x2, Flatten.
Losses: max-subtracted softmax and clamped negative log likelihood.
Training: SGD with momentum and weight decay. Parameters are drawn
Glorot-uniform from numpy's PCG64 generator (``np.random.default_rng``),
so construction and training are bit-reproducible given the same seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, UsageError

EPS = 1e-12  # probability clamp applied before any log


def entropy_tuple(*parts) -> tuple[int, ...]:
    """Flatten ints/tuples into one entropy tuple for default_rng."""
    flat: list[int] = []
    for part in parts:
        if isinstance(part, (tuple, list)):
            flat.extend(int(p) for p in part)
        else:
            flat.append(int(part))
    return tuple(flat)


class Parameter:
    """Learnable float64 array paired with a same-shaped gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)

    @property
    def size(self) -> int:
        return self.data.size


# ---------------------------------------------------------------------------
# Layer specs


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    seed: int | None = None

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"Dense dims must be positive, got {self.in_dim}x{self.out_dim}")


@dataclass(frozen=True)
class Conv2D:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    seed: int | None = None

    def __post_init__(self):
        if min(self.in_ch, self.out_ch, self.kernel, self.stride) < 1:
            raise ConfigError("Conv2D channel/kernel/stride values must be positive")


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool2x2:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Dense | Conv2D | ReLU | MaxPool2x2 | Flatten


def _glorot_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _layer_rng(spec_seed, net_seed, index):
    if spec_seed is not None:
        return np.random.default_rng(spec_seed)
    return np.random.default_rng(entropy_tuple(net_seed, index))


# ---------------------------------------------------------------------------
# Materialized layers


class _DenseLayer:
    def __init__(self, spec: Dense, rng):
        self.w = Parameter(_glorot_uniform(rng, (spec.in_dim, spec.out_dim), spec.in_dim, spec.out_dim))
        self.b = Parameter(np.zeros(spec.out_dim))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        self._x = x
        return x @ self.w.data + self.b.data

    def backward(self, dy):
        if self._x is None:
            raise UsageError("Dense.backward() before forward()")
        self.w.grad += self._x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return dy @ self.w.data.T


class _ConvLayer:
    """Valid-padding convolution over NHWC batches via patch matrices."""

    def __init__(self, spec: Conv2D, rng):
        k = spec.kernel
        fan_in = spec.in_ch * k * k
        fan_out = spec.out_ch * k * k
        self.w = Parameter(_glorot_uniform(rng, (k * k * spec.in_ch, spec.out_ch), fan_in, fan_out))
        self.b = Parameter(np.zeros(spec.out_ch))
        self.kernel = k
        self.stride = spec.stride
        self._cols = None
        self._xshape = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        b, h, w, cin = x.shape
        k, s = self.kernel, self.stride
        ho = (h - k) // s + 1
        wo = (w - k) // s + 1
        cols = np.empty((b, ho, wo, k * k * cin))
        for i in range(ho):
            for j in range(wo):
                cols[:, i, j, :] = x[:, i * s:i * s + k, j * s:j * s + k, :].reshape(b, -1)
        self._cols = cols
        self._xshape = x.shape
        return cols @ self.w.data + self.b.data

    def backward(self, dy):
        if self._cols is None:
            raise UsageError("Conv2D.backward() before forward()")
        b, h, w, cin = self._xshape
        k, s = self.kernel, self.stride
        ho, wo = dy.shape[1], dy.shape[2]
        self.b.grad += dy.sum(axis=(0, 1, 2))
        self.w.grad += self._cols.reshape(-1, k * k * cin).T @ dy.reshape(-1, dy.shape[3])
        dcols = dy @ self.w.data.T
        dx = np.zeros(self._xshape)
        for i in range(ho):
            for j in range(wo):
                dx[:, i * s:i * s + k, j * s:j * s + k, :] += dcols[:, i, j, :].reshape(b, k, k, cin)
        return dx


class _ReLULayer:
    def __init__(self):
        self._mask = None

    def params(self):
        return []

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            raise UsageError("ReLU.backward() before forward()")
        return dy * self._mask


class _MaxPoolLayer:
    """2x2 max pooling, stride 2; gradient goes to the argmax cell only."""

    def __init__(self):
        self._arg = None
        self._xshape = None

    def params(self):
        return []

    def forward(self, x):
        b, h, w, c = x.shape
        windows = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
        flat = windows.reshape(b, h // 2, w // 2, 4, c)
        arg = flat.argmax(axis=3)  # first max wins: deterministic tie-break
        y = np.take_along_axis(flat, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        self._arg = arg
        self._xshape = x.shape
        return y

    def backward(self, dy):
        if self._arg is None:
            raise UsageError("MaxPool2x2.backward() before forward()")
        b, h, w, c = self._xshape
        dflat = np.zeros((b, h // 2, w // 2, 4, c))
        np.put_along_axis(dflat, self._arg[:, :, :, None, :], dy[:, :, :, None, :], axis=3)
        return dflat.reshape(b, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


class _FlattenLayer:
    def __init__(self):
        self._xshape = None

    def params(self):
        return []

    def forward(self, x):
        self._xshape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        if self._xshape is None:
            raise UsageError("Flatten.backward() before forward()")
        return dy.reshape(self._xshape)


def _materialize(spec, shape, net_seed, index):
    if isinstance(spec, Dense):
        if len(shape) != 1:
            raise ConfigError(f"layer {index}: Dense needs a flat input, got {shape}; add Flatten first")
        if shape[0] != spec.in_dim:
            raise ConfigError(f"layer {index}: Dense in_dim {spec.in_dim} != incoming width {shape[0]}")
        return _DenseLayer(spec, _layer_rng(spec.seed, net_seed, index)), (spec.out_dim,)
    if isinstance(spec, Conv2D):
        if len(shape) != 3:
            raise ConfigError(f"layer {index}: Conv2D needs an HxWxC input, got {shape}")
        h, w, ch = shape
        if ch != spec.in_ch:
            raise ConfigError(f"layer {index}: Conv2D in_ch {spec.in_ch} != incoming channels {ch}")
        ho = (h - spec.kernel) // spec.stride + 1
        wo = (w - spec.kernel) // spec.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigError(f"layer {index}: kernel {spec.kernel} larger than input {h}x{w}")
        return _ConvLayer(spec, _layer_rng(spec.seed, net_seed, index)), (ho, wo, spec.out_ch)
    if isinstance(spec, ReLU):
        return _ReLULayer(), shape
    if isinstance(spec, MaxPool2x2):
        if len(shape) != 3:
            raise ConfigError(f"layer {index}: MaxPool2x2 needs an HxWxC input, got {shape}")
        h, w, ch = shape
        if h % 2 or w % 2:
            raise ConfigError(f"layer {index}: MaxPool2x2 needs even spatial dims, got {h}x{w}")
        return _MaxPoolLayer(), (h // 2, w // 2, ch)
    if isinstance(spec, Flatten):
        return _FlattenLayer(), (int(np.prod(shape)),)
    raise ConfigError(f"layer {index}: unknown layer spec {spec!r}")


class Network:
    """Feed-forward layer stack with explicit, cached backward passes.

    Shape compatibility between consecutive layers is validated at build
    time; the parameter set is fixed afterwards. ``forward`` accepts either
    a batch shaped (B, *input_shape) or flat rows (B, prod(input_shape)).
    """

    def __init__(self, specs, input_shape, seed=0):
        if isinstance(input_shape, int):
            input_shape = (input_shape,)
        self.specs = tuple(specs)
        self.input_shape = tuple(int(s) for s in input_shape)
        if any(s < 1 for s in self.input_shape):
            raise ConfigError(f"input shape must be positive, got {self.input_shape}")
        self.seed = seed
        self.layers = []
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            layer, shape = _materialize(spec, shape, seed, i)
            self.layers.append(layer)
        self.output_shape = shape
        self._params = [p for layer in self.layers for p in layer.params()]
        self._forward_done = False

    @property
    def out_dim(self) -> int:
        if len(self.output_shape) != 1:
            raise ConfigError(f"network output {self.output_shape} is not flat; add Flatten/Dense")
        return self.output_shape[0]

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def n_params(self) -> int:
        return sum(p.size for p in self._params)

    def zero_grad(self):
        for p in self._params:
            p.grad[...] = 0.0

    def forward(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        flat_width = int(np.prod(self.input_shape))
        if batch.ndim == 2 and len(self.input_shape) > 1:
            if batch.shape[1] != flat_width:
                raise ConfigError(f"batch width {batch.shape[1]} != input size {flat_width}")
            batch = batch.reshape((batch.shape[0],) + self.input_shape)
        if batch.ndim != 1 + len(self.input_shape) or batch.shape[1:] != self.input_shape:
            raise ConfigError(f"batch shape {batch.shape} does not match input {self.input_shape}")
        if batch.shape[0] < 1:
            raise ConfigError("empty batch")
        out = batch
        for layer in self.layers:
            out = layer.forward(out)
        self._forward_done = True
        return out

    def backward(self, dout):
        """Propagate an output gradient; returns the input gradient."""
        if not self._forward_done:
            raise UsageError("Network.backward() before forward()")
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def param_vector(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([p.data.ravel() for p in self._params])

    def load_param_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        expected = self.n_params()
        if vec.size != expected:
            raise ConfigError(f"parameter vector has {vec.size} values, network needs {expected}")
        pos = 0
        for p in self._params:
            p.data[...] = vec[pos:pos + p.size].reshape(p.data.shape)
            pos += p.size


# ---------------------------------------------------------------------------
# Losses


def softmax(logits):
    """Row-wise softmax with max subtraction; rows sum to 1 within 1e-12."""
    z = logits - logits.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_backward(probs, gprobs):
    """Apply the softmax Jacobian to a gradient in probability space."""
    dot = np.sum(gprobs * probs, axis=1, keepdims=True)
    return probs * (gprobs - dot)


def check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    return labels


def log_grad_coef(picked, batch):
    """Derivative of -log(max(p, EPS))/batch wrt p: zero in the clamped region."""
    coef = -1.0 / (batch * np.maximum(picked, EPS))
    return np.where(picked > EPS, coef, 0.0)


def nll_loss(probs, labels) -> float:
    """Mean negative log likelihood of the given labels, clamped at EPS."""
    labels = check_labels(labels, probs.shape[1])
    b = probs.shape[0]
    picked = probs[np.arange(b), labels]
    return float(-np.mean(np.log(np.maximum(picked, EPS))))


def nll_loss_grad(probs, labels):
    labels = check_labels(labels, probs.shape[1])
    b = probs.shape[0]
    picked = probs[np.arange(b), labels]
    g = np.zeros_like(probs)
    g[np.arange(b), labels] = log_grad_coef(picked, b)
    return g


# ---------------------------------------------------------------------------
# Optimizer


class SGD:
    """Momentum SGD: v <- momentum*v + grad + weight_decay*theta; theta -= lr*v.

    Gradients are zeroed after each step. Velocity buffers start at zero.
    """

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ConfigError(f"weight decay must be non-negative, got {weight_decay}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.params = list(params)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def add_param(self, param: Parameter):
        self.params.append(param)
        self.velocity.append(np.zeros_like(param.data))

    def step(self):
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= self.lr * v
            p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(params, loss_fn, h=1e-6) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn()`` must return the scalar loss and leave freshly computed
    gradients in every Parameter (zeroing them first). Relative error is
    |a - n| / max(|a|, |n|, 1e-12), maximized over all parameter entries.
    """
    loss_fn()
    analytic = np.concatenate([p.grad.ravel().copy() for p in params])
    numeric = np.empty_like(analytic)
    pos = 0
    for p in params:
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp = loss_fn()
            flat[j] = orig - h
            lm = loss_fn()
            flat[j] = orig
            numeric[pos] = (lp - lm) / (2.0 * h)
            pos += 1
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check_classifier(net: Network, batch, labels, h=1e-6) -> float:
    """Gradient check of the softmax + NLL classification loss."""

    def loss_fn():
        net.zero_grad()
        probs = softmax(net.forward(batch))
        loss = nll_loss(probs, labels)
        net.backward(softmax_backward(probs, nll_loss_grad(probs, labels)))
        return loss

    return grad_check(net.parameters(), loss_fn, h)
