"""Declarative network construction and whole-network forward/backward.

A :class:`NetworkSpec` lists convolution stacks (3x3 kernels, padding 1,
stride 1, closed by a 2x2/2 max pool) followed by fully connected layers
with dropout and a softmax classifier. :func:`build_network` turns it into a
:class:`Network`, an ordered list of layers with hand-written backward
passes.

Activation placement inside a stack follows one rule per conv layer:

* ``relu`` / ``apl``: conv (with bias) -> activation, channels unchanged.
* ``maxout``: conv producing ``K * width`` maps -> max over the K groups.
* ``mba``: conv (no bias, the MBA biases subsume it) -> MBA, channels grow
  by a factor K. The last conv of the network feeds the classifier rather
  than another conv, so it falls back to ``relu`` unless
  ``NetworkSpec.mba_before_fc`` is set.

ReLU and MBA are nondecreasing, so max pooling commutes with them. For the
last conv of a stack the pool is placed before those activations, which
gives the same values while pooling K times fewer MBA maps.
"""

from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from . import activations as act
from .tensor import ConvGeometry, ShapeError, conv_from_cols, conv2d_backward, im2col
from .tensor import maxpool2d, maxpool2d_backward

__all__ = [
    "ACTIVATIONS",
    "StackSpec",
    "NetworkSpec",
    "ChannelMismatchError",
    "StaleCacheError",
    "Layer",
    "Conv2D",
    "ReLU",
    "MBA",
    "APL",
    "Maxout",
    "MaxPool2D",
    "Flatten",
    "Dense",
    "Dropout",
    "Network",
    "build_network",
    "init_params",
    "softmax_xent",
    "dropout",
]

ACTIVATIONS = ("relu", "mba", "apl", "maxout")


class ChannelMismatchError(ValueError):
    """A layer's declared input does not match what the previous layer produces."""


class StaleCacheError(RuntimeError):
    """Backward called without a matching forward."""


@dataclass(frozen=True)
class StackSpec:
    widths: tuple
    activation: str = "relu"
    k: int = 4

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) < 1:
            raise ValueError(f"stack widths must be positive, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}"
            )
        if self.k < 1:
            raise ValueError(f"K must be >= 1, got {self.k}")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description.

    ``input_shape`` is ``(channels, height, width)``. ``init_std`` is the
    Gaussian weight scale for conv layers, ``fc_init_std`` for fully
    connected ones (defaults to ``init_std``).
    """

    input_shape: tuple = (3, 32, 32)
    n_classes: int = 10
    stacks: tuple = ()
    fc_widths: tuple = (1024, 1024)
    dropout_rate: float = 0.5
    init_std: float = 0.05
    fc_init_std: float = None
    mba_bias_spread: float = 0.75
    mba_before_fc: bool = False
    fc_mba: bool = False
    fc_k: int = 4
    kernel_size: int = 3

    def __post_init__(self):
        stacks = tuple(s if isinstance(s, StackSpec) else StackSpec(*s) for s in self.stacks)
        object.__setattr__(self, "stacks", stacks)
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")

    def replace(self, **changes):
        return replace(self, **changes)

    def conv_plan(self):
        """Per-conv tuples ``(stack_index, conv_index, width, activation, k)``.

        Resolves the MBA fallback for the final conv layer.
        """
        plan = []
        n_convs = sum(len(s.widths) for s in self.stacks)
        seen = 0
        for si, stack in enumerate(self.stacks):
            for ci, width in enumerate(stack.widths):
                seen += 1
                kind = stack.activation
                if kind == "mba" and seen == n_convs and not self.mba_before_fc:
                    kind = "relu"
                plan.append((si, ci, width, kind, stack.k))
        return plan


class Layer:
    """Base layer. Subclasses fill ``params`` and implement ``_forward``/``_backward``."""

    decay = ()

    def __init__(self, name):
        self.name = name
        self.params = OrderedDict()
        self.grads = OrderedDict()
        self._cache = None

    def output_shape(self, shape):
        return shape

    def forward(self, x, training=False, rng=None):
        out, self._cache = self._forward(x, training, rng)
        return out

    def backward(self, grad_out):
        if self._cache is None:
            raise StaleCacheError(f"{self.name}: backward without a matching forward")
        cache, self._cache = self._cache, None
        return self._backward(grad_out, cache)

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Conv2D(Layer):
    decay = ("weight",)

    def __init__(self, name, in_channels, out_channels, kernel_size=3, padding=1, bias=True):
        super().__init__(name)
        self.geometry = ConvGeometry(in_channels, out_channels, kernel_size, 1, padding)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.params["weight"] = np.zeros(self.geometry.weight_shape)
        if bias:
            self.params["bias"] = np.zeros(out_channels)

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ChannelMismatchError(
                f"{self.name} declares {self.in_channels} input channels but receives {c}"
            )
        return (self.out_channels,) + self.geometry.output_size(h, w)

    def _forward(self, x, training, rng):
        geo = self.geometry
        cols, (ho, wo) = im2col(x, geo.kernel_size, geo.stride, geo.padding)
        out = conv_from_cols(cols, self.params["weight"], self.params.get("bias"))
        return out.reshape(x.shape[0], geo.out_channels, ho, wo), (x, cols)

    def _backward(self, g, cache):
        x, cols = cache
        has_bias = "bias" in self.params
        res = conv2d_backward(x, self.params["weight"], g, self.geometry,
                              with_bias=has_bias, cols=cols)
        self.grads["weight"] = res[1]
        if has_bias:
            self.grads["bias"] = res[2]
        return res[0]


class ReLU(Layer):
    def _forward(self, x, training, rng):
        return act.relu_forward(x), x

    def _backward(self, g, x):
        return act.relu_backward(x, g)


class MBA(Layer):
    """Multi-bias activation over ``channels`` inputs with ``k`` bands each."""

    def __init__(self, name, channels, k):
        super().__init__(name)
        self.in_channels, self.k = channels, k
        self.out_channels = channels * k
        self.params["bias"] = np.zeros((channels, k))

    def output_shape(self, shape):
        if shape[0] != self.in_channels:
            raise ChannelMismatchError(
                f"{self.name} declares {self.in_channels} input channels but receives {shape[0]}"
            )
        return (self.out_channels,) + tuple(shape[1:])

    def _forward(self, x, training, rng):
        return act.mba_forward(x, self.params["bias"]), x

    def _backward(self, g, x):
        gx, gb = act.mba_backward(x, self.params["bias"], g)
        self.grads["bias"] = gb
        return gx


class APL(Layer):
    def __init__(self, name, channels, k, spatial):
        super().__init__(name)
        self.in_channels = self.out_channels = channels
        self.k, self.spatial = k, tuple(spatial)
        self.params["slope"] = np.zeros((k,) + self.spatial)
        self.params["hinge"] = np.zeros((k,) + self.spatial)

    def output_shape(self, shape):
        if shape[0] != self.in_channels or tuple(shape[1:]) != self.spatial:
            raise ChannelMismatchError(
                f"{self.name} expects input {(self.in_channels,) + self.spatial}, got {shape}"
            )
        return shape

    def _forward(self, x, training, rng):
        return act.apl_forward(x, self.params["slope"], self.params["hinge"]), x

    def _backward(self, g, x):
        gx, ga, gb = act.apl_backward(x, self.params["slope"], self.params["hinge"], g)
        self.grads["slope"], self.grads["hinge"] = ga, gb
        return gx


class Maxout(Layer):
    """Max over ``k`` groups of ``channels`` maps; input channel ``k*channels + n``."""

    def __init__(self, name, channels, k):
        super().__init__(name)
        self.out_channels, self.k = channels, k
        self.in_channels = channels * k

    def output_shape(self, shape):
        if shape[0] != self.in_channels:
            raise ChannelMismatchError(
                f"{self.name} declares {self.in_channels} input channels but receives {shape[0]}"
            )
        return (self.out_channels,) + tuple(shape[1:])

    def _forward(self, x, training, rng):
        xs = x.reshape((x.shape[0], self.k, self.out_channels) + x.shape[2:])
        out, arg = act.maxout_forward(xs)
        return out, (arg, x.shape)

    def _backward(self, g, cache):
        arg, shape = cache
        return act.maxout_backward(g, arg, self.k).reshape(shape)


class MaxPool2D(Layer):
    def __init__(self, name, window=2, stride=2):
        super().__init__(name)
        self.window, self.stride = window, stride

    def output_shape(self, shape):
        c, h, w = shape
        if self.window > h or self.window > w:
            raise ShapeError(f"{self.name}: window {self.window} larger than {h}x{w} input")
        return (c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)

    def _forward(self, x, training, rng):
        out, arg = maxpool2d(x, self.window, self.stride)
        return out, (arg, x.shape)

    def _backward(self, g, cache):
        arg, shape = cache
        return maxpool2d_backward(g, arg, shape, self.window, self.stride)


class Flatten(Layer):
    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def _forward(self, x, training, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def _backward(self, g, shape):
        return g.reshape(shape)


class Dense(Layer):
    decay = ("weight",)

    def __init__(self, name, in_features, out_features):
        super().__init__(name)
        self.in_channels, self.out_channels = in_features, out_features
        self.params["weight"] = np.zeros((in_features, out_features))
        self.params["bias"] = np.zeros(out_features)

    def output_shape(self, shape):
        if shape != (self.in_channels,):
            raise ChannelMismatchError(
                f"{self.name} declares {self.in_channels} inputs but receives shape {shape}"
            )
        return (self.out_channels,)

    def _forward(self, x, training, rng):
        return x @ self.params["weight"] + self.params["bias"], x

    def _backward(self, g, x):
        self.grads["weight"] = x.T @ g
        self.grads["bias"] = g.sum(axis=0)
        return g @ self.params["weight"].T


def dropout(x, rate, training, rng=None):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is None when inactive."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


class Dropout(Layer):
    def __init__(self, name, rate):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def _forward(self, x, training, rng):
        y, mask = dropout(x, self.rate, training, rng)
        return y, (mask,)

    def _backward(self, g, cache):
        mask = cache[0]
        return g if mask is None else g * mask


def softmax_xent(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad /= b
    return float(loss), grad


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class Network:
    """Ordered layer list with channel bookkeeping validated at construction."""

    def __init__(self, layers, input_shape, spec=None, dtype=np.float64):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self._pending_backward = False
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ChannelMismatchError(f"layer {layer.name}: {exc}") from exc
            self.shapes.append(shape)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.astype(self.dtype)

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        for layer in self.layers:
            for k, v in layer.params.items():
                layer.params[k] = np.ascontiguousarray(v, dtype=self.dtype)
        return self

    @property
    def output_shape(self):
        return self.shapes[-1]

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"no layer named {name!r}")

    def named_params(self):
        out = OrderedDict()
        for layer in self.layers:
            for k, v in layer.params.items():
                out[f"{layer.name}.{k}"] = v
        return out

    def named_grads(self):
        out = OrderedDict()
        for layer in self.layers:
            for k in layer.params:
                out[f"{layer.name}.{k}"] = layer.grads[k]
        return out

    def decayed(self):
        """Names of parameters subject to weight decay (conv and FC weights)."""
        return {f"{l.name}.{k}" for l in self.layers for k in l.params if k in l.decay}

    def set_params(self, params):
        own = self.named_params()
        missing = set(own) - set(params)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for layer in self.layers:
            for k in layer.params:
                v = np.asarray(params[f"{layer.name}.{k}"])
                if v.shape != layer.params[k].shape:
                    raise ShapeError(
                        f"{layer.name}.{k}: shape {v.shape} != {layer.params[k].shape}"
                    )
                layer.params[k] = np.array(v, dtype=self.dtype)

    def n_params(self):
        return sum(l.n_params() for l in self.layers)

    def forward(self, x, training=False, rng=None):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} != network input {self.input_shape}")
        for layer in self.layers:
            x = layer.forward(x, training, rng)
        self._pending_backward = True
        return x

    def backward(self, grad_logits):
        """Backpropagate; returns the gradient of every parameter by name."""
        if not self._pending_backward:
            raise StaleCacheError("backward called without a matching forward")
        self._pending_backward = False
        g = np.asarray(grad_logits, dtype=self.dtype)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        self.input_grad = g
        return self.named_grads()

    def loss_and_grads(self, x, y, training=True, rng=None):
        logits = self.forward(x, training, rng)
        loss, g = softmax_xent(logits, y)
        return loss, self.backward(g), logits

    def predict_scores(self, x, batch_size=500):
        """Eval-mode softmax probabilities, computed in batches."""
        out = []
        for start in range(0, len(x), batch_size):
            out.append(softmax(self.forward(x[start:start + batch_size])))
        self._pending_backward = False
        for layer in self.layers:
            layer._cache = None
        return np.concatenate(out) if out else np.zeros((0,) + self.output_shape)

    def __repr__(self):
        body = ", ".join(l.name for l in self.layers)
        return f"Network([{body}])"


def build_network(spec, dtype=np.float64):
    """Instantiate ``spec`` with zero parameters; see :func:`init_params`."""
    layers = []
    c, h, w = spec.input_shape
    plan = spec.conv_plan()
    by_stack = {}
    for entry in plan:
        by_stack.setdefault(entry[0], []).append(entry)
    for si, stack in enumerate(spec.stacks):
        prefix = f"stack{si + 1}"
        entries = by_stack[si]
        for _, ci, width, kind, k in entries:
            tag = f"{prefix}.{{}}{ci + 1}"
            last = ci == len(entries) - 1
            conv_out = width * k if kind == "maxout" else width
            layers.append(
                Conv2D(tag.format("conv"), c, conv_out, spec.kernel_size,
                       spec.kernel_size // 2, bias=kind != "mba")
            )
            pool_first = last and kind in ("relu", "mba")
            if pool_first:
                layers.append(MaxPool2D(f"{prefix}.pool"))
                h, w = h // 2, w // 2
            if kind == "relu":
                layers.append(ReLU(tag.format("relu")))
                c = width
            elif kind == "mba":
                layers.append(MBA(tag.format("mba"), width, k))
                c = width * k
            elif kind == "apl":
                layers.append(APL(tag.format("apl"), width, k, (h, w)))
                c = width
            else:
                layers.append(Maxout(tag.format("maxout"), width, k))
                c = width
            if last and not pool_first:
                layers.append(MaxPool2D(f"{prefix}.pool"))
                h, w = h // 2, w // 2
    layers.append(Flatten("flatten"))
    features = c * h * w
    for fi, width in enumerate(spec.fc_widths):
        layers.append(Dense(f"fc{fi + 1}", features, width))
        if spec.fc_mba:
            layers.append(MBA(f"fc{fi + 1}.mba", width, spec.fc_k))
            features = width * spec.fc_k
        else:
            layers.append(ReLU(f"fc{fi + 1}.relu"))
            features = width
        layers.append(Dropout(f"fc{fi + 1}.dropout", spec.dropout_rate))
    layers.append(Dense("classifier", features, spec.n_classes))
    return Network(layers, spec.input_shape, spec=spec, dtype=dtype)


def init_params(net, seed=0):
    """Gaussian weights, zero biases, evenly spaced MBA/APL hinges. Deterministic in ``seed``."""
    spec = net.spec or NetworkSpec(input_shape=net.input_shape)
    conv_std = spec.init_std
    fc_std = spec.fc_init_std if spec.fc_init_std is not None else spec.init_std
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        if isinstance(layer, (Conv2D, Dense)):
            std = conv_std if isinstance(layer, Conv2D) else fc_std
            w = layer.params["weight"]
            layer.params["weight"] = rng.normal(0.0, std, w.shape).astype(net.dtype)
            if "bias" in layer.params:
                layer.params["bias"] = np.zeros_like(layer.params["bias"])
        elif isinstance(layer, MBA):
            layer.params["bias"] = act.default_mba_biases(
                layer.in_channels, layer.k, spec.mba_bias_spread, net.dtype
            )
        elif isinstance(layer, APL):
            hinges = act.default_mba_biases(1, layer.k, spec.mba_bias_spread)[0]
            layer.params["slope"] = np.zeros((layer.k,) + layer.spatial, dtype=net.dtype)
            layer.params["hinge"] = np.broadcast_to(
                hinges.reshape((-1,) + (1,) * len(layer.spatial)), layer.params["hinge"].shape
            ).astype(net.dtype)
    return net
