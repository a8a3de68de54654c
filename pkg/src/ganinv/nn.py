"""Layer specifications, networks, forward evaluation and reverse passes.

A :class:`Network` is an immutable list of layer specs plus one parameter
dict per layer. :func:`forward` returns the output and a :class:`ForwardTrace`
holding what the reverse passes need; :func:`backward_input` and
:func:`backward_params` turn an output cotangent into gradients with respect
to the network input and the trainable parameters.

An ``Upsample2x`` layer directly followed by a stride-1 "same" ``Conv`` is
evaluated with the fused sub-pixel kernel from :mod:`ganinv.tensor`; the
result is the same map, computed with fewer multiplies.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from ganinv import tensor as T
from ganinv.errors import DimensionError, ModeError, NumericError, TraceError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
INIT_STD = 0.02


class BnMode(enum.Enum):
    BATCH_STATS = "batch"
    FIXED_STATS = "fixed"


# ---------------------------------------------------------------- layer specs

@dataclass(frozen=True)
class FullyConnected:
    in_features: int
    out_features: int

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise DimensionError(f"fc expects ({self.in_features},), got {shape}")
        return (self.out_features,)

    def param_shapes(self):
        return {"weight": (self.in_features, self.out_features),
                "bias": (self.out_features,)}


@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int
    k: int
    stride: int = 1
    pad: int | tuple[int, int] = 0

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_ch:
            raise DimensionError(f"conv expects ({self.in_ch}, H, W), got {shape}")
        return (self.out_ch,
                T.conv_output_extent(shape[1], self.k, self.stride, self.pad),
                T.conv_output_extent(shape[2], self.k, self.stride, self.pad))

    def param_shapes(self):
        return {"weight": (self.out_ch, self.in_ch, self.k, self.k),
                "bias": (self.out_ch,)}


@dataclass(frozen=True)
class Upsample2x:
    def output_shape(self, shape):
        if len(shape) != 3:
            raise DimensionError(f"upsample expects (C, H, W), got {shape}")
        return (shape[0], 2 * shape[1], 2 * shape[2])

    def param_shapes(self):
        return {}


@dataclass(frozen=True)
class Reshape:
    shape: tuple[int, ...]

    def output_shape(self, shape):
        if math.prod(shape) != math.prod(self.shape):
            raise DimensionError(f"cannot reshape {shape} to {self.shape}")
        return tuple(self.shape)

    def param_shapes(self):
        return {}


@dataclass(frozen=True)
class BatchNorm:
    features: int

    def output_shape(self, shape):
        if shape[0] != self.features or len(shape) not in (1, 3):
            raise DimensionError(f"batch norm over {self.features} features, got {shape}")
        return shape

    def param_shapes(self):
        f = (self.features,)
        return {"gain": f, "shift": f, "running_mean": f, "running_var": f}


ACTIVATIONS = ("relu", "leaky_relu", "sigmoid", "tanh")


@dataclass(frozen=True)
class Activation:
    kind: str
    slope: float = 0.2

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ValueError(f"leaky slope must lie in (0, 1), got {self.slope}")

    def output_shape(self, shape):
        return shape

    def param_shapes(self):
        return {}


LayerSpec = FullyConnected | Conv | Upsample2x | Reshape | BatchNorm | Activation

# running statistics are stored with the layer but never trained
NON_TRAINABLE = ("running_mean", "running_var")


def layer_name(index: int, layer) -> str:
    tag = {FullyConnected: "fc", Conv: "conv", Upsample2x: "up", Reshape: "reshape",
           BatchNorm: "bn", Activation: "act"}[type(layer)]
    return f"{index}_{tag}"


# ---------------------------------------------------------------- network

@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple
    params: tuple
    input_shape: tuple[int, ...]
    shapes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if not self.layers:
            raise DimensionError("network has no layers")
        if len(self.params) != len(self.layers):
            raise DimensionError("one parameter dict per layer required")
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        object.__setattr__(self, "shapes", tuple(shapes))
        frozen = []
        for i, (layer, p) in enumerate(zip(self.layers, self.params)):
            expected = layer.param_shapes()
            if set(p) != set(expected):
                raise DimensionError(f"layer {i}: params {sorted(p)} != {sorted(expected)}")
            fp = {}
            for name, arr in p.items():
                if not (isinstance(arr, np.ndarray) and arr.dtype == T.FLOAT
                        and not arr.flags.writeable and arr.flags.c_contiguous):
                    arr = np.array(arr, dtype=T.FLOAT, order="C")
                    arr.flags.writeable = False
                if arr.shape != expected[name]:
                    raise DimensionError(
                        f"layer {i} {name}: shape {arr.shape} != {expected[name]}")
                T.check_finite(arr, f"layer {i} {name}")
                if name == "running_var" and (arr < 0).any():
                    raise NumericError(f"layer {i}: negative running variance")
                fp[name] = arr
            frozen.append(fp)
        object.__setattr__(self, "params", tuple(frozen))

    @property
    def output_shape(self):
        return self.shapes[-1]

    @property
    def latent_dim(self) -> int:
        return math.prod(self.input_shape)

    @property
    def has_batchnorm(self) -> bool:
        return any(isinstance(layer, BatchNorm) for layer in self.layers)

    def with_params(self, params) -> "Network":
        return Network(self.layers, params, self.input_shape)

    def trainable(self):
        """Per-layer dicts of the trainable parameters."""
        return tuple({k: v for k, v in p.items() if k not in NON_TRAINABLE}
                     for p in self.params)

    def with_trainable(self, trainable) -> "Network":
        merged = [{**p, **t} for p, t in zip(self.params, trainable)]
        return self.with_params(merged)

    def num_parameters(self, trainable_only: bool = True) -> int:
        src = self.trainable() if trainable_only else self.params
        return sum(a.size for p in src for a in p.values())


def init_params(layers, rng: np.random.Generator):
    """Weights ~ N(0, 0.02), zero biases, unit gain and zero shift for batch norm."""
    params = []
    for layer in layers:
        shapes = layer.param_shapes()
        if isinstance(layer, (FullyConnected, Conv)):
            params.append({"weight": rng.normal(0.0, INIT_STD, shapes["weight"]),
                           "bias": np.zeros(shapes["bias"])})
        elif isinstance(layer, BatchNorm):
            f = layer.features
            params.append({"gain": np.ones(f), "shift": np.zeros(f),
                           "running_mean": np.zeros(f), "running_var": np.ones(f)})
        else:
            params.append({})
    return params


def build_network(layers, input_shape, seed: int | np.random.Generator = 0) -> Network:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Network(tuple(layers), init_params(layers, rng), tuple(input_shape))


# ---------------------------------------------------------------- elementwise

def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activation(kind: str, x, slope: float = 0.2) -> np.ndarray:
    x = np.asarray(x, dtype=T.FLOAT)
    if kind == "relu":
        out = np.maximum(x, 0.0)
    elif kind == "leaky_relu":
        out = np.where(x > 0, x, slope * x)
    elif kind == "sigmoid":
        out = _sigmoid(x)
    elif kind == "tanh":
        out = np.tanh(x)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return T.check_finite(out, kind)


def activation_grad(kind: str, x, grad_out, slope: float = 0.2, out=None) -> np.ndarray:
    """Adjoint of :func:`activation` at ``x``; ``out`` may pass the cached forward value."""
    x = np.asarray(x, dtype=T.FLOAT)
    g = np.asarray(grad_out, dtype=T.FLOAT)
    if kind == "relu":
        return np.where(x > 0, g, 0.0)
    if kind == "leaky_relu":
        return np.where(x > 0, g, slope * g)
    if out is None:
        out = activation(kind, x, slope)
    if kind == "sigmoid":
        return g * out * (1.0 - out)
    if kind == "tanh":
        return g * (1.0 - out * out)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- batch norm

def _bn_axes(x):
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise DimensionError(f"batch norm needs 2-D or 4-D input, got {x.shape}")


def _bn_forward(x, gain, shift, mode, running, eps):
    axes, bshape = _bn_axes(x)
    if x.shape[1] != gain.shape[0]:
        raise DimensionError(f"batch norm over {gain.shape[0]} features, input {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if mode is BnMode.BATCH_STATS:
        if x.shape[0] < 2:
            raise ModeError("batch statistics need a batch of at least 2 samples")
        mean, var = T.batch_stats(x, axes)
    else:
        mean, var = running
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    y = xhat * gain.reshape(bshape) + shift.reshape(bshape)
    return T.check_finite(y, "batch norm"), {"xhat": xhat, "inv_std": inv_std,
                                            "mean": mean, "var": var}


def batchnorm_forward(x, gain, shift, mode: BnMode, running, eps: float = BN_EPS):
    """y = (x - m) / sqrt(v + eps) * gain + shift with (m, v) chosen by ``mode``."""
    x = np.asarray(x, dtype=T.FLOAT)
    return _bn_forward(x, np.asarray(gain, dtype=T.FLOAT), np.asarray(shift, dtype=T.FLOAT),
                       mode, running, eps)[0]


def _bn_backward(g, gain, cache, mode, x_shape):
    axes, bshape = _bn_axes(g)
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    grad_gain = (g * xhat).sum(axis=axes)
    grad_shift = g.sum(axis=axes)
    dxhat = g * gain.reshape(bshape)
    if mode is BnMode.BATCH_STATS:
        mean_d = dxhat.mean(axis=axes, keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=axes, keepdims=True)
        dx = (dxhat - mean_d - xhat * mean_dx) * inv_std.reshape(bshape)
    else:
        dx = dxhat * inv_std.reshape(bshape)
    return dx, grad_gain, grad_shift


# ---------------------------------------------------------------- forward / backward

@dataclass(eq=False)
class ForwardTrace:
    network: Network
    mode: BnMode
    inputs: list          # per-layer input (None where an upsample was fused away)
    caches: list          # per-layer extra state (batch norm statistics, fused flag)
    output: np.ndarray

    @property
    def batch_stats(self):
        """{layer index: (mean, var)} used by each batch-norm layer."""
        if self.mode is not BnMode.BATCH_STATS:
            return {}
        return {i: (c["mean"], c["var"]) for i, c in enumerate(self.caches)
                if c is not None and "var" in c}


def _fused_at(net, i):
    return (isinstance(net.layers[i], Upsample2x) and i + 1 < len(net.layers)
            and isinstance(net.layers[i + 1], Conv)
            and T.fusable(net.layers[i + 1].k, net.layers[i + 1].stride, net.layers[i + 1].pad))


def forward(net: Network, x, mode: BnMode = BnMode.FIXED_STATS):
    """Evaluate ``net`` on a batch; returns ``(output, trace)``."""
    x = T.as_tensor(x, name="network input")
    if tuple(x.shape[1:]) != net.input_shape:
        raise DimensionError(
            f"input shape {x.shape} does not match network input (B, {net.input_shape})")
    mode = BnMode(mode)
    b = x.shape[0]
    inputs, caches = [], []
    h = x
    skip_upsample = False
    for i, (layer, p) in enumerate(zip(net.layers, net.params)):
        cache = None
        if skip_upsample:
            # fused with the preceding upsample layer
            inputs.append(None)
            h = T.upsample_conv2d(inputs[i - 1], p["weight"], layer.pad)
            h = h + p["bias"].reshape(1, -1, 1, 1)
            cache = {"fused": True}
            skip_upsample = False
        elif isinstance(layer, Upsample2x) and _fused_at(net, i):
            inputs.append(h)
            caches.append({"fused": True})
            skip_upsample = True
            continue
        else:
            inputs.append(h)
            if isinstance(layer, FullyConnected):
                h = T.matmul(h, p["weight"]) + p["bias"]
            elif isinstance(layer, Conv):
                h = T.conv2d(h, p["weight"], layer.stride, layer.pad)
                h = h + p["bias"].reshape(1, -1, 1, 1)
            elif isinstance(layer, Upsample2x):
                h = T.upsample2x(h)
            elif isinstance(layer, Reshape):
                h = h.reshape((b,) + tuple(layer.shape))
            elif isinstance(layer, BatchNorm):
                h, cache = _bn_forward(h, p["gain"], p["shift"], mode,
                                       (p["running_mean"], p["running_var"]), BN_EPS)
            elif isinstance(layer, Activation):
                h = activation(layer.kind, h, layer.slope)
            else:
                raise TypeError(f"unknown layer {layer!r}")
        caches.append(cache)
    T.check_finite(h, "network output")
    return h, ForwardTrace(net, mode, inputs, caches, h)


def backward(net: Network, trace: ForwardTrace, grad_output,
             need_input: bool = True, need_params: bool = True, start: int | None = None):
    """Reverse pass; returns ``(grad_input, param_grads)`` (either may be None).

    ``param_grads`` holds one dict per layer with the trainable parameters' gradients.
    With ``start``, ``grad_output`` is the gradient with respect to the input
    of layer ``start`` and the layers from there on are skipped.
    """
    if trace.network is not net:
        raise TraceError("trace was produced by a different network")
    if len(trace.inputs) != len(net.layers):
        raise TraceError("trace layer count does not match network")
    n = len(net.layers)
    start = n if start is None else start
    if not 0 < start <= n or (start < n and trace.inputs[start] is None):
        raise TraceError(f"cannot start the reverse pass at layer {start}")
    expected = trace.output.shape if start == n else trace.inputs[start].shape
    g = np.asarray(grad_output, dtype=T.FLOAT)
    if g.shape != expected:
        raise DimensionError(f"grad_output shape {g.shape} != expected {expected}")
    grads = [dict() for _ in net.layers]
    # layers below the first parameterized one only matter for the input gradient
    first_param = next((i for i, layer in enumerate(net.layers) if layer.param_shapes()), n)
    i = start - 1
    while i >= 0 and g is not None:
        layer, p, x, cache = net.layers[i], net.params[i], trace.inputs[i], trace.caches[i]
        if isinstance(layer, FullyConnected):
            if need_params:
                grads[i]["weight"] = T.matmul(x.T, g, row_invariant=False)
                grads[i]["bias"] = g.sum(axis=0)
            g = T.matmul(g, p["weight"].T) if (need_input or i > first_param) else None
        elif isinstance(layer, Conv):
            fused = bool(cache and cache.get("fused"))
            below = i - 1 if fused else i
            want = need_input or below > first_param
            if fused:
                gx, gw = T.upsample_conv2d_backward(trace.inputs[below], p["weight"], g,
                                                    layer.pad, want, need_params)
            else:
                gx, gw = T.conv2d_backward(x, p["weight"], g, layer.stride, layer.pad,
                                           want, need_params)
            if need_params:
                grads[i]["weight"] = gw
                grads[i]["bias"] = g.sum(axis=(0, 2, 3))
            g = gx
            i = below
        elif isinstance(layer, Upsample2x):
            g = T.upsample2x_backward(g)
        elif isinstance(layer, Reshape):
            g = g.reshape(x.shape)
        elif isinstance(layer, BatchNorm):
            g, gg, gs = _bn_backward(g, p["gain"], cache, trace.mode, x.shape)
            if need_params:
                grads[i]["gain"] = gg
                grads[i]["shift"] = gs
        elif isinstance(layer, Activation):
            out = trace.inputs[i + 1] if i + 1 < n else trace.output
            g = activation_grad(layer.kind, x, g, layer.slope, out=out)
        i -= 1
    grad_input = None
    if need_input:
        grad_input = T.check_finite(np.ascontiguousarray(g), "input gradient")
    return grad_input, (tuple(grads) if need_params else None)


def backward_input(net: Network, trace: ForwardTrace, grad_output) -> np.ndarray:
    """Gradient of <grad_output, net(x)> with respect to x."""
    return backward(net, trace, grad_output, need_input=True, need_params=False)[0]


def backward_params(net: Network, trace: ForwardTrace, grad_output):
    """Gradients of <grad_output, net(x)> with respect to every trainable parameter."""
    return backward(net, trace, grad_output, need_input=False, need_params=True)[1]


def update_running_stats(net: Network, trace: ForwardTrace,
                         momentum: float = BN_MOMENTUM) -> Network:
    """Blend batch statistics from a BatchStats trace into the running statistics."""
    if trace.network is not net:
        raise TraceError("trace was produced by a different network")
    if trace.mode is not BnMode.BATCH_STATS:
        raise ModeError("running statistics are only updated from batch statistics")
    stats = trace.batch_stats
    if not stats:
        return net
    params = [dict(p) for p in net.params]
    for i, (mean, var) in stats.items():
        params[i]["running_mean"] = momentum * net.params[i]["running_mean"] + (1 - momentum) * mean
        params[i]["running_var"] = momentum * net.params[i]["running_var"] + (1 - momentum) * var
    return net.with_params(params)
