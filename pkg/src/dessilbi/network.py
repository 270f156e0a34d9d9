"""Feed-forward networks: layer specs, forward evaluation and backprop.

Parameters live in a flat ``dict`` (a *ParamSet*) keyed by
``"<path>.weight"`` / ``"<path>.bias"`` where ``path`` is the layer index,
or ``"<block>.<inner>"`` for layers inside a residual block. Dense weights
are stored ``(out, in)`` and conv kernels ``(c_out, c_in, kh, kw)``.
"""
from dataclasses import dataclass, field, replace
from math import prod

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import DTYPE, check_finite, conv2d, conv2d_backward, conv_output_size
from .errors import ArgumentError, DimensionError

ACTIVATIONS = ("tanh", "relu", "softplus", "sigmoid")
LOSSES = ("mse", "softmax_ce")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    activation: str = ""
    pool: int = 0
    inner: tuple = ()
    bias: bool = True
    penalize: bool = True

    # constructors -----------------------------------------------------
    @classmethod
    def dense(cls, in_features, out_features, bias=True, penalize=True):
        return cls("dense", in_features=in_features, out_features=out_features,
                   bias=bias, penalize=penalize)

    @classmethod
    def conv(cls, in_channels, out_channels, kernel_size, stride=1, padding=0,
             bias=True, penalize=True):
        return cls("conv2d", in_channels=in_channels, out_channels=out_channels,
                   kernel_size=kernel_size, stride=stride, padding=padding,
                   bias=bias, penalize=penalize)

    @classmethod
    def act(cls, name):
        if name not in ACTIVATIONS:
            raise ArgumentError(f"unknown activation {name!r}")
        return cls("activation", activation=name, bias=False)

    @classmethod
    def maxpool(cls, size, stride=None):
        return cls("maxpool", pool=size, stride=stride or size, bias=False)

    @classmethod
    def avgpool(cls, size, stride=None):
        return cls("avgpool", pool=size, stride=stride or size, bias=False)

    @classmethod
    def flatten(cls):
        return cls("flatten", bias=False)

    @classmethod
    def residual(cls, *inner):
        return cls("residual", inner=tuple(inner), bias=False)

    @property
    def has_params(self):
        return self.kind in ("dense", "conv2d")

    def to_dict(self):
        d = {"kind": self.kind}
        for name, default in _DEFAULTS.items():
            value = getattr(self, name)
            if name == "inner":
                if value:
                    d["inner"] = [layer.to_dict() for layer in value]
            elif value != default:
                d[name] = value
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        inner = tuple(cls.from_dict(x) for x in d.pop("inner", ()))
        unknown = set(d) - set(_DEFAULTS) - {"kind"}
        if unknown:
            raise ArgumentError(f"unknown layer fields {sorted(unknown)}")
        return cls(inner=inner, **d)


_DEFAULTS = {name: f.default for name, f in LayerSpec.__dataclass_fields__.items()
             if name != "kind"}


def _layer_output_shape(layer, shape, where):
    kind = layer.kind
    if kind == "dense":
        if shape != (layer.in_features,):
            raise DimensionError(f"layer {where}: dense expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if kind == "conv2d":
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise DimensionError(
                f"layer {where}: conv expects ({layer.in_channels}, h, w), got {shape}")
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        if k > shape[1] + 2 * p or k > shape[2] + 2 * p:
            raise DimensionError(f"layer {where}: kernel {k} larger than padded input {shape}")
        return (layer.out_channels, conv_output_size(shape[1], k, s, p),
                conv_output_size(shape[2], k, s, p))
    if kind == "activation":
        if layer.activation not in ACTIVATIONS:
            raise ArgumentError(f"layer {where}: unknown activation {layer.activation!r}")
        return shape
    if kind in ("maxpool", "avgpool"):
        if len(shape) != 3 or layer.pool > min(shape[1:]):
            raise DimensionError(f"layer {where}: pool {layer.pool} does not fit {shape}")
        return (shape[0], (shape[1] - layer.pool) // layer.stride + 1,
                (shape[2] - layer.pool) // layer.stride + 1)
    if kind == "flatten":
        return (prod(shape),)
    if kind == "residual":
        out = shape
        for j, inner in enumerate(layer.inner):
            out = _layer_output_shape(inner, out, f"{where}.{j}")
        if out != shape:
            raise DimensionError(f"residual block {where} maps {shape} to {out}")
        return shape
    raise ArgumentError(f"layer {where}: unknown kind {kind!r}")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple
    loss: str = "softmax_ce"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.loss not in LOSSES:
            raise ArgumentError(f"unknown loss {self.loss!r}")
        self.shapes()

    def shapes(self):
        """Input shape of every top-level layer followed by the output shape."""
        out = [self.input_shape]
        for i, layer in enumerate(self.layers):
            out.append(_layer_output_shape(layer, out[-1], str(i)))
        return out

    @property
    def output_shape(self):
        return self.shapes()[-1]

    def param_layers(self):
        """``(path, spec)`` for every dense/conv layer, in forward order."""
        found = []
        for i, layer in enumerate(self.layers):
            if layer.has_params:
                found.append((str(i), layer))
            elif layer.kind == "residual":
                found.extend((f"{i}.{j}", inner) for j, inner in enumerate(layer.inner)
                             if inner.has_params)
        return found

    def layer_at(self, path):
        parts = [int(p) for p in path.split(".")]
        layer = self.layers[parts[0]]
        for p in parts[1:]:
            layer = layer.inner[p]
        return layer

    def replace_layer(self, path, new):
        return self.replace_layers({path: new})

    def replace_layers(self, changes):
        """Swap several layers at once; shapes are validated on the result only."""
        layers = list(self.layers)
        for path, new in changes.items():
            parts = [int(p) for p in path.split(".")]
            if len(parts) == 1:
                layers[parts[0]] = new
            else:
                block = layers[parts[0]]
                inner = list(block.inner)
                inner[parts[1]] = new
                layers[parts[0]] = replace(block, inner=tuple(inner))
        return replace(self, layers=tuple(layers))

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "loss": self.loss,
                "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(layers=tuple(LayerSpec.from_dict(x) for x in d["layers"]),
                   input_shape=tuple(d["input_shape"]), loss=d.get("loss", "softmax_ce"))


def weight_key(path):
    return f"{path}.weight"


def bias_key(path):
    return f"{path}.bias"


def param_shapes(net):
    shapes = {}
    for path, layer in net.param_layers():
        if layer.kind == "dense":
            shapes[weight_key(path)] = (layer.out_features, layer.in_features)
            n_out = layer.out_features
        else:
            k = layer.kernel_size
            shapes[weight_key(path)] = (layer.out_channels, layer.in_channels, k, k)
            n_out = layer.out_channels
        if layer.bias:
            shapes[bias_key(path)] = (n_out,)
    return shapes


def fan_in(shape):
    return prod(shape[1:])


def init_params(net, rng):
    """He-normal weights (variance 2/fan-in), zero biases."""
    params = {}
    for key, shape in param_shapes(net).items():
        if key.endswith(".weight"):
            params[key] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in(shape))
        else:
            params[key] = np.zeros(shape, dtype=DTYPE)
    return params


def check_params(net, params):
    expected = param_shapes(net)
    if set(expected) != set(params):
        raise DimensionError(f"parameter keys {sorted(params)} do not match network {sorted(expected)}")
    for key, shape in expected.items():
        if params[key].shape != shape:
            raise DimensionError(f"{key}: expected shape {shape}, got {params[key].shape}")


# activations ------------------------------------------------------------

def _act_forward(name, x):
    if name == "tanh":
        return np.tanh(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "softplus":
        return np.logaddexp(0.0, x)
    return 0.5 * (1.0 + np.tanh(0.5 * x))  # sigmoid, overflow-free


def _act_backward(name, x, y, dout):
    if name == "tanh":
        return dout * (1.0 - y * y)
    if name == "relu":
        return dout * (x > 0)
    if name == "softplus":
        return dout * (0.5 * (1.0 + np.tanh(0.5 * x)))
    return dout * y * (1.0 - y)


# pooling ----------------------------------------------------------------

def _pool_windows(x, size, stride):
    return sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]


def _maxpool_forward(x, size, stride):
    win = _pool_windows(x, size, stride)
    n, c, oh, ow = win.shape[:4]
    flat = win.reshape(n, c, oh, ow, size * size)
    arg = flat.argmax(axis=-1)  # first maximum in row-major window order
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _maxpool_backward(x_shape, arg, size, stride, dout):
    n, c, oh, ow = arg.shape
    rows = np.arange(oh)[:, None] * stride + arg // size
    cols = np.arange(ow)[None, :] * stride + arg % size
    dx = np.zeros(x_shape, dtype=DTYPE)
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(dx, (nn, cc, rows, cols), dout)
    return dx


def _avgpool_forward(x, size, stride):
    return _pool_windows(x, size, stride).mean(axis=(-2, -1))


def _avgpool_backward(x_shape, size, stride, dout):
    dx = np.zeros(x_shape, dtype=DTYPE)
    oh, ow = dout.shape[2:]
    share = dout / (size * size)
    for i in range(size):
        for j in range(size):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += share
    return dx


# forward / backward -----------------------------------------------------

def _forward_layers(layers, prefix, params, x, caches):
    for i, layer in enumerate(layers):
        path = f"{prefix}{i}"
        kind = layer.kind
        if kind == "dense":
            w = params[weight_key(path)]
            caches.append(x)
            x = x @ w.T
            if layer.bias:
                x = x + params[bias_key(path)]
        elif kind == "conv2d":
            caches.append(x)
            x = conv2d(x, params[weight_key(path)], layer.stride, layer.padding)
            if layer.bias:
                x = x + params[bias_key(path)][None, :, None, None]
        elif kind == "activation":
            y = _act_forward(layer.activation, x)
            caches.append((x, y))
            x = y
        elif kind == "maxpool":
            y, arg = _maxpool_forward(x, layer.pool, layer.stride)
            caches.append((x.shape, arg))
            x = y
        elif kind == "avgpool":
            caches.append(x.shape)
            x = _avgpool_forward(x, layer.pool, layer.stride)
        elif kind == "flatten":
            caches.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        elif kind == "residual":
            inner_caches = []
            x = x + _forward_layers(layer.inner, f"{path}.", params, x, inner_caches)
            caches.append(inner_caches)
    return x


def _backward_layers(layers, prefix, params, caches, dout, grads):
    for i in reversed(range(len(layers))):
        layer = layers[i]
        path = f"{prefix}{i}"
        cache = caches[i]
        kind = layer.kind
        if kind == "dense":
            w = params[weight_key(path)]
            grads[weight_key(path)] = dout.T @ cache
            if layer.bias:
                grads[bias_key(path)] = dout.sum(axis=0)
            dout = dout @ w
        elif kind == "conv2d":
            dx, dk = conv2d_backward(cache, params[weight_key(path)], dout,
                                     layer.stride, layer.padding)
            grads[weight_key(path)] = dk
            if layer.bias:
                grads[bias_key(path)] = dout.sum(axis=(0, 2, 3))
            dout = dx
        elif kind == "activation":
            x, y = cache
            dout = _act_backward(layer.activation, x, y, dout)
        elif kind == "maxpool":
            shape, arg = cache
            dout = _maxpool_backward(shape, arg, layer.pool, layer.stride, dout)
        elif kind == "avgpool":
            dout = _avgpool_backward(cache, layer.pool, layer.stride, dout)
        elif kind == "flatten":
            dout = dout.reshape(cache)
        elif kind == "residual":
            dout = dout + _backward_layers(layer.inner, f"{path}.", params, cache, dout, grads)
    return dout


def _loss(kind, out, y):
    n = out.shape[0]
    if kind == "mse":
        y = np.asarray(y, dtype=DTYPE).reshape(out.shape)
        diff = out - y
        per_sample = 0.5 * np.sum(diff.reshape(n, -1) ** 2, axis=1)
        return per_sample, diff / n
    y = np.asarray(y)
    if y.shape != (n,):
        raise DimensionError(f"softmax_ce expects {n} integer labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= out.shape[1]):
        raise DimensionError(f"labels outside [0, {out.shape[1]})")
    shifted = out - out.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    idx = np.arange(n)
    per_sample = -logp[idx, y]
    grad = np.exp(logp)
    grad[idx, y] -= 1.0
    return per_sample, grad / n


@dataclass
class ForwardPass:
    output: np.ndarray
    loss: float = None
    per_sample: np.ndarray = None
    caches: list = field(default_factory=list, repr=False)
    dloss: np.ndarray = field(default=None, repr=False)


def forward(net, params, x, y=None):
    """Evaluate the network on a batch; the loss is the batch mean."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[1:] != net.input_shape:
        raise DimensionError(f"input batch shape {x.shape} does not match {net.input_shape}")
    caches = []
    out = _forward_layers(net.layers, "", params, x, caches)
    check_finite(out, "network output")
    fp = ForwardPass(output=out, caches=caches)
    if y is not None:
        per_sample, dloss = _loss(net.loss, out, y)
        fp.per_sample = per_sample
        fp.loss = float(per_sample.mean()) if per_sample.size else 0.0
        check_finite(np.asarray(fp.loss), "loss")
        fp.dloss = dloss
    return fp


def backward(net, params, fp):
    """Exact reverse-mode gradient of the batch-mean loss of ``fp``."""
    if fp.dloss is None:
        raise ArgumentError("forward pass was run without labels")
    grads = {}
    _backward_layers(net.layers, "", params, fp.caches, fp.dloss, grads)
    for key, g in grads.items():
        check_finite(g, f"gradient {key}")
    return grads


def loss_and_grad(net, params, x, y):
    fp = forward(net, params, x, y)
    return fp.loss, backward(net, params, fp)


def predict(net, params, x, batch_size=1000):
    outs = [forward(net, params, x[i:i + batch_size]).output
            for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0,) + net.output_shape)


def evaluate(net, params, x, y, batch_size=1000):
    """Top-1 accuracy in percent for classification, mean squared error otherwise."""
    out = predict(net, params, x, batch_size)
    if net.loss == "softmax_ce":
        return 100.0 * float(np.mean(out.argmax(axis=1) == np.asarray(y)))
    with np.errstate(over="ignore"):
        err = np.mean((out - np.asarray(y).reshape(out.shape)) ** 2)
    return float(check_finite(np.asarray(err), "evaluation error"))


def scale_layers(params, factors):
    """Multiply each layer's weight tensor by a positive factor.

    ``factors`` maps layer path to factor, or is a sequence aligned with
    the weight keys of ``params`` in insertion order. Biases are untouched.
    """
    wkeys = [k for k in params if k.endswith(".weight")]
    if isinstance(factors, dict):
        fmap = {weight_key(p): float(f) for p, f in factors.items()}
    else:
        factors = list(factors)
        if len(factors) != len(wkeys):
            raise ArgumentError(f"{len(factors)} factors for {len(wkeys)} weight tensors")
        fmap = dict(zip(wkeys, map(float, factors)))
    for key, f in fmap.items():
        if not f > 0:
            raise ArgumentError(f"scale factor for {key} must be positive, got {f}")
        if key not in params:
            raise ArgumentError(f"no weight tensor {key}")
    return {k: (v * fmap[k] if k in fmap else v) for k, v in params.items()}


def count_macs(net, params=None):
    """Multiply-adds per sample; with ``params``, zero weights are skipped."""
    total = 0
    shapes = net.shapes()

    def walk(layers, prefix, in_shape):
        nonlocal total
        shape = in_shape
        for i, layer in enumerate(layers):
            path = f"{prefix}{i}"
            out = _layer_output_shape(layer, shape, path)
            if layer.has_params:
                w = params[weight_key(path)] if params is not None else None
                nnz = int(np.count_nonzero(w)) if w is not None else prod(
                    (layer.out_features, layer.in_features) if layer.kind == "dense" else
                    (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size))
                total += nnz if layer.kind == "dense" else nnz * out[1] * out[2]
            elif layer.kind == "residual":
                walk(layer.inner, f"{path}.", shape)
            shape = out

    walk(net.layers, "", shapes[0])
    return total
