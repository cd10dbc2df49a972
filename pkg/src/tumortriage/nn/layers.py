"""Layer kinds with explicit forward and backward passes.

Activations are NHWC numpy arrays. A layer never stores state between calls:
``forward(params, x)`` returns ``(y, cache)`` and ``backward(params, cache, dy)``
returns ``(dx, grads)``; ``need_dx=False`` lets the first layer skip its input
gradient. The kernels are dtype-generic, so a float64 copy of the
parameters runs the same code path in double precision.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DataInvariantError, NumericError

PADDINGS = ("same", "valid")


def check_finite(a: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise NumericError(f"non-finite values produced by {where}")
    return a


def conv_geometry(n: int, k: int, stride: int, padding: str) -> tuple:
    """(output size, pad before, pad after) along one spatial axis."""
    if padding == "same":
        out = -(-n // stride)
        total = max((out - 1) * stride + k - n, 0)
        return out, total // 2, total - total // 2
    out = (n - k) // stride + 1
    if out < 1:
        raise DataInvariantError(f"kernel {k} larger than input {n} with valid padding")
    return out, 0, 0


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "Layer"

    def param_shapes(self) -> dict:
        return {}

    def init_params(self, rng, dtype=np.float32) -> dict:
        return {}

    def output_shape(self, in_shape: tuple) -> tuple:
        return tuple(in_shape)

    def forward(self, params, x):
        raise NotImplementedError

    def backward(self, params, cache, dy, need_dx=True):
        raise NotImplementedError

    def flops(self, in_shape: tuple) -> int:
        return 0

    def config(self) -> dict:
        return {}

    def to_spec(self) -> dict:
        return {"kind": self.kind, **self.config()}

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.config().items())
        return f"{self.kind}({args})"


class Conv2D(Layer):
    kind = "Conv2D"

    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1,
                 padding: str = "same"):
        if stride < 1 or padding not in PADDINGS:
            raise DataInvariantError("invalid stride or padding")
        self.cin, self.cout, self.kernel, self.stride, self.padding = cin, cout, kernel, stride, padding

    def config(self):
        return {"cin": self.cin, "cout": self.cout, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding}

    def param_shapes(self):
        k = self.kernel
        return {"w": (k, k, self.cin, self.cout), "b": (self.cout,)}

    def init_params(self, rng, dtype=np.float32):
        k = self.kernel
        return {"w": glorot_uniform(rng, (k, k, self.cin, self.cout),
                                    k * k * self.cin, k * k * self.cout, dtype),
                "b": np.zeros(self.cout, dtype)}

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if c != self.cin:
            raise DataInvariantError(f"{self.kind} expects {self.cin} channels, got {c}")
        ho = conv_geometry(h, self.kernel, self.stride, self.padding)[0]
        wo = conv_geometry(w, self.kernel, self.stride, self.padding)[0]
        return (ho, wo, self.cout)

    def flops(self, in_shape):
        ho, wo, _ = self.output_shape(in_shape)
        return ho * wo * self.kernel * self.kernel * self.cin * self.cout

    def _pad(self, x):
        n, h, w, c = x.shape
        k, s = self.kernel, self.stride
        ho, t, b = conv_geometry(h, k, s, self.padding)
        wo, l, r = conv_geometry(w, k, s, self.padding)
        if t or b or l or r:
            x = np.pad(x, ((0, 0), (t, b), (l, r), (0, 0)))
        return x, ho, wo, (t, l)

    def forward(self, params, x):
        if x.ndim != 4 or x.shape[3] != self.cin:
            raise DataInvariantError(f"{self.kind} expects NHWC input with {self.cin} channels")
        n = x.shape[0]
        k, s = self.kernel, self.stride
        xp, ho, wo, offs = self._pad(x)
        win = sliding_window_view(xp, (k, k), axis=(1, 2))
        win = win[:, :(ho - 1) * s + 1:s, :(wo - 1) * s + 1:s]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * self.cin)
        w2 = params["w"].reshape(k * k * self.cin, self.cout)
        y = (cols @ w2 + params["b"]).reshape(n, ho, wo, self.cout)
        return check_finite(y, self.kind), (x.shape, xp.shape, offs, cols)

    def backward(self, params, cache, dy, need_dx=True):
        x_shape, xp_shape, (t, l), cols = cache
        n, ho, wo, _ = dy.shape
        k, s = self.kernel, self.stride
        dy2 = dy.reshape(-1, self.cout)
        dw = (cols.T @ dy2).reshape(params["w"].shape)
        db = dy2.sum(axis=0)
        if not need_dx:
            return None, {"w": dw, "b": db}
        dcols = (dy2 @ params["w"].reshape(-1, self.cout).T).reshape(n, ho, wo, k, k, self.cin)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + (ho - 1) * s + 1:s, j:j + (wo - 1) * s + 1:s] += dcols[:, :, :, i, j]
        dx = dxp[:, t:t + x_shape[1], l:l + x_shape[2]]
        return check_finite(dx, self.kind), {"w": dw, "b": db}


class PointwiseConv2D(Conv2D):
    """1x1 convolution; stride subsamples the input grid."""

    kind = "PointwiseConv2D"

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__(cin, cout, kernel=1, stride=stride, padding="same")

    def config(self):
        return {"cin": self.cin, "cout": self.cout, "stride": self.stride}

    def forward(self, params, x):
        if x.ndim != 4 or x.shape[3] != self.cin:
            raise DataInvariantError(f"{self.kind} expects NHWC input with {self.cin} channels")
        xs = x[:, ::self.stride, ::self.stride] if self.stride > 1 else x
        n, ho, wo, _ = xs.shape
        flat = xs.reshape(-1, self.cin)
        y = (flat @ params["w"].reshape(self.cin, self.cout) + params["b"]).reshape(n, ho, wo, self.cout)
        return check_finite(y, self.kind), (x.shape, flat)

    def backward(self, params, cache, dy, need_dx=True):
        x_shape, flat = cache
        dy2 = dy.reshape(-1, self.cout)
        w2 = params["w"].reshape(self.cin, self.cout)
        dw = (flat.T @ dy2).reshape(params["w"].shape)
        db = dy2.sum(axis=0)
        if not need_dx:
            return None, {"w": dw, "b": db}
        dxs = (dy2 @ w2.T).reshape(dy.shape[:3] + (self.cin,))
        if self.stride > 1:
            dx = np.zeros(x_shape, dtype=dy.dtype)
            dx[:, ::self.stride, ::self.stride] = dxs
        else:
            dx = dxs
        return check_finite(dx, self.kind), {"w": dw, "b": db}


class DepthwiseConv2D(Layer):
    kind = "DepthwiseConv2D"

    def __init__(self, channels: int, kernel: int = 3, stride: int = 1, padding: str = "same"):
        if stride < 1 or padding not in PADDINGS:
            raise DataInvariantError("invalid stride or padding")
        self.channels, self.kernel, self.stride, self.padding = channels, kernel, stride, padding

    def config(self):
        return {"channels": self.channels, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding}

    def param_shapes(self):
        k = self.kernel
        return {"w": (k, k, self.channels), "b": (self.channels,)}

    def init_params(self, rng, dtype=np.float32):
        k = self.kernel
        return {"w": glorot_uniform(rng, (k, k, self.channels), k * k, k * k, dtype),
                "b": np.zeros(self.channels, dtype)}

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if c != self.channels:
            raise DataInvariantError(f"{self.kind} expects {self.channels} channels, got {c}")
        return (conv_geometry(h, self.kernel, self.stride, self.padding)[0],
                conv_geometry(w, self.kernel, self.stride, self.padding)[0], c)

    def flops(self, in_shape):
        ho, wo, c = self.output_shape(in_shape)
        return ho * wo * self.kernel * self.kernel * c

    def forward(self, params, x):
        if x.ndim != 4 or x.shape[3] != self.channels:
            raise DataInvariantError(f"{self.kind} expects NHWC input with {self.channels} channels")
        k, s = self.kernel, self.stride
        _, h, w, _ = x.shape
        ho, t, b = conv_geometry(h, k, s, self.padding)
        wo, l, r = conv_geometry(w, k, s, self.padding)
        xp = np.pad(x, ((0, 0), (t, b), (l, r), (0, 0))) if (t or b or l or r) else x
        win = sliding_window_view(xp, (k, k), axis=(1, 2))
        win = win[:, :(ho - 1) * s + 1:s, :(wo - 1) * s + 1:s]
        y = np.einsum("nhwcij,ijc->nhwc", win, params["w"]) + params["b"]
        return check_finite(y, self.kind), (x.shape, xp, (t, l))

    def backward(self, params, cache, dy, need_dx=True):
        x_shape, xp, (t, l) = cache
        k, s = self.kernel, self.stride
        n, ho, wo, c = dy.shape
        win = sliding_window_view(xp, (k, k), axis=(1, 2))
        win = win[:, :(ho - 1) * s + 1:s, :(wo - 1) * s + 1:s]
        grads = {"w": np.einsum("nhwcij,nhwc->ijc", win, dy), "b": dy.sum(axis=(0, 1, 2))}
        if not need_dx:
            return None, grads
        if s == 1:
            # transposed convolution: pad dy by k-1 and correlate with the flipped kernel
            dyp = np.pad(dy, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
            dwin = sliding_window_view(dyp, (k, k), axis=(1, 2))
            dxp = np.einsum("nhwcij,ijc->nhwc", dwin, params["w"][::-1, ::-1])
        else:
            dxp = np.zeros(xp.shape, dtype=dy.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + (ho - 1) * s + 1:s, j:j + (wo - 1) * s + 1:s] += dy * params["w"][i, j]
        dx = dxp[:, t:t + x_shape[1], l:l + x_shape[2]]
        return check_finite(dx, self.kind), grads


class Dense(Layer):
    """Fully connected layer; inputs of any rank are flattened per sample."""

    kind = "Dense"

    def __init__(self, in_features: int, out_features: int):
        self.in_features, self.out_features = in_features, out_features

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def param_shapes(self):
        return {"w": (self.in_features, self.out_features), "b": (self.out_features,)}

    def init_params(self, rng, dtype=np.float32):
        return {"w": glorot_uniform(rng, (self.in_features, self.out_features),
                                    self.in_features, self.out_features, dtype),
                "b": np.zeros(self.out_features, dtype)}

    def output_shape(self, in_shape):
        if math.prod(in_shape) != self.in_features:
            raise DataInvariantError(
                f"Dense expects {self.in_features} features, got shape {in_shape}")
        return (self.out_features,)

    def flops(self, in_shape):
        return self.in_features * self.out_features

    def forward(self, params, x):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise DataInvariantError(f"Dense expects {self.in_features} features, got {flat.shape[1]}")
        y = flat @ params["w"] + params["b"]
        return check_finite(y, self.kind), (x.shape, flat)

    def backward(self, params, cache, dy, need_dx=True):
        x_shape, flat = cache
        dx = (dy @ params["w"].T).reshape(x_shape)
        return check_finite(dx, self.kind), {"w": flat.T @ dy, "b": dy.sum(axis=0)}


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, params, x):
        y = np.maximum(x, 0)
        return y, y

    def backward(self, params, cache, dy, need_dx=True):
        return np.where(cache > 0, dy, 0).astype(dy.dtype, copy=False), {}


class ReLU6(Layer):
    kind = "ReLU6"

    def forward(self, params, x):
        y = np.maximum(x, 0)
        np.minimum(y, 6, out=y)
        return y, y

    def backward(self, params, cache, dy, need_dx=True):
        # the output lies strictly inside (0, 6) exactly where the input does
        return np.where((cache > 0) & (cache < 6), dy, 0).astype(dy.dtype, copy=False), {}


class MaxPool2D(Layer):
    """Non-overlapping max pooling (window = stride); trailing rows/cols are dropped."""

    kind = "MaxPool2D"

    def __init__(self, pool: int = 2):
        self.pool = pool

    def config(self):
        return {"pool": self.pool}

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if h < self.pool or w < self.pool:
            raise DataInvariantError("pooling window larger than input")
        return (h // self.pool, w // self.pool, c)

    def forward(self, params, x):
        p = self.pool
        n, h, w, c = x.shape
        ho, wo = h // p, w // p
        blocks = x[:, :ho * p, :wo * p].reshape(n, ho, p, wo, p, c)
        blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, p * p)
        arg = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, params, cache, dy, need_dx=True):
        x_shape, arg = cache
        p = self.pool
        n, h, w, c = x_shape
        ho, wo = h // p, w // p
        onehot = np.zeros((n, ho, wo, c, p * p), dtype=dy.dtype)
        np.put_along_axis(onehot, arg[..., None], dy[..., None], axis=-1)
        blocks = onehot.reshape(n, ho, wo, c, p, p).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros(x_shape, dtype=dy.dtype)
        dx[:, :ho * p, :wo * p] = blocks.reshape(n, ho * p, wo * p, c)
        return dx, {}


class GlobalAvgPool(Layer):
    kind = "GlobalAvgPool"

    def output_shape(self, in_shape):
        return (in_shape[2],)

    def forward(self, params, x):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, params, cache, dy, need_dx=True):
        n, h, w, c = cache
        dx = np.broadcast_to(dy[:, None, None, :] / (h * w), cache).astype(dy.dtype)
        return dx, {}


class Softmax(Layer):
    kind = "Softmax"

    def forward(self, params, x):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        return y, y

    def backward(self, params, cache, dy, need_dx=True):
        y = cache
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True)), {}


class Sequence(Layer):
    """Runs named sublayers in order; parameters are namespaced ``child.param``."""

    def children(self) -> list:
        raise NotImplementedError

    def param_shapes(self):
        out = {}
        for name, layer in self.children():
            for p, shape in layer.param_shapes().items():
                out[f"{name}.{p}"] = shape
        return out

    def init_params(self, rng, dtype=np.float32):
        out = {}
        for name, layer in self.children():
            for p, v in layer.init_params(rng, dtype).items():
                out[f"{name}.{p}"] = v
        return out

    @staticmethod
    def _sub(params, name):
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}

    def _run(self, params, x, layers):
        caches = []
        for name, layer in layers:
            x, cache = layer.forward(self._sub(params, name), x)
            caches.append(cache)
        return x, caches

    def _unrun(self, params, caches, dy, layers, grads):
        for (name, layer), cache in zip(reversed(layers), reversed(caches)):
            dy, g = layer.backward(self._sub(params, name), cache, dy)
            for p, v in g.items():
                grads[f"{name}.{p}"] = v
        return dy

    def _shape_through(self, in_shape, layers):
        shape = tuple(in_shape)
        for _, layer in layers:
            shape = layer.output_shape(shape)
        return shape

    def _flops_through(self, in_shape, layers):
        total, shape = 0, tuple(in_shape)
        for _, layer in layers:
            total += layer.flops(shape)
            shape = layer.output_shape(shape)
        return total


class InvertedResidual(Sequence):
    """Expand 1x1 + ReLU6, depthwise 3x3 + ReLU6, linear 1x1 projection.

    The skip connection is added only when stride is 1 and channel counts match.
    """

    kind = "InvertedResidual"

    def __init__(self, cin: int, cout: int, stride: int = 1, expansion: int = 6):
        if expansion < 1:
            raise DataInvariantError("expansion factor must be >= 1")
        self.cin, self.cout, self.stride, self.expansion = cin, cout, stride, expansion
        hidden = cin * expansion
        layers = []
        if expansion != 1:
            layers += [("expand", PointwiseConv2D(cin, hidden)), ("expand_act", ReLU6())]
        layers += [("depthwise", DepthwiseConv2D(hidden, 3, stride)), ("depthwise_act", ReLU6()),
                   ("project", PointwiseConv2D(hidden, cout))]
        self._layers = layers

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.cin == self.cout

    def config(self):
        return {"cin": self.cin, "cout": self.cout, "stride": self.stride,
                "expansion": self.expansion}

    def children(self):
        return self._layers

    def output_shape(self, in_shape):
        return self._shape_through(in_shape, self._layers)

    def flops(self, in_shape):
        return self._flops_through(in_shape, self._layers)

    def forward(self, params, x):
        y, caches = self._run(params, x, self._layers)
        if self.residual:
            y = y + x
        return y, caches

    def backward(self, params, cache, dy, need_dx=True):
        grads = {}
        dx = self._unrun(params, cache, dy, self._layers, grads)
        if self.residual:
            dx = dx + dy
        return dx, grads


class ResidualBottleneck(Sequence):
    """1x1 reduce, 3x3, 1x1 expand, plus identity or projected shortcut, then ReLU."""

    kind = "ResidualBottleneck"

    def __init__(self, cin: int, mid: int, cout: int, stride: int = 1):
        self.cin, self.mid, self.cout, self.stride = cin, mid, cout, stride
        self._main = [("reduce", PointwiseConv2D(cin, mid)), ("reduce_act", ReLU()),
                      ("conv", Conv2D(mid, mid, 3, stride)), ("conv_act", ReLU()),
                      ("expand", PointwiseConv2D(mid, cout))]
        self._short = [] if self.identity_shortcut else [("shortcut", PointwiseConv2D(cin, cout, stride))]
        self._act = ReLU()

    @property
    def identity_shortcut(self) -> bool:
        return self.stride == 1 and self.cin == self.cout

    def config(self):
        return {"cin": self.cin, "mid": self.mid, "cout": self.cout, "stride": self.stride}

    def children(self):
        return self._main + self._short

    def output_shape(self, in_shape):
        return self._shape_through(in_shape, self._main)

    def flops(self, in_shape):
        return self._flops_through(in_shape, self._main) + self._flops_through(in_shape, self._short)

    def forward(self, params, x):
        y, main_caches = self._run(params, x, self._main)
        if self._short:
            s, short_caches = self._run(params, x, self._short)
        else:
            s, short_caches = x, []
        out, act_cache = self._act.forward({}, y + s)
        return out, (main_caches, short_caches, act_cache)

    def backward(self, params, cache, dy, need_dx=True):
        main_caches, short_caches, act_cache = cache
        grads = {}
        dsum, _ = self._act.backward({}, act_cache, dy)
        dx = self._unrun(params, main_caches, dsum, self._main, grads)
        if self._short:
            dx = dx + self._unrun(params, short_caches, dsum, self._short, grads)
        else:
            dx = dx + dsum
        return dx, grads


LAYER_KINDS = {cls.kind: cls for cls in (
    Conv2D, PointwiseConv2D, DepthwiseConv2D, Dense, ReLU, ReLU6, MaxPool2D,
    GlobalAvgPool, Softmax, InvertedResidual, ResidualBottleneck)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    try:
        return LAYER_KINDS[kind](**spec)
    except KeyError as exc:
        raise DataInvariantError(f"unknown layer kind {kind!r}") from exc


def param_count_formula(layer: Layer) -> int:
    """Closed-form parameter count for one layer (composites sum their parts)."""
    if isinstance(layer, Sequence):
        return sum(param_count_formula(child) for _, child in layer.children())
    if isinstance(layer, Conv2D):
        return layer.kernel ** 2 * layer.cin * layer.cout + layer.cout
    if isinstance(layer, DepthwiseConv2D):
        return layer.kernel ** 2 * layer.channels + layer.channels
    if isinstance(layer, Dense):
        return layer.in_features * layer.out_features + layer.out_features
    return 0
