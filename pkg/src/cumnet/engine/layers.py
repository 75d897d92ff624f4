"""Layer kinds for the numpy runtime.

Every layer keeps its trainable arrays in ``params`` and its non-trainable
state (batch-norm running statistics) in ``buffers``.  ``frozen`` maps a
param name to a boolean array of the same shape; True entries never change
during training.

Arithmetic is carried out in float64 and the result is cast back to the
promoted dtype of the input and the parameters, so a float32 network stays
float32 end to end while a float64 copy can be used for precise checks.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import CompositionError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, scale: float = 1.0):
    bound = math.sqrt(6.0 / fan_in) if fan_in > 0 else 0.0
    return (rng.uniform(-bound, bound, size=shape) * scale).astype(np.float32)


class Layer:
    kind = "Layer"
    param_names: tuple[str, ...] = ()
    buffer_names: tuple[str, ...] = ()

    def __init__(self, name: str | None = None):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.frozen: dict[str, np.ndarray] = {}

    # -- metadata -----------------------------------------------------------
    def config(self) -> dict:
        return {}

    def output_shape(self, in_shape: tuple) -> tuple:
        return tuple(in_shape)

    def mask(self, pname: str) -> np.ndarray:
        """Freeze mask for ``pname``; all-False when nothing is frozen."""
        m = self.frozen.get(pname)
        if m is None:
            return np.zeros(self.params[pname].shape, dtype=bool)
        return m

    def freeze(self, pname: str, positions: np.ndarray) -> None:
        self.frozen[pname] = self.mask(pname) | positions

    def copy(self) -> "Layer":
        new = type(self).__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        new.buffers = {k: v.copy() for k, v in self.buffers.items()}
        new.frozen = {k: v.copy() for k, v in self.frozen.items()}
        return new

    def astype(self, dtype) -> "Layer":
        new = self.copy()
        new.params = {k: v.astype(dtype) for k, v in new.params.items()}
        new.buffers = {k: v.astype(dtype) for k, v in new.buffers.items()}
        return new

    # -- compute ------------------------------------------------------------
    def forward(self, x: np.ndarray, train: bool = False):
        raise NotImplementedError

    def backward(self, dy: np.ndarray, cache):
        raise NotImplementedError

    def __repr__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{self.kind}({cfg})"


def _out_dtype(x, *arrays):
    return np.result_type(x.dtype, *(a.dtype for a in arrays))


class Conv2D(Layer):
    kind = "Conv2D"
    param_names = ("weight", "bias")

    def __init__(self, in_ch: int, out_ch: int, k: int = 3, stride: int = 1,
                 padding: int | None = None, name=None, rng=None):
        super().__init__(name)
        self.in_ch, self.out_ch, self.k, self.stride = in_ch, out_ch, k, stride
        self.padding = (k - 1) // 2 if padding is None else padding
        fan_in = in_ch * k * k
        if rng is None:
            w = np.zeros((out_ch, in_ch, k, k), np.float32)
        else:
            w = fan_in_uniform(rng, (out_ch, in_ch, k, k), fan_in)
        self.params = {"weight": w, "bias": np.zeros(out_ch, np.float32)}

    def config(self):
        return {"in_ch": self.in_ch, "out_ch": self.out_ch, "k": self.k,
                "stride": self.stride, "padding": self.padding}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise CompositionError(f"Conv2D expects ({self.in_ch}, H, W), got {tuple(in_shape)}")
        _, h, w = in_shape
        ho = (h + 2 * self.padding - self.k) // self.stride + 1
        wo = (w + 2 * self.padding - self.k) // self.stride + 1
        if ho < 1 or wo < 1:
            raise CompositionError(f"Conv2D output would be empty for input {tuple(in_shape)}")
        return (self.out_ch, ho, wo)

    def _columns(self, x):
        p, k, s = self.padding, self.k, self.stride
        xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        return cols, ho, wo

    def forward(self, x, train=False):
        w, b = self.params["weight"], self.params["bias"]
        n = x.shape[0]
        cols, ho, wo = self._columns(x)
        wmat = w.reshape(self.out_ch, -1).astype(np.float64)
        out = cols @ wmat.T + b.astype(np.float64)
        y = out.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y, dtype=_out_dtype(x, w)), (cols, x.shape, ho, wo)

    def backward(self, dy, cache):
        cols, xshape, ho, wo = cache
        w = self.params["weight"]
        n, c, h, wd = xshape
        k, s, p = self.k, self.stride, self.padding
        g = dy.astype(np.float64).transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        dw = (g.T @ cols).reshape(w.shape)
        db = g.sum(axis=0)
        dcols = (g @ w.reshape(self.out_ch, -1).astype(np.float64)).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + h, p:p + wd]
        pdt = w.dtype
        return dx.astype(_out_dtype(dy, w)), {"weight": dw.astype(pdt), "bias": db.astype(pdt)}


class BatchNorm2D(Layer):
    kind = "BatchNorm2D"
    param_names = ("gamma", "beta")
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM, name=None):
        super().__init__(name)
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params = {"gamma": np.ones(channels, np.float32), "beta": np.zeros(channels, np.float32)}
        self.buffers = {"running_mean": np.zeros(channels, np.float32),
                        "running_var": np.ones(channels, np.float32)}

    def config(self):
        return {"channels": self.channels, "eps": self.eps, "momentum": self.momentum}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.channels:
            raise CompositionError(f"BatchNorm2D expects ({self.channels}, H, W), got {tuple(in_shape)}")
        return tuple(in_shape)

    def eval_scale(self):
        # Kept in the parameter dtype so gamma == sqrt(var + eps) gives exactly 1.
        return self.params["gamma"] / np.sqrt(self.buffers["running_var"] + self.eps)

    def forward(self, x, train=False):
        gamma, beta = self.params["gamma"], self.params["beta"]
        dt = _out_dtype(x, gamma)
        x64 = x.astype(np.float64)
        bshape = (1, -1, 1, 1)
        if not train:
            rm = self.buffers["running_mean"].astype(np.float64).reshape(bshape)
            scale = self.eval_scale().astype(np.float64).reshape(bshape)
            y = (x64 - rm) * scale + beta.astype(np.float64).reshape(bshape)
            return y.astype(dt), ("eval", x64, rm, scale)
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        count = x.shape[0] * x.shape[2] * x.shape[3]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x64 - mean.reshape(bshape)) * inv_std.reshape(bshape)
        y = gamma.astype(np.float64).reshape(bshape) * xhat + beta.astype(np.float64).reshape(bshape)
        m = self.momentum
        unbiased = var * count / (count - 1) if count > 1 else var
        bdt = self.buffers["running_mean"].dtype
        self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mean).astype(bdt)
        self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"] + m * unbiased).astype(bdt)
        return y.astype(dt), ("train", xhat, inv_std, count)

    def backward(self, dy, cache):
        gamma = self.params["gamma"]
        pdt = gamma.dtype
        g = dy.astype(np.float64)
        bshape = (1, -1, 1, 1)
        if cache[0] == "eval":
            _, x64, rm, scale = cache
            inv_std = 1.0 / np.sqrt(self.buffers["running_var"].astype(np.float64) + self.eps)
            xhat = (x64 - rm) * inv_std.reshape(bshape)
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dx = g * scale
        else:
            _, xhat, inv_std, count = cache
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * gamma.astype(np.float64).reshape(bshape)
            dx = (inv_std.reshape(bshape) / count) * (
                count * dxhat
                - dxhat.sum(axis=(0, 2, 3)).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(bshape)
            )
        return dx.astype(_out_dtype(dy, gamma)), {"gamma": dgamma.astype(pdt), "beta": dbeta.astype(pdt)}


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, train=False):
        return np.maximum(x, 0).astype(x.dtype, copy=False), x > 0

    def backward(self, dy, cache):
        return dy * cache, {}


class MaxPool2D(Layer):
    """Max pooling; ties resolve to the first element of the window in row-major order."""

    kind = "MaxPool2D"

    def __init__(self, window: int = 2, stride: int | None = None, name=None):
        super().__init__(name)
        self.window = window
        self.stride = window if stride is None else stride

    def config(self):
        return {"window": self.window, "stride": self.stride}

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise CompositionError(f"MaxPool2D expects (C, H, W), got {tuple(in_shape)}")
        c, h, w = in_shape
        ho = (h - self.window) // self.stride + 1
        wo = (w - self.window) // self.stride + 1
        if ho < 1 or wo < 1:
            raise CompositionError(f"MaxPool2D window {self.window} too large for {tuple(in_shape)}")
        return (c, ho, wo)

    def forward(self, x, train=False):
        w, s = self.window, self.stride
        win = sliding_window_view(x, (w, w), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        flat = win.reshape(n, c, ho, wo, w * w)
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return np.ascontiguousarray(y), (x.shape, idx)

    def backward(self, dy, cache):
        xshape, idx = cache
        w, s = self.window, self.stride
        n, c, ho, wo = idx.shape
        rows = np.arange(ho).reshape(1, 1, ho, 1) * s + idx // w
        cols = np.arange(wo).reshape(1, 1, 1, wo) * s + idx % w
        nn_ = np.arange(n).reshape(n, 1, 1, 1)
        cc = np.arange(c).reshape(1, c, 1, 1)
        dx = np.zeros(xshape, dtype=dy.dtype)
        np.add.at(dx, (nn_, cc, rows, cols), dy)
        return dx, {}


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache), {}


class Dense(Layer):
    kind = "Dense"
    param_names = ("weight", "bias")

    def __init__(self, in_features: int, out_features: int, name=None, rng=None, scale: float = 1.0):
        super().__init__(name)
        self.in_features, self.out_features = in_features, out_features
        if rng is None:
            w = np.zeros((out_features, in_features), np.float32)
        else:
            w = fan_in_uniform(rng, (out_features, in_features), in_features, scale)
        self.params = {"weight": w, "bias": np.zeros(out_features, np.float32)}

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise CompositionError(f"Dense expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x, train=False):
        w, b = self.params["weight"], self.params["bias"]
        x64 = x.astype(np.float64)
        y = x64 @ w.astype(np.float64).T + b.astype(np.float64)
        return y.astype(_out_dtype(x, w)), x64

    def backward(self, dy, cache):
        w = self.params["weight"]
        g = dy.astype(np.float64)
        dw = g.T @ cache
        db = g.sum(axis=0)
        dx = g @ w.astype(np.float64)
        pdt = w.dtype
        return dx.astype(_out_dtype(dy, w)), {"weight": dw.astype(pdt), "bias": db.astype(pdt)}


LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, BatchNorm2D, ReLU, MaxPool2D, Flatten, Dense)}


def layer_from_config(kind: str, config: dict, name: str | None = None) -> Layer:
    """Construct a zero-initialised layer from its kind and ``config()`` dict."""
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise CompositionError(f"unknown layer kind {kind!r}") from None
    layer = cls(**config)
    layer.name = name
    return layer
