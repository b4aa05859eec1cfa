"""Minimal 3D-CNN substrate on numpy.

Layers are described by immutable LayerSpec records; a NetworkModel is the
spec list plus per-layer parameter dicts, frozen flags, and provenance tags.
Forward/backward are plain functions: convolution is im2col + GEMM, the
backward pass folds column gradients back with k^3 strided adds.

Conventions:
  - volumes are channels-last (N, D, H, W, C); vectors are (N, F)
  - Conv3D weights (k, k, k, C_in, C_out), bias (C_out,)
  - FullyConnected weights (F_in, F_out), bias (F_out,)
  - "same" padding pads to ceil(in/stride) outputs, extra pad goes after
  - frozen BatchNorm runs in inference mode even inside a training pass so
    frozen parameters (including running stats) stay bit-identical
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeMismatchError

KINDS = ("Conv3D", "FullyConnected", "LeakyReLU", "BatchNorm", "Flatten",
         "Sigmoid", "Upsample3D")

# trainable parameter keys per kind; BatchNorm running stats are state, not params
TRAINABLE_KEYS = {
    "Conv3D": ("w", "b"),
    "FullyConnected": ("w", "b"),
    "BatchNorm": ("gamma", "beta"),
}

PROV_FRESH = "FreshInit"
PROV_REFERENCE = "FromReference"
PROV_RETRAINED = "Retrained"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: str = "same"
    has_bias: bool = True
    negative_slope: float = 0.1
    factor: int = 2  # Upsample3D only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"unknown padding {self.padding!r}")


def conv3d(in_channels, out_channels, kernel=3, stride=1, padding="same", has_bias=True):
    return LayerSpec("Conv3D", in_channels, out_channels, kernel, stride, padding, has_bias)


def fully_connected(in_features, out_features, has_bias=True):
    return LayerSpec("FullyConnected", in_features, out_features, has_bias=has_bias)


def leaky_relu(negative_slope=0.1):
    return LayerSpec("LeakyReLU", negative_slope=negative_slope)


def batch_norm(channels):
    return LayerSpec("BatchNorm", channels, channels)


def flatten():
    return LayerSpec("Flatten")


def sigmoid():
    return LayerSpec("Sigmoid")


def upsample3d(factor=2):
    return LayerSpec("Upsample3D", factor=factor)


def param_count(spec: LayerSpec) -> int:
    """Trainable parameter count of a single layer."""
    if spec.kind == "Conv3D":
        n = spec.kernel ** 3 * spec.in_channels * spec.out_channels
        return n + (spec.out_channels if spec.has_bias else 0)
    if spec.kind == "FullyConnected":
        n = spec.in_channels * spec.out_channels
        return n + (spec.out_channels if spec.has_bias else 0)
    if spec.kind == "BatchNorm":
        return 2 * spec.in_channels
    return 0


# ---------------------------------------------------------------------------
# initialization

def he_uniform(shape, fan_in, rng, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_layer_params(spec: LayerSpec, rng: np.random.Generator, dtype=np.float32) -> dict:
    if spec.kind == "Conv3D":
        k = spec.kernel
        fan_in = k ** 3 * spec.in_channels
        p = {"w": he_uniform((k, k, k, spec.in_channels, spec.out_channels), fan_in, rng, dtype)}
        if spec.has_bias:
            p["b"] = np.zeros(spec.out_channels, dtype=dtype)
        return p
    if spec.kind == "FullyConnected":
        p = {"w": he_uniform((spec.in_channels, spec.out_channels), spec.in_channels, rng, dtype)}
        if spec.has_bias:
            p["b"] = np.zeros(spec.out_channels, dtype=dtype)
        return p
    if spec.kind == "BatchNorm":
        c = spec.in_channels
        return {
            "gamma": np.ones(c, dtype=dtype),
            "beta": np.zeros(c, dtype=dtype),
            "running_mean": np.zeros(c, dtype=dtype),
            "running_var": np.ones(c, dtype=dtype),
        }
    return {}


@dataclass
class NetworkModel:
    layers: list
    params: list
    frozen: list = field(default_factory=list)
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.layers)
        if not self.frozen:
            self.frozen = [False] * n
        if not self.provenance:
            self.provenance = [PROV_FRESH] * n
        if not (len(self.params) == len(self.frozen) == len(self.provenance) == n):
            raise ConfigError("layers/params/frozen/provenance length mismatch")

    def copy(self) -> "NetworkModel":
        return NetworkModel(
            layers=list(self.layers),
            params=[{k: v.copy() for k, v in p.items()} for p in self.params],
            frozen=list(self.frozen),
            provenance=list(self.provenance),
        )

    def astype(self, dtype) -> "NetworkModel":
        out = self.copy()
        out.params = [{k: v.astype(dtype) for k, v in p.items()} for p in out.params]
        return out

    def total_params(self) -> int:
        return sum(param_count(s) for s in self.layers)

    def digest(self) -> str:
        """sha256 over layer kinds and raw little-endian parameter bytes."""
        h = hashlib.sha256()
        for spec, p in zip(self.layers, self.params):
            h.update(spec.kind.encode())
            for key in sorted(p):
                h.update(key.encode())
                arr = np.ascontiguousarray(p[key])
                if arr.dtype.byteorder == ">":
                    arr = arr.astype(arr.dtype.newbyteorder("<"))
                h.update(arr.tobytes())
        return h.hexdigest()


def init_network(layers, seed_rng: np.random.Generator, dtype=np.float32) -> NetworkModel:
    params = [init_layer_params(s, seed_rng, dtype) for s in layers]
    return NetworkModel(layers=list(layers), params=params)


# ---------------------------------------------------------------------------
# shape inference

def _conv_out_dim(n, k, s, padding):
    if padding == "same":
        return -(-n // s)  # ceil
    if n < k:
        raise ValueError("valid conv on input smaller than kernel")
    return (n - k) // s + 1


def layer_out_shape(spec: LayerSpec, in_shape, layer_index=0):
    """Output shape (no batch dim) for a given input shape; validates input."""
    if spec.kind == "Conv3D":
        if len(in_shape) != 4 or in_shape[3] != spec.in_channels:
            raise ShapeMismatchError(layer_index, ("D", "H", "W", spec.in_channels), in_shape)
        d, h, w, _ = in_shape
        k, s, p = spec.kernel, spec.stride, spec.padding
        return (_conv_out_dim(d, k, s, p), _conv_out_dim(h, k, s, p),
                _conv_out_dim(w, k, s, p), spec.out_channels)
    if spec.kind == "FullyConnected":
        if len(in_shape) != 1 or in_shape[0] != spec.in_channels:
            raise ShapeMismatchError(layer_index, (spec.in_channels,), in_shape)
        return (spec.out_channels,)
    if spec.kind == "BatchNorm":
        if not in_shape or in_shape[-1] != spec.in_channels:
            raise ShapeMismatchError(layer_index, ("...", spec.in_channels), in_shape)
        return tuple(in_shape)
    if spec.kind == "Flatten":
        return (int(np.prod(in_shape)),)
    if spec.kind == "Upsample3D":
        if len(in_shape) != 4:
            raise ShapeMismatchError(layer_index, ("D", "H", "W", "C"), in_shape)
        f = spec.factor
        d, h, w, c = in_shape
        return (d * f, h * f, w * f, c)
    return tuple(in_shape)  # LeakyReLU / Sigmoid


def infer_shapes(layers, in_shape):
    """Per-layer (in_shape, out_shape) pairs, batch dim excluded."""
    shapes = []
    cur = tuple(in_shape)
    for i, spec in enumerate(layers):
        out = layer_out_shape(spec, cur, i)
        shapes.append((cur, out))
        cur = out
    return shapes


# ---------------------------------------------------------------------------
# forward / backward

def _same_pads(n, k, s):
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    before = total // 2
    return before, total - before


def _conv_forward(spec, p, x, want_cache):
    """Hybrid convolution.

    For cin < cout the im2col product wins (one efficient gemm, modest
    intermediate). Otherwise shift-and-gemm — one (M, cin) @ (cin, cout)
    product per kernel offset — avoids materializing the (M, k^3*cin)
    matrix, whose memory traffic dominates at 32-cubed resolutions.
    """
    n, d, h, w, cin = x.shape
    k, s = spec.kernel, spec.stride
    cout = spec.out_channels
    if spec.padding == "same":
        pd, ph, pw = _same_pads(d, k, s), _same_pads(h, k, s), _same_pads(w, k, s)
    else:
        pd = ph = pw = (0, 0)
    xp = np.pad(x, ((0, 0), pd, ph, pw, (0, 0))) if any(pd + ph + pw) else x
    do = (xp.shape[1] - k) // s + 1
    ho = (xp.shape[2] - k) // s + 1
    wo = (xp.shape[3] - k) // s + 1
    wt = p["w"]
    if cin < cout:
        win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))[:, ::s, ::s, ::s]
        win = win.transpose(0, 1, 2, 3, 5, 6, 7, 4)  # offsets before channels
        col = np.ascontiguousarray(win).reshape(n * do * ho * wo, k ** 3 * cin)
        y = col @ wt.reshape(k ** 3 * cin, cout)
        saved = col
    else:
        y = np.zeros((n * do * ho * wo, cout), dtype=x.dtype)
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    xs = xp[:, kd:kd + s * do:s, kh:kh + s * ho:s, kw:kw + s * wo:s, :]
                    y += xs.reshape(-1, cin) @ wt[kd, kh, kw]
        saved = xp
    if spec.has_bias:
        y += p["b"]
    y = y.reshape(n, do, ho, wo, cout)
    cache = (saved, x.shape, xp.shape, (pd, ph, pw)) if want_cache else None
    return y, cache


def _conv_backward(spec, p, cache, dy, need_dx, need_dw):
    saved, x_shape, xp_shape, (pd, ph, pw) = cache
    n, d, h, w, cin = x_shape
    k, s = spec.kernel, spec.stride
    cout = spec.out_channels
    do, ho, wo = dy.shape[1:4]
    dy_mat = dy.reshape(-1, cout)
    wt = p["w"]
    grads = None
    if need_dw:
        if cin < cout:  # saved is the im2col matrix
            dw = (saved.T @ dy_mat).reshape(wt.shape)
        else:           # saved is the padded input
            dw = np.empty_like(wt)
            for kd in range(k):
                for kh in range(k):
                    for kw in range(k):
                        xs = saved[:, kd:kd + s * do:s, kh:kh + s * ho:s,
                                   kw:kw + s * wo:s, :]
                        dw[kd, kh, kw] = xs.reshape(-1, cin).T @ dy_mat
        grads = {"w": dw}
        if spec.has_bias:
            grads["b"] = dy_mat.sum(axis=0)
    dx = None
    if need_dx:
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    ds = (dy_mat @ wt[kd, kh, kw].T).reshape(n, do, ho, wo, cin)
                    dxp[:, kd:kd + s * do:s, kh:kh + s * ho:s, kw:kw + s * wo:s, :] += ds
        dx = dxp[:, pd[0]:pd[0] + d, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :]
    return grads, dx


def _bn_axes(x):
    return tuple(range(x.ndim - 1))


def layer_forward(spec, p, x, train, frozen, momentum=0.9, eps=1e-5):
    """Run one layer. Returns (y, cache); cache is None unless train=True."""
    kind = spec.kind
    if kind == "Conv3D":
        return _conv_forward(spec, p, x, train)
    if kind == "FullyConnected":
        y = x @ p["w"]
        if spec.has_bias:
            y = y + p["b"]
        return y, (x if train else None)
    if kind == "LeakyReLU":
        pos = x >= 0
        y = np.where(pos, x, spec.negative_slope * x)
        return y, (pos if train else None)
    if kind == "Sigmoid":
        e = np.exp(-np.abs(x))  # never overflows
        y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return y, (y if train else None)
    if kind == "BatchNorm":
        axes = _bn_axes(x)
        if train and not frozen:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv = 1.0 / np.sqrt(var + eps)
            xhat = (x - mean) * inv
            y = p["gamma"] * xhat + p["beta"]
            p["running_mean"][...] = momentum * p["running_mean"] + (1 - momentum) * mean
            p["running_var"][...] = momentum * p["running_var"] + (1 - momentum) * var
            return y, (xhat, inv, True)
        inv = 1.0 / np.sqrt(p["running_var"] + eps)
        xhat = (x - p["running_mean"]) * inv
        y = p["gamma"] * xhat + p["beta"]
        return y, ((xhat, inv, False) if train else None)
    if kind == "Flatten":
        y = x.reshape(x.shape[0], -1)
        return y, (x.shape if train else None)
    if kind == "Upsample3D":
        f = spec.factor
        y = x.repeat(f, axis=1).repeat(f, axis=2).repeat(f, axis=3)
        return y, (x.shape if train else None)
    raise ConfigError(f"unknown layer kind {kind!r}")


def layer_backward(spec, p, cache, dy, need_dx=True, need_dw=True):
    """Gradients for one layer: returns (param_grads or None, dx or None)."""
    kind = spec.kind
    if kind == "Conv3D":
        return _conv_backward(spec, p, cache, dy, need_dx, need_dw)
    if kind == "FullyConnected":
        x = cache
        grads = None
        if need_dw:
            grads = {"w": x.T @ dy}
            if spec.has_bias:
                grads["b"] = dy.sum(axis=0)
        dx = dy @ p["w"].T if need_dx else None
        return grads, dx
    if kind == "LeakyReLU":
        pos = cache
        return None, np.where(pos, dy, spec.negative_slope * dy) if need_dx else None
    if kind == "Sigmoid":
        y = cache
        return None, dy * y * (1.0 - y) if need_dx else None
    if kind == "BatchNorm":
        xhat, inv, used_batch_stats = cache
        axes = _bn_axes(dy)
        grads = None
        if need_dw:
            grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        if not need_dx:
            return grads, None
        g = p["gamma"]
        if not used_batch_stats:
            return grads, dy * (g * inv)
        m = dy.size // dy.shape[-1]
        dxhat = dy * g
        dx = (inv / m) * (m * dxhat - dxhat.sum(axis=axes)
                          - xhat * (dxhat * xhat).sum(axis=axes))
        return grads, dx
    if kind == "Flatten":
        return None, dy.reshape(cache) if need_dx else None
    if kind == "Upsample3D":
        if not need_dx:
            return None, None
        f = spec.factor
        n, d, h, w, c = cache
        dx = dy.reshape(n, d, f, h, f, w, f, c).sum(axis=(2, 4, 6))
        return None, dx
    raise ConfigError(f"unknown layer kind {kind!r}")


def _validate_input(spec, x, i):
    if spec.kind == "Conv3D" and (x.ndim != 5 or x.shape[4] != spec.in_channels):
        raise ShapeMismatchError(i, ("N", "D", "H", "W", spec.in_channels), x.shape)
    if spec.kind == "FullyConnected" and (x.ndim != 2 or x.shape[1] != spec.in_channels):
        raise ShapeMismatchError(i, ("N", spec.in_channels), x.shape)
    if spec.kind == "BatchNorm" and x.shape[-1] != spec.in_channels:
        raise ShapeMismatchError(i, ("...", spec.in_channels), x.shape)


def forward(model: NetworkModel, x, train=False):
    """Run the whole network. Returns y (infer) or (y, caches) (train)."""
    caches = [] if train else None
    for i, (spec, p) in enumerate(zip(model.layers, model.params)):
        _validate_input(spec, x, i)
        x, cache = layer_forward(spec, p, x, train, model.frozen[i])
        if train:
            caches.append(cache)
    return (x, caches) if train else x


def backward(model: NetworkModel, caches, dy, need_input_grad=False):
    """Backprop through the whole network.

    Frozen layers get no parameter gradients (None) but still pass gradients
    through. Returns (grads per layer, dx or None).
    """
    grads = [None] * len(model.layers)
    stop_at = 0 if need_input_grad else _first_param_layer(model)
    dx = None
    for i in range(len(model.layers) - 1, -1, -1):
        spec = model.layers[i]
        need_dw = (not model.frozen[i]) and spec.kind in TRAINABLE_KEYS
        need_dx = i > stop_at or (i == stop_at and need_input_grad)
        g, dx = layer_backward(spec, model.params[i], caches[i], dy,
                               need_dx=need_dx, need_dw=need_dw)
        if need_dw:
            grads[i] = g
        if not need_dx:
            dx = None
            break
        dy = dx
    return grads, dx


def _first_param_layer(model):
    for i, (spec, fr) in enumerate(zip(model.layers, model.frozen)):
        if spec.kind in TRAINABLE_KEYS and not fr:
            return i
    return len(model.layers)


def set_frozen(model: NetworkModel, indices, frozen=True):
    for i in indices:
        model.frozen[i] = frozen


def mark_retrained(model: NetworkModel):
    """Downgrade unfrozen FromReference layers to Retrained.

    FreshInit layers (e.g. a bridge) keep their provenance: the tag records
    where the weights came from, not whether they were updated.
    """
    for i, spec in enumerate(model.layers):
        if (spec.kind in TRAINABLE_KEYS and not model.frozen[i]
                and model.provenance[i] == PROV_REFERENCE):
            model.provenance[i] = PROV_RETRAINED
