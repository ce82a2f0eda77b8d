"""Feature extractors: identity, fixed gradient channels and a small
stride-1 convolutional network with hand-written backward pass.

Every extractor preserves the spatial size of its input, so feature-grid
coordinates coincide with patch pixel coordinates.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import Patch, as_image, image_gradients, image_gradients_adjoint


class Kind(enum.Enum):
    IDENTITY = "identity"
    GRADCHAN = "gradchan"
    CONV = "conv"


class Activation(enum.Enum):
    RELU = "relu"
    NONE = "none"


class SpecMismatchError(ValueError):
    """Parameters do not match the expected extractor layout."""


@dataclass
class ConvLayer:
    kernel: np.ndarray  # (k, k, cin, cout)
    bias: np.ndarray  # (cout,)
    activation: Activation = Activation.RELU

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        self.activation = Activation(self.activation)
        k1, k2, _, cout = self.kernel.shape
        if k1 != k2 or k1 % 2 == 0:
            raise ValueError(f"kernels must be square with odd size, got {self.kernel.shape[:2]}")
        if self.bias.shape != (cout,):
            raise ValueError(f"bias shape {self.bias.shape} does not match cout={cout}")

    @property
    def size(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[2]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[3]


@dataclass
class FeatureParams:
    """Extractor kind plus the learnable layer stack (empty unless CONV)."""

    kind: Kind = Kind.IDENTITY
    layers: list[ConvLayer] = field(default_factory=list)
    mean_subtract: bool = False

    def __post_init__(self):
        self.kind = Kind(self.kind)
        if self.kind is not Kind.CONV and self.layers:
            raise ValueError(f"{self.kind.name} extractor takes no layers")
        if self.kind is Kind.CONV and not self.layers:
            raise ValueError("CONV extractor needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_channels != b.in_channels:
                raise ValueError(
                    f"layer channels do not chain: {a.out_channels} -> {b.in_channels}")

    def tensors(self) -> list[np.ndarray]:
        """Learnable tensors in declaration order (kernel, bias per layer)."""
        out = []
        for layer in self.layers:
            out.extend([layer.kernel, layer.bias])
        return out

    def with_tensors(self, tensors) -> "FeatureParams":
        tensors = list(tensors)
        if len(tensors) != 2 * len(self.layers):
            raise SpecMismatchError("wrong number of tensors")
        layers = []
        for i, layer in enumerate(self.layers):
            k, b = tensors[2 * i], tensors[2 * i + 1]
            if np.shape(k) != layer.kernel.shape or np.shape(b) != layer.bias.shape:
                raise SpecMismatchError(f"tensor shapes differ in layer {i}")
            layers.append(ConvLayer(np.array(k, dtype=float), np.array(b, dtype=float),
                                    layer.activation))
        return FeatureParams(self.kind, layers, self.mean_subtract)

    def zeros_like(self) -> "FeatureParams":
        return self.with_tensors([np.zeros_like(t) for t in self.tensors()])

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.tensors())

    def spec(self) -> dict:
        return {
            "kind": self.kind.value,
            "mean_subtract": self.mean_subtract,
            "layers": [
                {"size": l.size, "in": l.in_channels, "out": l.out_channels,
                 "activation": l.activation.value}
                for l in self.layers
            ],
        }

    def out_channels(self, in_channels: int) -> int:
        if self.kind is Kind.IDENTITY:
            return in_channels
        if self.kind is Kind.GRADCHAN:
            return 3 * in_channels
        return self.layers[-1].out_channels


def default_layer_spec(in_channels: int = 1) -> list[tuple]:
    """Two 3x3 layers with 8 channels each and a ReLU in between."""
    return [(3, in_channels, 8, "relu"), (3, 8, 8, "none")]


def feature_init(kind=Kind.CONV, layer_spec=None, rng=None, *, in_channels: int = 1,
                 mean_subtract: bool = False) -> FeatureParams:
    """Fresh parameters; kernels ~ U(-a, a) with a = sqrt(2 / fan_in), zero biases."""
    kind = Kind(kind)
    if kind is not Kind.CONV:
        return FeatureParams(kind, [], mean_subtract)
    rng = np.random.default_rng(rng)
    spec = default_layer_spec(in_channels) if layer_spec is None else layer_spec
    layers = []
    for entry in spec:
        k, cin, cout, act = entry
        if k < 1 or k % 2 == 0 or cin < 1 or cout < 1:
            raise ValueError(f"invalid layer spec {entry}")
        a = np.sqrt(2.0 / (k * k * cin))
        layers.append(ConvLayer(rng.uniform(-a, a, size=(k, k, cin, cout)),
                                np.zeros(cout), Activation(act)))
    return FeatureParams(kind, layers, mean_subtract)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    h, w, c = x.shape
    r = k // 2
    xp = np.pad(x, ((r, r), (r, r), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(0, 1))  # (h, w, c, k, k)
    return win.transpose(0, 1, 3, 4, 2).reshape(h * w, k * k * c)


def _col2im(cols: np.ndarray, shape, k: int) -> np.ndarray:
    h, w, c = shape
    r = k // 2
    cols = cols.reshape(h, w, k, k, c)
    out = np.zeros((h + 2 * r, w + 2 * r, c))
    for a in range(k):
        for b in range(k):
            out[a:a + h, b:b + w] += cols[:, :, a, b]
    return out[r:r + h, r:r + w]


def conv2d(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Stride-1, zero same-padding cross-correlation plus bias (no activation)."""
    h, w, _ = x.shape
    k = layer.size
    cols = _im2col(x, k)
    return (cols @ layer.kernel.reshape(-1, layer.out_channels) + layer.bias).reshape(
        h, w, layer.out_channels)


@dataclass
class FeatureCache:
    params_spec: dict
    input_shape: tuple
    cols: list = field(default_factory=list)
    pre: list = field(default_factory=list)


def _gradchan(x: np.ndarray) -> np.ndarray:
    gx, gy = image_gradients(x)
    return np.stack([x, gx, gy], axis=3).reshape(x.shape[0], x.shape[1], -1)


def feature_forward(params: FeatureParams, patch) -> tuple[np.ndarray, FeatureCache]:
    """Compute the (S, S, K) feature map of ``patch``."""
    x = patch.data if isinstance(patch, Patch) else as_image(patch)
    cache = FeatureCache(params.spec(), x.shape)
    if params.mean_subtract:
        x = x - x.mean(axis=(0, 1), keepdims=True)
    if params.kind is Kind.IDENTITY:
        return x.copy(), cache
    if params.kind is Kind.GRADCHAN:
        return _gradchan(x), cache

    if x.shape[2] != params.layers[0].in_channels:
        raise SpecMismatchError(
            f"patch has {x.shape[2]} channels, first layer expects {params.layers[0].in_channels}")
    if min(x.shape[:2]) < max(l.size for l in params.layers):
        raise ValueError("patch smaller than the kernel")
    h, w, _ = x.shape
    for layer in params.layers:
        cols = _im2col(x, layer.size)
        z = (cols @ layer.kernel.reshape(-1, layer.out_channels) + layer.bias).reshape(
            h, w, layer.out_channels)
        cache.cols.append(cols)
        cache.pre.append(z)
        x = np.maximum(z, 0.0) if layer.activation is Activation.RELU else z
    return x, cache


def feature_backward(params: FeatureParams, cache: FeatureCache, grad_out: np.ndarray):
    """Reverse pass. Returns (parameter gradients as FeatureParams, input gradient)."""
    if cache.params_spec != params.spec():
        raise SpecMismatchError("cache was produced by a different extractor")
    g = np.asarray(grad_out, dtype=float)
    h, w, c = cache.input_shape

    if params.kind is Kind.IDENTITY:
        if g.shape != (h, w, c):
            raise ValueError(f"grad_out shape {g.shape} != {(h, w, c)}")
        grad_in = g.copy()
        grads = params.zeros_like()
    elif params.kind is Kind.GRADCHAN:
        if g.shape != (h, w, 3 * c):
            raise ValueError(f"grad_out shape {g.shape} != {(h, w, 3 * c)}")
        g = g.reshape(h, w, c, 3)
        grad_in = g[..., 0] + image_gradients_adjoint(g[..., 1], g[..., 2])
        grads = params.zeros_like()
    else:
        if g.shape != cache.pre[-1].shape:
            raise ValueError(f"grad_out shape {g.shape} != {cache.pre[-1].shape}")
        tensors = []
        for i in reversed(range(len(params.layers))):
            layer = params.layers[i]
            if layer.activation is Activation.RELU:
                g = g * (cache.pre[i] > 0)
            gflat = g.reshape(h * w, layer.out_channels)
            dk = (cache.cols[i].T @ gflat).reshape(layer.kernel.shape)
            db = gflat.sum(axis=0)
            tensors[:0] = [dk, db]
            dcols = gflat @ layer.kernel.reshape(-1, layer.out_channels).T
            g = _col2im(dcols, (h, w, layer.in_channels), layer.size)
        grad_in = g
        grads = params.with_tensors(tensors)

    if params.mean_subtract:
        grad_in = grad_in - grad_in.mean(axis=(0, 1), keepdims=True)
    return grads, grad_in
