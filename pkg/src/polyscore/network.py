"""Polynomial-compatible network layers and plaintext evaluation.

A network is an ordered list of layers. Conventional nonlinearities
(ReLU, sigmoid, max pooling) have polynomial surrogates (square,
cubic, window sum) so that a converted network can be evaluated with
nothing but additions and multiplications. Conversion keeps weights
verbatim; batch norm is folded into the adjacent affine layer first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConversionError, FoldError, ShapeError

ArrayLike = Union[np.ndarray, "Tensor", Sequence[float]]

# Cubic surrogate for the logistic sigmoid: 1/2 + z/4 - z^3/48.
SIGMOID_C0 = 0.5
SIGMOID_C1 = 0.25
SIGMOID_C3 = -1.0 / 48.0

HE_COMPATIBLE_KINDS = frozenset(
    {"Dense", "Conv", "SquareActivation", "SigmoidPoly", "ScaledMeanPool"}
)


@dataclass
class Tensor:
    """Shape-tagged numeric array, optionally on a fixed-point grid.

    When ``fixed_point_scale`` is set to S, every stored value times S
    must be an integer (values represent integer/S).
    """

    shape: tuple
    data: np.ndarray
    fixed_point_scale: Optional[int] = None

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        if any(d <= 0 for d in self.shape):
            raise ShapeError(f"non-positive dimension in shape {self.shape}")
        self.data = np.asarray(self.data, dtype=np.float64).reshape(-1)
        if self.data.size != math.prod(self.shape):
            raise ShapeError(
                f"data length {self.data.size} != prod(shape {self.shape})"
            )
        if self.fixed_point_scale is not None:
            s = int(self.fixed_point_scale)
            if s <= 0:
                raise ShapeError("fixed_point_scale must be positive")
            scaled = self.data * s
            if not np.allclose(scaled, np.rint(scaled), rtol=0, atol=1e-9):
                raise ShapeError("values are not multiples of 1/fixed_point_scale")
            self.fixed_point_scale = s

    @classmethod
    def from_array(cls, a: np.ndarray, fixed_point_scale: Optional[int] = None):
        a = np.asarray(a, dtype=np.float64)
        return cls(a.shape if a.shape else (1,), a.reshape(-1), fixed_point_scale)

    def as_array(self) -> np.ndarray:
        return self.data.reshape(self.shape)


def as_array(x: ArrayLike) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.as_array()
    return np.asarray(x, dtype=np.float64)


def sigmoid_cubic(z):
    """Polynomial stand-in for the sigmoid: 1/2 + z/4 - z^3/48.

    Total function; satisfies p(z) + p(-z) = 1 exactly.
    """
    z = np.asarray(z, dtype=np.float64)
    out = SIGMOID_C0 + SIGMOID_C1 * z + SIGMOID_C3 * z**3
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------


@dataclass
class Dense:
    """Affine layer y = x @ W + b with W of shape (in, out)."""

    weights: np.ndarray
    bias: np.ndarray
    kind: str = field(default="Dense", init=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError("Dense weights must be 2-D (in, out)")
        if self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"Dense bias length {self.bias.shape} != output width "
                f"{self.weights.shape[1]}"
            )

    @property
    def in_features(self) -> int:
        return self.weights.shape[0]

    @property
    def out_features(self) -> int:
        return self.weights.shape[1]


@dataclass
class Conv:
    """2-D cross-correlation over a single input plane.

    ``kernels`` has shape (channels, kh, kw); each output channel is the
    valid/same cross-correlation of the input plane with one kernel.
    Zero padding (same mode) uses the exactly representable 0 value.
    """

    kernels: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: str = "valid"
    kind: str = field(default="Conv", init=False)

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kernels.ndim != 3:
            raise ShapeError("Conv kernels must be 3-D (channels, kh, kw)")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ShapeError("Conv bias length != channel count")
        if self.stride not in (1, 2):
            raise ShapeError("Conv stride must be 1 or 2")
        if self.padding not in ("valid", "same"):
            raise ShapeError("Conv padding must be 'valid' or 'same'")


@dataclass
class BatchNorm:
    """Per-feature normalization y = gamma * (x - mu) / sigma + beta."""

    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    kind: str = field(default="BatchNorm", init=False)

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        shapes = {a.shape for a in (self.gamma, self.beta, self.mu, self.sigma)}
        if len(shapes) != 1:
            raise ShapeError("BatchNorm parameter shapes differ")
        if np.any(self.sigma <= 0):
            raise ShapeError("BatchNorm sigma entries must be strictly positive")


@dataclass
class SquareActivation:
    kind: str = field(default="SquareActivation", init=False)


@dataclass
class SigmoidPoly:
    kind: str = field(default="SigmoidPoly", init=False)


@dataclass
class ReLU:
    kind: str = field(default="ReLU", init=False)


@dataclass
class Sigmoid:
    kind: str = field(default="Sigmoid", init=False)


@dataclass
class Softmax:
    kind: str = field(default="Softmax", init=False)


@dataclass
class MaxPool:
    """Max over non-overlapping windows (1-D over vectors, 2-D over maps)."""

    window: int
    kind: str = field(default="MaxPool", init=False)

    def __post_init__(self):
        if int(self.window) < 1:
            raise ShapeError("pool window must be >= 1")
        self.window = int(self.window)


@dataclass
class ScaledMeanPool:
    """Window sum (n times the mean): the polynomial surrogate for max pool."""

    window: int
    kind: str = field(default="ScaledMeanPool", init=False)

    def __post_init__(self):
        if int(self.window) < 1:
            raise ShapeError("pool window must be >= 1")
        self.window = int(self.window)


Layer = Union[
    Dense, Conv, BatchNorm, SquareActivation, SigmoidPoly,
    ReLU, Sigmoid, Softmax, MaxPool, ScaledMeanPool,
]


# --------------------------------------------------------------------------
# Network
# --------------------------------------------------------------------------


@dataclass
class PolyNetwork:
    """Ordered layer list with declared input shape.

    ``he_compatible`` is true exactly when every layer is one of the
    polynomial kinds (Dense, Conv, SquareActivation, SigmoidPoly,
    ScaledMeanPool).
    """

    layers: list
    input_shape: tuple

    def __post_init__(self):
        self.layers = list(self.layers)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        # validates that shapes chain
        self.output_shape = infer_shapes(self)[-1]

    @property
    def he_compatible(self) -> bool:
        return all(l.kind in HE_COMPATIBLE_KINDS for l in self.layers)

    @property
    def output_dim(self) -> int:
        return int(math.prod(self.output_shape))

    def kinds(self) -> list:
        return [l.kind for l in self.layers]


def _conv_out_hw(h, w, kh, kw, stride, padding):
    if padding == "same":
        return (h + stride - 1) // stride, (w + stride - 1) // stride
    if h < kh or w < kw:
        raise ShapeError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
    return (h - kh) // stride + 1, (w - kw) // stride + 1


def infer_shapes(net: PolyNetwork) -> list:
    """Shape after each layer, starting from net.input_shape.

    Raises ShapeError when consecutive layers do not chain.
    """
    shapes = [tuple(net.input_shape)]
    cur = shapes[0]
    for idx, layer in enumerate(net.layers):
        k = layer.kind
        if k == "Dense":
            flat = math.prod(cur)
            if flat != layer.in_features:
                raise ShapeError(
                    f"layer {idx}: Dense expects {layer.in_features} features, "
                    f"got shape {cur}"
                )
            cur = (layer.out_features,)
        elif k == "Conv":
            if len(cur) != 2:
                raise ShapeError(f"layer {idx}: Conv needs a 2-D input plane, got {cur}")
            c, kh, kw = layer.kernels.shape
            oh, ow = _conv_out_hw(cur[0], cur[1], kh, kw, layer.stride, layer.padding)
            cur = (c, oh, ow)
        elif k == "BatchNorm":
            if math.prod(cur) != layer.gamma.size and cur[0] != layer.gamma.size:
                raise ShapeError(f"layer {idx}: BatchNorm width {layer.gamma.size} vs {cur}")
        elif k in ("MaxPool", "ScaledMeanPool"):
            w = layer.window
            if len(cur) == 1:
                if cur[0] % w:
                    raise ShapeError(f"layer {idx}: pool window {w} does not divide {cur[0]}")
                cur = (cur[0] // w,)
            elif len(cur) == 3:
                if cur[1] % w or cur[2] % w:
                    raise ShapeError(f"layer {idx}: pool window {w} does not tile {cur[1:]}")
                cur = (cur[0], cur[1] // w, cur[2] // w)
            else:
                raise ShapeError(f"layer {idx}: cannot pool shape {cur}")
        elif k in ("SquareActivation", "SigmoidPoly", "ReLU", "Sigmoid", "Softmax"):
            pass
        else:  # pragma: no cover - closed union
            raise ShapeError(f"unknown layer kind {k}")
        shapes.append(cur)
    return shapes


# --------------------------------------------------------------------------
# Forward evaluation
# --------------------------------------------------------------------------


def conv_forward(layer: Conv, x: ArrayLike) -> np.ndarray:
    """Cross-correlate a (..., H, W) plane with each kernel.

    Returns (..., C, H', W'). 'same' mode zero-pads symmetrically.
    """
    x = as_array(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"Conv input must be (H, W) or (B, H, W), got {x.shape}")
    c, kh, kw = layer.kernels.shape
    s = layer.stride
    if layer.padding == "same":
        oh = (x.shape[1] + s - 1) // s
        ow = (x.shape[2] + s - 1) // s
        ph = max((oh - 1) * s + kh - x.shape[1], 0)
        pw = max((ow - 1) * s + kw - x.shape[2], 0)
        x = np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)))
    else:
        oh, ow = _conv_out_hw(x.shape[1], x.shape[2], kh, kw, s, "valid")
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    windows = windows[:, ::s, ::s][:, :oh, :ow]  # (B, oh, ow, kh, kw)
    out = np.einsum("bhwij,cij->bchw", windows, layer.kernels) + layer.bias[
        None, :, None, None
    ]
    return out[0] if single else out


def _pool(x: np.ndarray, window: int, reduce_fn) -> np.ndarray:
    if x.ndim == 1:
        return reduce_fn(x.reshape(-1, window), axis=1)
    if x.ndim == 3:  # (C, H, W)
        c, h, w = x.shape
        r = x.reshape(c, h // window, window, w // window, window)
        return reduce_fn(r, axis=(2, 4))
    raise ShapeError(f"cannot pool array of ndim {x.ndim}")


def apply_layer(layer: Layer, x: np.ndarray) -> np.ndarray:
    """Evaluate one layer on a single (unbatched) activation array."""
    k = layer.kind
    if k == "Dense":
        return x.reshape(-1) @ layer.weights + layer.bias
    if k == "Conv":
        return conv_forward(layer, x)
    if k == "BatchNorm":
        g = layer.gamma
        if x.ndim == 3 and g.size == x.shape[0]:  # per-channel on feature maps
            g = g[:, None, None]
            return g * (x - layer.mu[:, None, None]) / layer.sigma[:, None, None] \
                + layer.beta[:, None, None]
        return layer.gamma * (x.reshape(-1) - layer.mu) / layer.sigma + layer.beta
    if k == "SquareActivation":
        return x * x
    if k == "SigmoidPoly":
        return sigmoid_cubic(x)
    if k == "ReLU":
        return np.maximum(x, 0.0)
    if k == "Sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if k == "Softmax":
        e = np.exp(x - np.max(x))
        return e / e.sum()
    if k == "MaxPool":
        return _pool(x, layer.window, np.max)
    if k == "ScaledMeanPool":
        return _pool(x, layer.window, np.sum)
    raise ShapeError(f"unknown layer kind {k}")  # pragma: no cover


def forward(net: PolyNetwork, x: ArrayLike) -> np.ndarray:
    """Evaluate the network on one input; returns the output_dim score vector.

    Pure and deterministic. Raises ShapeError on input mismatch and on
    non-finite parameters.
    """
    x = as_array(x)
    if tuple(x.shape) != tuple(net.input_shape):
        raise ShapeError(f"input shape {x.shape} != expected {net.input_shape}")
    for idx, layer in enumerate(net.layers):
        for name in ("weights", "bias", "kernels", "gamma", "beta", "mu", "sigma"):
            p = getattr(layer, name, None)
            if p is not None and not np.all(np.isfinite(p)):
                raise ShapeError(f"layer {idx} has non-finite parameter {name}")
        x = apply_layer(layer, x)
    return x.reshape(-1)


def forward_batch(net: PolyNetwork, xs: np.ndarray) -> np.ndarray:
    """Evaluate on a batch (N, *input_shape); dense-only fast path."""
    xs = np.asarray(xs, dtype=np.float64)
    flat_kinds = {"Dense", "BatchNorm", "SquareActivation", "SigmoidPoly",
                  "ReLU", "Sigmoid", "Softmax"}
    if all(l.kind in flat_kinds for l in net.layers):
        h = xs.reshape(xs.shape[0], -1)
        for layer in net.layers:
            k = layer.kind
            if k == "Dense":
                h = h @ layer.weights + layer.bias
            elif k == "BatchNorm":
                h = layer.gamma * (h - layer.mu) / layer.sigma + layer.beta
            elif k == "SquareActivation":
                h = h * h
            elif k == "SigmoidPoly":
                h = SIGMOID_C0 + SIGMOID_C1 * h + SIGMOID_C3 * h**3
            elif k == "ReLU":
                h = np.maximum(h, 0.0)
            elif k == "Sigmoid":
                h = 1.0 / (1.0 + np.exp(-h))
            elif k == "Softmax":
                e = np.exp(h - h.max(axis=1, keepdims=True))
                h = e / e.sum(axis=1, keepdims=True)
        return h
    return np.stack([forward(net, x) for x in xs])


# --------------------------------------------------------------------------
# Batch-norm folding and polynomial conversion
# --------------------------------------------------------------------------


def _fold_into_next_dense(bn: BatchNorm, dense: Dense) -> Dense:
    # y = W^T BN(x) + b  with W of shape (in, out)
    scale = bn.gamma / bn.sigma
    w_new = dense.weights * scale[:, None]
    b_new = dense.bias + (bn.beta - bn.mu * scale) @ dense.weights
    return Dense(w_new, b_new)


def _fold_into_prev_dense(dense: Dense, bn: BatchNorm) -> Dense:
    # y = BN(W^T x + b): gamma/sigma scales output columns
    scale = bn.gamma / bn.sigma
    w_new = dense.weights * scale[None, :]
    b_new = (dense.bias - bn.mu) * scale + bn.beta
    return Dense(w_new, b_new)


def _fold_into_prev_conv(conv: Conv, bn: BatchNorm) -> Conv:
    scale = bn.gamma / bn.sigma  # per output channel
    k_new = conv.kernels * scale[:, None, None]
    b_new = (conv.bias - bn.mu) * scale + bn.beta
    return Conv(k_new, b_new, stride=conv.stride, padding=conv.padding)


def fold_batchnorm(net: PolyNetwork) -> PolyNetwork:
    """Absorb every BatchNorm into an adjacent Dense or Conv layer.

    Preference order: BN feeding a Dense merges into that Dense
    (W_new = diag(gamma/sigma) W); otherwise a BN normalizing the output
    of a Dense or Conv refolds into it. The returned network evaluates to
    the same function (discrepancy < 1e-9 relative).
    """
    layers = list(net.layers)
    out = []
    i = 0
    while i < len(layers):
        layer = layers[i]
        if layer.kind != "BatchNorm":
            out.append(layer)
            i += 1
            continue
        if np.any(layer.sigma == 0):
            raise FoldError("BatchNorm sigma has a zero entry")
        nxt = layers[i + 1] if i + 1 < len(layers) else None
        prv = out[-1] if out else None
        if nxt is not None and nxt.kind == "Dense":
            out.append(_fold_into_next_dense(layer, nxt))
            i += 2
        elif prv is not None and prv.kind == "Dense":
            out[-1] = _fold_into_prev_dense(prv, layer)
            i += 1
        elif prv is not None and prv.kind == "Conv":
            out[-1] = _fold_into_prev_conv(prv, layer)
            i += 1
        else:
            raise FoldError(f"BatchNorm at layer {i} has no adjacent foldable layer")
    return PolyNetwork(out, net.input_shape)


_POLY_MAP = {"ReLU": SquareActivation, "Sigmoid": SigmoidPoly}
_CONVERTIBLE = HE_COMPATIBLE_KINDS | {"ReLU", "Sigmoid", "MaxPool", "Softmax", "BatchNorm"}


def to_polynomial(net: PolyNetwork) -> PolyNetwork:
    """Convert a conventional network into its polynomial form.

    ReLU becomes the square activation, sigmoid its cubic surrogate,
    max pooling a window sum, batch norm is folded away and softmax
    dropped (scores stay monotone; normalize after decryption if
    probabilities are needed). Weights are copied verbatim. Idempotent.
    """
    for layer in net.layers:
        if layer.kind not in _CONVERTIBLE:
            raise ConversionError(f"layer kind {layer.kind} has no polynomial form")
    net = fold_batchnorm(net)
    out = []
    for layer in net.layers:
        if layer.kind in _POLY_MAP:
            out.append(_POLY_MAP[layer.kind]())
        elif layer.kind == "MaxPool":
            out.append(ScaledMeanPool(layer.window))
        elif layer.kind == "Softmax":
            continue
        else:
            out.append(layer)
    result = PolyNetwork(out, net.input_shape)
    assert result.he_compatible
    return result


@dataclass(frozen=True)
class MultiplicativeDepth:
    """Ciphertext-by-ciphertext multiplications on the longest path."""

    depth: int


def multiplicative_depth(net: PolyNetwork) -> MultiplicativeDepth:
    """Depth of the polynomial circuit: squares cost 1, cubics cost 2."""
    if not net.he_compatible:
        raise ConversionError("multiplicative depth is defined for polynomial networks")
    kinds = net.kinds()
    d = kinds.count("SquareActivation") + 2 * kinds.count("SigmoidPoly")
    return MultiplicativeDepth(d)
