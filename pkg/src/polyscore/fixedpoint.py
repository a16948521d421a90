"""Integer lowering of polynomial networks.

Homomorphic evaluation works on integers, so a polynomial network is
"lowered" once: weights and biases are rounded onto power-of-two grids,
every layer records its accumulated output scale (value = integer / 2^s),
and worst-case magnitude bounds are propagated by interval arithmetic.
The lowered form drives both the encrypted evaluation and the exact
plaintext oracle it is checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ConversionError, ParameterError
from .network import PolyNetwork

# fractional bits used when rounding the cubic activation coefficients
CUBIC_COEFF_BITS = 12


@dataclass
class IntDense:
    weights: np.ndarray  # (in, out) object array of python ints
    bias: np.ndarray  # (out,) object array
    weight_scale_bits: int
    kind: str = field(default="Dense", init=False)


@dataclass
class IntConv:
    kernels: np.ndarray  # (C, kh, kw) object array
    bias: np.ndarray  # (C,)
    stride: int
    padding: str
    weight_scale_bits: int
    kind: str = field(default="Conv", init=False)


@dataclass
class IntSquare:
    kind: str = field(default="SquareActivation", init=False)


@dataclass
class IntCubic:
    """Integer form of the sigmoid surrogate at output scale 48-free grid:
    out = c0 + c1*x + c3*x^3 with coefficients pre-scaled so the output
    scale is 3*s_in + CUBIC_COEFF_BITS.
    """

    c0: int
    c1: int
    c3: int
    kind: str = field(default="SigmoidPoly", init=False)


@dataclass
class IntPool:
    window: int
    kind: str = field(default="ScaledMeanPool", init=False)


@dataclass
class LoweredNet:
    layers: List
    input_shape: tuple
    input_scale_bits: int
    input_int_bound: int
    scale_bits: List[int]  # accumulated scale after each layer
    bounds: List[int]  # worst-case |integer| after each layer (python ints)

    @property
    def output_scale_bits(self) -> int:
        return self.scale_bits[-1] if self.scale_bits else self.input_scale_bits

    @property
    def max_bound(self) -> int:
        return max(self.bounds) if self.bounds else self.input_int_bound


def _to_int_array(a: np.ndarray, scale_bits: int) -> np.ndarray:
    ints = np.rint(np.asarray(a, dtype=np.float64) * (1 << scale_bits))
    out = np.empty(ints.shape, dtype=object)
    flat_in = ints.reshape(-1)
    flat_out = out.reshape(-1)
    for i in range(flat_in.size):
        flat_out[i] = int(flat_in[i])
    return out


def _fit_scale_bits(a: np.ndarray, bits: int) -> int:
    """Largest scale with round(|a| * 2^s) < 2^(bits-1)."""
    m = float(np.max(np.abs(a))) if np.asarray(a).size else 0.0
    s = bits - 1
    limit = 1 << (bits - 1)
    while s > 0 and round(m * (1 << s)) >= limit:
        s -= 1
    if s == 0 and round(m * 2) >= limit:
        raise ParameterError(f"weights too large for {bits}-bit integers")
    return max(s, 1)


def lower(net: PolyNetwork, input_bits: int, weight_bits: int,
          input_range: float = 1.0) -> LoweredNet:
    """Round a polynomial network onto integer grids.

    ``input_bits``/``weight_bits`` bound the integer magnitudes: inputs map
    to |x| < 2^(input_bits-1) given |x| <= input_range, weights likewise.
    """
    if not net.he_compatible:
        raise ConversionError("only polynomial networks can be lowered")
    head = max(1, math.ceil(math.log2(max(input_range, 1e-9))))
    input_scale = max(1, input_bits - 1 - head)
    in_bound = (1 << (input_bits - 1)) - 1

    layers: List = []
    scale_bits: List[int] = []
    bounds: List[int] = []
    s = input_scale
    b = in_bound
    for layer in net.layers:
        k = layer.kind
        if k == "Dense":
            ws = _fit_scale_bits(layer.weights, weight_bits)
            w = _to_int_array(layer.weights, ws)
            s = s + ws
            bias = _to_int_array(layer.bias, s)
            col = np.abs(w).sum(axis=0)
            b = int(max(int(col[j]) * b + abs(int(bias[j])) for j in range(w.shape[1])))
            layers.append(IntDense(w, bias, ws))
        elif k == "Conv":
            ws = _fit_scale_bits(layer.kernels, weight_bits)
            kern = _to_int_array(layer.kernels, ws)
            s = s + ws
            bias = _to_int_array(layer.bias, s)
            per_c = np.abs(kern).reshape(kern.shape[0], -1).sum(axis=1)
            b = int(max(int(per_c[c]) * b + abs(int(bias[c])) for c in range(kern.shape[0])))
            layers.append(IntConv(kern, bias, layer.stride, layer.padding, ws))
        elif k == "SquareActivation":
            s = 2 * s
            b = b * b
            layers.append(IntSquare())
        elif k == "SigmoidPoly":
            c = CUBIC_COEFF_BITS
            c0 = 1 << (3 * s + c - 1)
            c1 = 1 << (2 * s + c - 2)
            c3 = -round((1 << c) / 48.0)
            b = c0 + c1 * b + abs(c3) * b**3
            s = 3 * s + c
            layers.append(IntCubic(c0, c1, c3))
        elif k == "ScaledMeanPool":
            b = b * layer.window ** (1 if len(_shape_before(net, layers)) == 1 else 2)
            layers.append(IntPool(layer.window))
        else:  # pragma: no cover - he_compatible rules this out
            raise ConversionError(f"cannot lower layer kind {k}")
        scale_bits.append(s)
        bounds.append(b)
    return LoweredNet(layers, tuple(net.input_shape), input_scale, in_bound,
                      scale_bits, bounds)


def _shape_before(net, lowered_so_far):
    from .network import infer_shapes

    return infer_shapes(net)[len(lowered_so_far)]


def encode_input(lnet: LoweredNet, x: np.ndarray) -> np.ndarray:
    """Scale a real feature vector onto the lowered input grid (python ints)."""
    ints = np.rint(np.asarray(x, dtype=np.float64) * (1 << lnet.input_scale_bits))
    if np.any(np.abs(ints) > lnet.input_int_bound):
        raise ParameterError("feature exceeds the declared input range")
    out = np.empty(ints.shape, dtype=object)
    for i, v in enumerate(ints.reshape(-1)):
        out.reshape(-1)[i] = int(v)
    return out


def int_forward(lnet: LoweredNet, x_int: np.ndarray) -> np.ndarray:
    """Exact integer evaluation of the lowered network (the oracle path)."""
    h = np.asarray(x_int, dtype=object)
    for layer in lnet.layers:
        k = layer.kind
        if k == "Dense":
            h = h.reshape(-1) @ layer.weights + layer.bias
        elif k == "Conv":
            h = _int_conv(layer, h)
        elif k == "SquareActivation":
            h = h * h
        elif k == "SigmoidPoly":
            h = layer.c0 + layer.c1 * h + layer.c3 * h**3
        elif k == "ScaledMeanPool":
            h = _int_pool(h, layer.window)
    return h.reshape(-1)


def _int_conv(layer: IntConv, x: np.ndarray) -> np.ndarray:
    c, kh, kw = layer.kernels.shape
    s = layer.stride
    if layer.padding == "same":
        oh = (x.shape[0] + s - 1) // s
        ow = (x.shape[1] + s - 1) // s
        ph = max((oh - 1) * s + kh - x.shape[0], 0)
        pw = max((ow - 1) * s + kw - x.shape[1], 0)
        xp = np.zeros((x.shape[0] + ph, x.shape[1] + pw), dtype=object)
        xp[ph // 2: ph // 2 + x.shape[0], pw // 2: pw // 2 + x.shape[1]] = x
        x = xp
    else:
        oh = (x.shape[0] - kh) // s + 1
        ow = (x.shape[1] - kw) // s + 1
    out = np.zeros((c, oh, ow), dtype=object)
    for ci in range(c):
        for i in range(oh):
            for j in range(ow):
                acc = layer.bias[ci]
                for a in range(kh):
                    for bcol in range(kw):
                        acc += x[i * s + a, j * s + bcol] * layer.kernels[ci, a, bcol]
                out[ci, i, j] = acc
    return out


def _int_pool(x: np.ndarray, w: int) -> np.ndarray:
    if x.ndim == 1:
        return x.reshape(-1, w).sum(axis=1)
    c, h, wd = x.shape
    return x.reshape(c, h // w, w, wd // w, w).sum(axis=(2, 4))


def decode_output(lnet: LoweredNet, ints: np.ndarray) -> np.ndarray:
    """Map final-layer integers back to real scores."""
    scale = float(2 ** lnet.output_scale_bits)
    return np.array([int(v) / scale for v in np.asarray(ints).reshape(-1)])
