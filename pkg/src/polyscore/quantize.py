"""Codebook quantization for weights, biases, activations and gradients.

Codebooks are fitted per tensor with Lloyd-Max iterations (centroids are
bin means, boundaries are centroid midpoints) with one centroid pinned to
exactly 0.0 so that zero stays exactly representable. 16-bit mode skips
codebooks and uses plain power-of-two fixed point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import QuantizationError
from .network import PolyNetwork, Tensor, as_array

ALLOWED_BITS = (2, 4, 8, 16)

# Tensor roles that can carry a codebook.
ROLES = ("weights", "bias", "activations", "weight_gradients", "activation_gradients")

MAX_LLOYD_ITERS = 200
CENTROID_TOL = 1e-7


@dataclass
class Codebook:
    """Sorted centroids plus bin boundaries for one tensor.

    boundaries[0] = -inf and boundaries[-1] = +inf; interior boundaries
    are midpoints of adjacent centroids. Exactly one centroid is 0.0.
    """

    bits: int
    centroids: np.ndarray
    boundaries: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.bits not in ALLOWED_BITS:
            raise QuantizationError(f"bits must be one of {ALLOWED_BITS}")
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if np.any(np.diff(self.centroids) <= 0):
            raise QuantizationError("centroids must be strictly increasing")
        if not np.any(self.centroids == 0.0):
            raise QuantizationError("codebook must contain the exact 0.0 centroid")
        if self.boundaries is None:
            self.boundaries = _midpoint_boundaries(self.centroids)
        else:
            self.boundaries = np.asarray(self.boundaries, dtype=np.float64)
            if self.boundaries.size != self.centroids.size + 1:
                raise QuantizationError("need len(centroids)+1 boundaries")

    @property
    def zero_index(self) -> int:
        return int(np.nonzero(self.centroids == 0.0)[0][0])


def _midpoint_boundaries(centroids: np.ndarray) -> np.ndarray:
    inner = (centroids[:-1] + centroids[1:]) / 2.0
    return np.concatenate(([-np.inf], inner, [np.inf]))


def _assign_bins(values: np.ndarray, cb: Codebook) -> np.ndarray:
    """Bin index per value; boundary ties go toward the smaller-|c| centroid."""
    inner = cb.boundaries[1:-1]
    idx = np.searchsorted(inner, values, side="right")
    on_edge = np.isin(values, inner)
    if np.any(on_edge):
        edge_vals = values[on_edge]
        hi = np.searchsorted(inner, edge_vals, side="right")
        lo = hi - 1
        pick_lo = np.abs(cb.centroids[lo]) <= np.abs(cb.centroids[hi])
        idx[on_edge] = np.where(pick_lo, lo, hi)
    return idx


def fit_codebook(samples, bits: int) -> Codebook:
    """Fit a Lloyd-Max codebook with a pinned zero centroid.

    Alternates bin-mean centroid updates (zero excluded) and midpoint
    boundary updates until centroids move < 1e-7 or 200 iterations.
    Falls back to the distinct sample values padded with 0.0 when there
    are fewer distinct values than centroids.
    """
    x = as_array(samples).reshape(-1)
    if x.size == 0:
        raise QuantizationError("cannot fit a codebook on empty samples")
    if bits not in ALLOWED_BITS:
        raise QuantizationError(f"bits must be one of {ALLOWED_BITS}")
    k = 2 ** bits

    distinct = np.unique(x)
    if distinct.size < k:
        cents = np.union1d(distinct, [0.0])
        if cents.size < k:
            # pad above the current max so centroids stay strictly increasing
            top = cents[-1] if cents.size else 0.0
            step = max(1.0, abs(top))
            pad = top + step * np.arange(1, k - cents.size + 1)
            cents = np.concatenate([cents, pad])
        return Codebook(bits, np.sort(cents)[:k] if cents.size > k else np.sort(cents))

    # quantile init, then snap the nearest centroid to exactly zero
    qs = (np.arange(k) + 0.5) / k
    cents = np.quantile(x, qs)
    cents = _ensure_distinct(cents)
    zi = int(np.argmin(np.abs(cents)))
    cents[zi] = 0.0
    cents = np.sort(cents)
    zi = int(np.nonzero(cents == 0.0)[0][0])

    for _ in range(MAX_LLOYD_ITERS):
        bounds = _midpoint_boundaries(cents)
        idx = np.searchsorted(bounds[1:-1], x, side="right")
        sums = np.bincount(idx, weights=x, minlength=k)
        counts = np.bincount(idx, minlength=k)
        new = cents.copy()
        nonempty = counts > 0
        new[nonempty] = sums[nonempty] / counts[nonempty]
        new[zi] = 0.0
        new = np.sort(_ensure_distinct(new))
        zi = int(np.nonzero(new == 0.0)[0][0])
        moved = np.max(np.abs(new - cents))
        cents = new
        if moved < CENTROID_TOL:
            break
    return Codebook(bits, cents)


def _ensure_distinct(cents: np.ndarray) -> np.ndarray:
    """Nudge duplicated centroids apart; keeps an exact 0.0 untouched."""
    cents = np.sort(cents)
    for i in range(1, cents.size):
        if cents[i] <= cents[i - 1]:
            bump = max(1e-12, abs(cents[i - 1]) * 1e-12)
            cents[i] = cents[i - 1] + bump if cents[i - 1] != 0.0 else bump
    return cents


def quantize(x, cb: Codebook):
    """Map every value to the centroid of its bin. Idempotent; 0 -> 0."""
    arr = as_array(x)
    flat = arr.reshape(-1)
    out = cb.centroids[_assign_bins(flat, cb)].reshape(arr.shape)
    if isinstance(x, Tensor):
        return Tensor(x.shape, out.reshape(-1))
    return out


def quantization_mse(x, cb: Codebook) -> float:
    arr = as_array(x).reshape(-1)
    return float(np.mean((arr - as_array(quantize(arr, cb))) ** 2))


def to_fixed_point(x, scale_bits: int, max_int_bits: Optional[int] = None):
    """Round values to the 2^-scale_bits grid.

    Each value v becomes round(v * 2^s) / 2^s (ties to even), so the
    per-element error is at most 2^-(s+1). Raises QuantizationError when a
    scaled integer exceeds the declared bit width.
    """
    if not 1 <= int(scale_bits) <= 24:
        raise QuantizationError("scale_bits must be in [1, 24]")
    s = 1 << int(scale_bits)
    arr = as_array(x)
    ints = np.rint(arr * s)
    if max_int_bits is not None:
        limit = float(1 << (int(max_int_bits) - 1))
        if np.any(np.abs(ints) >= limit):
            raise QuantizationError(
                f"value overflows {max_int_bits}-bit fixed point at scale 2^{scale_bits}"
            )
    out = ints / s
    if isinstance(x, Tensor):
        return Tensor(x.shape, out.reshape(-1), fixed_point_scale=s)
    return Tensor.from_array(out, fixed_point_scale=s)


@dataclass
class QuantizationPlan:
    """Per-layer, per-role codebook assignments for one network.

    ``books[layer_index][role]`` holds the fitted Codebook. 16-bit plans
    use plain fixed point instead: codebooks are absent and
    ``fixed_scale_bits`` is set.
    """

    bits: int
    books: Dict[int, Dict[str, Codebook]]
    fixed_scale_bits: Optional[int] = None

    def book(self, layer: int, role: str) -> Optional[Codebook]:
        return self.books.get(layer, {}).get(role)


def plan_quantization(
    net: PolyNetwork,
    bits: int,
    calibration,
    labels=None,
    fixed_scale_bits: int = 12,
) -> QuantizationPlan:
    """Fit one codebook per tensor role per parameterized layer.

    Weights and biases are fitted on the parameters themselves;
    activation (and, when labels are given, gradient) codebooks are fitted
    on a calibration forward/backward pass. With bits=16 the plan records
    a fixed-point scale and no codebooks.
    """
    calibration = np.asarray(as_array(calibration), dtype=np.float64)
    if calibration.ndim == 1:
        calibration = calibration[None, :]
    if calibration.size == 0:
        raise QuantizationError("calibration batch must be nonempty")
    if calibration.shape[1:] != tuple(net.input_shape) and calibration.shape[
        1
    ] != int(np.prod(net.input_shape)):
        raise QuantizationError(
            f"calibration shape {calibration.shape[1:]} does not match "
            f"net input {net.input_shape}"
        )
    if bits == 16:
        return QuantizationPlan(16, {}, fixed_scale_bits=fixed_scale_bits)

    from .train import collect_statistics  # cycle-free at call time

    acts, wgrads, agrads = collect_statistics(net, calibration, labels)
    books: Dict[int, Dict[str, Codebook]] = {}
    for i, layer in enumerate(net.layers):
        entry: Dict[str, Codebook] = {}
        w = getattr(layer, "weights", None)
        if w is None:
            w = getattr(layer, "kernels", None)
        if w is not None:
            entry["weights"] = fit_codebook(w, bits)
            entry["bias"] = fit_codebook(layer.bias, bits)
            if labels is not None and i in wgrads:
                entry["weight_gradients"] = fit_codebook(wgrads[i], bits)
        if i in acts:
            entry["activations"] = fit_codebook(acts[i], bits)
            if labels is not None and i in agrads:
                entry["activation_gradients"] = fit_codebook(agrads[i], bits)
        if entry:
            books[i] = entry
    return QuantizationPlan(bits, books)
