"""Plaintext training: SGD with cross-entropy, backprop through every
layer kind, and the three-phase quantized retraining pipeline
(float finetune, codebook fit, quantized retrain with a straight-through
estimator and a float shadow copy of the weights).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ShapeError, TrainingDiverged
from .network import (
    PolyNetwork, Dense, Conv, SIGMOID_C1, SIGMOID_C3,
    apply_layer, as_array, conv_forward,
)
from .quantize import QuantizationPlan, plan_quantization, quantize, to_fixed_point

_FLAT_KINDS = {"Dense", "BatchNorm", "SquareActivation", "SigmoidPoly",
               "ReLU", "Sigmoid", "Softmax"}


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    minibatch_size: int = 128
    epochs_phase1: int = 20
    epochs_phase3: int = 10
    bits: int = 8
    seed: int = 0
    momentum: float = 0.9
    refresh_gradient_codebooks: bool = True
    quantize_gradients: bool = True
    fixed_scale_bits: int = 12
    calibration_frames: int = 10000

    def __post_init__(self):
        if self.learning_rate <= 0 or self.minibatch_size <= 0:
            raise ShapeError("learning rate and minibatch size must be positive")
        if self.epochs_phase1 < 0 or self.epochs_phase3 < 0:
            raise ShapeError("epoch counts must be non-negative")


@dataclass
class EpochRow:
    epoch: int
    phase: str
    loss: float
    train_acc: float
    heldout_acc: float


@dataclass
class TrainReport:
    """Per-epoch loss/accuracy with phase markers, exportable as CSV."""

    rows: List[EpochRow] = field(default_factory=list)

    PHASES = ("float-finetune", "codebook-fit", "quantized-retrain")

    def add(self, epoch, phase, loss, train_acc, heldout_acc):
        self.rows.append(EpochRow(int(epoch), phase, float(loss),
                                  float(train_acc), float(heldout_acc)))

    def phases_seen(self) -> List[str]:
        seen = []
        for r in self.rows:
            if not seen or seen[-1] != r.phase:
                seen.append(r.phase)
        return seen

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("epoch,phase,loss,train_acc,heldout_acc\n")
            for r in self.rows:
                f.write(f"{r.epoch},{r.phase},{r.loss:.6f},"
                        f"{r.train_acc:.4f},{r.heldout_acc:.4f}\n")


# --------------------------------------------------------------------------
# Single-sample backward (all layer kinds); used for gradient checks
# --------------------------------------------------------------------------


def _layer_backward(layer, x, y, g):
    """Gradient of one layer: returns (param_grads, dx) given upstream g."""
    k = layer.kind
    if k == "Dense":
        xf = x.reshape(-1)
        return {"weights": np.outer(xf, g), "bias": g.copy()}, (layer.weights @ g).reshape(x.shape)
    if k == "Conv":
        return _conv_backward(layer, x, g)
    if k == "BatchNorm":
        xf = x.reshape(-1)
        xn = (xf - layer.mu) / layer.sigma
        gf = g.reshape(-1)
        dx = (gf * layer.gamma / layer.sigma).reshape(x.shape)
        return {"gamma": gf * xn, "beta": gf.copy()}, dx
    if k == "SquareActivation":
        return {}, 2.0 * x * g
    if k == "SigmoidPoly":
        return {}, (SIGMOID_C1 + 3.0 * SIGMOID_C3 * x * x) * g
    if k == "ReLU":
        return {}, (x > 0) * g
    if k == "Sigmoid":
        return {}, y * (1.0 - y) * g
    if k == "Softmax":
        return {}, y * (g - np.dot(g.reshape(-1), y.reshape(-1)))
    if k == "MaxPool":
        return {}, _pool_backward(x, g, layer.window, maxpool=True)
    if k == "ScaledMeanPool":
        return {}, _pool_backward(x, g, layer.window, maxpool=False)
    raise ShapeError(f"no backward for kind {k}")  # pragma: no cover


def _pool_backward(x, g, w, maxpool):
    if x.ndim == 1:
        xr = x.reshape(-1, w)
        gr = g.reshape(-1, 1)
        if maxpool:
            mask = np.zeros_like(xr)
            mask[np.arange(xr.shape[0]), np.argmax(xr, axis=1)] = 1.0
            return (mask * gr).reshape(x.shape)
        return np.broadcast_to(gr, xr.shape).reshape(x.shape).copy()
    c, h, wdt = x.shape
    xr = x.reshape(c, h // w, w, wdt // w, w)
    gr = g.reshape(c, h // w, 1, wdt // w, 1)
    if maxpool:
        flat = xr.transpose(0, 1, 3, 2, 4).reshape(c, h // w, wdt // w, w * w)
        arg = np.argmax(flat, axis=-1)
        mask = np.zeros_like(flat)
        np.put_along_axis(mask, arg[..., None], 1.0, axis=-1)
        mask = mask.reshape(c, h // w, wdt // w, w, w).transpose(0, 1, 3, 2, 4)
        return (mask * gr).reshape(x.shape)
    return np.broadcast_to(gr, xr.shape).reshape(x.shape).copy()


def _conv_backward(layer: Conv, x, g):
    c, kh, kw = layer.kernels.shape
    s = layer.stride
    if layer.padding == "same":
        oh = (x.shape[0] + s - 1) // s
        ow = (x.shape[1] + s - 1) // s
        ph = max((oh - 1) * s + kh - x.shape[0], 0)
        pw = max((ow - 1) * s + kw - x.shape[1], 0)
        xp = np.pad(x, ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)))
        crop = (ph // 2, pw // 2)
    else:
        xp = x
        crop = (0, 0)
    oh, ow = g.shape[1], g.shape[2]
    dk = np.zeros_like(layer.kernels)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            patch = xp[i: i + oh * s: s, j: j + ow * s: s]
            dk[:, i, j] = np.einsum("hw,chw->c", patch, g)
            dxp[i: i + oh * s: s, j: j + ow * s: s] += np.einsum(
                "c,chw->hw", layer.kernels[:, i, j], g
            )
    db = g.sum(axis=(1, 2))
    dx = dxp[crop[0]: crop[0] + x.shape[0], crop[1]: crop[1] + x.shape[1]]
    return {"kernels": dk, "bias": db}, dx


def loss_and_scores(net: PolyNetwork, x, label: int):
    """Forward with activation caching; returns (loss, caches, scores)."""
    x = as_array(x)
    acts = [x]
    for layer in net.layers:
        acts.append(apply_layer(layer, acts[-1]))
    scores = acts[-1].reshape(-1)
    if net.layers and net.layers[-1].kind == "Softmax":
        p = scores
    else:
        e = np.exp(scores - scores.max())
        p = e / e.sum()
    loss = -math.log(max(p[label], 1e-300))
    return loss, acts, p


def backward(net: PolyNetwork, x, label: int) -> Dict[int, Dict[str, np.ndarray]]:
    """Gradients of softmax cross-entropy w.r.t. every layer parameter."""
    if not 0 <= int(label) < net.output_dim:
        raise ShapeError(f"label {label} out of range for output dim {net.output_dim}")
    _, acts, p = loss_and_scores(net, x, label)
    onehot = np.zeros_like(p)
    onehot[label] = 1.0
    g = (p - onehot)
    layers = net.layers
    last = len(layers) - 1
    grads: Dict[int, Dict[str, np.ndarray]] = {}
    start = last
    if layers and layers[last].kind == "Softmax":
        start = last - 1  # CE folds the softmax jacobian into p - onehot
    for i in range(start, -1, -1):
        layer = layers[i]
        x_in, y_out = acts[i], acts[i + 1]
        pg, g = _layer_backward(layer, x_in, y_out, g.reshape(y_out.shape))
        if pg:
            grads[i] = pg
    return grads


# --------------------------------------------------------------------------
# Batched engine for flat (dense-path) networks
# --------------------------------------------------------------------------


class _FlatEngine:
    """Vectorized forward/backward over minibatches for dense-path nets.

    Supports the straight-through estimator: effective weights are
    ``quantizer(shadow)``; backward treats the quantizer as identity and
    gradients land on the float shadow copy.
    """

    def __init__(self, net: PolyNetwork):
        if not all(l.kind in _FLAT_KINDS for l in net.layers):
            raise ShapeError("batched training supports dense-path layers only")
        self.net = net

    def forward(self, layers, X, act_quant=None):
        acts = [X]
        h = X
        for i, layer in enumerate(layers):
            k = layer.kind
            if k == "Dense":
                h = h @ layer.weights + layer.bias
            elif k == "BatchNorm":
                h = layer.gamma * (h - layer.mu) / layer.sigma + layer.beta
            elif k == "SquareActivation":
                h = h * h
            elif k == "SigmoidPoly":
                h = 0.5 + SIGMOID_C1 * h + SIGMOID_C3 * h**3
            elif k == "ReLU":
                h = np.maximum(h, 0.0)
            elif k == "Sigmoid":
                h = 1.0 / (1.0 + np.exp(-h))
            elif k == "Softmax":
                e = np.exp(h - h.max(axis=1, keepdims=True))
                h = e / e.sum(axis=1, keepdims=True)
            if act_quant is not None:
                q = act_quant(i)
                if q is not None:
                    h = as_array(quantize(h, q))
            acts.append(h)
        return acts

    def backward(self, layers, acts, y):
        B = acts[0].shape[0]
        logits = acts[-1]
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        loss = float(-np.log(np.maximum(p[np.arange(B), y], 1e-300)).mean())
        g = p
        g[np.arange(B), y] -= 1.0
        g /= B
        grads: Dict[int, Dict[str, np.ndarray]] = {}
        for i in range(len(layers) - 1, -1, -1):
            layer = layers[i]
            x_in, y_out = acts[i], acts[i + 1]
            k = layer.kind
            if k == "Dense":
                grads[i] = {"weights": x_in.T @ g, "bias": g.sum(axis=0)}
                g = g @ layer.weights.T
            elif k == "BatchNorm":
                xn = (x_in - layer.mu) / layer.sigma
                grads[i] = {"gamma": (g * xn).sum(axis=0), "beta": g.sum(axis=0)}
                g = g * (layer.gamma / layer.sigma)
            elif k == "SquareActivation":
                g = 2.0 * x_in * g
            elif k == "SigmoidPoly":
                g = (SIGMOID_C1 + 3.0 * SIGMOID_C3 * x_in * x_in) * g
            elif k == "ReLU":
                g = (x_in > 0) * g
            elif k == "Sigmoid":
                g = y_out * (1.0 - y_out) * g
            elif k == "Softmax":
                g = y_out * (g - (g * y_out).sum(axis=1, keepdims=True))
        return loss, grads


def _effective_layers(net, plan: Optional[QuantizationPlan]):
    """Layers with quantized parameters per the plan (shadow untouched)."""
    if plan is None:
        return net.layers
    out = []
    for i, layer in enumerate(net.layers):
        if layer.kind == "Dense":
            if plan.bits == 16:
                w = to_fixed_point(layer.weights, plan.fixed_scale_bits).as_array()
                b = to_fixed_point(layer.bias, plan.fixed_scale_bits).as_array()
            else:
                wb, bb = plan.book(i, "weights"), plan.book(i, "bias")
                w = as_array(quantize(layer.weights, wb)) if wb is not None else layer.weights
                b = as_array(quantize(layer.bias, bb)) if bb is not None else layer.bias
            out.append(Dense(w, b))
        else:
            out.append(layer)
    return out


def accuracy(net: PolyNetwork, X, y, plan: Optional[QuantizationPlan] = None,
             quantize_activations: bool = True) -> float:
    """Top-1 accuracy; with a plan, evaluates the quantized graph."""
    eng = _FlatEngine(net)
    layers = _effective_layers(net, plan)
    aq = None
    if plan is not None and plan.bits != 16 and quantize_activations:
        aq = lambda i: plan.book(i, "activations")
    preds = np.argmax(eng.forward(layers, np.asarray(X, dtype=np.float64), aq)[-1], axis=1)
    return float((preds == np.asarray(y)).mean())


def collect_statistics(net: PolyNetwork, X, labels=None, cap: int = 10000):
    """Per-layer activation samples and (with labels) gradient samples.

    Used to fit activation/gradient codebooks from a calibration pass.
    """
    eng = _FlatEngine(net)
    X = np.asarray(X, dtype=np.float64)[:cap]
    acts = eng.forward(net.layers, X)
    act_samples = {i: acts[i + 1].reshape(-1) for i in range(len(net.layers))}
    wgrads, agrads = {}, {}
    if labels is not None:
        y = np.asarray(labels)[: X.shape[0]]
        _, grads = eng.backward(net.layers, acts, y)
        for i, pg in grads.items():
            if "weights" in pg:
                wgrads[i] = pg["weights"].reshape(-1)
        # activation gradients: recompute per layer boundary
        g_acts = _activation_gradients(eng, net.layers, acts, y)
        agrads.update(g_acts)
    return act_samples, wgrads, agrads


def _activation_gradients(eng, layers, acts, y):
    B = acts[0].shape[0]
    logits = acts[-1]
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    g = p
    g[np.arange(B), y] -= 1.0
    g /= B
    out = {len(layers) - 1: g.reshape(-1).copy()}
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        x_in, y_out = acts[i], acts[i + 1]
        k = layer.kind
        if k == "Dense":
            g = g @ layer.weights.T
        elif k == "BatchNorm":
            g = g * (layer.gamma / layer.sigma)
        elif k == "SquareActivation":
            g = 2.0 * x_in * g
        elif k == "SigmoidPoly":
            g = (SIGMOID_C1 + 3.0 * SIGMOID_C3 * x_in * x_in) * g
        elif k == "ReLU":
            g = (x_in > 0) * g
        elif k == "Sigmoid":
            g = y_out * (1.0 - y_out) * g
        if i > 0:
            out[i - 1] = g.reshape(-1).copy()
    return out


def _sgd_phase(net, X, y, Xval, yval, epochs, cfg, rng, report, phase,
               epoch_offset, plan=None):
    """Minibatch SGD with momentum; with a plan, runs the STE loop."""
    eng = _FlatEngine(net)
    vel: Dict[int, Dict[str, np.ndarray]] = {}
    n = X.shape[0]
    for ep in range(epochs):
        order = rng.permutation(n)
        losses = []
        if plan is not None and plan.bits != 16 and cfg.refresh_gradient_codebooks and ep > 0:
            plan = plan_quantization(net, plan.bits, X[:cfg.calibration_frames],
                                     y[:cfg.calibration_frames])
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start:start + cfg.minibatch_size]
            layers = _effective_layers(net, plan)
            aq = None
            if plan is not None and plan.bits != 16:
                aq = lambda i: plan.book(i, "activations")
            acts = eng.forward(layers, X[idx], aq)
            loss, grads = eng.backward(layers, acts, y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(phase, epoch_offset + ep)
            losses.append(loss)
            for i, pg in grads.items():
                layer = net.layers[i]
                for name, gval in pg.items():
                    if plan is not None and plan.bits != 16 and cfg.quantize_gradients \
                            and name == "weights":
                        gb = plan.book(i, "weight_gradients")
                        if gb is not None:
                            gval = as_array(quantize(gval, gb))
                    v = vel.setdefault(i, {}).get(name)
                    v = cfg.momentum * v - cfg.learning_rate * gval if v is not None \
                        else -cfg.learning_rate * gval
                    vel[i][name] = v
                    setattr(layer, name, getattr(layer, name) + v)
        tr_acc = accuracy(net, X[:5000], y[:5000], plan)
        va_acc = accuracy(net, Xval, yval, plan)
        report.add(epoch_offset + ep, phase, float(np.mean(losses)), tr_acc, va_acc)
    return plan


def train_float(net: PolyNetwork, data, cfg: TrainConfig,
                epochs: Optional[int] = None) -> TrainReport:
    """Plain float SGD (used for baselines and phase 1 on its own)."""
    X, y, Xval, yval = data
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    _sgd_phase(net, X, y, Xval, yval,
               cfg.epochs_phase1 if epochs is None else epochs,
               cfg, rng, report, "float-finetune", 0)
    return report


def train_quantized(net: PolyNetwork, data, cfg: TrainConfig
                    ) -> Tuple[PolyNetwork, QuantizationPlan, TrainReport]:
    """Three-phase quantized training.

    Phase 1 updates float weights. Phase 2 fits per-layer codebooks from
    the current weights, activations and gradients. Phase 3 retrains with
    on-the-fly quantization: forward and gradients use the quantized
    graph, updates land on the float shadow, and the deployed weights are
    the re-quantized shadow.
    """
    X, y, Xval, yval = data
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()

    _sgd_phase(net, X, y, Xval, yval, cfg.epochs_phase1, cfg, rng, report,
               "float-finetune", 0)

    plan = plan_quantization(net, cfg.bits, X[:cfg.calibration_frames],
                             y[:cfg.calibration_frames],
                             fixed_scale_bits=cfg.fixed_scale_bits)
    q_acc = accuracy(net, Xval, yval, plan)
    report.add(cfg.epochs_phase1, "codebook-fit", float("nan"),
               accuracy(net, X[:5000], y[:5000], plan), q_acc)

    plan = _sgd_phase(net, X, y, Xval, yval, cfg.epochs_phase3, cfg, rng, report,
                      "quantized-retrain", cfg.epochs_phase1 + 1, plan) or plan

    deployed = PolyNetwork(_effective_layers(net, plan), net.input_shape)
    return deployed, plan, report


# --------------------------------------------------------------------------
# Synthetic frame-classification task
# --------------------------------------------------------------------------

TOY_CLASSES = 10
TOY_DIM = 40
TOY_TRAIN = 50000
TOY_TEST = 5000
_TOY_SPREAD = 1.55  # cluster noise scale; tuned so a linear model lands in 60..90%


@dataclass
class ToyTask:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray


def make_toy_task(seed: int) -> ToyTask:
    """Balanced 10-class, 40-dim Gaussian cluster task, 50k/5k split.

    Deterministic per seed; features are centered and scaled to roughly
    unit variance so fixed-point encodings stay small.
    """
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 1.0, size=(TOY_CLASSES, TOY_DIM))
    means *= math.sqrt(TOY_DIM) / np.linalg.norm(means, axis=1, keepdims=True)

    def sample(per_class, gen):
        X = np.empty((per_class * TOY_CLASSES, TOY_DIM))
        y = np.empty(per_class * TOY_CLASSES, dtype=np.int64)
        for c in range(TOY_CLASSES):
            sl = slice(c * per_class, (c + 1) * per_class)
            X[sl] = means[c] + gen.normal(0.0, _TOY_SPREAD, size=(per_class, TOY_DIM))
            y[sl] = c
        perm = gen.permutation(X.shape[0])
        return X[perm], y[perm]

    Xtr, ytr = sample(TOY_TRAIN // TOY_CLASSES, rng)
    Xte, yte = sample(TOY_TEST // TOY_CLASSES, rng)
    mu = Xtr.mean(axis=0)
    sd = Xtr.std(axis=0)
    Xtr = (Xtr - mu) / sd
    Xte = (Xte - mu) / sd
    return ToyTask(Xtr, ytr, Xte, yte)


def mlp(dims, rng, activation="ReLU") -> PolyNetwork:
    """[Dense, act]* Dense network with He-style init."""
    from .network import ReLU, SquareActivation, Sigmoid

    act_cls = {"ReLU": ReLU, "SquareActivation": SquareActivation,
               "Sigmoid": Sigmoid}[activation]
    layers = []
    for i in range(len(dims) - 1):
        w = rng.normal(0.0, math.sqrt(2.0 / dims[i]), size=(dims[i], dims[i + 1]))
        layers.append(Dense(w, np.zeros(dims[i + 1])))
        if i < len(dims) - 2:
            layers.append(act_cls())
    return PolyNetwork(layers, (dims[0],))
