"""Small feed-forward network engine with manual backpropagation.

Networks are chains of dense and 2-d convolution layers over float64
numpy arrays.  The last layer is always a dense classifier head (the
predictor); everything before it is the encoder.  ``forward`` returns the
encoder output (the representation fed to the predictor) together with
the logits, because the training objective regularizes the representation
directly.

Design constraints the rest of the package relies on:

* all parameters are float64 and all updates are pure numpy, so results
  are bit-reproducible for a fixed seed,
* convolutions are valid (no padding), stride 1,
* a dense layer that receives a 4-d feature map averages over the spatial
  dims first, so channel counts line up one-to-one between consecutive
  layers and channel masks translate directly into parameter masks,
* there is no batch normalization anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, NumericError

Tensor = np.ndarray

_KINDS = ("dense", "conv2d")
_ACTIVATIONS = ("relu", "none")


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer.

    Args:
        kind: "dense" or "conv2d".
        in_channels: input features (dense) or input channels (conv2d).
        out_channels: output units or channels.
        activation: "relu" or "none".
        prunable: whether channel pruning may drop output channels.
        kernel: square kernel size, conv2d only.
    """

    kind: str
    in_channels: int
    out_channels: int
    activation: str = "none"
    prunable: bool = True
    kernel: int | None = None


def _validate_specs(specs: tuple[LayerSpec, ...]) -> None:
    if not specs:
        raise ConfigError("network needs at least one layer")
    seen_dense = False
    for i, spec in enumerate(specs):
        if spec.kind not in _KINDS:
            raise ConfigError(f"layer {i}: unknown kind {spec.kind!r}")
        if spec.activation not in _ACTIVATIONS:
            raise ConfigError(f"layer {i}: unknown activation {spec.activation!r}")
        if spec.in_channels < 1 or spec.out_channels < 1:
            raise ConfigError(f"layer {i}: channel counts must be positive")
        if spec.kind == "conv2d":
            if seen_dense:
                raise ConfigError(f"layer {i}: conv2d cannot follow a dense layer")
            if spec.kernel is None or spec.kernel < 1:
                raise ConfigError(f"layer {i}: conv2d needs a positive kernel")
        else:
            seen_dense = True
        if i > 0 and spec.in_channels != specs[i - 1].out_channels:
            raise ConfigError(
                f"layer {i}: in_channels {spec.in_channels} does not match "
                f"previous out_channels {specs[i - 1].out_channels}"
            )
    last = specs[-1]
    if last.kind != "dense" or last.activation != "none" or last.prunable:
        raise ConfigError(
            "final layer must be a non-prunable dense layer without activation"
        )


@dataclass
class Network:
    """Parameter container plus the layer chain that interprets it."""

    specs: tuple[LayerSpec, ...]
    weights: list[Tensor]
    biases: list[Tensor]
    input_hw: tuple[int, int] | None = None

    @property
    def encoder_len(self) -> int:
        return len(self.specs) - 1

    def copy(self) -> "Network":
        return Network(
            specs=self.specs,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            input_hw=self.input_hw,
        )

    def same_structure(self, other: "Network") -> bool:
        return self.specs == other.specs


@dataclass(frozen=True)
class Objective:
    """Composite objective descriptor: cross-entropy plus a squared
    representation-norm penalty weighted by ``gamma``."""

    labels: Tensor
    gamma: float = 0.0


@dataclass
class OptimizerState:
    """SGD with momentum and decoupled-from-nothing weight decay.

    The velocity buffers mirror the parameter lists.  A fresh state is
    created at the start of every local training phase.
    """

    lr: float
    momentum: float
    weight_decay: float
    velocity_w: list[Tensor] = field(default_factory=list)
    velocity_b: list[Tensor] = field(default_factory=list)


def _weight_shape(spec: LayerSpec) -> tuple[int, ...]:
    if spec.kind == "dense":
        return (spec.out_channels, spec.in_channels)
    return (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)


def init_network(
    specs: list[LayerSpec] | tuple[LayerSpec, ...],
    seed: int,
    input_hw: tuple[int, int] | None = None,
) -> Network:
    """Build a network with fan-in-scaled uniform weights and zero biases.

    Weights are drawn from U(-sqrt(6/fan_in), sqrt(6/fan_in)) in layer
    order from a generator seeded only by ``seed``, so two calls with the
    same arguments produce bit-identical parameters.
    """
    specs = tuple(specs)
    _validate_specs(specs)
    if input_hw is None and any(s.kind == "conv2d" for s in specs):
        raise ConfigError("networks with conv2d layers need input_hw")
    rng = np.random.default_rng(np.random.SeedSequence([7919, int(seed)]))
    weights, biases = [], []
    for spec in specs:
        fan_in = spec.in_channels
        if spec.kind == "conv2d":
            fan_in *= spec.kernel * spec.kernel
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=_weight_shape(spec)))
        biases.append(np.zeros(spec.out_channels))
    return Network(specs=specs, weights=weights, biases=biases, input_hw=input_hw)


def _check_input(net: Network, x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    first = net.specs[0]
    if first.kind == "dense":
        if x.ndim != 2 or x.shape[1] != first.in_channels:
            raise InputError(
                f"expected input of shape (batch, {first.in_channels}), got {x.shape}"
            )
    else:
        if x.ndim != 4 or x.shape[1] != first.in_channels:
            raise InputError(
                f"expected input of shape (batch, {first.in_channels}, h, w), "
                f"got {x.shape}"
            )
    if x.shape[0] == 0:
        raise InputError("empty batch")
    return x


def _im2col(x: Tensor, k: int) -> Tensor:
    # (batch, c, h, w) -> (batch, c, h-k+1, w-k+1, k, k) view, no copy.
    b, c, h, w = x.shape
    if h < k or w < k:
        raise InputError(f"spatial size {h}x{w} smaller than kernel {k}")
    sb, sc, sh, sw = x.strides
    shape = (b, c, h - k + 1, w - k + 1, k, k)
    strides = (sb, sc, sh, sw, sh, sw)
    return np.lib.stride_tricks.as_strided(x, shape=shape, strides=strides)


def _conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    patches = _im2col(np.ascontiguousarray(x), w.shape[2])
    out = np.einsum("bcijxy,ocxy->boij", patches, w, optimize=True)
    return out + b[None, :, None, None]


class _Trace:
    """Per-layer intermediates kept for the backward pass."""

    __slots__ = ("inputs", "pre", "gap_shape")

    def __init__(self):
        self.inputs: list[Tensor] = []
        self.pre: list[Tensor] = []
        # spatial shape averaged away right before each layer, or None
        self.gap_shape: list[tuple[int, int] | None] = []


def _forward_trace(net: Network, x: Tensor) -> tuple[_Trace, Tensor, Tensor]:
    trace = _Trace()
    h = x
    for spec, w, b in zip(net.specs, net.weights, net.biases):
        gap = None
        if spec.kind == "dense" and h.ndim == 4:
            gap = h.shape[2:]
            h = h.mean(axis=(2, 3))
        trace.gap_shape.append(gap)
        trace.inputs.append(h)
        if spec.kind == "dense":
            pre = h @ w.T + b
        else:
            pre = _conv2d(h, w, b)
        trace.pre.append(pre)
        h = np.maximum(pre, 0.0) if spec.activation == "relu" else pre
    representation = trace.inputs[-1]
    return trace, representation, h


def forward(net: Network, x: Tensor) -> tuple[Tensor, Tensor]:
    """Run the network on a batch.

    Returns:
        (representation, logits): the representation is the tensor the
        final dense layer consumes.  For a single-layer network it is the
        input batch itself.
    """
    x = _check_input(net, x)
    _, representation, logits = _forward_trace(net, x)
    return representation, logits


Gradients = list[tuple[Tensor, Tensor]]


def _softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def backward_from_outputs(
    net: Network,
    x: Tensor,
    grad_logits: Tensor,
    grad_repr: Tensor | None = None,
    mask=None,
) -> Gradients:
    """Backpropagate given gradients at the logits and, optionally, at the
    representation.  Returns one (d_weight, d_bias) pair per layer."""
    x = _check_input(net, x)
    trace, _, _ = _forward_trace(net, x)
    n_layers = len(net.specs)
    grads: list[tuple[Tensor, Tensor] | None] = [None] * n_layers
    g = np.asarray(grad_logits, dtype=np.float64)
    for k in range(n_layers - 1, -1, -1):
        spec = net.specs[k]
        if spec.activation == "relu":
            g = g * (trace.pre[k] > 0.0)
        inp = trace.inputs[k]
        w = net.weights[k]
        if spec.kind == "dense":
            dw = g.T @ inp
            db = g.sum(axis=0)
            gx = g @ w if k > 0 or grad_repr is not None else None
        else:
            patches = _im2col(np.ascontiguousarray(inp), spec.kernel)
            dw = np.einsum("bcijxy,boij->ocxy", patches, g, optimize=True)
            db = g.sum(axis=(0, 2, 3))
            if k > 0:
                pad = spec.kernel - 1
                gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
                gpatch = _im2col(gp, spec.kernel)
                gx = np.einsum(
                    "boijxy,ocxy->bcij", gpatch, w[:, :, ::-1, ::-1], optimize=True
                )
            else:
                gx = None
        grads[k] = (dw, db)
        if k == n_layers - 1 and grad_repr is not None:
            gx = gx + np.asarray(grad_repr, dtype=np.float64)
        if k > 0 and trace.gap_shape[k] is not None:
            hh, ww = trace.gap_shape[k]
            gx = np.broadcast_to(
                gx[:, :, None, None] / (hh * ww), gx.shape + (hh, ww)
            ).copy()
        g = gx
    out = [pair for pair in grads if pair is not None]
    if mask is not None:
        out = [
            (dw * wm, db * bm)
            for (dw, db), (wm, bm) in zip(out, mask.tensors())
        ]
    return out


def backward(net: Network, x: Tensor, objective: Objective, mask=None) -> Gradients:
    """Gradients of mean cross-entropy plus ``gamma`` times the batch-mean
    squared representation norm, with respect to every parameter.

    When a mask is given, gradient entries at masked positions are exactly
    zero.
    """
    x = _check_input(net, x)
    labels = np.asarray(objective.labels)
    if labels.shape != (x.shape[0],):
        raise InputError("labels must be a vector matching the batch size")
    n_classes = net.specs[-1].out_channels
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"labels out of range [0, {n_classes})")
    batch = x.shape[0]
    _, representation, logits = _forward_trace(net, x)
    grad_logits = _softmax(logits)
    grad_logits[np.arange(batch), labels] -= 1.0
    grad_logits /= batch
    grad_repr = None
    if objective.gamma != 0.0:
        grad_repr = (2.0 * objective.gamma / batch) * representation
    return backward_from_outputs(net, x, grad_logits, grad_repr, mask)


def init_optimizer(
    net: Network, lr: float, momentum: float = 0.0, weight_decay: float = 0.0
) -> OptimizerState:
    if lr < 0 or not 0.0 <= momentum < 1.0 or weight_decay < 0:
        raise ConfigError("invalid optimizer hyperparameters")
    return OptimizerState(
        lr=lr,
        momentum=momentum,
        weight_decay=weight_decay,
        velocity_w=[np.zeros_like(w) for w in net.weights],
        velocity_b=[np.zeros_like(b) for b in net.biases],
    )


def sgd_step(net: Network, grads: Gradients, opt: OptimizerState, mask=None) -> None:
    """One in-place momentum step: v <- m*v + (g + wd*w); w <- w - lr*v.

    Masked positions of the weights, gradients and velocity are forced to
    zero before and after the update, so a pruned channel can never drift
    away from zero.  Raises NumericError before touching any parameter if
    a gradient is not finite.
    """
    for dw, db in grads:
        if not (np.isfinite(dw).all() and np.isfinite(db).all()):
            raise NumericError("non-finite gradient; step aborted")
    tensors = mask.tensors() if mask is not None else None
    for k, (dw, db) in enumerate(grads):
        w, b = net.weights[k], net.biases[k]
        vw, vb = opt.velocity_w[k], opt.velocity_b[k]
        if tensors is not None:
            wm, bm = tensors[k]
            w *= wm
            b *= bm
            vw *= wm
            vb *= bm
            dw = dw * wm
            db = db * bm
        vw *= opt.momentum
        vw += dw + opt.weight_decay * w
        vb *= opt.momentum
        vb += db + opt.weight_decay * b
        w -= opt.lr * vw
        b -= opt.lr * vb
        if tensors is not None:
            wm, bm = tensors[k]
            w *= wm
            b *= bm
            vw *= wm
            vb *= bm


def evaluate(net: Network, features: Tensor, labels: Tensor, chunk: int = 1024) -> float:
    """Top-1 accuracy.  Argmax ties resolve to the lowest class index."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.shape[0] == 0:
        raise InputError("cannot evaluate on an empty dataset")
    if features.shape[0] != labels.shape[0]:
        raise InputError("features and labels disagree on sample count")
    hits = 0
    for start in range(0, features.shape[0], chunk):
        xb = features[start : start + chunk]
        _, logits = forward(net, xb)
        hits += int((np.argmax(logits, axis=1) == labels[start : start + chunk]).sum())
    return hits / features.shape[0]
