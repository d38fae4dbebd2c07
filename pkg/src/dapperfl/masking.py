"""Channel masks over network parameters.

A mask keeps or drops whole output channels.  Dropping channel ``c`` of
layer ``k`` zeroes its outgoing weight row (or conv filter), its bias
entry, and the matching input columns (or input-channel slices) of layer
``k+1``.  The classifier head is never pruned on the output side, but its
input columns still follow the previous layer's drops.

Masks are materialized as parameter-shaped 0/1 float tensors so that
pruning, recovery and their complements are literal elementwise
arithmetic on the parameter arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .nn_core import LayerSpec, Network, Tensor, _weight_shape


@dataclass(frozen=True)
class Footprint:
    """Retained parameter count and forward FLOPs per sample.

    One multiply-accumulate counts as two FLOPs.  Activations and spatial
    averaging contribute no multiply-accumulates and are not counted.
    """

    param_count: int
    flops: int


def keep_vector(scores: Tensor, rho: float, prunable: bool = True) -> Tensor:
    """Boolean keep flags for one layer's output channels.

    Drops the round(rho * channels) lowest-scoring channels (round half
    up), but always keeps at least one.  Score ties keep the lower channel
    index.  Non-prunable layers keep everything.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise InputError("scores must be a non-empty vector")
    channels = scores.size
    keep = np.ones(channels, dtype=bool)
    if not prunable:
        return keep
    if not 0.0 <= rho < 1.0:
        raise ConfigError(f"pruning ratio must lie in [0, 1), got {rho}")
    n_drop = int(math.floor(rho * channels + 0.5))
    n_drop = min(n_drop, channels - 1)
    if n_drop <= 0:
        return keep
    # ascending score, ties ordered by descending index so lower indices
    # survive longer
    order = np.lexsort((-np.arange(channels), scores))
    keep[order[:n_drop]] = False
    return keep


class ChannelMask:
    """Keep flags per layer plus the derived parameter-level 0/1 tensors."""

    def __init__(self, specs: tuple[LayerSpec, ...], keep: list[Tensor]):
        if len(keep) != len(specs):
            raise InputError("one keep vector per layer required")
        self.specs = tuple(specs)
        self.keep = [np.asarray(k, dtype=bool).copy() for k in keep]
        for spec, k in zip(self.specs, self.keep):
            if k.shape != (spec.out_channels,):
                raise InputError("keep vector length does not match layer width")
        self._tensors = self._materialize()

    def _materialize(self) -> list[tuple[Tensor, Tensor]]:
        out = []
        for i, spec in enumerate(self.specs):
            wm = np.ones(_weight_shape(spec))
            bm = np.ones(spec.out_channels)
            dropped_out = ~self.keep[i]
            wm[dropped_out] = 0.0
            bm[dropped_out] = 0.0
            if i > 0:
                dropped_in = ~self.keep[i - 1]
                wm[:, dropped_in] = 0.0
            out.append((wm, bm))
        return out

    def tensors(self) -> list[tuple[Tensor, Tensor]]:
        return self._tensors

    def kept_counts(self) -> list[int]:
        return [int(k.sum()) for k in self.keep]


def channel_l1_scores(net: Network) -> list[Tensor]:
    """Per-layer l1 norms of the weights feeding each output channel.

    Biases are excluded on purpose: a dead channel with a large bias still
    scores zero.
    """
    scores = []
    for spec, w in zip(net.specs, net.weights):
        axes = tuple(range(1, w.ndim))
        scores.append(np.abs(w).sum(axis=axes))
    return scores


def build_mask(
    specs: tuple[LayerSpec, ...], scores: list[Tensor], rho: float
) -> ChannelMask:
    """Mask that drops the lowest-scoring channels of every prunable layer."""
    if len(scores) != len(specs):
        raise InputError("one score vector per layer required")
    keep = [
        keep_vector(s, rho, prunable=spec.prunable)
        for spec, s in zip(specs, scores)
    ]
    return ChannelMask(specs, keep)


def random_mask(
    specs: tuple[LayerSpec, ...], rho: float, rng: np.random.Generator
) -> ChannelMask:
    """Mask that drops a uniformly random channel subset per prunable layer."""
    keep = []
    for spec in specs:
        flags = np.ones(spec.out_channels, dtype=bool)
        if spec.prunable:
            if not 0.0 <= rho < 1.0:
                raise ConfigError(f"pruning ratio must lie in [0, 1), got {rho}")
            n_drop = int(math.floor(rho * spec.out_channels + 0.5))
            n_drop = min(n_drop, spec.out_channels - 1)
            if n_drop > 0:
                drop = rng.choice(spec.out_channels, size=n_drop, replace=False)
                flags[drop] = False
        keep.append(flags)
    return ChannelMask(specs, keep)


def _check_fit(net: Network, mask: ChannelMask) -> None:
    if net.specs != mask.specs:
        raise InputError("mask was built for a different network structure")


def apply_mask(net: Network, mask: ChannelMask) -> Network:
    """Elementwise product of the parameters with the mask tensors."""
    _check_fit(net, mask)
    out = net.copy()
    for k, (wm, bm) in enumerate(mask.tensors()):
        out.weights[k] *= wm
        out.biases[k] *= bm
    return out


def complement(tensors: list[tuple[Tensor, Tensor]]) -> list[tuple[Tensor, Tensor]]:
    """Flip a parameter-level 0/1 mask."""
    return [(1.0 - wm, 1.0 - bm) for wm, bm in tensors]


def recover(pruned: Network, mask: ChannelMask, global_model: Network) -> Network:
    """Fill masked-out positions of a pruned model from the global model.

    Kept positions come from ``pruned`` bit-for-bit; dropped positions
    come from ``global_model`` bit-for-bit.
    """
    _check_fit(pruned, mask)
    _check_fit(global_model, mask)
    out = pruned.copy()
    for k, (wm, bm) in enumerate(mask.tensors()):
        out.weights[k] = pruned.weights[k] * wm + global_model.weights[k] * (1.0 - wm)
        out.biases[k] = pruned.biases[k] * bm + global_model.biases[k] * (1.0 - bm)
    return out


def _spatial_chain(net: Network) -> list[int]:
    """Output positions (h*w) per layer: spatial map size for conv layers,
    1 for dense layers."""
    positions = []
    hw = net.input_hw
    for spec in net.specs:
        if spec.kind == "conv2d":
            if hw is None:
                raise ConfigError("conv networks need input_hw for FLOPs accounting")
            h, w = hw
            h, w = h - spec.kernel + 1, w - spec.kernel + 1
            if h < 1 or w < 1:
                raise ConfigError("kernel larger than the feature map")
            hw = (h, w)
            positions.append(h * w)
        else:
            positions.append(1)
    return positions


def count_footprint(net: Network, mask: ChannelMask | None = None) -> Footprint:
    """Parameters and forward FLOPs that survive the mask.

    Without a mask this is the full network cost.  With a mask, a dropped
    channel's row, bias and successor input columns all count as removed.
    """
    positions = _spatial_chain(net)
    params = 0
    flops = 0
    tensors = mask.tensors() if mask is not None else None
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        if tensors is None:
            kept_w = w.size
            kept_b = b.size
        else:
            wm, bm = tensors[k]
            kept_w = int(wm.sum())
            kept_b = int(bm.sum())
        params += kept_w + kept_b
        flops += 2 * kept_w * positions[k]
    return Footprint(param_count=params, flops=flops)
