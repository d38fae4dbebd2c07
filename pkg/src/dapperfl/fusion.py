"""Model fusion pruning.

Before a client prunes, it blends the incoming global model with a
one-epoch fine-tuned copy of it.  Early rounds lean on the global model
(the blend factor starts high and decays geometrically to a floor), so
channel importance is judged mostly on shared knowledge; later rounds
trust the adapted local weights.  Channel l1 scores of the blended model
then decide which channels the client keeps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .masking import ChannelMask, apply_mask, build_mask, channel_l1_scores
from .nn_core import Network
from .training import HyperParams, run_epochs


@dataclass(frozen=True)
class FusionSchedule:
    """Geometric decay of the global-model blend factor.

    Round t uses max(alpha0 * (1 - epsilon)^(t-1), alpha_min).
    """

    alpha0: float = 0.9
    alpha_min: float = 0.1
    epsilon: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.alpha0 <= 1.0:
            raise ConfigError("alpha0 must lie in [0, 1]")
        if not 0.0 <= self.alpha_min <= self.alpha0:
            raise ConfigError("alpha_min must lie in [0, alpha0]")
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError("epsilon must lie in [0, 1)")


def alpha_at(schedule: FusionSchedule, round_index: int) -> float:
    """Blend factor for a 1-based communication round."""
    if round_index < 1:
        raise InputError("round_index is 1-based")
    decayed = schedule.alpha0 * (1.0 - schedule.epsilon) ** (round_index - 1)
    return max(decayed, schedule.alpha_min)


def fuse(global_model: Network, local_model: Network, alpha: float) -> Network:
    """Convex parameter blend: alpha * global + (1 - alpha) * local."""
    if not global_model.same_structure(local_model):
        raise InputError("cannot fuse models with different structures")
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must lie in [0, 1], got {alpha}")
    out = global_model.copy()
    for k in range(len(out.specs)):
        out.weights[k] = alpha * global_model.weights[k] + (1.0 - alpha) * local_model.weights[k]
        out.biases[k] = alpha * global_model.biases[k] + (1.0 - alpha) * local_model.biases[k]
    return out


def model_fusion_pruning(
    global_model: Network,
    features,
    labels,
    rho: float,
    schedule: FusionSchedule,
    round_index: int,
    hp: HyperParams,
    seed: int,
) -> tuple[Network, ChannelMask]:
    """One client's fusion-then-prune step.

    Fine-tunes a copy of the global model for a single cross-entropy
    epoch, blends it back into the global model with the scheduled
    factor, scores channels on the blend, and prunes the lowest ``rho``
    fraction per prunable layer.  The global model is left untouched.

    Returns:
        (pruned model, the channel mask that produced it)
    """
    if not 0.0 <= rho < 1.0:
        raise ConfigError(f"pruning ratio must lie in [0, 1), got {rho}")
    if np.asarray(features).shape[0] == 0:
        raise InputError("cannot run fusion pruning on an empty dataset")
    tuned = global_model.copy()
    rng = np.random.default_rng(seed)
    run_epochs(tuned, None, features, labels, hp, rng, epochs=1, gamma=0.0)
    alpha = alpha_at(schedule, round_index)
    fused = fuse(global_model, tuned, alpha)
    mask = build_mask(fused.specs, channel_l1_scores(fused), rho)
    return apply_mask(fused, mask), mask
