"""Round orchestration: client updates, structure recovery, aggregation.

Each round every client receives the current global model, produces a
pruned locally trained model plus the mask that shaped it, and the server
recovers full-size models by filling pruned positions from the previous
global model before sample-weighted averaging.  Aggregation always walks
clients in ascending id order so results are bit-reproducible; client
updates only read a shared immutable copy of the global model and may
therefore run on a thread pool without changing any bit of the result.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn_core
from .datagen import DomainDataset
from .errors import ConfigError, InputError
from .fusion import FusionSchedule, alpha_at, model_fusion_pruning
from .masking import (
    ChannelMask,
    Footprint,
    apply_mask,
    build_mask,
    channel_l1_scores,
    count_footprint,
    random_mask,
    recover,
)
from .nn_core import Network
from .seeding import TAG_MASK, TAG_TRAIN, TAG_TUNE, derive_rng, derive_seed
from .training import HyperParams, run_epochs, train_local

# Capability level -> fraction of channels pruned per prunable layer.
LEVEL_RATIOS = {1: 0.0, 2: 0.2, 3: 0.4, 4: 0.6, 5: 0.8}

# Modeled device throughput used for the deterministic wall-time column:
# one million FLOPs per simulated millisecond.
_MODEL_FLOPS_PER_MS = 1.0e6


@dataclass
class ClientProfile:
    """One simulated device: its capability level, pruning ratio, and
    private train split."""

    id: int
    level: int
    rho: float
    data: DomainDataset
    seed: int

    @property
    def sample_count(self) -> int:
        return self.data.n


@dataclass(frozen=True)
class Plan:
    """What a framework does inside a client update."""

    finetune: bool
    fused: bool
    mask_source: str  # "scores" | "random"
    use_gamma: bool


PLANS = {
    "dapperfl": Plan(finetune=True, fused=True, mask_source="scores", use_gamma=True),
    "dapperfl_no_mfp": Plan(finetune=True, fused=False, mask_source="scores", use_gamma=True),
    "dapperfl_no_dar": Plan(finetune=True, fused=True, mask_source="scores", use_gamma=False),
    "dapperfl_no_mfp_dar": Plan(finetune=True, fused=False, mask_source="scores", use_gamma=False),
    "fedavg": Plan(finetune=True, fused=False, mask_source="scores", use_gamma=False),
    "feddrop": Plan(finetune=False, fused=False, mask_source="random", use_gamma=False),
}


@dataclass(frozen=True)
class RunSettings:
    """Everything a round needs beyond the models themselves."""

    framework: str
    hp: HyperParams
    schedule: FusionSchedule
    threads: int = 1

    def __post_init__(self):
        if self.framework not in PLANS:
            raise ConfigError(f"unknown framework {self.framework!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass
class RoundRecord:
    round_index: int
    alpha: float
    footprints: list[Footprint]
    domain_accuracy: list[float]
    global_accuracy: float
    wall_ms: float  # cumulative modeled device time, deterministic
    elapsed_s: float = field(default=0.0, compare=False)  # measured, informational


def assign_ratios(clients: list[ClientProfile], table=None) -> None:
    """Set every client's pruning ratio from its capability level."""
    table = LEVEL_RATIOS if table is None else table
    for client in clients:
        if client.level not in table:
            raise ConfigError(f"client {client.id}: unknown capability level {client.level}")
        client.rho = table[client.level]


def recover_all(
    uploads: list[tuple[Network, ChannelMask]], global_prev: Network
) -> list[Network]:
    """Recover every client's full-size model from its pruned upload."""
    return [recover(model, mask, global_prev) for model, mask in uploads]


def aggregate(models: list[Network], sample_counts: list[int]) -> Network:
    """Sample-weighted parameter average, accumulated in list order."""
    if not models:
        raise InputError("cannot aggregate zero models")
    if len(models) != len(sample_counts):
        raise InputError("one sample count per model required")
    if any(c <= 0 for c in sample_counts):
        raise InputError("sample counts must be positive")
    for m in models[1:]:
        if not models[0].same_structure(m):
            raise InputError("cannot aggregate models with different structures")
    total = float(sum(sample_counts))
    out = models[0].copy()
    for k in range(len(out.specs)):
        acc_w = (sample_counts[0] / total) * models[0].weights[k]
        acc_b = (sample_counts[0] / total) * models[0].biases[k]
        for m, c in zip(models[1:], sample_counts[1:]):
            acc_w = acc_w + (c / total) * m.weights[k]
            acc_b = acc_b + (c / total) * m.biases[k]
        out.weights[k] = acc_w
        out.biases[k] = acc_b
    return out


def _client_update(
    client: ClientProfile,
    global_prev: Network,
    round_index: int,
    settings: RunSettings,
) -> tuple[Network, ChannelMask]:
    plan = PLANS[settings.framework]
    hp = settings.hp
    feats, labels = client.data.features, client.data.labels
    tune_seed = derive_seed(TAG_TUNE, client.seed, round_index)
    train_seed = derive_seed(TAG_TRAIN, client.seed, round_index)

    if plan.fused:
        pruned, mask = model_fusion_pruning(
            global_prev, feats, labels, client.rho,
            settings.schedule, round_index, hp, tune_seed,
        )
        epochs = hp.local_epochs - 1
    elif plan.finetune:
        tuned = global_prev.copy()
        run_epochs(tuned, None, feats, labels, hp,
                   np.random.default_rng(tune_seed), epochs=1, gamma=0.0)
        mask = build_mask(tuned.specs, channel_l1_scores(tuned), client.rho)
        pruned = apply_mask(tuned, mask)
        epochs = hp.local_epochs - 1
    else:
        mask_rng = derive_rng(TAG_MASK, client.seed, round_index)
        mask = random_mask(global_prev.specs, client.rho, mask_rng)
        pruned = apply_mask(global_prev, mask)
        epochs = hp.local_epochs

    gamma_hp = hp if plan.use_gamma else replace(hp, gamma=0.0)
    trained = train_local(pruned, mask, feats, labels, gamma_hp, train_seed, epochs=epochs)
    return trained, mask


def _modeled_round_ms(
    clients: list[ClientProfile],
    masks: list[ChannelMask],
    global_prev: Network,
    settings: RunSettings,
) -> float:
    """Deterministic per-round device time: slowest client, with one
    forward+backward pass costed at three forward passes."""
    plan = PLANS[settings.framework]
    full = count_footprint(global_prev).flops
    worst = 0.0
    for client, mask in zip(clients, masks):
        masked = count_footprint(global_prev, mask).flops
        passes = 0.0
        if plan.finetune:
            passes += 3.0 * full * client.sample_count
            passes += 3.0 * masked * client.sample_count * (settings.hp.local_epochs - 1)
        else:
            passes += 3.0 * masked * client.sample_count * settings.hp.local_epochs
        worst = max(worst, passes / _MODEL_FLOPS_PER_MS)
    return worst


def run_round(
    global_prev: Network,
    clients: list[ClientProfile],
    round_index: int,
    settings: RunSettings,
    test_sets: list[DomainDataset],
    wall_ms_before: float = 0.0,
) -> tuple[Network, RoundRecord]:
    """Execute one communication round and evaluate the new global model.

    Clients are processed in ascending id order for aggregation no matter
    how the updates are scheduled.
    """
    if not clients:
        raise InputError("a round needs at least one client")
    if round_index < 1:
        raise InputError("round_index is 1-based")
    started = time.perf_counter()
    ordered = sorted(clients, key=lambda c: c.id)

    def update(client):
        return _client_update(client, global_prev, round_index, settings)

    if settings.threads > 1 and len(ordered) > 1:
        with ThreadPoolExecutor(max_workers=settings.threads) as pool:
            uploads = list(pool.map(update, ordered))
    else:
        uploads = [update(c) for c in ordered]

    recovered = recover_all(uploads, global_prev)
    new_global = aggregate(recovered, [c.sample_count for c in ordered])

    masks = [mask for _, mask in uploads]
    footprints = [count_footprint(global_prev, mask) for mask in masks]
    domain_acc = [
        nn_core.evaluate(new_global, ds.features, ds.labels) for ds in test_sets
    ]
    plan = PLANS[settings.framework]
    alpha = alpha_at(settings.schedule, round_index) if plan.fused else 0.0
    record = RoundRecord(
        round_index=round_index,
        alpha=alpha,
        footprints=footprints,
        domain_accuracy=domain_acc,
        global_accuracy=float(np.mean(domain_acc)),
        wall_ms=wall_ms_before
        + _modeled_round_ms(ordered, masks, global_prev, settings),
        elapsed_s=time.perf_counter() - started,
    )
    return new_global, record


def run_training(
    initial: Network,
    clients: list[ClientProfile],
    settings: RunSettings,
    rounds: int,
    test_sets: list[DomainDataset],
) -> tuple[Network, list[RoundRecord]]:
    """Run ``rounds`` communication rounds from an initial global model."""
    if rounds < 0:
        raise ConfigError("rounds must be >= 0")
    records: list[RoundRecord] = []
    global_model = initial.copy()
    wall_ms = 0.0
    for t in range(1, rounds + 1):
        global_model, record = run_round(
            global_model, clients, t, settings, test_sets, wall_ms_before=wall_ms
        )
        wall_ms = record.wall_ms
        records.append(record)
    return global_model, records
