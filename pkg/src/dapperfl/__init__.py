"""Desk-scale federated learning simulator.

Clients with heterogeneous capability prune a shared model to different
widths, train on domain-shifted private data with a representation-norm
regularizer, and the server recovers and averages the heterogeneous
uploads into one global model.
"""

from .errors import ConfigError, FormatError, InputError, NumericError
from .nn_core import (
    LayerSpec,
    Network,
    Objective,
    OptimizerState,
    backward,
    evaluate,
    forward,
    init_network,
    init_optimizer,
    sgd_step,
)
from .masking import (
    ChannelMask,
    Footprint,
    apply_mask,
    build_mask,
    channel_l1_scores,
    complement,
    count_footprint,
    keep_vector,
    random_mask,
    recover,
)
from .fusion import FusionSchedule, alpha_at, fuse, model_fusion_pruning
from .training import (
    HyperParams,
    LossBreakdown,
    cross_entropy,
    dar_regularizer,
    local_objective,
    mean_sq_representation,
    train_local,
)
from .datagen import (
    DomainDataset,
    DomainShift,
    ShiftSpec,
    load_idx,
    partition_clients,
    synth_domains,
)
from .server import (
    LEVEL_RATIOS,
    ClientProfile,
    RoundRecord,
    RunSettings,
    aggregate,
    assign_ratios,
    recover_all,
    run_round,
    run_training,
)
from .experiments import (
    ExperimentConfig,
    ExperimentResult,
    MetricsRow,
    load_config,
    parse_config,
    run_experiment,
    sweep,
)

__version__ = "0.1.0"
