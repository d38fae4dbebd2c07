"""Experiment configuration, batch runner, CSV emission and the CLI.

Configs are strict JSON: unknown keys are rejected by their full path and
missing keys fall back to the documented defaults.  A run is fully
determined by (config, seed); given those, the emitted CSV is
byte-identical across invocations.  The wall_ms column is modeled device
time (see server module), not host time, precisely so that holds.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import DomainDataset, ShiftSpec, load_idx, partition_clients, synth_domains
from .errors import ConfigError, FormatError, InputError, NumericError
from .fusion import FusionSchedule
from .nn_core import LayerSpec, Network, init_network
from .seeding import TAG_CLIENT, TAG_DATA, TAG_INIT, TAG_PARTITION, derive_rng, derive_seed
from .server import (
    LEVEL_RATIOS,
    ClientProfile,
    PLANS,
    RoundRecord,
    RunSettings,
    assign_ratios,
    run_training,
)
from .training import HyperParams

THREADS_ENV = "DAPPERFL_THREADS"
SWEEPABLE = ("alpha0", "alpha_min", "epsilon", "gamma", "rho")


@dataclass(frozen=True)
class SyntheticDataConfig:
    domains: int = 4
    classes: int = 4
    dims: int = 16
    samples_per_domain: int = 600
    proportion: float = 0.2
    shift_strength: float = 1.0


@dataclass(frozen=True)
class IdxDataConfig:
    pairs: tuple[tuple[str, str], ...] = ()
    classes: int = 10
    proportion: float = 0.2


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "dense"
    hidden: tuple[int, ...] = (64,)
    channels: tuple[int, ...] = (8,)
    kernel: int = 3


@dataclass(frozen=True)
class ExperimentConfig:
    framework: str = "dapperfl"
    rounds: int = 100
    clients: int = 10
    local_epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    alpha0: float = 0.9
    alpha_min: float = 0.1
    epsilon: float = 0.2
    gamma: float = 0.01
    level_ratios: tuple[tuple[int, float], ...] = tuple(sorted(LEVEL_RATIOS.items()))
    levels: tuple[int, ...] | None = None
    uniform_rho: float | None = None
    seeds: tuple[int, ...] = (1, 2, 3)
    output: str = "metrics.csv"
    threads: int | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SyntheticDataConfig | IdxDataConfig = field(default_factory=SyntheticDataConfig)

    def ratio_table(self) -> dict[int, float]:
        return dict(self.level_ratios)


def _reject_unknown(obj: dict, allowed: tuple[str, ...], path: str) -> None:
    for key in obj:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown key: {where}")


def _take(obj: dict, key: str, kinds, default, path: str, check=None):
    if key not in obj:
        return default
    value = obj[key]
    where = f"{path}.{key}" if path else key
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise ConfigError(f"{where}: expected {kinds}, got {type(value).__name__}")
    if check is not None and not check(value):
        raise ConfigError(f"{where}: value {value!r} out of range")
    return value


def _parse_data(obj: dict, path: str):
    kind = _take(obj, "kind", str, "synthetic", path)
    if kind == "synthetic":
        _reject_unknown(obj, ("kind", "domains", "classes", "dims",
                              "samples_per_domain", "proportion", "shift_strength"), path)
        return SyntheticDataConfig(
            domains=_take(obj, "domains", int, 4, path, lambda v: v >= 1),
            classes=_take(obj, "classes", int, 4, path, lambda v: v >= 2),
            dims=_take(obj, "dims", int, 16, path, lambda v: v >= 1),
            samples_per_domain=_take(obj, "samples_per_domain", int, 600, path, lambda v: v >= 10),
            proportion=_take(obj, "proportion", (int, float), 0.2, path, lambda v: 0 < v <= 1),
            shift_strength=_take(obj, "shift_strength", (int, float), 1.0, path, lambda v: v >= 0),
        )
    if kind == "idx":
        _reject_unknown(obj, ("kind", "domains", "classes", "proportion"), path)
        raw_pairs = obj.get("domains")
        if not isinstance(raw_pairs, list) or not raw_pairs:
            raise ConfigError(f"{path}.domains: expected a non-empty list of file pairs")
        pairs = []
        for i, entry in enumerate(raw_pairs):
            sub = f"{path}.domains[{i}]"
            if not isinstance(entry, dict):
                raise ConfigError(f"{sub}: expected an object")
            _reject_unknown(entry, ("images", "labels"), sub)
            if "images" not in entry or "labels" not in entry:
                raise ConfigError(f"{sub}: needs both 'images' and 'labels'")
            pairs.append((str(entry["images"]), str(entry["labels"])))
        return IdxDataConfig(
            pairs=tuple(pairs),
            classes=_take(obj, "classes", int, 10, path, lambda v: v >= 2),
            proportion=_take(obj, "proportion", (int, float), 0.2, path, lambda v: 0 < v <= 1),
        )
    raise ConfigError(f"{path}.kind: unknown data kind {kind!r}")


def _parse_model(obj: dict, path: str) -> ModelConfig:
    _reject_unknown(obj, ("kind", "hidden", "channels", "kernel"), path)
    kind = _take(obj, "kind", str, "dense", path, lambda v: v in ("dense", "conv"))
    hidden = obj.get("hidden", [64])
    channels = obj.get("channels", [8])
    for name, seq in (("hidden", hidden), ("channels", channels)):
        if not isinstance(seq, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in seq
        ):
            raise ConfigError(f"{path}.{name}: expected a list of positive integers")
    if kind == "dense" and not hidden:
        raise ConfigError(f"{path}.hidden: dense models need at least one hidden layer")
    if kind == "conv" and not channels:
        raise ConfigError(f"{path}.channels: conv models need at least one conv layer")
    return ModelConfig(
        kind=kind,
        hidden=tuple(hidden),
        channels=tuple(channels),
        kernel=_take(obj, "kernel", int, 3, path, lambda v: v >= 1),
    )


_TOP_KEYS = (
    "framework", "rounds", "clients", "local_epochs", "batch_size",
    "learning_rate", "momentum", "weight_decay", "alpha0", "alpha_min",
    "epsilon", "gamma", "level_ratios", "levels", "uniform_rho", "seeds",
    "output", "threads", "model", "data",
)


def parse_config(obj: dict) -> ExperimentConfig:
    """Validate a decoded JSON object into an ExperimentConfig.

    Unknown keys raise ConfigError naming the offending path; anything
    missing takes its default.
    """
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(obj, _TOP_KEYS, "")
    framework = _take(obj, "framework", str, "dapperfl", "", lambda v: v in PLANS)

    ratios = dict(sorted(LEVEL_RATIOS.items()))
    if "level_ratios" in obj:
        raw = obj["level_ratios"]
        if not isinstance(raw, dict) or not raw:
            raise ConfigError("level_ratios: expected a non-empty object")
        ratios = {}
        for key, value in raw.items():
            try:
                level = int(key)
            except ValueError:
                raise ConfigError(f"level_ratios.{key}: level must be an integer")
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"level_ratios.{key}: ratio must be a number")
            if not 0.0 <= float(value) < 1.0:
                raise ConfigError(f"level_ratios.{key}: ratio must lie in [0, 1)")
            ratios[level] = float(value)

    levels = None
    if obj.get("levels") is not None:
        raw = obj["levels"]
        if not isinstance(raw, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in raw
        ):
            raise ConfigError("levels: expected a list of integers")
        levels = tuple(raw)

    seeds = _take(obj, "seeds", list, [1, 2, 3], "")
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds: expected a non-empty list of integers")

    uniform_rho = None
    if obj.get("uniform_rho") is not None:
        value = obj["uniform_rho"]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("uniform_rho: expected a number")
        if not 0.0 <= float(value) < 1.0:
            raise ConfigError("uniform_rho: must lie in [0, 1)")
        uniform_rho = float(value)

    cfg = ExperimentConfig(
        framework=framework,
        rounds=_take(obj, "rounds", int, 100, "", lambda v: v >= 0),
        clients=_take(obj, "clients", int, 10, "", lambda v: v >= 1),
        local_epochs=_take(obj, "local_epochs", int, 5, "", lambda v: v >= 1),
        batch_size=_take(obj, "batch_size", int, 64, "", lambda v: v >= 1),
        learning_rate=float(_take(obj, "learning_rate", (int, float), 0.01, "", lambda v: v >= 0)),
        momentum=float(_take(obj, "momentum", (int, float), 0.9, "", lambda v: 0 <= v < 1)),
        weight_decay=float(_take(obj, "weight_decay", (int, float), 1e-5, "", lambda v: v >= 0)),
        alpha0=float(_take(obj, "alpha0", (int, float), 0.9, "", lambda v: 0 <= v <= 1)),
        alpha_min=float(_take(obj, "alpha_min", (int, float), 0.1, "", lambda v: 0 <= v <= 1)),
        epsilon=float(_take(obj, "epsilon", (int, float), 0.2, "", lambda v: 0 <= v < 1)),
        gamma=float(_take(obj, "gamma", (int, float), 0.01, "", lambda v: v >= 0)),
        level_ratios=tuple(sorted(ratios.items())),
        levels=levels,
        uniform_rho=uniform_rho,
        seeds=tuple(seeds),
        output=str(_take(obj, "output", str, "metrics.csv", "")),
        threads=_take(obj, "threads", int, None, "", lambda v: v >= 1),
        model=_parse_model(obj.get("model", {}), "model"),
        data=_parse_data(obj.get("data", {}), "data"),
    )
    if cfg.alpha_min > cfg.alpha0:
        raise ConfigError("alpha_min: must not exceed alpha0")
    if cfg.levels is not None:
        if len(cfg.levels) != cfg.clients:
            raise ConfigError("levels: need exactly one level per client")
        table = cfg.ratio_table()
        for i, level in enumerate(cfg.levels):
            if level not in table:
                raise ConfigError(f"levels[{i}]: level {level} not in level_ratios")
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(obj)


@dataclass(frozen=True)
class MetricsRow:
    """One CSV row: results of one round of one (framework, seed) run."""

    framework: str
    seed: int
    round_index: int
    alpha: float
    domain_accuracy: tuple[float, ...]
    global_accuracy: float
    params: tuple[int, ...]
    flops: tuple[int, ...]
    wall_ms: float


@dataclass
class SeedOutcome:
    seed: int
    final_model: Network
    records: list[RoundRecord]
    test_sets: list[DomainDataset]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[MetricsRow]
    csv_path: str
    outcomes: dict[int, SeedOutcome]


def _split_idx_pool(pool: DomainDataset, domain_id: int, seed: int):
    rng = derive_rng(TAG_DATA, seed, domain_id)
    order = rng.permutation(pool.n)
    n_test = pool.n // 5
    test = pool.subset(order[:n_test])
    train = pool.subset(order[n_test:])
    test.split = "test"
    test.domain_id = domain_id
    train.domain_id = domain_id
    return train, test


def _build_datasets(cfg: ExperimentConfig, seed: int):
    data_seed = derive_seed(TAG_DATA, seed)
    if isinstance(cfg.data, SyntheticDataConfig):
        d = cfg.data
        if d.shift_strength == 0.0:
            shift = ShiftSpec.identity(d.domains, d.dims, d.classes)
        else:
            shift = ShiftSpec.default(d.domains, d.dims, d.classes, d.shift_strength, data_seed)
        pairs = synth_domains(d.domains, d.classes, d.dims, d.samples_per_domain, shift, data_seed)
        return pairs, d.classes, d.proportion, None
    pools = [load_idx(img, lab, cfg.data.classes) for img, lab in cfg.data.pairs]
    pairs = [
        _split_idx_pool(pool, i, data_seed) for i, pool in enumerate(pools)
    ]
    hw = pairs[0][0].features.shape[2:]
    return pairs, cfg.data.classes, cfg.data.proportion, (int(hw[0]), int(hw[1]))


def _build_specs(cfg: ExperimentConfig, classes: int, input_hw) -> list[LayerSpec]:
    m = cfg.model
    specs: list[LayerSpec] = []
    if m.kind == "dense":
        if not isinstance(cfg.data, SyntheticDataConfig):
            raise ConfigError("model.kind: dense models require synthetic data")
        width_in = cfg.data.dims
        for width in m.hidden:
            specs.append(LayerSpec("dense", width_in, width, activation="relu", prunable=True))
            width_in = width
        specs.append(LayerSpec("dense", width_in, classes, activation="none", prunable=False))
    else:
        if input_hw is None:
            raise ConfigError("model.kind: conv models require idx data")
        chan_in = 1
        for chan in m.channels:
            specs.append(
                LayerSpec("conv2d", chan_in, chan, activation="relu",
                          prunable=True, kernel=m.kernel)
            )
            chan_in = chan
        specs.append(LayerSpec("dense", chan_in, classes, activation="none", prunable=False))
    return specs


def _client_levels(cfg: ExperimentConfig) -> tuple[int, ...]:
    if cfg.levels is not None:
        return cfg.levels
    table_levels = sorted(cfg.ratio_table())
    return tuple(table_levels[i % len(table_levels)] for i in range(cfg.clients))


def build_world(cfg: ExperimentConfig, seed: int):
    """Materialize data, clients and the initial model for one run seed.

    Returns:
        (initial model, client profiles, per-domain test sets, settings)
    """
    pairs, classes, proportion, input_hw = _build_datasets(cfg, seed)
    train_pools = [train for train, _ in pairs]
    test_sets = [test for _, test in pairs]
    client_data = partition_clients(
        train_pools, cfg.clients, proportion, derive_seed(TAG_PARTITION, seed)
    )
    levels = _client_levels(cfg)
    clients = [
        ClientProfile(
            id=i, level=levels[i], rho=0.0, data=client_data[i],
            seed=derive_seed(TAG_CLIENT, seed, i),
        )
        for i in range(cfg.clients)
    ]
    table = cfg.ratio_table()
    assign_ratios(clients, table)
    if cfg.framework == "fedavg":
        for c in clients:
            c.rho = 0.0
    elif cfg.uniform_rho is not None:
        for c in clients:
            c.rho = cfg.uniform_rho
    elif cfg.framework == "feddrop":
        worst = max(table[c.level] for c in clients)
        for c in clients:
            c.rho = worst

    initial = init_network(
        _build_specs(cfg, classes, input_hw), derive_seed(TAG_INIT, seed), input_hw
    )
    settings = RunSettings(
        framework=cfg.framework,
        hp=HyperParams(
            learning_rate=cfg.learning_rate,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            batch_size=cfg.batch_size,
            local_epochs=cfg.local_epochs,
            gamma=cfg.gamma,
        ),
        schedule=FusionSchedule(cfg.alpha0, cfg.alpha_min, cfg.epsilon),
        threads=resolve_threads(cfg),
    )
    return initial, clients, test_sets, settings


def resolve_threads(cfg: ExperimentConfig) -> int:
    """Worker cap: config value, else the DAPPERFL_THREADS env var, else
    the machine's core count."""
    if cfg.threads is not None:
        return cfg.threads
    raw = os.environ.get(THREADS_ENV)
    if raw is not None:
        try:
            threads = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}")
        if threads < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1, got {threads}")
        return threads
    return os.cpu_count() or 1


def _rows_for_seed(cfg: ExperimentConfig, seed: int, records: list[RoundRecord]):
    rows = []
    for rec in records:
        rows.append(
            MetricsRow(
                framework=cfg.framework,
                seed=seed,
                round_index=rec.round_index,
                alpha=rec.alpha,
                domain_accuracy=tuple(rec.domain_accuracy),
                global_accuracy=rec.global_accuracy,
                params=tuple(fp.param_count for fp in rec.footprints),
                flops=tuple(fp.flops for fp in rec.footprints),
                wall_ms=rec.wall_ms,
            )
        )
    return rows


def csv_header(num_domains: int, num_clients: int) -> str:
    cols = ["framework", "seed", "round", "alpha"]
    cols += [f"acc_domain_{d}" for d in range(num_domains)]
    cols += ["acc_global"]
    cols += [f"params_client_{c}" for c in range(num_clients)]
    cols += [f"flops_client_{c}" for c in range(num_clients)]
    cols += ["wall_ms"]
    return ",".join(cols)


def write_csv(path: str, rows: list[MetricsRow], num_domains: int, num_clients: int) -> None:
    """Write rows sorted by (framework, seed, round).  Floats are emitted
    with repr so a reread round-trips exactly."""
    ordered = sorted(rows, key=lambda r: (r.framework, r.seed, r.round_index))
    lines = [csv_header(num_domains, num_clients)]
    for row in ordered:
        cells = [row.framework, str(row.seed), str(row.round_index), repr(row.alpha)]
        cells += [repr(a) for a in row.domain_accuracy]
        cells.append(repr(row.global_accuracy))
        cells += [str(p) for p in row.params]
        cells += [str(f) for f in row.flops]
        cells.append(repr(row.wall_ms))
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def run_experiment(cfg: ExperimentConfig, csv_path: str | None = None) -> ExperimentResult:
    """Run every seed in the config and write one CSV.

    Seeds are independent; rows are merged single-threaded in
    (framework, seed, round) order at the end.
    """
    csv_path = cfg.output if csv_path is None else csv_path
    rows: list[MetricsRow] = []
    outcomes: dict[int, SeedOutcome] = {}
    num_domains = None
    for seed in cfg.seeds:
        initial, clients, test_sets, settings = build_world(cfg, seed)
        num_domains = len(test_sets)
        final, records = run_training(initial, clients, settings, cfg.rounds, test_sets)
        rows.extend(_rows_for_seed(cfg, seed, records))
        outcomes[seed] = SeedOutcome(
            seed=seed, final_model=final, records=records, test_sets=test_sets
        )
    write_csv(csv_path, rows, num_domains or 0, cfg.clients)
    return ExperimentResult(config=cfg, rows=rows, csv_path=csv_path, outcomes=outcomes)


def _sweep_path(output: str, param: str, value: float) -> str:
    stem, ext = os.path.splitext(output)
    return f"{stem}__{param}={value:g}{ext or '.csv'}"


def sweep(cfg: ExperimentConfig, param: str, values: list[float]):
    """Run the experiment once per parameter value.

    ``rho`` sweeps the uniform pruning-ratio override; the other
    parameters are plain config fields.  Each value writes its own CSV
    next to cfg.output.

    Returns:
        List of (value, ExperimentResult).
    """
    if param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {param!r}; choose one of {SWEEPABLE}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    results = []
    for value in values:
        if param == "rho":
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"rho value {value} out of [0, 1)")
            swept = replace(cfg, uniform_rho=float(value))
        else:
            swept = replace(cfg, **{param: float(value)})
            if param in ("alpha0", "alpha_min", "epsilon"):
                FusionSchedule(swept.alpha0, swept.alpha_min, swept.epsilon)
            if param == "gamma" and value < 0:
                raise ConfigError("gamma must be >= 0")
        path = _sweep_path(cfg.output, param, value)
        results.append((value, run_experiment(swept, csv_path=path)))
    return results


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.rounds is not None:
        if args.rounds < 0:
            raise ConfigError("--rounds must be >= 0")
        cfg = replace(cfg, rounds=args.rounds)
    if args.framework is not None:
        if args.framework not in PLANS:
            raise ConfigError(f"unknown framework {args.framework!r}")
        cfg = replace(cfg, framework=args.framework)
    if args.output is not None:
        cfg = replace(cfg, output=args.output)
    result = run_experiment(cfg)
    print(result.csv_path)
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated numbers, got {args.values!r}")
    for _, result in sweep(cfg, args.param, values):
        print(result.csv_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dapperfl",
        description="Desk-scale federated learning simulator with fusion-guided pruning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment from a JSON config")
    run_p.add_argument("--config", required=True, help="path to the JSON config")
    run_p.add_argument("--seed", type=int, default=None, help="run only this seed")
    run_p.add_argument("--rounds", type=int, default=None, help="override round count")
    run_p.add_argument("--framework", default=None, help="override the framework")
    run_p.add_argument("--output", default=None, help="override the CSV path")
    run_p.set_defaults(func=_cmd_run)

    sweep_p = sub.add_parser("sweep", help="repeat the experiment over parameter values")
    sweep_p.add_argument("--config", required=True, help="path to the JSON config")
    sweep_p.add_argument("--param", required=True, choices=SWEEPABLE)
    sweep_p.add_argument("--values", required=True, help="comma-separated values")
    sweep_p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputError, FormatError, NumericError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
