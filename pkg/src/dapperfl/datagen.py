"""Synthetic multi-domain data, client partitioning, and IDX ingestion.

Domains share one set of Gaussian class clusters but each views them
through its own affine lens (per-pair rotation, per-dim scaling,
translation, a label-conditional mean shift, and extra noise), giving
both covariate shift and conditional shift across domains.  Clients are
domain-exclusive: every client draws from exactly one domain and every
domain feeds at least one client.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .seeding import TAG_SHIFT, derive_rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# Cluster geometry of the synthetic task.  Chosen so that, with the
# default model, representation norms stay small enough for the domain
# regularizer to act as a gentle pull rather than the dominant loss term.
MEAN_SCALE = 0.5
SAMPLE_NOISE = 0.4

# Per-unit-strength magnitudes of the random domain lenses.
LENS_LOG_SCALE = 0.3
LENS_OFFSET = 0.25
LENS_CLASS_SHIFT = 0.2
LENS_NOISE = 0.15


@dataclass
class DomainDataset:
    """Feature/label arrays for one split of one domain.

    ``indices`` are positions in the domain's generation order, kept so
    tests can audit that client subsets and test splits never overlap.
    """

    domain_id: int
    features: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int
    indices: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.split not in ("train", "test"):
            raise InputError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise InputError("features and labels disagree on sample count")
        if self.indices.shape[0] != self.labels.shape[0]:
            raise InputError("indices and labels disagree on sample count")
        if not np.isfinite(self.features).all():
            raise InputError("features contain non-finite values")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise InputError(f"labels out of range [0, {self.num_classes})")

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, rows: np.ndarray) -> "DomainDataset":
        return DomainDataset(
            domain_id=self.domain_id,
            features=self.features[rows],
            labels=self.labels[rows],
            split=self.split,
            num_classes=self.num_classes,
            indices=self.indices[rows],
        )


@dataclass(frozen=True)
class DomainShift:
    """Affine lens of one domain: x -> R(rotation) @ (scale * x) + offset
    + class_shift[y] + noise * eps."""

    rotation: float
    scale: np.ndarray
    offset: np.ndarray
    class_shift: np.ndarray
    noise: float

    def __post_init__(self):
        if np.any(np.asarray(self.scale) == 0.0):
            raise ConfigError("scale entries must be non-zero")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")


@dataclass(frozen=True)
class ShiftSpec:
    """One DomainShift per domain."""

    domains: tuple[DomainShift, ...]

    def __post_init__(self):
        if not self.domains:
            raise ConfigError("at least one domain shift required")

    @classmethod
    def identity(cls, num_domains: int, dims: int, classes: int) -> "ShiftSpec":
        shift = DomainShift(
            rotation=0.0,
            scale=np.ones(dims),
            offset=np.zeros(dims),
            class_shift=np.zeros((classes, dims)),
            noise=0.0,
        )
        return cls(domains=(shift,) * num_domains)

    @classmethod
    def default(
        cls,
        num_domains: int,
        dims: int,
        classes: int,
        strength: float,
        seed: int,
    ) -> "ShiftSpec":
        """Distinct random lenses per domain, scaled by ``strength``."""
        if strength < 0:
            raise ConfigError("shift strength must be >= 0")
        rng = derive_rng(TAG_SHIFT, seed)
        shifts = []
        for _ in range(num_domains):
            shifts.append(
                DomainShift(
                    rotation=float(rng.uniform(-np.pi, np.pi)) * strength,
                    scale=np.exp(rng.uniform(-LENS_LOG_SCALE, LENS_LOG_SCALE, size=dims) * strength),
                    offset=rng.normal(0.0, LENS_OFFSET * strength, size=dims),
                    class_shift=rng.normal(0.0, LENS_CLASS_SHIFT * strength, size=(classes, dims)),
                    noise=float(rng.uniform(0.0, LENS_NOISE)) * strength,
                )
            )
        return cls(domains=tuple(shifts))


def _rotate_pairs(x: np.ndarray, angle: float) -> np.ndarray:
    """Rotate each consecutive dimension pair (0,1), (2,3), ... by
    ``angle``; a trailing odd dimension is left alone."""
    if angle == 0.0:
        return x
    out = x.copy()
    c, s = np.cos(angle), np.sin(angle)
    for j in range(0, x.shape[1] - 1, 2):
        a, b = x[:, j], x[:, j + 1]
        out[:, j] = c * a - s * b
        out[:, j + 1] = s * a + c * b
    return out


def synth_domains(
    num_domains: int,
    classes: int,
    dims: int,
    samples_per_domain: int,
    shift: ShiftSpec,
    seed: int,
) -> list[tuple[DomainDataset, DomainDataset]]:
    """Generate per-domain (train, test) splits.

    All domains share the class cluster means; each domain draws fresh
    samples and pushes them through its own lens.  Every domain is split
    80/20 into train/test, and class counts are balanced enough that each
    class is guaranteed to appear in the train pool.

    Returns:
        One (train, test) pair per domain, in domain-id order.
    """
    if num_domains < 1 or classes < 2 or dims < 1:
        raise ConfigError("need >= 1 domain, >= 2 classes and >= 1 dim")
    if samples_per_domain < 5 * classes:
        raise ConfigError("samples_per_domain too small for an 80/20 split per class")
    if len(shift.domains) != num_domains:
        raise ConfigError(
            f"shift spec covers {len(shift.domains)} domains, expected {num_domains}"
        )
    for dom_shift in shift.domains:
        if dom_shift.scale.shape != (dims,) or dom_shift.offset.shape != (dims,):
            raise ConfigError("shift vectors must have one entry per feature dim")
        if dom_shift.class_shift.shape != (classes, dims):
            raise ConfigError("class_shift must have shape (classes, dims)")

    rng = np.random.default_rng(np.random.SeedSequence([6007, int(seed)]))
    means = rng.normal(0.0, MEAN_SCALE, size=(classes, dims))
    out = []
    for d in range(num_domains):
        per_class = samples_per_domain // classes
        counts = np.full(classes, per_class)
        counts[: samples_per_domain - per_class * classes] += 1
        labels = np.repeat(np.arange(classes), counts)
        base = means[labels] + rng.normal(0.0, SAMPLE_NOISE, size=(samples_per_domain, dims))
        lens = shift.domains[d]
        x = _rotate_pairs(base * lens.scale, lens.rotation)
        x = x + lens.offset + lens.class_shift[labels]
        if lens.noise > 0.0:
            x = x + rng.normal(0.0, lens.noise, size=x.shape)
        order = rng.permutation(samples_per_domain)
        n_test = samples_per_domain // 5
        test_rows, train_rows = order[:n_test], order[n_test:]
        make = lambda rows, split: DomainDataset(
            domain_id=d,
            features=x[rows],
            labels=labels[rows],
            split=split,
            num_classes=classes,
            indices=rows,
        )
        train, test = make(train_rows, "train"), make(test_rows, "test")
        if np.unique(train.labels).size != classes:
            raise ConfigError(
                f"domain {d}: some class is missing from the train pool"
            )
        out.append((train, test))
    return out


def partition_clients(
    train_pools: list[DomainDataset],
    num_clients: int,
    proportion: float,
    seed: int,
) -> list[DomainDataset]:
    """Assign clients to domains and hand each a private train subset.

    Domain assignment is uniform over assignments in which every domain
    has at least one client and every domain's pool is large enough for
    its clients' disjoint subsets; infeasible configurations raise.  Each
    client receives round(proportion * pool) samples, disjoint from every
    other client in the same domain.

    Returns:
        One train DomainDataset per client, in client-id order.
    """
    num_domains = len(train_pools)
    if num_domains < 1:
        raise ConfigError("need at least one domain")
    if num_clients < num_domains:
        raise ConfigError(
            f"{num_clients} clients cannot cover {num_domains} domains"
        )
    if not 0.0 < proportion <= 1.0:
        raise ConfigError("proportion must lie in (0, 1]")
    per_domain_take = []
    for pool in train_pools:
        take = int(round(proportion * pool.n))
        if take < 1:
            raise ConfigError(
                f"domain {pool.domain_id}: proportion {proportion} selects no samples"
            )
        per_domain_take.append(take)
    max_per_domain = [pool.n // take for pool, take in zip(train_pools, per_domain_take)]
    if sum(max_per_domain) < num_clients or min(max_per_domain) < 1:
        raise ConfigError(
            "client subsets exceed the domain pools for every possible assignment"
        )

    rng = np.random.default_rng(np.random.SeedSequence([4241, int(seed)]))
    for _ in range(100000):
        assignment = rng.integers(0, num_domains, size=num_clients)
        counts = np.bincount(assignment, minlength=num_domains)
        if counts.min() >= 1 and np.all(counts <= max_per_domain):
            break
    else:
        raise ConfigError("no feasible client-to-domain assignment found")

    out: list[DomainDataset | None] = [None] * num_clients
    for d, pool in enumerate(train_pools):
        members = np.flatnonzero(assignment == d)
        perm = rng.permutation(pool.n)
        take = per_domain_take[d]
        for slot, client in enumerate(members):
            rows = perm[slot * take : (slot + 1) * take]
            out[client] = pool.subset(rows)
    return out  # type: ignore[return-value]


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"truncated file while reading {what}")
    return data


def load_idx(images_path: str, labels_path: str, num_classes: int = 10) -> DomainDataset:
    """Parse an IDX image/label file pair into a train DomainDataset.

    Pixels are scaled to [0, 1] and shaped (n, 1, rows, cols).  Raises
    FormatError on magic-number mismatches, truncation, or an image/label
    count disagreement.
    """
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">4i", _read_exact(fh, 16, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        if count < 0 or rows < 1 or cols < 1:
            raise FormatError("image header dimensions out of range")
        raw = _read_exact(fh, count * rows * cols, "image pixels")
        if fh.read(1):
            raise FormatError("trailing bytes after image pixels")
    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">2i", _read_exact(fh, 8, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        if label_count < 0:
            raise FormatError("label header count out of range")
        raw_labels = _read_exact(fh, label_count, "labels")
        if fh.read(1):
            raise FormatError("trailing bytes after labels")
    if count != label_count:
        raise FormatError(f"{count} images but {label_count} labels")
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    features = pixels.reshape(count, 1, rows, cols)
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    return DomainDataset(
        domain_id=0,
        features=features,
        labels=labels,
        split="train",
        num_classes=num_classes,
        indices=np.arange(count),
    )
