"""
Datasets, synthetic generators and the non-IID client partitioner.

A `LabeledDataset` is a multiset of (feature vector, class label) samples.
Clients, the server and the test set all use this one type.  Server datasets
come in three regimes:

IidSubsample  – n0 samples drawn without replacement, balanced over classes
FromClients   – s samples from each of c clients chosen without replacement
Shifted       – a fresh blob sample whose class means are displaced
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from config import ContractError, PartitionError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Dataset type
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlobSpec:
    """Parameters of a Gaussian-blob generator; kept as dataset provenance."""

    num_classes: int
    dim: int
    spread: float
    radius: float = 1.0

    def class_means(self) -> np.ndarray:
        """
        Deterministic class means.

        Vertices of the scaled unit simplex (``radius * e_k``) when the
        classes fit in the feature dimension, otherwise points on a circle in
        the first two coordinates.
        """
        means = np.zeros((self.num_classes, self.dim), dtype=np.float64)
        if self.num_classes <= self.dim:
            means[np.arange(self.num_classes), np.arange(self.num_classes)] = self.radius
        else:
            if self.dim < 2:
                raise ContractError(
                    f"{self.num_classes} classes need dim >= 2 for the circle layout"
                )
            angles = 2.0 * np.pi * np.arange(self.num_classes) / self.num_classes
            means[:, 0] = self.radius * np.cos(angles)
            means[:, 1] = self.radius * np.sin(angles)
        return means


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """
    Finite multiset of labelled samples.

    Parameters
    ----------
    features : ndarray, shape (n, p), float64
    labels : ndarray, shape (n,), int64, every label < ``num_classes``
    num_classes : int
    source : BlobSpec, optional
        Generator that produced the data (needed for shifted server data).
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    source: Optional[BlobSpec] = None

    def __post_init__(self) -> None:
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labs = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ContractError(f"features must be 2-D, got shape {feats.shape}")
        if labs.shape != (feats.shape[0],):
            raise ContractError(
                f"labels shape {labs.shape} does not match {feats.shape[0]} samples"
            )
        if self.num_classes < 1:
            raise ContractError(f"num_classes must be positive, got {self.num_classes}")
        if labs.size and (labs.min() < 0 or labs.max() >= self.num_classes):
            raise ContractError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{labs.min()}, {labs.max()}]"
            )
        if not np.all(np.isfinite(feats)):
            raise ContractError("features contain NaN or Inf")
        feats.setflags(write=False)
        labs.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)

    # ------------------------------------------------------------------ #
    # Basic properties                                                   #
    # ------------------------------------------------------------------ #

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    # ------------------------------------------------------------------ #
    # Construction helpers                                               #
    # ------------------------------------------------------------------ #

    @classmethod
    def empty(cls, dim: int, num_classes: int) -> "LabeledDataset":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), num_classes)

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes, self.source)

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        if len(other) and len(self) and other.dim != self.dim:
            raise ContractError(f"cannot join datasets of dim {self.dim} and {other.dim}")
        return LabeledDataset(
            np.vstack([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            max(self.num_classes, other.num_classes),
            self.source,
        )

    def permuted(self, rng: np.random.Generator) -> "LabeledDataset":
        return self.subset(rng.permutation(len(self)))

    def summary(self) -> str:
        counts = ",".join(str(c) for c in self.class_counts())
        return f"LabeledDataset(n={len(self)}, p={self.dim}, classes=[{counts}])"


@dataclass
class FederatedData:
    """Client datasets, server dataset and optional test set of one run."""

    clients: List[LabeledDataset]
    server: LabeledDataset
    test: Optional[LabeledDataset] = None

    @property
    def num_clients(self) -> int:
        return len(self.clients)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def _sample_blobs(
    spec: BlobSpec,
    counts: Sequence[int],
    rng: np.random.Generator,
    means: Optional[np.ndarray] = None,
) -> LabeledDataset:
    means = spec.class_means() if means is None else means
    feats, labs = [], []
    for label, count in enumerate(counts):
        if count <= 0:
            continue
        noise = rng.standard_normal((count, spec.dim))
        feats.append(means[label] + spec.spread * noise)
        labs.append(np.full(count, label, dtype=np.int64))
    if not feats:
        return LabeledDataset.empty(spec.dim, spec.num_classes)
    return LabeledDataset(np.vstack(feats), np.concatenate(labs), spec.num_classes, spec)


def gen_blobs(
    num_classes: int,
    per_class: int,
    dim: int,
    spread: float,
    seed: int,
    radius: float = 1.0,
) -> LabeledDataset:
    """
    Gaussian blobs, ``per_class`` samples around each class mean.

    Samples are stored class by class; the result is a pure function of the
    arguments.
    """
    if num_classes < 1 or per_class < 1 or dim < 1:
        raise ContractError("gen_blobs counts must be positive")
    if spread < 0:
        raise ContractError(f"spread must be non-negative, got {spread}")
    spec = BlobSpec(num_classes, dim, float(spread), float(radius))
    rng = np.random.default_rng(seed)
    return _sample_blobs(spec, [per_class] * num_classes, rng)


def train_test_split(
    data: LabeledDataset, test_fraction: float, seed: int
) -> Tuple[LabeledDataset, LabeledDataset]:
    """Random split for datasets loaded from files."""
    if not (0.0 < test_fraction < 1.0):
        raise ContractError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    order = np.random.default_rng(seed).permutation(len(data))
    cut = int(round(len(data) * (1.0 - test_fraction)))
    return data.subset(np.sort(order[:cut])), data.subset(np.sort(order[cut:]))


def quadratic_testbed(
    client_centers: Sequence[Sequence[float]],
    server_center: Sequence[float],
    samples_per_party: int = 8,
) -> FederatedData:
    """
    Party datasets for the quadratic-consensus testbed.

    Every party holds ``samples_per_party`` zero feature vectors.  The loss of
    a party is set by its model's center (``loss_models.quadratic_party_models``),
    so the data only fixes party sizes and batch counts.
    """
    centers = [np.asarray(c, dtype=np.float64) for c in client_centers]
    if not centers:
        raise ContractError("quadratic testbed needs at least one client")
    if samples_per_party < 1:
        raise ContractError(f"samples_per_party must be positive, got {samples_per_party}")
    dim = centers[0].shape[0]

    def party(center: np.ndarray) -> LabeledDataset:
        if center.shape != (dim,):
            raise ContractError(f"center {center} does not have dimension {dim}")
        return LabeledDataset(np.zeros((samples_per_party, dim)),
                              np.zeros(samples_per_party, dtype=np.int64), 1)

    clients = [party(c) for c in centers]
    server = party(np.asarray(server_center, dtype=np.float64))
    return FederatedData(clients=clients, server=server)


# ---------------------------------------------------------------------------
# Non-IID partition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionSpec:
    """N clients with C label classes each."""

    num_clients: int
    classes_per_client: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise PartitionError(f"num_clients must be positive, got {self.num_clients}")
        if self.classes_per_client < 1:
            raise PartitionError(
                f"classes_per_client must be positive, got {self.classes_per_client}"
            )


def client_classes(client: int, classes_per_client: int, num_classes: int) -> List[int]:
    """Classes {(i*C + j) mod num_classes : j < C} assigned to client i."""
    return [(client * classes_per_client + j) % num_classes for j in range(classes_per_client)]


def partition_by_class(data: LabeledDataset, spec: PartitionSpec) -> List[LabeledDataset]:
    """
    Split ``data`` into N clients holding n/N samples of C classes each.

    Every client receives exactly n_i/C samples from each of its classes,
    drawn uniformly without replacement from that class's pool; no sample is
    assigned twice.
    """
    n, N, C = len(data), spec.num_clients, spec.classes_per_client
    if C > data.num_classes:
        raise PartitionError(
            f"classes_per_client ({C}) exceeds num_classes ({data.num_classes})"
        )
    if n % N:
        raise PartitionError(f"N={N} does not divide n={n}")
    n_i = n // N
    if n_i % C:
        raise PartitionError(f"C={C} does not divide n_i={n_i}")
    per_class = n_i // C

    assignment = [client_classes(i, C, data.num_classes) for i in range(N)]
    demand = np.zeros(data.num_classes, dtype=np.int64)
    for classes in assignment:
        for label in classes:
            demand[label] += per_class
    available = data.class_counts()
    for label in range(data.num_classes):
        if demand[label] > available[label]:
            raise PartitionError(
                f"class {label} has {available[label]} samples but the partition "
                f"needs {demand[label]}"
            )

    rng = np.random.default_rng(spec.seed)
    pools = {label: list(rng.permutation(data.class_indices(label)))
             for label in range(data.num_classes)}

    clients: List[LabeledDataset] = []
    for classes in assignment:
        picked: List[int] = []
        for label in classes:
            pool = pools[label]
            picked.extend(pool[:per_class])
            del pool[:per_class]
        clients.append(data.subset(picked))

    logger.debug("partitioned %d samples into %d clients of %d (C=%d)", n, N, n_i, C)
    return clients


# ---------------------------------------------------------------------------
# Server data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IidSubsample:
    n0: int


@dataclass(frozen=True)
class FromClients:
    num_clients: int
    samples_per_client: int


@dataclass(frozen=True)
class Shifted:
    """
    Blob sample from the training generator with displaced class means.

    Each mean moves by ``shift * spread`` along a seed-determined unit
    direction; classes in ``drop_classes`` are absent from the server data.
    """

    n0: int
    shift: float = 0.0
    drop_classes: Tuple[int, ...] = field(default_factory=tuple)


ServerDataSpec = Union[IidSubsample, FromClients, Shifted]


def _balanced_counts(total: int, classes: Sequence[int], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    base, extra = divmod(total, len(classes))
    for rank, label in enumerate(classes):
        counts[label] = base + (1 if rank < extra else 0)
    return counts


def build_server_data(
    data: LabeledDataset,
    clients: Sequence[LabeledDataset],
    spec: ServerDataSpec,
    seed: int,
) -> LabeledDataset:
    """Server dataset D0 for one of the three regimes."""
    rng = np.random.default_rng(seed)

    if isinstance(spec, IidSubsample):
        n, n0 = len(data), spec.n0
        if not (0 <= n0 <= n):
            raise PartitionError(f"n0={n0} outside [0, {n}]")
        if n0 == n:
            return data.permuted(rng)
        wanted = _balanced_counts(n0, range(data.num_classes), data.num_classes)
        available = data.class_counts()
        picked: List[int] = []
        for label in range(data.num_classes):
            if wanted[label] > available[label]:
                raise PartitionError(
                    f"class {label} has {available[label]} samples, server needs {wanted[label]}"
                )
            pool = data.class_indices(label)
            picked.extend(rng.choice(pool, size=wanted[label], replace=False))
        return data.subset(picked)

    if isinstance(spec, FromClients):
        c, s = spec.num_clients, spec.samples_per_client
        if not (1 <= c <= len(clients)):
            raise PartitionError(f"cannot draw from {c} of {len(clients)} clients")
        chosen = np.sort(rng.choice(len(clients), size=c, replace=False))
        parts = []
        for i in chosen:
            if s > len(clients[i]):
                raise PartitionError(f"client {i} holds {len(clients[i])} < {s} samples")
            parts.append(clients[i].subset(rng.choice(len(clients[i]), size=s, replace=False)))
        server = parts[0]
        for part in parts[1:]:
            server = server.concat(part)
        logger.debug("server data drawn from clients %s", chosen.tolist())
        return server

    if isinstance(spec, Shifted):
        source = data.source
        if source is None:
            raise PartitionError("shifted server data requires blob-generated training data")
        kept = [k for k in range(source.num_classes) if k not in set(spec.drop_classes)]
        if not kept:
            raise PartitionError("shifted server data drops every class")
        directions = rng.standard_normal((source.num_classes, source.dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        means = source.class_means() + spec.shift * source.spread * directions
        counts = _balanced_counts(spec.n0, kept, source.num_classes)
        return _sample_blobs(source, counts, rng, means=means)

    raise PartitionError(f"unknown server data spec {spec!r}")


def augment_clients(
    clients: Sequence[LabeledDataset], server: LabeledDataset
) -> List[LabeledDataset]:
    """Data sharing: every client receives a copy of D0 (D'_i = D_i ∪ D0)."""
    if len(server) == 0:
        return list(clients)
    return [c.concat(server) for c in clients]


# ---------------------------------------------------------------------------
# Subsampling variance
# ---------------------------------------------------------------------------

def subsample_variance_expected(data: LabeledDataset, model, x: np.ndarray, n0: int) -> float:
    """
    Expected ||grad f0(x) - grad F(x)||^2 when D0 is an n0-subset of D.

    Sampling without replacement gives (n/n0 - 1) * s2 / (n - 1), where s2 is
    the population variance of the per-sample gradients at ``x``.
    """
    n = len(data)
    if n < 2:
        raise ContractError(f"need at least 2 samples, got {n}")
    if not (1 <= n0 <= n):
        raise ContractError(f"n0={n0} outside [1, {n}]")
    per_sample = model.per_sample_grads(x, data)
    centred = per_sample - per_sample.mean(axis=0)
    s2 = float(np.mean(np.sum(centred * centred, axis=1)))
    return (n / n0 - 1.0) * s2 / (n - 1)

