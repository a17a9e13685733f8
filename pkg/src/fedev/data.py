"""Datasets, client partitions and per-client sample pools."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractViolation, ProtocolError


@dataclass(frozen=True, eq=False)
class Dataset:
    """Samples addressed by integer ID (row index); train and test are disjoint ID sets."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    train_ids: np.ndarray
    test_ids: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ConfigurationError("features must be (n, d) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigurationError(f"labels must lie in [0, {self.num_classes})")
        if np.intersect1d(self.train_ids, self.test_ids).size:
            raise ConfigurationError("train and test splits overlap")

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        ids = {"train": self.train_ids, "test": self.test_ids}[name]
        return self.features[ids], self.labels[ids]

    def same_as(self, other: "Dataset") -> bool:
        return (self.num_classes == other.num_classes
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.train_ids, other.train_ids)
                and np.array_equal(self.test_ids, other.test_ids))


def _class_means(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Well separated unit-norm class centers."""
    if dim == 1:
        if num_classes > 2:
            raise ConfigurationError("a 1-D unit sphere only holds two distinct class means")
        return np.array([[-1.0], [1.0]])[:num_classes]
    if num_classes <= dim:
        # rows of a random orthonormal basis
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        return q[:num_classes].copy()
    if dim == 2:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        ang = phase + 2.0 * np.pi * np.arange(num_classes) / num_classes
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    # farthest-point selection over random directions
    pts = rng.normal(size=(64 * num_classes, dim))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    chosen = [0]
    dist = np.linalg.norm(pts - pts[0], axis=1)
    for _ in range(num_classes - 1):
        j = int(np.argmax(dist))
        chosen.append(j)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[j], axis=1))
    return pts[chosen]


def _stratified_split(labels: np.ndarray, num_classes: int, test_fraction: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    for c in range(num_classes):
        ids = np.flatnonzero(labels == c)
        ids = rng.permutation(ids)
        n_test = int(round(test_fraction * ids.size))
        test.append(ids[:n_test])
        train.append(ids[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def make_synthetic(num_classes: int, per_class: int, dim: int, spread: float, seed: int,
                   test_fraction: float = 0.2, clusters_per_class: int = 1,
                   minor_weight: float = 0.1) -> Dataset:
    """Gaussian classes around unit-norm centers, split by class.

    With ``clusters_per_class == 1`` each class is a single isotropic blob.
    Otherwise every class owns one major cluster plus ``clusters_per_class - 1``
    minor ones, each minor cluster drawing ``minor_weight`` of the class mass
    relative to the major one. Minor clusters are rare regions that a random
    labeled sample tends to miss.
    """
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    if per_class < 1:
        raise ConfigurationError("per_class must be >= 1")
    if spread < 0:
        raise ConfigurationError("spread must be >= 0")
    if clusters_per_class < 1:
        raise ConfigurationError("clusters_per_class must be >= 1")
    if not minor_weight > 0:
        raise ConfigurationError("minor_weight must be > 0")
    rng = np.random.default_rng(seed)
    if clusters_per_class == 1:
        means = _class_means(num_classes, dim, rng)
        labels = np.repeat(np.arange(num_classes), per_class)
        noise = rng.normal(size=(labels.size, dim))
        X = means[labels] + spread * noise
    else:
        m = clusters_per_class
        centers = _class_means(num_classes * m, dim, rng)
        centers = centers[rng.permutation(num_classes * m)].reshape(num_classes, m, dim)
        w = np.array([1.0] + [minor_weight] * (m - 1))
        w /= w.sum()
        blocks = []
        for c in range(num_classes):
            comp = rng.choice(m, size=per_class, p=w)
            blocks.append(centers[c][comp] + spread * rng.normal(size=(per_class, dim)))
        X = np.concatenate(blocks)
        labels = np.repeat(np.arange(num_classes), per_class)
    train, test = _stratified_split(labels, num_classes, test_fraction, rng)
    return Dataset(X, labels.astype(np.int64), num_classes, train, test)


def load_csv(path: str | Path, seed: int = 0, test_fraction: float = 0.2,
             num_classes: int | None = None) -> Dataset:
    """Read a ``f0,...,fD,label`` table and split it stratified by class."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigurationError(f"cannot read dataset {path}: {exc}") from exc
    if not rows:
        raise ConfigurationError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    expected = [f"f{i}" for i in range(len(header) - 1)] + ["label"]
    if len(header) < 2 or header != expected:
        raise ConfigurationError(f"{path}: header must be f0,...,fD,label, got {','.join(header)}")
    try:
        body = [(list(map(float, r[:-1])), int(r[-1])) for r in rows[1:] if r]
    except ValueError as exc:
        raise ConfigurationError(f"{path}: malformed row ({exc})") from exc
    if any(len(f) != len(header) - 1 for f, _ in body):
        raise ConfigurationError(f"{path}: ragged rows")
    X = np.array([f for f, _ in body], dtype=np.float64).reshape(len(body), len(header) - 1)
    y = np.array([lab for _, lab in body], dtype=np.int64)
    C = int(num_classes if num_classes is not None else (y.max() + 1 if y.size else 0))
    if C < 2:
        raise ConfigurationError(f"{path}: need at least two classes")
    train, test = _stratified_split(y, C, test_fraction, np.random.default_rng(seed))
    return Dataset(X, y, C, train, test)


def write_csv(ds: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(ds.dim)] + ["label"])
        for x, lab in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(lab)])


class PartitionKind(str, enum.Enum):
    CLASSES_PER_CLIENT = "classes"
    DIRICHLET = "dirichlet"
    IID = "iid"


@dataclass(frozen=True)
class PartitionSpec:
    kind: PartitionKind
    num_clients: int
    classes_per_client: int | None = None
    alpha: float | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", PartitionKind(self.kind))
        if self.num_clients < 1:
            raise ConfigurationError("partition.num_clients must be >= 1")
        if self.kind is PartitionKind.CLASSES_PER_CLIENT:
            if self.classes_per_client is None or self.classes_per_client < 1:
                raise ConfigurationError("partition.classes_per_client must be >= 1")
        if self.kind is PartitionKind.DIRICHLET:
            if self.alpha is None or not self.alpha > 0:
                raise ConfigurationError("partition.alpha must be > 0")


@dataclass(frozen=True)
class ClientPools:
    """Index sets of one client. Labeled, unlabeled and dormant are disjoint."""

    labeled: frozenset = field(default_factory=frozenset)
    unlabeled: frozenset = field(default_factory=frozenset)
    dormant: frozenset = field(default_factory=frozenset)
    subset: frozenset = field(default_factory=frozenset)
    selected: frozenset = field(default_factory=frozenset)

    def owned(self) -> frozenset:
        return self.labeled | self.unlabeled | self.dormant

    def size(self) -> int:
        return len(self.labeled) + len(self.unlabeled) + len(self.dormant)

    def check(self, expected: frozenset | None = None) -> None:
        """Raise ProtocolError if the pool invariants do not hold."""
        if self.labeled & self.unlabeled or self.labeled & self.dormant or self.unlabeled & self.dormant:
            raise ProtocolError("labeled, unlabeled and dormant sets overlap")
        if not self.subset <= self.unlabeled:
            raise ProtocolError("candidate subset is not contained in the unlabeled set")
        if expected is not None and self.owned() != expected:
            raise ProtocolError("client pool membership changed (sample lost or duplicated)")


def sorted_ids(s) -> np.ndarray:
    return np.array(sorted(s), dtype=np.int64)


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.lexsort((np.arange(len(raw)), -(raw - counts)))
        counts[order[:short]] += 1
    return counts


def partition(ds: Dataset, spec: PartitionSpec) -> list[ClientPools]:
    """Split the train IDs among clients; every train ID lands in exactly one unlabeled pool."""
    rng = np.random.default_rng(spec.seed)
    K, C = spec.num_clients, ds.num_classes
    train_labels = ds.labels[ds.train_ids]
    by_class = [rng.permutation(ds.train_ids[train_labels == c]) for c in range(C)]
    shares: list[list[np.ndarray]] = [[] for _ in range(K)]

    if spec.kind is PartitionKind.IID:
        for ids in by_class:
            for k in range(K):
                shares[k].append(ids[k::K])
    elif spec.kind is PartitionKind.CLASSES_PER_CLIENT:
        ck = spec.classes_per_client
        if ck > C:
            raise ConfigurationError(f"classes_per_client={ck} exceeds num_classes={C}")
        if K * ck < C:
            raise ConfigurationError(
                f"{K} clients x {ck} classes cannot cover all {C} classes"
            )
        class_order = rng.permutation(C)
        client_order = rng.permutation(K)
        holders: list[list[int]] = [[] for _ in range(C)]
        for slot, k in enumerate(client_order):
            for j in range(ck):
                c = int(class_order[(slot * ck + j) % C])
                holders[c].append(int(k))
        for c, ids in enumerate(by_class):
            owners = sorted(holders[c])
            for k, part in zip(owners, np.array_split(ids, len(owners))):
                shares[k].append(part)
    else:
        for ids in by_class:
            p = rng.dirichlet(np.full(K, spec.alpha))
            if not np.all(np.isfinite(p)) or p.sum() <= 0:
                # tiny alpha can underflow every component; fall back to one owner
                p = np.zeros(K)
                p[rng.integers(K)] = 1.0
            counts = _largest_remainder(p / p.sum(), ids.size)
            edges = np.concatenate([[0], np.cumsum(counts)])
            for k in range(K):
                shares[k].append(ids[edges[k]:edges[k + 1]])

    return [ClientPools(unlabeled=frozenset(int(i) for part in parts for i in part))
            for parts in shares]


def _safe_ceil(x: float) -> int:
    return int(math.ceil(x - 1e-9))


def init_labeled(pools: ClientPools, init_fraction: float, seed: int) -> ClientPools:
    """Move a seeded uniform draw of ceil(fraction * pool size) IDs to the labeled set."""
    if pools.labeled:
        raise ContractViolation("init_labeled expects an empty labeled set")
    if not 0.0 < init_fraction < 1.0:
        raise ConfigurationError(f"init_fraction must be in (0, 1), got {init_fraction}")
    n = _safe_ceil(init_fraction * len(pools.unlabeled))
    if n == 0:
        raise ConfigurationError("init_fraction yields zero labeled samples")
    rng = np.random.default_rng(seed)
    chosen = frozenset(int(i) for i in rng.choice(sorted_ids(pools.unlabeled), size=n, replace=False))
    return replace(pools, labeled=chosen, unlabeled=pools.unlabeled - chosen,
                   dormant=frozenset(), subset=frozenset(), selected=frozenset())
