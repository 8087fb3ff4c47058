"""Synthetic non-IID client datasets and CSV ingestion.

Label skew comes from a per-class Dirichlet allocation across clients; feature
skew from a per-client affine map ``x -> A_i x + b_i`` with
``A_i = I + s * E_i`` and ``||E_i||_2 = 1``.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass
from pathlib import Path

from collections.abc import Mapping

import numpy as np

from .numerics import make_rng


class DataError(ValueError):
    pass


class NonPositiveBeta(DataError):
    pass


class InvalidSpec(DataError):
    pass


class InconsistentDim(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.row = row
        self.column = column


@dataclass
class ClientDataset:
    client_id: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.X_train.shape[1]

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    @property
    def class_counts(self) -> dict[int, int]:
        labels, counts = np.unique(self.y_train, return_counts=True)
        return {int(c): int(k) for c, k in zip(labels, counts)}

    @property
    def present_classes(self) -> set[int]:
        return set(self.class_counts)


@dataclass(frozen=True)
class SynthSpec:
    num_clients: int = 6
    num_classes: int = 21
    input_dim: int = 32
    dirichlet_beta: float = 0.3
    feature_skew_strength: float = 0.3
    samples_per_client: int = 420
    class_separation: float = 4.0
    noise_sigma: float = 1.0
    train_fraction: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if self.num_clients < 2:
            raise InvalidSpec("num_clients must be >= 2")
        if self.num_classes < 2:
            raise InvalidSpec("num_classes must be >= 2")
        if self.input_dim < 1 or self.samples_per_client < 1:
            raise InvalidSpec("input_dim and samples_per_client must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidSpec("train_fraction must lie in (0, 1)")
        if not self.dirichlet_beta > 0:
            raise InvalidSpec("dirichlet_beta must be positive")
        if self.feature_skew_strength < 0:
            raise InvalidSpec("feature_skew_strength must be >= 0")
        if not (self.class_separation > 0 and self.noise_sigma > 0):
            raise InvalidSpec("class_separation and noise_sigma must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def apportion(weights: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder rounding of ``total * weights / sum(weights)``.

    Ties go to the lower index, so the result is deterministic.
    """
    w = np.asarray(weights, dtype=np.float64)
    s = w.sum()
    if total == 0:
        return np.zeros(len(w), dtype=np.int64)
    if s <= 0:
        w = np.ones_like(w)
        s = w.sum()
    exact = total * w / s
    base = np.floor(exact).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(exact - base), kind="stable")
        base[order[:short]] += 1
    return base


def dirichlet_partition(
    class_totals, beta: float, num_clients: int, rng: np.random.Generator
) -> np.ndarray:
    """Allocate each class across clients with a Dirichlet(beta * 1_N) draw.

    ``class_totals`` is a ``{class: count}`` mapping or a sequence indexed by
    class. Returns an ``(N, C)`` integer array whose column ``c`` sums exactly
    to ``class_totals[c]``. Classes are processed in ascending id order.
    """
    if not isinstance(class_totals, Mapping):
        class_totals = {c: int(n) for c, n in enumerate(class_totals)}
    if not beta > 0:
        raise NonPositiveBeta(f"beta must be positive, got {beta}")
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    classes = sorted(class_totals)
    quotas = np.zeros((num_clients, len(classes)), dtype=np.int64)
    for k, c in enumerate(classes):
        if num_clients == 1:
            quotas[0, k] = class_totals[c]
            continue
        p = rng.dirichlet(np.full(num_clients, float(beta)))
        quotas[:, k] = apportion(p, int(class_totals[c]))
    return quotas


def stratified_split(
    labels: np.ndarray, train_fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (train, test). Every class keeps at least one training sample;
    classes with >= 5 samples get at least one test sample."""
    n = len(labels)
    classes, counts = np.unique(labels, return_counts=True)
    n_test = int(round(n * (1.0 - train_fraction)))
    exact = counts * (1.0 - train_fraction)
    take = np.floor(exact).astype(np.int64)
    cap = counts - 1
    take = np.minimum(take, cap)
    take[counts >= 5] = np.maximum(take[counts >= 5], 1)
    short = n_test - int(take.sum())
    if short > 0:
        order = np.argsort(-(exact - np.floor(exact)), kind="stable")
        for k in order:
            if short == 0:
                break
            if take[k] < cap[k]:
                take[k] += 1
                short -= 1
    train_idx, test_idx = [], []
    for c, k in zip(classes, take):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        test_idx.append(idx[:k])
        train_idx.append(idx[k:])
    train = np.concatenate(train_idx) if train_idx else np.zeros(0, dtype=np.int64)
    test = np.concatenate(test_idx) if test_idx else np.zeros(0, dtype=np.int64)
    return train[rng.permutation(len(train))], test[rng.permutation(len(test))]


def _client_quotas(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    pool = apportion(np.ones(spec.num_classes), spec.samples_per_client * spec.num_clients)
    raw = dirichlet_partition(
        {c: int(pool[c]) for c in range(spec.num_classes)},
        spec.dirichlet_beta,
        spec.num_clients,
        rng,
    )
    # Equalize client sizes while keeping each client's label proportions.
    return np.stack([apportion(row, spec.samples_per_client) for row in raw])


def generate_synthetic(spec: SynthSpec) -> list[ClientDataset]:
    spec.validate()
    rng = make_rng(spec.seed)
    d = spec.input_dim
    means = rng.standard_normal((spec.num_classes, d))
    means *= spec.class_separation / np.linalg.norm(means, axis=1, keepdims=True)
    quotas = _client_quotas(spec, rng)

    datasets = []
    for i in range(spec.num_clients):
        E = rng.standard_normal((d, d))
        E /= np.linalg.norm(E, 2)
        A = np.eye(d) + spec.feature_skew_strength * E
        b = rng.standard_normal(d) * (spec.feature_skew_strength * spec.class_separation / math.sqrt(d))
        labels = np.repeat(np.arange(spec.num_classes), quotas[i])
        noise = spec.noise_sigma * rng.standard_normal((len(labels), d))
        X = (means[labels] + noise) @ A.T + b
        tr, te = stratified_split(labels, spec.train_fraction, rng)
        datasets.append(ClientDataset(i, X[tr], labels[tr], X[te], labels[te]))
    return datasets


def load_dataset_csv(
    path: str | Path, train_fraction: float = 0.8, seed: int = 0
) -> list[ClientDataset]:
    """Read ``client_id,label,f0,...,f{d-1}`` rows and split each client stratified."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ParseError(f"{path}: empty file", row=1)
        if len(header) < 3 or header[0] != "client_id" or header[1] != "label":
            raise ParseError(f"{path}: header must start with client_id,label,f0", row=1)
        for k, name in enumerate(header[2:]):
            if name != f"f{k}":
                raise ParseError(f"{path}: expected feature column f{k}", row=1, column=name)
        dim = len(header) - 2
        rows: dict[int, tuple[list, list]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 2:
                raise InconsistentDim(
                    f"{path}: row {lineno} has {len(row) - 2} features, expected {dim}"
                )
            try:
                cid = int(row[0])
            except ValueError:
                raise ParseError(f"{path}: bad client_id {row[0]!r}", lineno, "client_id") from None
            try:
                label = int(row[1])
            except ValueError:
                raise ParseError(f"{path}: bad label {row[1]!r}", lineno, "label") from None
            if label < 0:
                raise ParseError(f"{path}: negative label", lineno, "label")
            feats = []
            for k, cell in enumerate(row[2:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"{path}: bad feature {cell!r}", lineno, f"f{k}") from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}: non-finite feature", lineno, f"f{k}")
                feats.append(v)
            xs, ys = rows.setdefault(cid, ([], []))
            xs.append(feats)
            ys.append(label)
    if not rows:
        raise ParseError(f"{path}: no data rows", row=2)
    rng = make_rng(seed)
    out = []
    for cid in sorted(rows):
        X = np.asarray(rows[cid][0], dtype=np.float64)
        y = np.asarray(rows[cid][1], dtype=np.int64)
        tr, te = stratified_split(y, train_fraction, rng)
        out.append(ClientDataset(cid, X[tr], y[tr], X[te], y[te]))
    return out


def write_dataset_csv(datasets: list[ClientDataset], path: str | Path) -> None:
    """Inverse of :func:`load_dataset_csv` (train rows then test rows per client)."""
    dim = datasets[0].input_dim
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "label", *[f"f{k}" for k in range(dim)]])
        for ds in datasets:
            for X, y in ((ds.X_train, ds.y_train), (ds.X_test, ds.y_test)):
                for xi, yi in zip(X, y):
                    w.writerow([ds.client_id, int(yi), *[repr(float(v)) for v in xi]])
