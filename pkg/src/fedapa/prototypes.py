"""Per-class prototypes and the containers exchanged with the server."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data import ClientDataset
from .model import ModelParams, ShapeMismatch, embed

WIRE_BYTES_PER_VALUE = 4


class EmptyDataset(ValueError):
    pass


class MissingClassPrototype(KeyError):
    pass


@dataclass
class PrototypeSet:
    """One client's class -> embedding map; ``padded`` marks server-filled classes."""

    client_id: int
    entries: dict[int, np.ndarray]
    padded: set[int] = field(default_factory=set)
    counts: dict[int, int] = field(default_factory=dict)  # samples per local class

    @property
    def local_classes(self) -> list[int]:
        return sorted(c for c in self.entries if c not in self.padded)

    @property
    def d_feat(self) -> int:
        return next(iter(self.entries.values())).size

    def copy(self) -> PrototypeSet:
        return PrototypeSet(
            self.client_id,
            {c: v.copy() for c, v in self.entries.items()},
            set(self.padded),
            dict(self.counts),
        )

    def matrix(self, num_classes: int) -> np.ndarray:
        return prototype_matrix(self.entries, num_classes)

    def to_wire(self) -> bytes:
        """Classes ascending, each vector as little-endian float32."""
        return b"".join(
            np.asarray(self.entries[c], dtype="<f4").tobytes() for c in sorted(self.entries)
        )

    def wire_bytes(self) -> int:
        return len(self.entries) * self.d_feat * WIRE_BYTES_PER_VALUE


@dataclass
class PersonalizedPrototypes:
    client_id: int
    entries: dict[int, np.ndarray]

    def copy(self) -> PersonalizedPrototypes:
        return PersonalizedPrototypes(
            self.client_id, {c: v.copy() for c, v in self.entries.items()}
        )

    def matrix(self, num_classes: int) -> np.ndarray:
        return prototype_matrix(self.entries, num_classes)

    def wire_bytes(self) -> int:
        if not self.entries:
            return 0
        d = next(iter(self.entries.values())).size
        return len(self.entries) * d * WIRE_BYTES_PER_VALUE


@dataclass
class StackedPrototypes:
    sets: list[PrototypeSet]
    round_index: int = 0

    def __len__(self) -> int:
        return len(self.sets)

    def copy(self) -> StackedPrototypes:
        return StackedPrototypes([s.copy() for s in self.sets], self.round_index)

    def tensor(self, num_classes: int) -> np.ndarray:
        """Shape ``(N, C, d_feat)``; every set must cover every class."""
        return np.stack([s.matrix(num_classes) for s in self.sets])


def prototype_matrix(entries: Mapping[int, np.ndarray], num_classes: int) -> np.ndarray:
    missing = [c for c in range(num_classes) if c not in entries]
    if missing:
        raise MissingClassPrototype(f"no prototype for classes {missing}")
    return np.stack([np.asarray(entries[c], dtype=np.float64) for c in range(num_classes)])


def compute_local_prototypes(model: ModelParams, dataset: ClientDataset) -> PrototypeSet:
    """Mean embedding of each class in the client's training split."""
    return class_means(model, dataset.X_train, dataset.y_train, dataset.client_id)


def class_means(
    model: ModelParams, features: np.ndarray, labels: np.ndarray, client_id: int = 0
) -> PrototypeSet:
    """Embeddings come from one forward pass and are summed per class in
    sample order, then divided by the class count."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyDataset("cannot build prototypes from an empty training set")
    r = embed(model, features)
    entries, counts = {}, {}
    for c in np.unique(labels):
        mask = labels == c
        n = int(mask.sum())
        entries[int(c)] = r[mask].sum(axis=0) / n
        counts[int(c)] = n
    return PrototypeSet(client_id, entries, counts=counts)


def prototype_delta_frobenius(P_t: StackedPrototypes, P_prev: StackedPrototypes) -> float:
    """Frobenius norm of the change in locally computed prototypes between rounds.

    Only classes that are non-padded in both stacks contribute.
    """
    if len(P_t) != len(P_prev):
        raise ShapeMismatch(f"stack sizes differ: {len(P_t)} vs {len(P_prev)}")
    total = 0.0
    for a, b in zip(P_t.sets, P_prev.sets):
        common = set(a.local_classes) & set(b.local_classes)
        for c in common:
            if a.entries[c].shape != b.entries[c].shape:
                raise ShapeMismatch(f"prototype dims differ for class {c}")
            diff = a.entries[c] - b.entries[c]
            total += float(diff @ diff)
    return float(np.sqrt(total))
