"""Classification metrics and per-round communication accounting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BYTES_PER_PARAM = 4
KILOBYTE = 1000

# Reference CNNs: (total parameters, MFLOPs). Recorded for cost accounting only.
REFERENCE_ARCHITECTURES: dict[str, tuple[int, float]] = {
    "TinyConvNet4": (7_960, 340.75),
    "MiddleConvNet4": (18_440, 162.85),
    "LargeConvNet4": (463_750, 606.35),
}


class MetricsError(ValueError):
    pass


class LengthMismatch(MetricsError):
    pass


class Empty(MetricsError):
    pass


def _pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.int64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.size} predictions vs {y.size} labels")
    if p.size == 0:
        raise Empty("no predictions")
    return p, y


def accuracy(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(p == y))


def macro_f1(preds, labels, num_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1 over classes seen in labels or predictions."""
    p, y = _pair(preds, labels)
    if num_classes is not None and (y.max() >= num_classes or y.min() < 0):
        raise MetricsError(f"labels must lie in [0, {num_classes})")
    scores = []
    for c in np.union1d(p, y):
        tp = np.sum((p == c) & (y == c))
        fp = np.sum((p == c) & (y != c))
        fn = np.sum((p != c) & (y == c))
        scores.append(2.0 * tp / (2.0 * tp + fp + fn))
    return float(np.mean(scores))


def mae(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(np.abs(p - y)))


@dataclass(frozen=True)
class CostModel:
    d_feat: int
    num_classes: int
    num_clients: int
    bytes_per_param: int = BYTES_PER_PARAM
    kilobyte: int = KILOBYTE

    @property
    def prototype_bytes(self) -> int:
        return self.d_feat * self.bytes_per_param


@dataclass
class RoundBytes:
    up: list[int]
    down: list[int]

    @property
    def per_client(self) -> list[int]:
        return [u + d for u, d in zip(self.up, self.down)]

    @property
    def total(self) -> int:
        return sum(self.per_client)


def fedapa_round_bytes(
    cost: CostModel,
    uploaded: list[int],
    personalized: list[int],
    stacked: list[int] | None,
) -> RoundBytes:
    """Bytes exchanged by each client in one round.

    ``uploaded[i]`` is the number of prototypes client i sends, ``personalized[i]``
    the size of its Q_i, and ``stacked[i]`` the size of set i in the broadcast
    stack after padding (``None`` when the stack is not sent). A client
    downloads its Q_i plus every *other* client's set: its own padded entries
    equal the matching entries of Q_i, so it never needs its own set back.
    With complete sets this is ``(N + 1) * C`` prototypes per client.
    """
    pb = cost.prototype_bytes
    up = [n * pb for n in uploaded]
    total_stack = sum(stacked) if stacked is not None else 0
    down = []
    for i, q in enumerate(personalized):
        others = total_stack - stacked[i] if stacked is not None else 0
        down.append((q + others) * pb)
    return RoundBytes(up, down)


def complete_round_bytes(cost: CostModel) -> int:
    """Per-client bytes per round when every set covers every class."""
    N, C = cost.num_clients, cost.num_classes
    rb = fedapa_round_bytes(cost, [C] * N, [C] * N, [C] * N)
    return rb.per_client[0]


def model_sharing_bytes(num_params: int, bytes_per_param: int = BYTES_PER_PARAM) -> int:
    """Upload plus download of a full model."""
    return 2 * num_params * bytes_per_param


def to_kb(nbytes: int, kilobyte: int = KILOBYTE) -> float:
    return nbytes / kilobyte


def reduction_ratio(proto_bytes: int, model_bytes: int) -> float:
    return 1.0 - proto_bytes / model_bytes


def last_rounds_mean(values: list[float], k: int = 5) -> float:
    """Mean over the final ``k`` entries (all entries if fewer)."""
    if not values:
        raise Empty("no values")
    tail = values[-k:]
    return float(sum(tail) / len(tail))
