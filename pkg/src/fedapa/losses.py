"""Hybrid local objective: cross-entropy plus prototype-contrastive terms.

All batch losses are mean-reduced over the batch. Prototype arguments may be a
``{class: vector}`` mapping, a :class:`PersonalizedPrototypes`/``PrototypeSet``,
or an array of shape ``(C, d)`` (``(N, C, d)`` for the stacked set). Prototypes
are treated as constants: no gradient is produced for them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .model import (
    ModelParams,
    classifier_backward,
    classifier_forward,
    encoder_backward,
    encoder_forward,
)
from .numerics import NonPositiveTemperature, log_softmax_rows
from .prototypes import (
    MissingClassPrototype,
    PersonalizedPrototypes,
    PrototypeSet,
    StackedPrototypes,
    prototype_matrix,
)

NORM_FLOOR = 1e-12


class LabelOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class WarmupSchedule:
    lambda_min: float = 0.0
    lambda_max: float = 1.0
    T_warm: int = 50

    def __post_init__(self) -> None:
        if self.lambda_min > self.lambda_max:
            raise ValueError("lambda_min must not exceed lambda_max")
        if self.T_warm < 1:
            raise ValueError("T_warm must be >= 1")


def warmup_lambda(t: int, sched: WarmupSchedule = WarmupSchedule()) -> float:
    """Cosine ramp from ``lambda_min`` to ``lambda_max`` over ``T_warm`` rounds."""
    if t < 1:
        raise ValueError(f"round index must be >= 1, got {t}")
    if t >= sched.T_warm:
        return float(sched.lambda_max)
    u = t / sched.T_warm
    span = sched.lambda_max - sched.lambda_min
    # (1 - cos(pi u)) / 2 rewritten about the midpoint so that u = 1/2 and
    # u = 1 land exactly on 1/2 and 1 in floating point.
    return sched.lambda_min + span * (0.5 + 0.5 * math.sin(math.pi * (u - 0.5)))


@dataclass
class LossBreakdown:
    ce: float
    lg: float
    lc: float
    lambda_t: float
    total: float


def _check_labels(y: np.ndarray, num_classes: int) -> None:
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes}), got {y.min()}..{y.max()}")


def _batch_ce(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    B = logits.shape[0]
    logp = log_softmax_rows(logits)
    loss = -float(logp[np.arange(B), y].sum()) / B
    grad = np.exp(logp)
    grad[np.arange(B), y] -= 1.0
    return loss, grad / B


def cross_entropy(logits, label) -> tuple[float, np.ndarray]:
    """``-log softmax(logits)[label]`` and its gradient w.r.t. the logits.

    Accepts one logit vector with an int label, or a ``(B, C)`` batch with a
    label array (mean-reduced).
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    y = np.atleast_1d(np.asarray(label, dtype=np.int64))
    _check_labels(y, z2.shape[1])
    loss, grad = _batch_ce(z2, y)
    return loss, grad[0] if single else grad


def _as_proto_matrix(protos) -> tuple[np.ndarray, dict[int, int] | None]:
    """Return ``(C, d)`` matrix and a label->row map (``None`` means identity)."""
    if isinstance(protos, (PersonalizedPrototypes, PrototypeSet)):
        protos = protos.entries
    if isinstance(protos, Mapping):
        classes = sorted(protos)
        if classes == list(range(len(classes))):
            return prototype_matrix(protos, len(classes)), None
        return (
            np.stack([np.asarray(protos[c], dtype=np.float64) for c in classes]),
            {c: k for k, c in enumerate(classes)},
        )
    return np.asarray(protos, dtype=np.float64), None


def _rows(y: np.ndarray, index: dict[int, int] | None, C: int) -> np.ndarray:
    if index is None:
        if y.size and (y.min() < 0 or y.max() >= C):
            raise MissingClassPrototype(f"labels {sorted(set(y.tolist()))} not all in 0..{C - 1}")
        return y
    try:
        return np.array([index[int(c)] for c in y], dtype=np.int64)
    except KeyError as e:
        raise MissingClassPrototype(f"no prototype for class {e.args[0]}") from None


def _unit_rows(a: np.ndarray) -> np.ndarray:
    n = np.sqrt(np.einsum("...j,...j->...", a, a))
    return a / np.maximum(n, NORM_FLOOR)[..., None]


def _contrastive_batch(
    R: np.ndarray, rows: np.ndarray, P: np.ndarray, tau: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses ``(B,)`` and per-sample gradients ``(B, d)``.

    ``P`` may be ``(C, d)`` or ``(N, C, d)``; the stacked case averages over N.
    """
    if not tau > 0:
        raise NonPositiveTemperature(f"tau must be > 0, got {tau}")
    B = R.shape[0]
    rn = np.maximum(np.sqrt(np.einsum("ij,ij->i", R, R)), NORM_FLOOR)
    Rh = R / rn[:, None]
    P3 = P if P.ndim == 3 else P[None]
    N, C, d = P3.shape
    Ph = _unit_rows(P3.reshape(N * C, d))
    cos = (Rh @ Ph.T).reshape(B, N, C)
    logits = cos / tau
    m = logits.max(axis=2, keepdims=True)
    e = np.exp(logits - m)
    Z = e.sum(axis=2, keepdims=True)
    ar = np.arange(B)
    losses = (np.log(Z[..., 0]) + m[..., 0] - logits[ar, :, rows]).mean(axis=1)
    G = e / Z
    G[ar, :, rows] -= 1.0
    G /= tau * N  # d loss / d cos, averaged over the N sets
    dRh = G.reshape(B, N * C) @ Ph
    proj = np.einsum("bd,bd->b", Rh, dRh)
    dR = (dRh - Rh * proj[:, None]) / rn[:, None]
    return losses, dR


def proto_contrastive(r, y, protos, tau: float) -> tuple[float, np.ndarray]:
    """Softmax over cosine similarities to class prototypes, negative log-prob of ``y``.

    ``r`` is one embedding (int ``y``) or a ``(B, d)`` batch (array ``y``,
    mean-reduced).
    """
    R = np.asarray(r, dtype=np.float64)
    single = R.ndim == 1
    R2 = R[None, :] if single else R
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    P, index = _as_proto_matrix(protos)
    rows = _rows(y, index, P.shape[0])
    losses, dR = _contrastive_batch(R2, rows, P, tau)
    if single:
        return float(losses[0]), dR[0]
    B = R2.shape[0]
    return float(losses.mean()), dR / B


def loss_lg(r, y, Q, tau: float) -> tuple[float, np.ndarray]:
    """Contrastive alignment to the client's personalized prototypes."""
    return proto_contrastive(r, y, Q, tau)


def _stack(P, num_classes: int | None = None) -> np.ndarray:
    if isinstance(P, StackedPrototypes):
        if num_classes is None:
            num_classes = max(max(s.entries) for s in P.sets) + 1
        return P.tensor(num_classes)
    if isinstance(P, (list, tuple)):
        mats = [_as_proto_matrix(p)[0] for p in P]
        return np.stack(mats)
    arr = np.asarray(P, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError("stacked prototypes must have shape (N, C, d)")
    return arr


def loss_lc(r, y, P, tau: float) -> tuple[float, np.ndarray]:
    """Mean over all uploaded sets of the contrastive loss against each set."""
    R = np.asarray(r, dtype=np.float64)
    single = R.ndim == 1
    R2 = R[None, :] if single else R
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    T = _stack(P)
    rows = _rows(y, None, T.shape[1])
    losses, dR = _contrastive_batch(R2, rows, T, tau)
    if single:
        return float(losses[0]), dR[0]
    return float(losses.mean()), dR / R2.shape[0]


def total_loss(
    X: np.ndarray,
    y: np.ndarray,
    model: ModelParams,
    Q: np.ndarray | None,
    P: np.ndarray | None,
    tau: float,
    lambda_t: float,
    grads: ModelParams | None = None,
) -> tuple[LossBreakdown, ModelParams]:
    """Batch loss ``ce + lambda_t * (lg + lc)`` with gradients for every parameter.

    ``Q`` is a ``(C, d)`` matrix and ``P`` a ``(N, C, d)`` tensor; either may be
    ``None`` to drop that term. The classifier receives gradient from the
    cross-entropy only. ``grads`` is zeroed and filled if given.
    """
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise ValueError("empty batch")
    _check_labels(y, model.num_classes)
    if grads is None:
        grads = model.zeros_like()
    else:
        for t in grads.tensors():
            t[...] = 0.0

    R, cache = encoder_forward(model, X)
    logits = classifier_forward(model, R)
    ce, d_logits = _batch_ce(logits, y)
    d_R = classifier_backward(model, R, d_logits, grads)

    B = len(y)
    lg = lc = 0.0
    if Q is not None:
        losses, dR_g = _contrastive_batch(R, y, np.asarray(Q), tau)
        lg = float(losses.mean())
        if lambda_t != 0.0:
            d_R = d_R + (lambda_t / B) * dR_g
    if P is not None:
        losses, dR_c = _contrastive_batch(R, y, np.asarray(P), tau)
        lc = float(losses.mean())
        if lambda_t != 0.0:
            d_R = d_R + (lambda_t / B) * dR_c
    encoder_backward(model, cache, d_R, grads)
    total = ce + lambda_t * (lg + lc)
    return LossBreakdown(ce, lg, lc, float(lambda_t), total), grads


def evaluate_objective(
    X: np.ndarray,
    y: np.ndarray,
    model: ModelParams,
    Q: np.ndarray | None,
    P: np.ndarray | None,
    tau: float,
    lambda_t: float,
) -> LossBreakdown:
    """Loss values only (no backward pass)."""
    y = np.asarray(y, dtype=np.int64)
    R, _ = encoder_forward(model, X)
    ce, _ = _batch_ce(classifier_forward(model, R), y)
    lg = float(_contrastive_batch(R, y, np.asarray(Q), tau)[0].mean()) if Q is not None else 0.0
    lc = float(_contrastive_batch(R, y, np.asarray(P), tau)[0].mean()) if P is not None else 0.0
    return LossBreakdown(ce, lg, lc, float(lambda_t), ce + lambda_t * (lg + lc))
