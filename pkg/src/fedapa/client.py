"""One client's local round and its evaluation on the local test split."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ClientDataset
from .losses import LossBreakdown, WarmupSchedule, evaluate_objective, total_loss, warmup_lambda
from .metrics import accuracy, macro_f1, mae
from .model import ModelParams, OptimizerState, classifier_forward, embed, sgd_step
from .numerics import derive_seed, make_rng
from .prototypes import PersonalizedPrototypes, PrototypeSet, StackedPrototypes, compute_local_prototypes


class EmptyTestSet(ValueError):
    pass


@dataclass
class ClientState:
    client_id: int
    model: ModelParams
    optimizer: OptimizerState
    dataset: ClientDataset
    sched: WarmupSchedule = field(default_factory=WarmupSchedule)
    batch_size: int = 16
    local_epochs: int = 1
    tau: float = 0.5
    seed: int = 0
    static_lambda: float | None = None

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ValueError("batch_size and local_epochs must be >= 1")

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    def lambda_at(self, t: int) -> float:
        if self.static_lambda is not None:
            return float(self.static_lambda)
        return warmup_lambda(t, self.sched)


@dataclass
class RoundClientStats:
    client_id: int
    t: int
    lambda_t: float
    steps: int
    grad_norm_sq: list[float]  # per step, all parameters
    enc_grad_norm: list[float]  # per step, encoder parameters only
    enc_step_norm: list[float]  # per step, encoder velocity (the applied direction)
    start_loss: LossBreakdown  # full-train objective at the round's first iterate
    mean_loss: LossBreakdown  # average of the per-batch breakdowns
    enc_displacement: float  # ||w_enc(end) - w_enc(start)||

    @property
    def grad_norm_sq_sum(self) -> float:
        return float(sum(self.grad_norm_sq))


def _mean_breakdown(items: list[LossBreakdown]) -> LossBreakdown:
    n = len(items)
    ce = sum(b.ce for b in items) / n
    lg = sum(b.lg for b in items) / n
    lc = sum(b.lc for b in items) / n
    lam = items[0].lambda_t
    return LossBreakdown(ce, lg, lc, lam, ce + lam * (lg + lc))


def client_update(
    state: ClientState,
    Q_prev: PersonalizedPrototypes | None,
    P_prev: StackedPrototypes | None,
    t: int,
) -> tuple[PrototypeSet, RoundClientStats]:
    """Run ``local_epochs`` passes of mini-batch SGD on the hybrid loss, then
    rebuild the local prototypes with the final encoder.

    Prototype inputs are copied into dense arrays at entry and stay fixed for
    the round. Passing ``None`` drops the corresponding loss term.
    """
    if t < 1:
        raise ValueError("round index must be >= 1")
    C = state.num_classes
    Qm = Q_prev.matrix(C).copy() if Q_prev is not None else None
    Pm = P_prev.tensor(C).copy() if P_prev is not None else None
    lam = state.lambda_at(t)
    ds = state.dataset
    model = state.model

    start = evaluate_objective(ds.X_train, ds.y_train, model, Qm, Pm, state.tau, lam)
    w_enc0 = model.flat(encoder_only=True)

    rng = make_rng(derive_seed(state.seed, state.client_id, t))
    grads = model.zeros_like()
    n = ds.n_train
    gsq, genc, venc, breakdowns = [], [], [], []
    n_enc = len(model.encoder)
    for _ in range(state.local_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, state.batch_size):
            idx = order[lo : lo + state.batch_size]
            lb, grads = total_loss(ds.X_train[idx], ds.y_train[idx], model, Qm, Pm, state.tau, lam, grads)
            ts = grads.tensors()
            sq = [float(np.vdot(g, g)) for g in ts]
            gsq.append(sum(sq))
            genc.append(float(np.sqrt(sum(sq[: 2 * n_enc]))))
            sgd_step(model, grads, state.optimizer)
            vs = state.optimizer.velocity.encoder_tensors()
            venc.append(float(np.sqrt(sum(float(np.vdot(v, v)) for v in vs))))
            breakdowns.append(lb)

    protos = compute_local_prototypes(model, ds)
    disp = float(np.linalg.norm(model.flat(encoder_only=True) - w_enc0))
    stats = RoundClientStats(
        state.client_id, t, lam, len(gsq), gsq, genc, venc, start, _mean_breakdown(breakdowns), disp
    )
    return protos, stats


def predict(model: ModelParams, X: np.ndarray) -> np.ndarray:
    """Argmax of the logits; ties go to the lowest class index."""
    return np.argmax(classifier_forward(model, embed(model, X)), axis=1)


def evaluate(state: ClientState) -> tuple[float, float, float]:
    """(accuracy, macro F1, MAE) on the client's test split."""
    ds = state.dataset
    if len(ds.y_test) == 0:
        raise EmptyTestSet(f"client {state.client_id} has no test samples")
    pred = predict(state.model, ds.X_test)
    return accuracy(pred, ds.y_test), macro_f1(pred, ds.y_test), mae(pred, ds.y_test)
