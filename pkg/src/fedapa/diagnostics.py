"""Empirical instrumentation of the convergence analysis.

The analysis treats several constants as assumptions (gradient bound G,
variance sigma^2, smoothness L, encoder Lipschitz constant, aggregation
Lipschitz constant, regularizer sensitivity). Here each is replaced by a
plug-in estimate measured on the run, and the bounds are then checked against
the observed trajectory. A passing check says the run is consistent with the
bound under those estimates; it proves nothing.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .losses import evaluate_objective, total_loss
from .model import ModelParams, embed


class InsufficientTrace(ValueError):
    pass


@dataclass
class TraceRecord:
    """One (round, client) entry. Norms are of encoder parameters unless noted."""

    t: int
    client: int
    lambda_t: float
    steps: int
    G_hat_sq: float  # sum over the round of squared full-parameter gradient norms
    start_loss: float  # objective on the full train split at the round's first iterate
    enc_grad_max: float
    enc_step_max: float
    enc_displacement: float
    local_classes: int
    lw_ratio: float = 0.0  # largest observed ||dr|| / ||dw_enc|| this round
    sigma_sq: float | None = None
    smoothness: float | None = None
    c_phi: float | None = None
    delta_P: float | None = None  # round-level, repeated on every client's record
    L_agg: float | None = None  # round-level


@dataclass
class ConvergenceTrace:
    records: list[TraceRecord] = field(default_factory=list)
    lr: float = 1e-2
    T_warm: int = 50

    def add(self, rec: TraceRecord) -> None:
        self.records.append(rec)

    @property
    def rounds(self) -> list[int]:
        return sorted({r.t for r in self.records})

    @property
    def clients(self) -> list[int]:
        return sorted({r.client for r in self.records})

    def by_client(self, i: int) -> list[TraceRecord]:
        return sorted((r for r in self.records if r.client == i), key=lambda r: r.t)

    def by_round(self, t: int) -> list[TraceRecord]:
        return sorted((r for r in self.records if r.t == t), key=lambda r: r.client)

    def write_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path, lr: float = 1e-2, T_warm: int = 50) -> ConvergenceTrace:
        tr = cls(lr=lr, T_warm=T_warm)
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    tr.add(TraceRecord(**json.loads(line)))
        return tr


# ---------------------------------------------------------------------------
# probes


def encoder_lipschitz_probe(
    model: ModelParams,
    X: np.ndarray,
    rng: np.random.Generator,
    trials: int = 1,
    scale: float | None = None,
    before: tuple[np.ndarray, np.ndarray] | None = None,
) -> float:
    """Largest ``max_h ||r_w'(h) - r_w(h)|| / ||w' - w||`` over sampled moves.

    Random directions are drawn around the current encoder weights with norm
    ``scale``. If ``before = (w_enc_old, R_old)`` is given, the realized move
    from those weights to the current ones is included as one more sample.
    """
    w = model.flat(encoder_only=True)
    R = embed(model, X)
    best = 0.0
    if before is not None:
        w_old, R_old = before
        dw = float(np.linalg.norm(w - w_old))
        if dw > 0:
            best = float(np.sqrt(np.max(np.sum((R - R_old) ** 2, axis=1)))) / dw
        if scale is None:
            scale = dw
    if not scale:
        scale = 1e-3
    for _ in range(trials):
        d = rng.standard_normal(w.size)
        d *= scale / np.linalg.norm(d)
        model.set_flat(w + d, encoder_only=True)
        Rp = embed(model, X)
        best = max(best, float(np.sqrt(np.max(np.sum((Rp - R) ** 2, axis=1)))) / scale)
    model.set_flat(w, encoder_only=True)
    return best


def _full_grad(model, X, y, Q, P, tau, lam) -> np.ndarray:
    return total_loss(X, y, model, Q, P, tau, lam)[1].flat()


def smoothness_probe(
    model: ModelParams,
    X: np.ndarray,
    y: np.ndarray,
    Q: np.ndarray | None,
    P: np.ndarray | None,
    tau: float,
    lam: float,
    rng: np.random.Generator,
    iters: int = 15,
    eps: float = 1e-4,
) -> float:
    """Power iteration on finite-difference Hessian-vector products of the
    full-batch objective; returns the dominant |eigenvalue| estimate."""
    w = model.flat()
    v = rng.standard_normal(w.size)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        model.set_flat(w + eps * v)
        gp = _full_grad(model, X, y, Q, P, tau, lam)
        model.set_flat(w - eps * v)
        gm = _full_grad(model, X, y, Q, P, tau, lam)
        hv = (gp - gm) / (2 * eps)
        est = float(np.linalg.norm(hv))
        if est == 0.0:
            break
        v = hv / est
    model.set_flat(w)
    return est


def variance_probe(
    model: ModelParams,
    X: np.ndarray,
    y: np.ndarray,
    Q: np.ndarray | None,
    P: np.ndarray | None,
    tau: float,
    lam: float,
    batch_size: int,
    rng: np.random.Generator,
) -> float:
    """Mean ``||g_batch - grad||^2`` over one shuffled pass at fixed weights."""
    full = _full_grad(model, X, y, Q, P, tau, lam)
    order = rng.permutation(len(y))
    devs = []
    for lo in range(0, len(y), batch_size):
        idx = order[lo : lo + batch_size]
        g = _full_grad(model, X[idx], y[idx], Q, P, tau, lam)
        devs.append(float(np.sum((g - full) ** 2)))
    return float(np.mean(devs))


def regularizer_sensitivity(
    model: ModelParams,
    X: np.ndarray,
    y: np.ndarray,
    Q_new: np.ndarray,
    P_new: np.ndarray | None,
    Q_old: np.ndarray,
    P_old: np.ndarray | None,
    tau: float,
) -> float:
    """``|Phi(w; new) - Phi(w; old)| / (||dQ||_F + ||dP||_F)`` at fixed weights."""
    def phi(Q, P):
        lb = evaluate_objective(X, y, model, Q, P, tau, 1.0)
        return lb.lg + lb.lc

    denom = float(np.linalg.norm(Q_new - Q_old))
    if P_new is not None and P_old is not None:
        denom += float(np.linalg.norm(P_new - P_old))
    if denom == 0.0:
        return 0.0
    return abs(phi(Q_new, P_new) - phi(Q_old, P_old)) / denom


# ---------------------------------------------------------------------------
# bound checks


@dataclass
class Estimates:
    """Plug-in constants; each is the maximum observed over the trace."""

    G: float
    lw: float
    sigma_sq: float
    smoothness: float
    c_phi: float
    L_agg: float
    sum_classes: int
    steps: int

    @property
    def k_glob(self) -> float:
        return self.lw * math.sqrt(self.sum_classes)

    @property
    def gamma(self) -> float:
        return self.c_phi * (1.0 + self.L_agg)


def _max_or_zero(vals) -> float:
    vals = [v for v in vals if v is not None]
    return float(max(vals)) if vals else 0.0


def estimate_constants(trace: ConvergenceTrace, t_min: int = 1) -> Estimates:
    recs = [r for r in trace.records if r.t >= t_min]
    if not recs:
        raise InsufficientTrace("no trace records")
    last_t = max(r.t for r in recs)
    return Estimates(
        G=_max_or_zero(max(r.enc_grad_max, r.enc_step_max) for r in recs),
        lw=_max_or_zero(r.lw_ratio for r in recs),
        sigma_sq=_max_or_zero(r.sigma_sq for r in recs),
        smoothness=_max_or_zero(r.smoothness for r in recs),
        c_phi=_max_or_zero(r.c_phi for r in recs),
        L_agg=_max_or_zero(r.L_agg for r in recs),
        sum_classes=sum(r.local_classes for r in recs if r.t == last_t),
        steps=max(r.steps for r in recs),
    )


@dataclass
class Lemma2Report:
    bound: float
    rounds: list[int]
    movement: list[float]
    slack_factor: float

    @property
    def ratios(self) -> list[float]:
        return [m / self.bound if self.bound > 0 else math.inf for m in self.movement]

    @property
    def passed(self) -> bool:
        return all(m <= self.slack_factor * self.bound for m in self.movement)


def prototype_movement_check(trace: ConvergenceTrace, slack: float = 0.05) -> Lemma2Report:
    """Compare each round's ``||dP_t||_F`` with ``k_glob * eta * S * G``.

    Round 1 is skipped: its predecessor is the random initial stack, not an
    encoder output.
    """
    est = estimate_constants(trace)
    bound = est.k_glob * trace.lr * est.steps * est.G
    rounds, moves = [], []
    for t in trace.rounds:
        recs = trace.by_round(t)
        if t < 2 or recs[0].delta_P is None:
            continue
        rounds.append(t)
        moves.append(recs[0].delta_P)
    if not rounds:
        raise InsufficientTrace("no rounds with prototype movement recorded")
    return Lemma2Report(bound, rounds, moves, 1.0 + slack)


def descent_tolerance(est: Estimates, lr: float, lam: float) -> float:
    """Variance term plus prototype-refresh term of the one-round deviation bound."""
    S = est.steps
    return 0.5 * est.smoothness * lr**2 * S * est.sigma_sq + lam * est.gamma * est.k_glob * lr * S * est.G


@dataclass
class DescentReport:
    window: int
    tolerance: float
    per_client: dict[int, dict]

    @property
    def pass_fraction(self) -> float:
        ok = sum(c["ok"] for c in self.per_client.values())
        tot = sum(c["windows"] for c in self.per_client.values())
        return ok / tot if tot else 1.0

    @property
    def passed(self) -> bool:
        return all(c["ok"] == c["windows"] for c in self.per_client.values())

    def client_fraction(self, i: int) -> float:
        c = self.per_client[i]
        return c["ok"] / c["windows"] if c["windows"] else 1.0


def _moving_average(x: list[float], w: int) -> np.ndarray:
    # Direct window means: identical windows give identical averages, which a
    # cumulative-sum difference does not guarantee.
    a = np.asarray(x, dtype=np.float64)
    return np.lib.stride_tricks.sliding_window_view(a, w).mean(axis=1)


def descent_check(
    trace: ConvergenceTrace, window: int = 10, tolerance: float | None = None
) -> DescentReport:
    """Windowed moving averages of each client's round-start loss after warm-up
    must not increase by more than ``tolerance`` from one window to the next.

    With ``tolerance=None`` the bound's error terms are evaluated with
    plug-in estimates from the post-warm-up part of the trace.
    """
    t0 = trace.T_warm
    post = [t for t in trace.rounds if t >= t0]
    if len(post) < window + 1:
        raise InsufficientTrace(
            f"need at least {window + 1} rounds from T_warm={t0}, have {len(post)}"
        )
    if tolerance is None:
        est = estimate_constants(trace, t_min=t0)
        lam = max(r.lambda_t for r in trace.records if r.t >= t0)
        tolerance = descent_tolerance(est, trace.lr, lam)
    per_client = {}
    for i in trace.clients:
        losses = [r.start_loss for r in trace.by_client(i) if r.t >= t0]
        ma = _moving_average(losses, window)
        inc = np.diff(ma)
        ok = int(np.sum(inc <= tolerance))
        per_client[i] = {
            "windows": int(inc.size),
            "ok": ok,
            "max_increase": float(inc.max()) if inc.size else 0.0,
            "slack": float(tolerance - inc.max()) if inc.size else float(tolerance),
        }
    return DescentReport(window, float(tolerance), per_client)


@dataclass
class StationaritySummary:
    K: int
    mean_grad_sq: dict[int, float]
    gap_term: dict[int, float]
    variance_term: float
    coupling_term: float

    def bound(self, i: int) -> float:
        return self.gap_term[i] + self.variance_term + self.coupling_term


def stationarity_summary(
    trace: ConvergenceTrace, K: int | None = None, loss_floor: float = 0.0
) -> StationaritySummary:
    """Average squared gradient norm per local step after warm-up, with the
    three terms of the averaged-gradient bound evaluated from the trace.

    ``K`` defaults to all post-warm-up steps; when given, the most recent ``K``
    steps' worth of rounds are used. ``loss_floor`` stands in for the uniform
    lower bound of the objective (0 for these nonnegative losses).
    """
    t0 = trace.T_warm
    post = [r for r in trace.records if r.t >= t0]
    if not post:
        raise InsufficientTrace(f"no rounds at or after T_warm={t0}")
    est = estimate_constants(trace, t_min=t0)
    lam = max(r.lambda_t for r in post)
    lr = trace.lr
    mean_sq, gap = {}, {}
    K_used = 0
    for i in trace.clients:
        recs = [r for r in trace.by_client(i) if r.t >= t0]
        if K is not None:
            total_steps = sum(r.steps for r in recs)
            if total_steps < K:
                raise InsufficientTrace(f"client {i} has {total_steps} post-warm-up steps < K={K}")
            kept, acc = [], 0
            for r in reversed(recs):
                if acc >= K:
                    break
                kept.append(r)
                acc += r.steps
            recs = list(reversed(kept))
        k_i = sum(r.steps for r in recs)
        K_used = max(K_used, k_i)
        mean_sq[i] = sum(r.G_hat_sq for r in recs) / k_i if k_i else 0.0
        delta = recs[0].start_loss - loss_floor
        gap[i] = 2.0 * delta / (k_i * lr) if k_i else math.inf
    return StationaritySummary(
        K_used,
        mean_sq,
        gap,
        est.smoothness * lr * est.sigma_sq,
        2.0 * lam * est.gamma * est.k_glob * est.G,
        )


def schedule_change_vanishes(trace: ConvergenceTrace) -> bool:
    """After warm-up the coefficient must not change from round to round."""
    for i in trace.clients:
        lams = [r.lambda_t for r in trace.by_client(i) if r.t >= trace.T_warm]
        if any(b != a for a, b in zip(lams, lams[1:])):
            return False
    return True
