"""Parameter-server side of a round: similarity weighting, aggregation, padding.

Sums over clients are accumulated in an order fixed by the summands' values
(similarity, then raw vector bytes) rather than by client id, so relabeling
clients permutes the output bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import NonPositiveTemperature, cosine_similarity, softmax_temperature
from .prototypes import PersonalizedPrototypes, PrototypeSet, StackedPrototypes

MODES = ("apa", "uniform")
PADDING_MODES = ("mean", "sample_weighted")


class ServerError(ValueError):
    pass


class ClassAbsentAtClient(ServerError):
    pass


class ClassUncoveredGlobally(ServerError):
    pass


class MissingUpload(ServerError):
    pass


def _vec_key(v: np.ndarray) -> bytes:
    return np.ascontiguousarray(v, dtype=np.float64).tobytes()


def _ordered_sum(weights: list[float], vecs: list[np.ndarray]) -> np.ndarray:
    """``sum_k weights[k] * vecs[k]`` in a label-independent order."""
    order = sorted(range(len(vecs)), key=lambda k: (weights[k], _vec_key(vecs[k])))
    acc = np.zeros_like(vecs[0], dtype=np.float64)
    for k in order:
        acc = acc + weights[k] * vecs[k]
    return acc


def _ordered_mean(vecs: list[np.ndarray]) -> np.ndarray:
    order = sorted(range(len(vecs)), key=lambda k: _vec_key(vecs[k]))
    acc = np.zeros_like(vecs[0], dtype=np.float64)
    for k in order:
        acc = acc + vecs[k]
    return acc / len(vecs)


def init_prototypes(
    num_clients: int, num_classes: int, d_feat: int, rng: np.random.Generator
) -> tuple[StackedPrototypes, dict[int, PersonalizedPrototypes]]:
    """Random unit vectors for every (client, class); Q_0 copies P_0."""
    sets, Q = [], {}
    for i in range(num_clients):
        v = rng.standard_normal((num_classes, d_feat))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        entries = {c: v[c] for c in range(num_classes)}
        sets.append(PrototypeSet(i, entries))
        Q[i] = PersonalizedPrototypes(i, {c: v[c].copy() for c in range(num_classes)})
    return StackedPrototypes(sets, 0), Q


def eligible_clients(P: StackedPrototypes, i: int, c: int, exclude_self: bool = False) -> list[int]:
    """J_c(i): clients holding a locally computed prototype for class c."""
    if c not in P.sets[i].local_classes:
        raise ClassAbsentAtClient(f"class {c} is not local to client {i}")
    js = [j for j, s in enumerate(P.sets) if c in s.entries and c not in s.padded]
    if exclude_self and len(js) > 1:
        js.remove(i)
    return js


def pairwise_class_similarity(
    P: StackedPrototypes, i: int, c: int, exclude_self: bool = False
) -> dict[int, float]:
    """Cosine similarity of client i's class-c prototype to each eligible client's."""
    js = eligible_clients(P, i, c, exclude_self)
    pi = P.sets[i].entries[c]
    return {j: 1.0 if j == i else cosine_similarity(pi, P.sets[j].entries[c]) for j in js}


def adaptive_weights(similarities: dict[int, float], tau: float) -> dict[int, float]:
    """Temperature softmax over the eligible clients' similarities."""
    if not tau > 0:
        raise NonPositiveTemperature(f"tau must be > 0, got {tau}")
    js = sorted(similarities, key=lambda j: similarities[j])
    w = softmax_temperature([similarities[j] for j in js], tau)
    return {j: float(wk) for j, wk in zip(js, w)}


def aggregate_personalized(
    P: StackedPrototypes,
    i: int,
    tau: float,
    exclude_self: bool = False,
    weights_log: dict | None = None,
) -> PersonalizedPrototypes:
    """Similarity-weighted prototypes for client i over its local classes."""
    entries = {}
    for c in P.sets[i].local_classes:
        alpha = adaptive_weights(pairwise_class_similarity(P, i, c, exclude_self), tau)
        js = list(alpha)
        entries[c] = _ordered_sum([alpha[j] for j in js], [P.sets[j].entries[c] for j in js])
        if weights_log is not None:
            weights_log[c] = {j: alpha[j] for j in sorted(js)}
    return PersonalizedPrototypes(P.sets[i].client_id, entries)


def uniform_personalized(P: StackedPrototypes, i: int, num_classes: int) -> PersonalizedPrototypes:
    """Plain mean over every client holding the class (same for all clients)."""
    entries = {}
    for c in range(num_classes):
        donors = [s.entries[c] for s in P.sets if c in s.entries and c not in s.padded]
        if not donors:
            raise ClassUncoveredGlobally(f"no client holds class {c}")
        entries[c] = _ordered_mean(donors)
    return PersonalizedPrototypes(P.sets[i].client_id, entries)


def pad_missing(
    P: StackedPrototypes,
    Q: dict[int, PersonalizedPrototypes],
    num_classes: int,
    padding: str = "mean",
) -> tuple[StackedPrototypes, dict[int, PersonalizedPrototypes]]:
    """Fill classes a client lacks with the mean of the donors' prototypes.

    Donors for class c are the clients that computed c locally. ``padding``
    selects the plain mean or a mean weighted by the donors' sample counts.
    Returns new objects; inputs are not modified.
    """
    if padding not in PADDING_MODES:
        raise ServerError(f"unknown padding mode {padding!r}")
    P_out = P.copy()
    Q_out = {k: q.copy() for k, q in Q.items()}
    fill: dict[int, np.ndarray] = {}
    for c in range(num_classes):
        donors = [s for s in P.sets if c in s.entries and c not in s.padded]
        needs = [k for k, s in enumerate(P.sets) if c not in s.local_classes]
        needs_q = [k for k, q in Q.items() if c not in q.entries]
        if not needs and not needs_q:
            continue
        if not donors:
            raise ClassUncoveredGlobally(f"no client holds class {c}")
        if padding == "mean":
            fill[c] = _ordered_mean([s.entries[c] for s in donors])
        else:
            counts = [float(s.counts.get(c, 1)) for s in donors]
            tot = sum(counts)
            fill[c] = _ordered_sum([n / tot for n in counts], [s.entries[c] for s in donors])
        for k in needs:
            P_out.sets[k].entries[c] = fill[c].copy()
            P_out.sets[k].padded.add(c)
        for k in needs_q:
            Q_out[k].entries[c] = fill[c].copy()
    return P_out, Q_out


@dataclass
class ServerState:
    num_classes: int
    tau: float = 0.5
    mode: str = "apa"
    exclude_self: bool = False
    padding: str = "mean"
    t: int = 0
    P: StackedPrototypes | None = None
    Q: dict[int, PersonalizedPrototypes] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ServerError(f"unknown aggregation mode {self.mode!r}")
        if not self.tau > 0:
            raise NonPositiveTemperature(f"tau must be > 0, got {self.tau}")


@dataclass
class RoundLog:
    t: int
    weights: dict[int, dict[int, dict[int, float]]]
    padded: dict[int, list[int]]
    bytes_up: list[int] = field(default_factory=list)
    bytes_down: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "weights": {
                str(i): {str(c): {str(j): a for j, a in row.items()} for c, row in w.items()}
                for i, w in self.weights.items()
            },
            "padded": {str(i): cs for i, cs in self.padded.items()},
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
        }


def _sanitize(upload: PrototypeSet) -> PrototypeSet:
    """Drop zero-norm entries; cosine similarity is undefined for them."""
    s = upload.copy()
    s.padded = set()
    for c in [c for c, v in s.entries.items() if not np.any(v)]:
        del s.entries[c]
        s.counts.pop(c, None)
    return s


def aggregate(
    P: StackedPrototypes,
    num_classes: int,
    tau: float,
    mode: str = "apa",
    exclude_self: bool = False,
    padding: str = "mean",
    weights_log: dict | None = None,
) -> tuple[StackedPrototypes, dict[int, PersonalizedPrototypes]]:
    """Map an unpadded upload stack to (padded stack, personalized sets)."""
    Q = {}
    for i in range(len(P.sets)):
        if mode == "apa":
            log_i = {} if weights_log is not None else None
            Q[i] = aggregate_personalized(P, i, tau, exclude_self, log_i)
            if weights_log is not None:
                weights_log[i] = log_i
        else:
            Q[i] = uniform_personalized(P, i, num_classes)
    return pad_missing(P, Q, num_classes, padding)


def server_round(
    state: ServerState, uploads: list[PrototypeSet]
) -> tuple[ServerState, RoundLog]:
    """Aggregate one round of uploads (one per client, ordered by client index)."""
    n_expected = len(state.P.sets) if state.P is not None else len(uploads)
    if len(uploads) != n_expected or any(u is None for u in uploads):
        raise MissingUpload(f"expected {n_expected} uploads, got {len(uploads)}")
    t = state.t + 1
    P_up = StackedPrototypes([_sanitize(u) for u in uploads], t)
    weights: dict = {}
    P_pad, Q = aggregate(
        P_up, state.num_classes, state.tau, state.mode, state.exclude_self, state.padding, weights
    )
    P_pad.round_index = t
    log = RoundLog(t, weights, {i: sorted(s.padded) for i, s in enumerate(P_pad.sets)})
    new_state = ServerState(
        state.num_classes, state.tau, state.mode, state.exclude_self, state.padding, t, P_pad, Q
    )
    return new_state, log


def empirical_agg_lipschitz(
    P: StackedPrototypes,
    perturbation_scale: float,
    trials: int,
    tau: float,
    rng: np.random.Generator,
    num_classes: int | None = None,
    mode: str = "apa",
) -> float:
    """Largest observed ``||Q(P') - Q(P)||_F / ||P' - P||_F`` over random perturbations.

    Only locally computed entries are perturbed; perturbed vectors are pulled
    back into the unit ball. Padded entries are rebuilt by the aggregation.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if num_classes is None:
        num_classes = max(max(s.entries) for s in P.sets) + 1
    base = StackedPrototypes(
        [PrototypeSet(s.client_id, {c: s.entries[c] for c in s.local_classes}, set(), dict(s.counts)) for s in P.sets]
    )
    _, Q0 = aggregate(base, num_classes, tau, mode)
    keys = [(i, c) for i, s in enumerate(base.sets) for c in s.entries]
    best = 0.0
    for _ in range(trials):
        moved = base.copy()
        dp2 = 0.0
        for i, c in keys:
            v = base.sets[i].entries[c]
            w = v + perturbation_scale * rng.standard_normal(v.shape) / np.sqrt(v.size)
            n = np.linalg.norm(w)
            if n > 1.0:
                w = w / n
            moved.sets[i].entries[c] = w
            dp2 += float(np.sum((w - v) ** 2))
        if dp2 == 0.0:
            continue
        _, Q1 = aggregate(moved, num_classes, tau, mode)
        dq2 = sum(float(np.sum((Q1[i].entries[c] - Q0[i].entries[c]) ** 2)) for i in Q0 for c in Q0[i].entries)
        best = max(best, np.sqrt(dq2 / dp2))
    return float(best)


def agg_lipschitz_reference(num_clients: int, tau: float) -> float:
    """The ``sqrt(N) / (2 tau)`` reference line reported next to the estimate."""
    return float(np.sqrt(num_clients) / (2.0 * tau))
