"""Independent straight-line aggregation used as a test oracle.

Written from the formulas with plain Python loops and math functions so that
it shares no code with the package.
"""

import math

import numpy as np

from fedapa.numerics import make_rng
from fedapa.prototypes import PrototypeSet, StackedPrototypes


def oracle_personalized(local, tau):
    """``local[i]`` maps class -> vector. Returns ``(Q, alphas)`` per client."""
    Q, alphas = [], []
    for i, own in enumerate(local):
        qi, ai = {}, {}
        for c, p in own.items():
            js = [j for j in range(len(local)) if c in local[j]]
            sims = []
            for j in js:
                q = local[j][c]
                dot = sum(float(x) * float(z) for x, z in zip(p, q))
                na = math.sqrt(sum(float(x) ** 2 for x in p))
                nb = math.sqrt(sum(float(z) ** 2 for z in q))
                sims.append(1.0 if j == i else max(-1.0, min(1.0, dot / (na * nb))))
            ex = [math.exp(s / tau) for s in sims]
            tot = sum(ex)
            w = {j: e / tot for j, e in zip(js, ex)}
            qi[c] = sum(w[j] * np.asarray(local[j][c]) for j in js)
            ai[c] = w
        Q.append(qi)
        alphas.append(ai)
    return Q, alphas


def oracle_pad(local, num_classes):
    fill = {}
    for c in range(num_classes):
        donors = [s[c] for s in local if c in s]
        if donors:
            fill[c] = sum(np.asarray(d) for d in donors) / len(donors)
    return fill


def random_uploads(rng, num_clients, num_classes, d, min_cover=1, identical=False):
    """Random unit-bounded uploads where every class has at least one holder.

    With ``identical`` every client uploads the same complete set.
    """
    base = rng.standard_normal((num_classes, d))
    if identical:
        base /= np.maximum(1.0, np.linalg.norm(base, axis=1, keepdims=True))
        return [{c: base[c].copy() for c in range(num_classes)} for _ in range(num_clients)]
    sets = []
    for i in range(num_clients):
        k = int(rng.integers(min_cover, num_classes + 1))
        cls = sorted(rng.choice(num_classes, size=k, replace=False).tolist())
        v = rng.standard_normal((num_classes, d))
        v = v / np.maximum(1.0, np.linalg.norm(v, axis=1, keepdims=True)) * rng.uniform(0.2, 1.0)
        sets.append({c: v[c].copy() for c in cls})
    for c in range(num_classes):
        if not any(c in s for s in sets):
            v = rng.standard_normal(d)
            sets[int(rng.integers(num_clients))][c] = v / max(1.0, np.linalg.norm(v))
    return sets


def as_stack(local):
    return StackedPrototypes([PrototypeSet(i, {c: v.copy() for c, v in s.items()}) for i, s in enumerate(local)])


__all__ = ["oracle_personalized", "oracle_pad", "random_uploads", "as_stack", "make_rng"]
