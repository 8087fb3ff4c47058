import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apa_oracle import as_stack, oracle_pad, oracle_personalized, random_uploads
from fedapa.numerics import NonPositiveTemperature, make_rng
from fedapa.prototypes import PrototypeSet, StackedPrototypes
from fedapa.server import (
    ClassAbsentAtClient,
    ClassUncoveredGlobally,
    MissingUpload,
    ServerError,
    ServerState,
    adaptive_weights,
    agg_lipschitz_reference,
    aggregate,
    aggregate_personalized,
    eligible_clients,
    empirical_agg_lipschitz,
    init_prototypes,
    pad_missing,
    pairwise_class_similarity,
    server_round,
)


def test_init_prototypes():
    P, Q = init_prototypes(6, 21, 256, make_rng(0))
    assert len(P.sets) == 6 and all(len(s.entries) == 21 for s in P.sets)
    for s in P.sets:
        for v in s.entries.values():
            assert abs(np.linalg.norm(v) - 1) <= 1e-12
    for i in range(6):
        for c in range(21):
            np.testing.assert_array_equal(Q[i].entries[c], P.sets[i].entries[c])
    P2, _ = init_prototypes(6, 21, 256, make_rng(0))
    assert P2.tensor(21).tobytes() == P.tensor(21).tobytes()


def test_similarity_examples():
    v = np.array([0.3, 0.4])
    P = as_stack([{0: v}, {0: v.copy()}, {1: v}])
    s = pairwise_class_similarity(P, 0, 0)
    assert s == {0: 1.0, 1: 1.0}
    with pytest.raises(ClassAbsentAtClient):
        pairwise_class_similarity(P, 2, 0)


def test_similarity_matches_pairwise_oracle():
    rng = make_rng(5)
    local = [{0: rng.standard_normal(4)} for _ in range(3)]
    s = pairwise_class_similarity(as_stack(local), 1, 0)
    for j in range(3):
        a, b = local[1][0], local[j][0]
        expect = 1.0 if j == 1 else a @ b / np.linalg.norm(a) / np.linalg.norm(b)
        assert s[j] == pytest.approx(expect, abs=1e-15)


def test_self_is_eligible():
    P = as_stack([{0: np.ones(2)}, {1: np.ones(2)}])
    assert eligible_clients(P, 0, 0) == [0]
    assert 1 in eligible_clients(P, 1, 1)


def test_weights_examples():
    assert adaptive_weights({0: 0.2, 1: 0.2}, 0.5) == {0: 0.5, 1: 0.5}
    w = adaptive_weights({0: 1.0, 1: 0.0}, 0.5)
    assert w[0] == pytest.approx(0.8808, abs=1e-4) and w[1] == pytest.approx(0.1192, abs=1e-4)
    assert adaptive_weights({3: 0.7}, 0.5) == {3: 1.0}
    with pytest.raises(NonPositiveTemperature):
        adaptive_weights({0: 1.0}, -1.0)


def test_two_orthogonal_clients():
    e0, e1 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    P = as_stack([{0: e0}, {0: e1}])
    q = aggregate_personalized(P, 0, 0.5).entries[0]
    a = np.exp(2) / (np.exp(2) + 1)
    np.testing.assert_allclose(q, a * e0 + (1 - a) * e1, atol=1e-15)
    np.testing.assert_allclose(q, [0.8808, 0.1192], atol=1e-4)


def test_identical_prototypes_fixed_point():
    v = np.array([0.1, -0.5, 0.2])
    P = as_stack([{0: v}, {0: v}, {0: v}])
    np.testing.assert_allclose(aggregate_personalized(P, 1, 0.5).entries[0], v, atol=1e-15)


def test_padding_examples():
    P = as_stack([{0: np.array([1.0, 0.0])}, {0: np.array([0.0, 1.0])}, {1: np.ones(2)}])
    Pp, Qp = pad_missing(P, {2: aggregate_personalized(P, 2, 0.5)}, 2)
    np.testing.assert_allclose(Pp.sets[2].entries[0], [0.5, 0.5])
    np.testing.assert_allclose(Qp[2].entries[0], [0.5, 0.5])
    assert Pp.sets[2].padded == {0}
    np.testing.assert_array_equal(Pp.sets[0].entries[1], np.ones(2))  # single donor
    assert P.sets[2].padded == set()  # inputs untouched


def test_padding_uncovered_class():
    P = as_stack([{0: np.ones(2)}])
    with pytest.raises(ClassUncoveredGlobally):
        pad_missing(P, {}, 2)


def test_sample_weighted_padding():
    P = StackedPrototypes(
        [
            PrototypeSet(0, {0: np.array([1.0, 0.0])}, counts={0: 3}),
            PrototypeSet(1, {0: np.array([0.0, 1.0])}, counts={0: 1}),
            PrototypeSet(2, {1: np.ones(2)}, counts={1: 2}),
        ]
    )
    Pp, _ = pad_missing(P, {}, 2, padding="sample_weighted")
    np.testing.assert_allclose(Pp.sets[2].entries[0], [0.75, 0.25])
    with pytest.raises(ServerError):
        pad_missing(P, {}, 2, padding="median")


def test_server_round_single_client():
    v = {0: np.array([0.2, 0.3]), 1: np.array([-0.1, 0.4])}
    st0 = ServerState(2)
    st1, _ = server_round(st0, [PrototypeSet(0, v)])
    for c in (0, 1):
        np.testing.assert_array_equal(st1.Q[0].entries[c], v[c])
    assert st1.t == 1


def test_server_round_uniform_mean():
    a, b = np.array([1.0, 0.0]), np.array([0.0, 0.5])
    st1, _ = server_round(ServerState(1, mode="uniform"), [PrototypeSet(0, {0: a}), PrototypeSet(1, {0: b})])
    for i in (0, 1):
        np.testing.assert_allclose(st1.Q[i].entries[0], (a + b) / 2, atol=1e-15)


def test_server_round_matches_oracle():
    rng = make_rng(11)
    local = random_uploads(rng, 3, 4, 5)
    st1, log = server_round(ServerState(4, tau=0.5), [PrototypeSet(i, s) for i, s in enumerate(local)])
    Q, alphas = oracle_personalized(local, 0.5)
    fill = oracle_pad(local, 4)
    for i in range(3):
        for c in range(4):
            expect = Q[i][c] if c in local[i] else fill[c]
            np.testing.assert_allclose(st1.Q[i].entries[c], expect, atol=1e-13)
            if c not in local[i]:
                np.testing.assert_allclose(st1.P.sets[i].entries[c], fill[c], atol=1e-13)
        for c, row in alphas[i].items():
            for j, a in row.items():
                assert log.weights[i][c][j] == pytest.approx(a, abs=1e-13)
    for s in st1.P.sets:
        assert sorted(s.entries) == [0, 1, 2, 3]


def test_server_round_missing_upload():
    P, Q = init_prototypes(3, 2, 4, make_rng(0))
    with pytest.raises(MissingUpload):
        server_round(ServerState(2, t=0, P=P, Q=Q), [P.sets[0], P.sets[1]])


def test_server_state_validation():
    with pytest.raises(ServerError):
        ServerState(2, mode="median")
    with pytest.raises(NonPositiveTemperature):
        ServerState(2, tau=0.0)


def test_zero_prototype_is_treated_as_absent():
    ups = [PrototypeSet(0, {0: np.zeros(2), 1: np.ones(2) * 0.5}), PrototypeSet(1, {0: np.array([0.6, 0.0])})]
    st1, _ = server_round(ServerState(2), ups)
    assert 0 in st1.P.sets[0].padded
    np.testing.assert_array_equal(st1.Q[0].entries[0], [0.6, 0.0])


def test_exclude_self_switch():
    e0, e1 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    P = as_stack([{0: e0}, {0: e1}])
    q = aggregate_personalized(P, 0, 0.5, exclude_self=True).entries[0]
    np.testing.assert_array_equal(q, e1)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**9), st.integers(1, 6), st.integers(1, 6), st.floats(0.05, 5.0))
def test_aggregation_properties(seed, n, c, tau):
    rng = make_rng(seed)
    local = random_uploads(rng, n, c, 4)
    P = as_stack(local)
    log = {}
    Pp, Q = aggregate(P, c, tau, weights_log=log)
    for i in range(n):
        for cls, row in log[i].items():
            assert abs(sum(row.values()) - 1.0) <= 1e-10
            assert all(0 < a <= 1 for a in row.values())
        assert sorted(Q[i].entries) == list(range(c))
        assert sorted(Pp.sets[i].entries) == list(range(c))
        for cls, q in Q[i].entries.items():
            bound = max(np.linalg.norm(s[cls]) for s in local if cls in s)
            assert np.linalg.norm(q) <= bound + 1e-12

    perm = rng.permutation(n)
    moved = as_stack([local[perm[k]] for k in range(n)])  # new id k holds old client perm[k]
    Pm, Qm = aggregate(moved, c, tau)
    for k in range(n):
        for cls in range(c):
            assert Qm[k].entries[cls].tobytes() == Q[perm[k]].entries[cls].tobytes()
            assert Pm.sets[k].entries[cls].tobytes() == Pp.sets[perm[k]].entries[cls].tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**9), st.integers(1, 5), st.integers(1, 5))
def test_identical_uploads_apa_equals_uniform(seed, n, c):
    rng = make_rng(seed)
    local = random_uploads(rng, n, c, 3, identical=True)
    _, Qa = aggregate(as_stack(local), c, 0.5, mode="apa")
    _, Qu = aggregate(as_stack(local), c, 0.5, mode="uniform")
    for i in range(n):
        for cls in range(c):
            common = next(s[cls] for s in local if cls in s)
            np.testing.assert_allclose(Qa[i].entries[cls], common, atol=1e-12)
            np.testing.assert_allclose(Qu[i].entries[cls], common, atol=1e-12)


def test_agg_lipschitz_well_posed():
    v = np.array([0.5, 0.5, 0.0])
    P = as_stack([{0: v, 1: v}, {0: v, 1: v}])
    r = empirical_agg_lipschitz(P, 1e-6, 5, 0.5, make_rng(0), 2)
    assert np.isfinite(r) and r >= 0


def test_agg_lipschitz_large_temperature_limit():
    rng = make_rng(9)
    P = as_stack(random_uploads(rng, 4, 3, 6, min_cover=3))
    a = empirical_agg_lipschitz(P, 1e-3, 5, 1e3, make_rng(1), 3)
    b = empirical_agg_lipschitz(P, 1e-3, 5, 1e6, make_rng(1), 3)
    assert abs(a - b) <= 0.05 * b


def test_agg_lipschitz_reference_line():
    assert agg_lipschitz_reference(4, 0.5) == 2.0
