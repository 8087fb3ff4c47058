import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedapa.metrics import (
    REFERENCE_ARCHITECTURES,
    CostModel,
    Empty,
    LengthMismatch,
    accuracy,
    complete_round_bytes,
    fedapa_round_bytes,
    last_rounds_mean,
    macro_f1,
    mae,
    model_sharing_bytes,
    reduction_ratio,
    to_kb,
)


def test_accuracy_examples():
    assert accuracy([1, 2], [1, 2]) == 1.0
    assert accuracy([1, 2], [2, 1]) == 0.0
    assert accuracy([1, 1, 2, 3], [1, 2, 2, 3]) == 0.75
    with pytest.raises(LengthMismatch):
        accuracy([1], [1, 2])
    with pytest.raises(Empty):
        accuracy([], [])


def test_macro_f1_examples():
    assert macro_f1([0, 1, 2], [0, 1, 2]) == 1.0
    assert macro_f1([0, 1, 0, 1], [0, 0, 1, 1]) == 0.5
    assert macro_f1([4, 4], [4, 4]) == 1.0
    with pytest.raises(LengthMismatch):
        macro_f1([0], [0, 1])


def test_macro_f1_counts_predicted_only_classes():
    # class 2 is predicted but never true: it enters the mean with F1 = 0
    assert macro_f1([0, 2], [0, 1]) == pytest.approx(1.0 / 3.0)


def test_mae_examples():
    assert mae([3, 4], [3, 4]) == 0.0
    assert mae([0], [20]) == 20.0
    assert mae([1, 3], [2, 5]) == 1.5


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=30), st.randoms())
def test_metrics_invariant_to_sample_order(pairs, rnd):
    p, y = map(list, zip(*pairs))
    idx = list(range(len(p)))
    rnd.shuffle(idx)
    p2, y2 = [p[k] for k in idx], [y[k] for k in idx]
    assert accuracy(p, y) == accuracy(p2, y2)
    assert macro_f1(p, y) == pytest.approx(macro_f1(p2, y2), abs=1e-15)
    assert mae(p, y) == pytest.approx(mae(p2, y2), abs=1e-15)
    assert 0 <= macro_f1(p, y) <= 1 and 0 <= accuracy(p, y) <= 1


def test_complete_round_bytes_reference_config():
    cost = CostModel(256, 21, 6)
    assert complete_round_bytes(cost) == 256 * 4 * 7 * 21 == 150_528
    assert to_kb(150_528) == 150.528
    assert f"{to_kb(150_528):.2f}" == "150.53"


def test_model_sharing_reference():
    assert REFERENCE_ARCHITECTURES["LargeConvNet4"][0] == 463_750
    assert model_sharing_bytes(463_750) == 3_710_000
    assert to_kb(3_710_000) == 3710.0


def test_reduction_ratio():
    r = reduction_ratio(150_528, 3_710_000)
    assert round(100 * r, 2) == 95.94


def test_single_client_single_class_upload():
    rb = fedapa_round_bytes(CostModel(2, 1, 1), [1], [1], [1])
    assert rb.up == [8]
    assert rb.down == [8]


def test_round_bytes_partial_sets():
    cost = CostModel(4, 3, 2)
    rb = fedapa_round_bytes(cost, [2, 3], [3, 3], [3, 3])
    assert rb.up == [32, 48]
    assert rb.down == [(3 + 3) * 16, (3 + 3) * 16]
    assert rb.total == sum(rb.up) + sum(rb.down)
    no_stack = fedapa_round_bytes(cost, [2, 3], [3, 3], None)
    assert no_stack.down == [48, 48]


def test_last_rounds_mean():
    assert last_rounds_mean([1, 2, 3, 4, 5, 6, 7]) == 5.0
    assert last_rounds_mean([2.0]) == 2.0
    with pytest.raises(ValueError):
        last_rounds_mean([])
