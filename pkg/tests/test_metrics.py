import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gnsm.metrics import ap_from_pr_points, auroc, average_precision, precision_recall_points


class TestAveragePrecision:
    def test_hand_example(self):
        assert average_precision([0.9, 0.8, 0.1], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)

    def test_perfect(self):
        assert average_precision([3, 2, 1, 0], [1, 1, 0, 0]) == 1.0

    def test_ties_keep_input_order(self):
        assert average_precision([1.0, 1.0], [0, 1]) == 0.5
        assert average_precision([1.0, 1.0], [1, 0]) == 1.0

    @pytest.mark.parametrize("ratio", [0.05, 0.3])
    def test_null_baseline(self, ratio):
        rng = np.random.default_rng(0)
        n = 10**4
        labels = (rng.random(n) < ratio).astype(int)
        assert abs(average_precision(rng.random(n), labels) - labels.mean()) < 0.02

    def test_no_positives(self):
        with pytest.raises(ValueError):
            average_precision([0.1, 0.2], [0, 0])

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            average_precision([np.nan, 0.2], [1, 0])


class TestAuroc:
    def test_perfect_and_reversed(self):
        assert auroc([3, 2, 1], [1, 0, 0]) == 1.0
        assert auroc([1, 2, 3], [1, 0, 0]) == 0.0

    def test_hand_example(self):
        assert auroc([0.9, 0.8, 0.1], [1, 0, 1]) == 0.5

    def test_ties_count_half(self):
        assert auroc([1.0, 1.0], [1, 0]) == 0.5

    def test_single_class(self):
        with pytest.raises(ValueError):
            auroc([0.1, 0.2], [1, 1])

    def test_matches_pair_counting(self):
        rng = np.random.default_rng(1)
        s = rng.integers(0, 5, 60).astype(float)
        y = rng.integers(0, 2, 60)
        pos, neg = s[y == 1], s[y == 0]
        pairs = (pos[:, None] > neg[None]).sum() + 0.5 * (pos[:, None] == neg[None]).sum()
        assert auroc(s, y) == pytest.approx(pairs / (len(pos) * len(neg)), rel=1e-14)


@given(st.integers(0, 2**31 - 1), st.sampled_from(["exp", "cube", "affine"]))
@settings(max_examples=50, deadline=None)
def test_monotone_transform_invariance(seed, kind):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(200)
    y = rng.integers(0, 2, 200)
    y[0], y[1] = 0, 1
    f = {"exp": np.exp, "cube": lambda v: v ** 3, "affine": lambda v: 3 * v - 7}[kind]
    assert average_precision(f(s), y) == average_precision(s, y)
    assert auroc(f(s), y) == auroc(s, y)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_pr_table_reproduces_ap(seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(300)
    y = (rng.random(300) < 0.2).astype(int)
    y[0] = 1
    _, p, r, _ = precision_recall_points(s, y)
    assert abs(ap_from_pr_points(p, r) - average_precision(s, y)) < 1e-12
