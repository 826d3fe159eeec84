import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aaalab.numkit import AdamState, InvalidInputError, RngStream, adam_step, as_realvec, softmax, top2

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])

    def test_no_overflow(self):
        np.testing.assert_allclose(softmax([1000.0, 1000.0, 1000.0]), [1 / 3] * 3)

    def test_hand_value(self):
        np.testing.assert_allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], rtol=1e-12)

    @pytest.mark.parametrize("bad", [[], [np.nan, 1.0], [np.inf, 0.0], [[1.0, 2.0]]])
    def test_rejects(self, bad):
        with pytest.raises(InvalidInputError):
            softmax(bad)

    @given(arrays(np.float64, st.integers(1, 12), elements=finite))
    def test_distribution(self, v):
        p = softmax(v)
        assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12
        assert p[np.argmax(v)] == p.max()


class TestTop2:
    def test_distinct(self):
        assert top2([3, 1, 0]) == (0, 3.0, 1, 1.0)

    def test_tie_lowest_index(self):
        assert top2([5, 5, 2]) == (0, 5.0, 1, 5.0)

    def test_negative(self):
        assert top2([-1, -3, -2]) == (0, -1.0, 2, -2.0)

    def test_too_short(self):
        with pytest.raises(InvalidInputError):
            top2([1.0])

    @given(arrays(np.float64, st.integers(2, 10), elements=st.integers(-3, 3).map(float)))
    def test_matches_sort(self, v):
        i1, v1, i2, v2 = top2(v)
        order = sorted(range(v.size), key=lambda k: (-v[k], k))
        assert (i1, i2) == (order[0], order[1])
        assert v1 >= v2


class TestAdam:
    def test_zero_grad(self):
        p, _ = adam_step(AdamState.fresh(3), [1.0, 2.0, 3.0], np.zeros(3))
        np.testing.assert_array_equal(p, [1.0, 2.0, 3.0])
        _, st1 = adam_step(AdamState(np.ones(3), np.ones(3), 5), np.zeros(3), np.zeros(3))
        np.testing.assert_allclose(st1.m, 0.9 * np.ones(3))
        np.testing.assert_allclose(st1.v, 0.999 * np.ones(3))

    def test_first_step_is_signed_lr(self):
        g = np.array([0.3, -2.0, 1e-3, -7.0])
        p, st1 = adam_step(AdamState.fresh(4, lr=0.1), np.zeros(4), g)
        # bias-corrected first step is -lr * g / (|g| + eps)
        np.testing.assert_allclose(p, -0.1 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        np.testing.assert_allclose(p, -0.1 * np.sign(g), atol=1e-6)
        assert st1.t == 1

    def test_counter_and_shapes(self):
        state = AdamState.fresh(2)
        params = np.zeros(2)
        for k in range(1, 6):
            params, state = adam_step(state, params, np.array([1.0, -1.0]))
            assert state.t == k and state.m.shape == params.shape

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            adam_step(AdamState.fresh(3), np.zeros(3), np.zeros(2))

    def test_deterministic(self):
        g = np.array([0.5, -0.25])
        a = adam_step(AdamState.fresh(2), np.ones(2), g)
        b = adam_step(AdamState.fresh(2), np.ones(2), g)
        assert a[0].tobytes() == b[0].tobytes()

    def test_inputs_untouched(self):
        state = AdamState.fresh(2)
        params = np.ones(2)
        adam_step(state, params, np.ones(2))
        np.testing.assert_array_equal(params, 1.0)
        np.testing.assert_array_equal(state.m, 0.0)


class TestRngStream:
    def test_reproducible(self):
        a = RngStream(7, key=(1, 2)).normal(5)
        b = RngStream(7, key=(1, 2)).normal(5)
        assert a.tobytes() == b.tobytes()

    def test_keys_differ(self):
        assert not np.array_equal(RngStream(7, key=(1,)).normal(5), RngStream(7, key=(2,)).normal(5))

    def test_child_equals_keyed(self):
        assert np.array_equal(RngStream(3).child(4, 5).uniform(4), RngStream(3, key=(4, 5)).uniform(4))

    def test_signs(self):
        s = RngStream(0).choice_sign(1000)
        assert set(np.unique(s)) == {-1.0, 1.0}

    @pytest.mark.parametrize("seed", [-1, 2**64])
    def test_seed_range(self, seed):
        with pytest.raises(InvalidInputError):
            RngStream(seed)


@settings(max_examples=50)
@given(st.lists(finite, min_size=1, max_size=8))
def test_as_realvec_roundtrip(xs):
    np.testing.assert_array_equal(as_realvec(xs), np.array(xs))
