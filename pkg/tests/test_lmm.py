import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vfa.lmm import LEVELS, probability_score, softmax_score

finite = st.floats(-50, 50, allow_nan=False)


def test_levels_order():
    assert LEVELS == ("bad", "poor", "fair", "good", "excellent")


def test_uniform_logits_give_three():
    assert softmax_score([0.0] * 5) == 3.0
    assert softmax_score([7.25] * 5) == 3.0


def test_known_value():
    # softmax weights (1, 1, 1, 1, 9) / 13
    assert abs(softmax_score([0, 0, 0, 0, math.log(9)]) - 55 / 13) < 1e-12


def test_dominant_level():
    assert abs(softmax_score([0, 0, 0, 0, 50]) - 5.0) < 1e-9
    assert abs(softmax_score([50, 0, 0, 0, 0]) - 1.0) < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=5, max_size=5), st.floats(-1e3, 1e3))
def test_shift_invariance(logits, shift):
    a = softmax_score(logits)
    b = softmax_score([x + shift for x in logits])
    assert abs(a - b) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=5, max_size=5), st.floats(0.01, 5))
def test_raising_excellent_raises_score(logits, bump):
    raised = list(logits)
    raised[4] += bump
    assert softmax_score(raised) >= softmax_score(logits) - 1e-12


def test_strictly_inside_range_on_random_logits():
    x = np.random.default_rng(0).normal(0, 10, (10_000, 5))
    s = softmax_score(x)
    assert s.shape == (10_000,)
    assert (s > 1).all() and (s < 5).all()


def test_batch_matches_rows():
    x = np.random.default_rng(1).normal(size=(6, 5))
    assert np.array_equal(softmax_score(x), np.array([softmax_score(r) for r in x]))


def test_probability_score():
    assert probability_score([0.2] * 5) == pytest.approx(3.0, abs=1e-15)
    assert probability_score([0, 0, 0, 0, 1]) == 5.0
    with pytest.raises(ValueError):
        probability_score([0.5, 0.5, 0.5, 0, 0])
    with pytest.raises(ValueError):
        probability_score([-0.5, 0.5, 0.5, 0.5, 0])


@pytest.mark.parametrize("bad", [[0, 0, 0, 0], [0, 0, 0, 0, float("nan")], [0, 0, float("inf"), 0, 0]])
def test_invalid_logits(bad):
    with pytest.raises(ValueError):
        softmax_score(bad)
