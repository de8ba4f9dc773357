import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gpcausal.estimands import summarize_ate, summarize_subjects
from gpcausal.rand import rng_stream


def test_ate_summary_of_known_draws():
    s = summarize_ate(np.array([1.0, 2.0, 3.0, 4.0, 5.0]), level=0.5)
    assert s.estimate == 3.0
    assert s.median == 3.0
    assert s.sd == pytest.approx(np.sqrt(2.5), rel=1e-15)
    # linear-interpolation quantiles at 0.25 and 0.75
    assert (s.ci_low, s.ci_high) == (2.0, 4.0)
    assert s.n_draws == 5
    assert s.covers(2.0) and s.covers(4.0) and not s.covers(4.01)


def test_normal_draws_give_the_textbook_interval():
    psi = rng_stream(0).normal(0.0, 1.0, 200_000)
    s = summarize_ate(psi)
    assert s.ci_low == pytest.approx(-1.96, abs=0.03)
    assert s.ci_high == pytest.approx(1.96, abs=0.03)


def test_mean_over_draws_of_subject_means_equals_mean_of_subject_posterior_means():
    delta = rng_stream(1).normal(size=(400, 9))
    psi = delta.mean(axis=1)
    ate = summarize_ate(psi).estimate
    subj = summarize_subjects(delta)
    assert ate == pytest.approx(subj.mean.mean(), abs=1e-12)


def test_requires_two_draws():
    with pytest.raises(ValueError):
        summarize_ate(np.array([1.0]))


@settings(max_examples=50, deadline=None)
@given(
    psi=arrays(np.float64, st.integers(2, 60), elements=st.floats(-1e3, 1e3)),
    level=st.floats(0.5, 0.99),
)
def test_interval_is_ordered_and_contains_median(psi, level):
    s = summarize_ate(psi, level)
    assert s.ci_low <= s.median <= s.ci_high
    assert psi.min() <= s.ci_low and s.ci_high <= psi.max()


def test_subject_summary_sorted_by_key_is_stable():
    delta = np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]])
    s = summarize_subjects(delta, key=[5.0, 1.0, 5.0])
    assert list(s.index) == [1, 0, 2]
    assert list(s.mean) == [2.0, 2.0, 2.0]
    assert list(s.key) == [1.0, 5.0, 5.0]
    assert s.sd[1] == pytest.approx(np.sqrt(2.0))
    with pytest.raises(ValueError):
        summarize_subjects(delta, key=[1.0, 2.0])


def test_subject_summary_without_key_keeps_input_order():
    s = summarize_subjects(np.arange(12.0).reshape(4, 3))
    assert list(s.index) == [0, 1, 2]
    assert np.allclose(s.mean, [4.5, 5.5, 6.5])
    assert s.key is None and not s.latent_scale
