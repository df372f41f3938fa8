import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gblend.errors import NumericError, WeightEstimationError
from gblend.fusion import BlendWeights
from gblend.weights import (GradientStats, HeadMeasurement, estimate_weights_practical, normalize,
                            optimal_weights_correlated, optimal_weights_uncorrelated, weight_record)


def meas(G, O):
    return [HeadMeasurement(f"h{i}", g, o) for i, (g, o) in enumerate(zip(G, O))]


def test_practical_example():
    w = estimate_weights_practical(meas([0.8, 0.2, 0.5], [0.2, 0.4, 0.3])).weights
    raw = np.array([20, 1.25, 0.5 / 0.09])
    np.testing.assert_allclose(w, raw / raw.sum(), rtol=1e-12)
    np.testing.assert_allclose(w, [0.7461, 0.0466, 0.2073], atol=1e-4)


def test_single_head_gets_everything():
    assert estimate_weights_practical(meas([0.3], [0.1])).weights == (1.0,)


def test_equal_measurements_give_uniform():
    w = estimate_weights_practical(meas([0.4] * 3, [0.1] * 3)).weights
    np.testing.assert_allclose(w, [1 / 3] * 3, rtol=1e-15)


def test_negative_g_clamped_to_zero_weight():
    w = estimate_weights_practical(meas([-0.1, 0.2], [0.1, 0.1])).weights
    assert w == (0.0, 1.0)


def test_tiny_o_is_clamped():
    w = estimate_weights_practical(meas([1e-6, 1.0], [0.0, 1.0])).weights
    # raw_0 = 1e-6 / 1e-12 = 1e6
    np.testing.assert_allclose(w, [1e6 / (1e6 + 1), 1 / (1e6 + 1)], rtol=1e-12)


def test_no_generalizing_head_raises():
    with pytest.raises(WeightEstimationError, match="no generalizing head"):
        estimate_weights_practical(meas([0.0, -0.5], [0.1, 0.1]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 2), st.floats(0.01, 2)), min_size=1, max_size=5),
       st.floats(0.01, 100), st.sampled_from(["G", "O"]))
def test_practical_weights_are_scale_invariant(pairs, c, which):
    G, O = map(np.array, zip(*pairs))
    base = estimate_weights_practical(meas(G, O)).as_array()
    scaled = estimate_weights_practical(meas(G * c, O) if which == "G" else meas(G, O * c)).as_array()
    np.testing.assert_allclose(scaled, base, rtol=1e-9, atol=1e-12)


def test_inverse_variance_example():
    w = optimal_weights_uncorrelated(GradientStats([1.0, 1.0], sigma2=[1.0, 4.0]))
    np.testing.assert_allclose(w.weights, [0.8, 0.2], rtol=1e-15)
    assert optimal_weights_uncorrelated(GradientStats([2.0], sigma2=[3.0])).weights == (1.0,)


def test_uncorrelated_rejects_nonpositive_variance():
    with pytest.raises(ValueError):
        optimal_weights_uncorrelated(GradientStats([1.0, 1.0], sigma2=[1.0, 0.0]))


def test_closed_form_symmetric_case_is_exactly_uniform():
    w = optimal_weights_uncorrelated(GradientStats([0.7] * 3, sigma2=[1.3] * 3))
    np.testing.assert_allclose(w.weights, [1 / 3] * 3, rtol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 3), st.floats(0.1, 3)), min_size=1, max_size=5))
def test_diagonal_sigma_reduces_to_uncorrelated(pairs):
    a, s2 = map(np.array, zip(*pairs))
    unc = optimal_weights_uncorrelated(GradientStats(a, sigma2=s2)).as_array()
    cor = optimal_weights_correlated(GradientStats(a, Sigma=np.diag(s2))).as_array()
    assert np.abs(unc - cor).max() <= 1e-10


def test_correlated_two_by_two_example():
    w = optimal_weights_correlated(GradientStats([1.0, 1.0], Sigma=[[1.0, 0.5], [0.5, 1.0]]))
    np.testing.assert_allclose(w.weights, [0.5, 0.5], rtol=1e-15)


def test_correlated_uses_the_inverse_not_the_diagonal():
    Sigma = np.array([[1.0, 0.3], [0.3, 2.0]])
    a = np.array([1.0, 1.5])
    raw = np.linalg.solve(Sigma, a)
    w = optimal_weights_correlated(GradientStats(a, Sigma=Sigma))
    np.testing.assert_allclose(w.weights, raw / raw.sum(), rtol=1e-12)


def test_ill_conditioned_sigma_raises():
    with pytest.raises(NumericError):
        optimal_weights_correlated(GradientStats([1.0, 1.0], Sigma=[[1.0, 1.0], [1.0, 1.0]]))


def test_off_simplex_optimum_raises():
    # strong correlation plus a weak second estimator pushes its weight negative
    with pytest.raises(WeightEstimationError):
        optimal_weights_correlated(GradientStats([1.0, 0.2], Sigma=[[1.0, 0.9], [0.9, 1.0]]))


def test_asymmetric_sigma_rejected():
    with pytest.raises(ValueError):
        GradientStats([1.0, 1.0], Sigma=[[1.0, 0.2], [0.1, 1.0]])


def test_normalize_examples():
    assert normalize([2, 2]).weights == (0.5, 0.5)
    assert normalize([1, 0, 3]).weights == (0.25, 0.0, 0.75)
    with pytest.raises(WeightEstimationError):
        normalize([0, 0])
    with pytest.raises(ValueError):
        normalize([1, -1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=8).filter(lambda v: sum(v) > 0))
def test_normalize_sum_and_argmax(raw):
    w = normalize(raw).as_array()
    assert abs(w.sum() - 1.0) <= 1e-12
    assert w[int(np.argmax(raw))] == w.max()


@pytest.mark.parametrize("published", [(0.630, 0.014, 0.356), (0.38, 0.24, 0.38)])
def test_published_weights_are_already_normalized(published):
    w = normalize(published)
    assert np.abs(w.as_array() - np.array(published)).max() < 1e-2
    BlendWeights(published)


def test_weight_record_layout():
    m = meas([0.8, 0.2], [0.2, 0.4])
    w = estimate_weights_practical(m)
    doc = weight_record(3, m, w)
    assert doc["epoch"] == 3
    assert [h["id"] for h in doc["heads"]] == ["h0", "h1"]
    assert doc["heads"][0]["raw"] == pytest.approx(20.0)
    assert sum(h["weight"] for h in doc["heads"]) == pytest.approx(1.0)
