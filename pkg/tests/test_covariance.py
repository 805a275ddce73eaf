import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import outer_sum_covariance
from specfilter import covariance as cv
from specfilter.covariance import FeatureMatrix


def diffs(rows):
    return FeatureMatrix(np.asarray(rows, dtype=float), "difference")


def test_pool_tokens():
    assert cv.pool_tokens([[3.0, -1.0]]).tolist() == [3.0, -1.0]
    assert cv.pool_tokens([[1, 0], [0, 1], [2, 2], [1, 1]]).tolist() == [1.0, 1.0]
    with pytest.raises(cv.EmptySequence):
        cv.pool_tokens(np.zeros((0, 3)))


def test_pool_tokens_accumulates_in_f64():
    seq = np.full((4096, 2), 0.1, dtype=np.float16)
    out = cv.pool_tokens(seq)
    assert out.dtype == np.float64
    assert out[0] == pytest.approx(float(np.float16(0.1)), rel=1e-15)


def test_difference_set():
    pos = FeatureMatrix([[3.0, 1.0]], "positive")
    neg = FeatureMatrix([[1.0, 1.0]], "negative")
    assert cv.difference_set(pos, neg).data.tolist() == [[2.0, 0.0]]
    same = cv.difference_set(FeatureMatrix(np.ones((4, 3)), "positive"), FeatureMatrix(np.ones((4, 3)), "negative"))
    assert not same.data.any()
    with pytest.raises(cv.ShapeMismatch):
        cv.difference_set(FeatureMatrix(np.ones((3, 2)), "positive"), FeatureMatrix(np.ones((2, 2)), "negative"))
    with pytest.raises(cv.RoleMismatch):
        cv.difference_set(neg, pos)


def test_feature_matrix_rejects_nonfinite():
    with pytest.raises(cv.NotFinite):
        FeatureMatrix([[np.nan, 1.0]], "positive")


@pytest.mark.parametrize(
    "rows, expected",
    [
        ([[1, 2]], [[1, 2], [2, 4]]),
        ([[1, 0], [0, 1]], [[0.5, 0], [0, 0.5]]),
        ([[1, 1], [1, -1]], [[1, 0], [0, 1]]),
    ],
)
def test_covariance_examples(rows, expected):
    assert np.allclose(outer_sum_covariance(rows), expected)  # oracle agrees with the frozen value
    cov = cv.hallucination_covariance(diffs(rows))
    assert np.allclose(cov.sigma, expected, atol=1e-15)
    assert cov.sample_count == len(rows)
    assert not cov.centered


def test_covariance_is_uncentered_by_default():
    rows = [[2.0, 0.0], [2.0, 0.0]]
    assert cv.hallucination_covariance(diffs(rows)).sigma[0, 0] == 4.0
    assert cv.hallucination_covariance(diffs(rows), center=True).sigma[0, 0] == 0.0


def test_covariance_empty():
    with pytest.raises(cv.EmptySet):
        cv.hallucination_covariance(diffs(np.zeros((0, 3))))
    with pytest.raises(cv.EmptySet):
        cv.mean_difference(diffs(np.zeros((0, 3))))


def test_mean_difference():
    assert cv.mean_difference(diffs([[2, 0], [0, 2]])).mu.tolist() == [1.0, 1.0]
    assert cv.mean_difference(diffs([[4, 5]])).mu.tolist() == [4.0, 5.0]
    assert not cv.mean_difference(diffs(np.zeros((5, 3)))).mu.any()


def test_random_matches_oracle():
    rng = np.random.default_rng(0)
    rows = rng.standard_normal((30, 5))
    np.testing.assert_allclose(cv.hallucination_covariance(diffs(rows)).sigma, outer_sum_covariance(rows), rtol=1e-13)


def test_streaming_order_invariance():
    rng = np.random.default_rng(3)
    rows = rng.standard_normal((5000, 16)) * np.logspace(0, 3, 16)
    full = cv.hallucination_covariance(diffs(rows)).sigma
    acc = cv.CovarianceAccumulator()
    perm = rng.permutation(rows.shape[0])
    for chunk in np.array_split(rows[perm], 37):
        acc.add_batch(chunk)
    streamed = acc.finalize().sigma
    assert np.max(np.abs(streamed - full)) <= 1e-12 * np.max(np.abs(full))


def test_merge_of_shards():
    rng = np.random.default_rng(4)
    rows = rng.standard_normal((400, 6))
    a = cv.CovarianceAccumulator().add_batch(rows[:150])
    b = cv.CovarianceAccumulator().add_batch(rows[150:])
    merged = a.merge(b)
    ref = cv.hallucination_covariance(diffs(rows))
    assert merged.count == 400
    np.testing.assert_allclose(merged.finalize().sigma, ref.sigma, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(merged.mean().mu, rows.mean(axis=0), rtol=1e-12, atol=1e-15)
    with pytest.raises(cv.ShapeMismatch):
        merged.add_batch(np.zeros((2, 5)))


small_matrices = hnp.arrays(
    np.float64,
    st.tuples(st.integers(1, 12), st.integers(1, 6)),
    elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False),
)


@settings(max_examples=80, deadline=None)
@given(rows=small_matrices, seed=st.integers(0, 2**32 - 1))
def test_covariance_properties(rows, seed):
    cov = cv.hallucination_covariance(diffs(rows)).sigma
    scale = max(np.max(np.abs(cov)), 1e-300)
    # symmetry
    assert np.max(np.abs(cov - cov.T)) <= 1e-12 * scale
    # permutation invariance
    perm = np.random.default_rng(seed).permutation(rows.shape[0])
    np.testing.assert_allclose(cv.hallucination_covariance(diffs(rows[perm])).sigma, cov, rtol=1e-12, atol=1e-12 * scale)
    # trace identity
    expected_trace = np.sum(rows**2) / rows.shape[0]
    assert np.trace(cov) == pytest.approx(expected_trace, rel=1e-10, abs=1e-300)
    # PSD up to noise
    v = np.random.default_rng(seed).standard_normal(rows.shape[1])
    d = rows.shape[1]
    assert v @ cov @ v >= -1e-10 * (v @ v) * np.trace(cov) / d


def test_rank_bound_when_n_below_d():
    rng = np.random.default_rng(5)
    rows = rng.standard_normal((4, 20))
    lam = np.sort(np.linalg.eigvalsh(cv.hallucination_covariance(diffs(rows)).sigma))[::-1]
    assert np.all(np.abs(lam[4:]) <= 1e-10 * lam[0])


def test_self_difference_gives_zero_covariance():
    x = np.random.default_rng(6).standard_normal((10, 4))
    d = cv.difference_set(FeatureMatrix(x, "positive"), FeatureMatrix(x, "negative"))
    assert not cv.hallucination_covariance(d).sigma.any()
