import numpy as np
import pytest

from longisurf import auc, zscore, zscore_norms
from longisurf.normative import NormativeError


def test_norms_two_subject_hand_values():
    norms = zscore_norms([62.0, 67.0], np.array([[1.0], [3.0]]))
    mu, sd, n = norms.table[6]
    assert n == 2
    assert mu[0] == pytest.approx(2.0)
    assert sd[0] == pytest.approx(np.sqrt(2.0))


def test_norms_match_naive_oracle():
    rng = np.random.default_rng(0)
    ages = rng.uniform(55, 95, size=120)
    values = rng.standard_normal((120, 9)) + 2.5
    norms = zscore_norms(ages, values)
    brackets = np.floor(ages / 10).astype(int)
    for b in np.unique(brackets):
        rows = values[brackets == b]
        mu, sd, n = norms.table[int(b)]
        assert n == len(rows)
        np.testing.assert_allclose(mu, rows.mean(axis=0), atol=1e-12)
        if n >= 2:
            np.testing.assert_allclose(
                sd, rows.std(axis=0, ddof=1), atol=1e-12
            )


def test_zscore_at_mean_and_one_sd():
    rng = np.random.default_rng(1)
    values = rng.standard_normal((30, 5)) * 0.4 + 2.0
    ages = np.full(30, 72.0)
    norms = zscore_norms(ages, values)
    mu, sd, _ = norms.table[7]
    z, avg = zscore(mu, 74.0, norms)
    np.testing.assert_allclose(z, 0.0, atol=1e-12)
    assert avg == pytest.approx(0.0, abs=1e-12)
    z1, avg1 = zscore(mu + sd, 74.0, norms)
    np.testing.assert_allclose(z1, 1.0, atol=1e-12)
    assert avg1 == pytest.approx(1.0, abs=1e-12)


def test_zscore_degenerate_reference_errors():
    norms = zscore_norms([65.0, 66.0], np.full((2, 4), 3.0))
    with pytest.raises(NormativeError, match="zero reference SD"):
        zscore(np.full(4, 3.0), 65.0, norms)


def test_zscore_missing_bracket():
    norms = zscore_norms([65.0, 66.0], np.random.default_rng(0).random((2, 4)))
    with pytest.raises(NormativeError, match="no reference bracket"):
        zscore(np.zeros(4), 95.0, norms)


def test_zscore_singleton_bracket():
    norms = zscore_norms(
        [65.0, 66.0, 91.0], np.random.default_rng(0).random((3, 4))
    )
    with pytest.raises(NormativeError, match="single reference subject"):
        zscore(np.zeros(4), 90.5, norms)


def test_zscore_exclusion_mask_restricted_mean():
    rng = np.random.default_rng(2)
    values = rng.standard_normal((20, 8)) + 1.0
    norms = zscore_norms(np.full(20, 61.0), values)
    subject = rng.standard_normal(8) + 1.0
    exclude = np.zeros(8, dtype=bool)
    exclude[:4] = True
    z, avg = zscore(subject, 61.0, norms, exclude=exclude)
    assert avg == pytest.approx(z[4:].mean(), abs=1e-14)


def test_zscore_population_standardization():
    # members of a large reference cohort score ~N(0, 1) per bracket
    rng = np.random.default_rng(3)
    n = 4000
    ages = rng.uniform(60, 70, size=n)
    values = rng.standard_normal((n, 3)) * 0.3 + 2.4
    norms = zscore_norms(ages, values)
    zs = np.array([zscore(values[i], ages[i], norms)[1] for i in range(400)])
    assert abs(zs.mean()) < 0.1
    assert abs(zs.std(ddof=1) - 1.0 / np.sqrt(3)) < 0.12  # mean of 3 vertices


def test_auc_perfect_separation():
    assert auc([1, 2, 3, 10, 11, 12], [0, 0, 0, 1, 1, 1]) == 1.0


def test_auc_all_ties():
    assert auc([5, 5, 5, 5], [0, 0, 1, 1]) == 0.5


def test_auc_hand_counted():
    # cases {1,2,3}, controls {2,4}: pairs (1<2),(1<4),(2=2),(2<4),(3>2),(3<4)
    # -> (1 win + 0.5 tie) / 6
    scores = [1.0, 2.0, 3.0, 2.0, 4.0]
    groups = [1, 1, 1, 0, 0]
    assert auc(scores, groups) == pytest.approx(0.25)


def test_auc_monotone_invariance():
    rng = np.random.default_rng(4)
    scores = rng.standard_normal(50)
    groups = rng.integers(0, 2, size=50)
    if groups.sum() in (0, 50):
        groups[0] = 1 - groups[0]
    base = auc(scores, groups)
    assert auc(np.exp(scores), groups) == pytest.approx(base, abs=1e-12)
    assert auc(3 * scores - 7, groups) == pytest.approx(base, abs=1e-12)


def test_auc_negation_antisymmetry():
    rng = np.random.default_rng(5)
    scores = rng.standard_normal(60)  # continuous, no ties
    groups = np.r_[np.ones(30), np.zeros(30)]
    assert auc(-scores, groups) == pytest.approx(
        1.0 - auc(scores, groups), abs=1e-12
    )


def test_auc_empty_group_rejected():
    with pytest.raises(ValueError, match="non-empty"):
        auc([1.0, 2.0], [1, 1])
