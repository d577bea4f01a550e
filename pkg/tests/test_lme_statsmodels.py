"""Cross-check of the mixed-model fitter against statsmodels MixedLM.

An independent, widely used REML implementation fitting the same model
should agree on coefficients, variance components, and the restricted
log-likelihood.
"""

import numpy as np
import pytest

from longisurf import lme_fit

from test_lme import make_dataset

sm = pytest.importorskip("statsmodels.api")
pd = pytest.importorskip("pandas")


def test_reml_matches_statsmodels():
    # interior-optimum dataset: substantial intercept and slope variance
    ds = make_dataset(
        n_subj=200, psi=((0.04, 0.0), (0.0, 0.001)), sigma2=0.01, seed=11
    )
    fit = lme_fit(ds)
    df = pd.DataFrame(
        {
            "y": ds.value,
            "B": ds.design.age_baseline,
            "W": ds.design.time,
            "D": ds.design.diagnosis,
            "g": np.asarray(ds.design.subject_ids)[ds.design.group],
        }
    )
    ref = sm.MixedLM.from_formula(
        "y ~ B + W + D", groups="g", re_formula="~W", data=df
    ).fit(reml=True)
    np.testing.assert_allclose(np.asarray(ref.fe_params), fit.beta, atol=1e-6)
    np.testing.assert_allclose(np.asarray(ref.cov_re), fit.psi, atol=1e-6)
    assert ref.scale == pytest.approx(fit.sigma2, rel=1e-4)
    assert ref.llf == pytest.approx(fit.loglik, abs=1e-6)
    np.testing.assert_allclose(np.asarray(ref.bse_fe), fit.se, rtol=2e-3)
    # our optimum is never worse than the reference implementation's
    assert fit.loglik >= ref.llf - 1e-7
