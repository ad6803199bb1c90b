"""Tests for the trust-region weighted maximum-likelihood fit.

The reference values come from a deliberately naive re-implementation of the
four stationary-point formulas (explicit Python loops, no shared code) so
that an indexing or transposition bug in the production code cannot hide.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfpaced.gauss import FeatureMap, Gaussian, LinearGaussianConditional, featurize
from selfpaced.wml import (
    ETA_MAX,
    FitError,
    ReferencePair,
    WeightedDataset,
    closed_form_params,
    constraint_gap,
    effective_sample_size,
    fit,
    fit_policy_only,
)


def _naive_params(eta, xs, ys, wx, wy, a_ref, cov_y_ref, mean_x_ref,
                  cov_x_ref, feature_map):
    """Loop-based evaluation of the four regularized stationary formulas."""
    n = xs.shape[0]
    phi = np.array([featurize(x, feature_map) for x in xs])
    d_phi = phi.shape[1]
    d_y = ys.shape[1]
    d_x = xs.shape[1]

    lhs = np.zeros((d_phi, d_phi))
    rhs = np.zeros((d_y, d_phi))
    for i in range(n):
        lhs += (wy[i] + eta / n) * np.outer(phi[i], phi[i])
        rhs += np.outer(wy[i] * ys[i] + (eta / n) * (a_ref @ phi[i]), phi[i])
    gain = rhs @ np.linalg.inv(lhs)

    cov_y = eta * cov_y_ref
    for i in range(n):
        dy = ys[i] - gain @ phi[i]
        cov_y += wy[i] * np.outer(dy, dy)
        da_phi = (gain - a_ref) @ phi[i]
        cov_y += (eta / n) * np.outer(da_phi, da_phi)
    cov_y /= np.sum(wy) + eta

    mean_x = np.zeros(d_x)
    for i in range(n):
        mean_x += wx[i] * xs[i]
    mean_x = (mean_x + eta * mean_x_ref) / (np.sum(wx) + eta)

    dm = mean_x - mean_x_ref
    cov_x = eta * (cov_x_ref + np.outer(dm, dm))
    for i in range(n):
        cov_x += wx[i] * np.outer(xs[i] - mean_x, xs[i] - mean_x)
    cov_x /= np.sum(wx) + eta
    return gain, cov_y, mean_x, cov_x


def _make_problem(seed=0, n=10, d_x=2, d_y=2):
    rng = np.random.default_rng(seed)
    fm = FeatureMap(kind="linear-with-bias", input_dim=d_x)
    xs = rng.normal(size=(n, d_x))
    ys = rng.normal(size=(n, d_y))
    wx = rng.uniform(0.2, 2.0, size=n)
    wy = rng.uniform(0.2, 2.0, size=n)
    a_ref = rng.normal(scale=0.3, size=(d_y, d_x + 1))
    ref = ReferencePair(
        context=Gaussian(rng.normal(size=d_x), 1.5 * np.eye(d_x)),
        policy=LinearGaussianConditional(a_ref, 0.8 * np.eye(d_y), fm),
    )
    return WeightedDataset(xs, ys, wx, wy), ref


class TestClosedForm:
    def test_matches_naive_reimplementation(self):
        data, ref = _make_problem(seed=3)
        for eta in (1e-3, 1.0, 17.5):
            got = closed_form_params(eta, data, ref)
            want = _naive_params(
                eta, data.xs, data.ys, data.wx, data.wy,
                ref.policy.gain, ref.policy.cov,
                ref.context.mean, ref.context.cov, ref.policy.features)
            for g, w in zip(got, want):
                assert np.allclose(g, w, atol=1e-8)

    def test_eta_zero_unit_weights_is_plain_ml(self):
        rng = np.random.default_rng(1)
        n, d = 50, 2
        data, ref = _make_problem(seed=1, n=n, d_x=d, d_y=d)
        ones = np.ones(n)
        data = WeightedDataset(data.xs, data.ys, ones, ones)
        gain, cov_y, mean_x, cov_x = closed_form_params(0.0, data, ref)

        assert np.allclose(mean_x, data.xs.mean(axis=0), atol=1e-10)
        assert np.allclose(cov_x, np.cov(data.xs.T, bias=True), atol=1e-10)
        phi = featurize(data.xs, ref.policy.features)
        ols, *_ = np.linalg.lstsq(phi, data.ys, rcond=None)
        assert np.allclose(gain, ols.T, atol=1e-8)
        resid = data.ys - phi @ gain.T
        assert np.allclose(cov_y, (resid.T @ resid) / n, atol=1e-10)

    def test_infinite_eta_pins_to_reference(self):
        data, ref = _make_problem(seed=2)
        gain, cov_y, mean_x, cov_x = closed_form_params(ETA_MAX, data, ref)
        assert np.allclose(gain, ref.policy.gain, atol=1e-6)
        assert np.allclose(mean_x, ref.context.mean, atol=1e-6)
        assert np.allclose(cov_y, ref.policy.cov, atol=1e-5)
        assert np.allclose(cov_x, ref.context.cov, atol=1e-5)

    def test_negative_eta_rejected(self):
        data, ref = _make_problem()
        with pytest.raises(ValueError):
            closed_form_params(-1.0, data, ref)


class TestFit:
    def test_active_constraint_hits_epsilon(self):
        # concentrated weights force a large unconstrained step
        data, ref = _make_problem(seed=5, n=100)
        wy = np.exp(1.5 * np.random.default_rng(5).normal(size=100))
        data = WeightedDataset(data.xs, data.ys, wy, wy)
        eps = 0.05
        result = fit(data, ref, eps)
        assert not result.fallback
        assert result.eta > 0
        assert result.combined_kl == pytest.approx(eps, abs=1e-3)

    def test_inactive_constraint_is_exact_ml(self):
        data, ref = _make_problem(seed=6, n=60)
        result = fit(data, ref, 1e6)
        assert result.eta == 0.0
        want = closed_form_params(0.0, data, ref)
        assert np.allclose(result.policy.gain, want[0], atol=1e-10)
        assert np.allclose(result.context.mean, want[2], atol=1e-10)

    def test_combined_kl_never_exceeds_budget(self):
        for seed in range(20):
            data, ref = _make_problem(seed=seed, n=25)
            rng = np.random.default_rng(seed)
            w = np.exp(2.0 * rng.normal(size=25))
            data = WeightedDataset(data.xs, data.ys, w, w)
            result = fit(data, ref, 0.2)
            assert result.combined_kl <= 0.2 + 1e-3

    def test_returned_covariances_are_spd(self):
        for seed in range(20):
            data, ref = _make_problem(seed=100 + seed, n=25)
            result = fit(data, ref, 0.3)
            np.linalg.cholesky(result.context.cov)
            np.linalg.cholesky(result.policy.cov)

    def test_degenerate_weights_fall_back_to_reference(self):
        data, ref = _make_problem(seed=7, n=20)
        w = np.zeros(20)
        w[0] = 1.0
        data = WeightedDataset(data.xs, data.ys, w, w)
        result = fit(data, ref, 0.5)
        assert result.fallback
        assert result.context is ref.context
        assert result.policy is ref.policy

    def test_policy_only_keeps_context(self):
        data, ref = _make_problem(seed=8, n=30)
        result = fit_policy_only(data, ref, 0.1)
        assert result.context is ref.context
        assert result.policy_kl <= 0.1 + 1e-3
        assert result.context_kl == 0.0


class TestConstraintGap:
    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_nondecreasing_in_eta(self, seed):
        data, ref = _make_problem(seed=seed, n=15)
        rng = np.random.default_rng(seed)
        w = np.exp(rng.normal(size=15))
        data = WeightedDataset(data.xs, data.ys, w, w)
        gaps = [constraint_gap(eta, data, ref, 0.0)
                for eta in np.logspace(-6, 6, 13)]
        diffs = np.diff(gaps)
        assert np.all(diffs >= -1e-9)

    def test_equal_weights_large_epsilon_matches_ml(self):
        data, ref = _make_problem(seed=9, n=30)
        ones = np.ones(30)
        data = WeightedDataset(data.xs, data.ys, ones, ones)
        result = fit(data, ref, np.inf)
        want = closed_form_params(0.0, data, ref)
        assert np.allclose(result.policy.gain, want[0], atol=1e-12)


class TestEss:
    def test_uniform_weights(self):
        assert effective_sample_size(np.ones(7)) == pytest.approx(7.0)

    def test_one_hot(self):
        w = np.zeros(5)
        w[2] = 3.0
        assert effective_sample_size(w) == pytest.approx(1.0)
