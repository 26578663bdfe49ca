import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayeskalman.covariance import (
    IndefiniteCovarianceWarning,
    extract_cov_joseph,
    extract_cov_update,
    posterior_from_gain,
    recover_prior_from_kg,
    recover_prior_submatrix,
)
from bayeskalman.errors import NumericalError, UnrecoverableCovariance
from bayeskalman.linalg import is_psd


def random_spd(rng, d, scale=1.0):
    A = rng.normal(size=(d, d))
    return scale * (A @ A.T + 0.5 * np.eye(d))


def optimal_gain(sigma, H, R):
    return sigma @ H.T @ np.linalg.inv(H @ sigma @ H.T + R)


def relative_error(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_gain_roundtrip_recovers_prior():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        m = int(rng.integers(1, 5))
        n = int(rng.integers(m, m + 3))
        H = rng.normal(size=(n, m))
        sigma = random_spd(rng, m)
        R = random_spd(rng, n)
        K = optimal_gain(sigma, H, R)
        worst = max(worst, relative_error(recover_prior_from_kg(K, H, R), sigma))
    assert worst < 1e-8


def test_joseph_equals_standard_at_optimal_gain():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        m = int(rng.integers(1, 5))
        n = int(rng.integers(1, 5))
        H = rng.normal(size=(n, m))
        sigma = random_spd(rng, m)
        R = random_spd(rng, n)
        K = optimal_gain(sigma, H, R)
        std = extract_cov_update(K, H, sigma)
        jos = extract_cov_joseph(K, H, sigma, R)
        assert np.max(np.abs(std - jos)) <= 1e-10 * max(1.0, np.max(np.abs(std)))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 4))
def test_joseph_is_psd_for_arbitrary_gains(seed, m, n):
    rng = np.random.default_rng(seed)
    K = rng.normal(size=(m, n)) * 10
    H = rng.normal(size=(n, m))
    P = extract_cov_joseph(K, H, random_spd(rng, m), random_spd(rng, n))
    assert is_psd(P, tol=1e-9 * max(1.0, np.abs(P).max()))


def test_standard_form_can_be_indefinite_and_warns():
    sigma = np.eye(2)
    H = np.eye(2)
    K = np.array([[3.0, 0.0], [0.0, 0.5]])  # far from optimal
    with pytest.warns(IndefiniteCovarianceWarning):
        P = extract_cov_update(K, H, sigma)
    assert np.linalg.eigvalsh(P).min() < 0
    assert is_psd(extract_cov_joseph(K, H, sigma, np.eye(2)))


def test_standard_form_at_optimal_gain_is_silent():
    rng = np.random.default_rng(2)
    sigma, R, H = random_spd(rng, 3), random_spd(rng, 3), rng.normal(size=(3, 3))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        extract_cov_update(optimal_gain(sigma, H, R), H, sigma)


def test_batched_recovery():
    rng = np.random.default_rng(3)
    H = np.eye(2)
    sig = np.stack([random_spd(rng, 2) for _ in range(6)]).reshape(2, 3, 2, 2)
    R = np.diag([0.4, 1.5])
    K = sig @ np.linalg.inv(sig + R)
    np.testing.assert_allclose(recover_prior_from_kg(K, H, R), sig, rtol=1e-10)


def test_rank_deficient_observation_raises():
    H = np.array([[1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(UnrecoverableCovariance):
        recover_prior_from_kg(np.zeros((2, 2)), H, np.eye(2))


def test_ill_conditioned_update_raises():
    H = np.eye(2)
    with pytest.raises(NumericalError):
        recover_prior_from_kg(np.eye(2), H, np.eye(2))


def test_submatrix_recovers_position_block():
    rng = np.random.default_rng(4)
    for _ in range(50):
        F = np.eye(4)
        F[0, 2] = F[1, 3] = 1.0
        H = np.eye(2, 4)
        sigma = random_spd(rng, 4)
        R = random_spd(rng, 2)
        K = optimal_gain(sigma, H, R)
        block = recover_prior_submatrix(K, H, R, (0, 1))
        assert relative_error(block, sigma[:2, :2]) < 1e-8


def test_submatrix_validates_indices():
    H = np.eye(2, 4)
    with pytest.raises(ValueError):
        recover_prior_submatrix(np.zeros((4, 2)), H, np.eye(2), (0, 7))
    with pytest.raises(ValueError):
        recover_prior_submatrix(np.zeros((4, 2)), H, np.eye(2), ())
    with pytest.raises(UnrecoverableCovariance):
        recover_prior_submatrix(np.zeros((4, 2)), H, np.eye(2), (2, 3))


@pytest.mark.parametrize("form", ["standard", "joseph"])
def test_posterior_from_optimal_gain_matches_kalman_posterior(form):
    rng = np.random.default_rng(5)
    sigma, R = random_spd(rng, 2), random_spd(rng, 2)
    H = rng.normal(size=(2, 2))
    K = optimal_gain(sigma, H, R)
    expected = sigma - K @ H @ sigma
    np.testing.assert_allclose(posterior_from_gain(K, H, R, form), expected, atol=1e-10)


def test_posterior_from_gain_rejects_unknown_form():
    with pytest.raises(ValueError):
        posterior_from_gain(0.5 * np.eye(2), np.eye(2), np.eye(2), form="bogus")
