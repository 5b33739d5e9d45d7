import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from churnssm.errors import ConfigurationError, InputError, NumericalError
from churnssm.ssm import StateSpaceModel, forecast, kalman_filter, smooth

from oracles import joint_gaussian_loglik


def local_level(level_var, obs_var, a0=0.0, p0=1e7, n_diffuse=0):
    return StateSpaceModel.create(transition=[[1.0]], design=[1.0], selection=[[1.0]],
                                  state_cov=[[level_var]], obs_cov=obs_var,
                                  init_mean=[a0], init_cov=[[p0]], n_diffuse=n_diffuse)


def random_model(rng, L):
    T = rng.normal(scale=0.5, size=(L, L))
    T /= max(1.0, np.abs(np.linalg.eigvals(T)).max() / 0.95)
    K = rng.integers(1, L + 1)
    R = rng.normal(size=(L, K))
    A = rng.normal(size=(K, K))
    Q = A @ A.T + 0.1 * np.eye(K)
    B = rng.normal(size=(L, L))
    P0 = B @ B.T + 0.1 * np.eye(L)
    return dict(T=T, c=rng.normal(size=L), R=R, Q=Q, D=rng.normal(size=L), d=rng.normal(),
                H=rng.uniform(0.1, 2.0), a0=rng.normal(size=L), P0=P0)


def build(m):
    return StateSpaceModel.create(transition=m["T"], design=m["D"], selection=m["R"], state_cov=m["Q"],
                                  obs_cov=m["H"], init_mean=m["a0"], init_cov=m["P0"],
                                  state_intercept=m["c"], obs_intercept=m["d"])


def test_zero_noise_identity():
    model = local_level(0.0, 1.0, a0=5.0, p0=0.0)
    res = kalman_filter(model, [5.0, 5.0, 5.0])
    np.testing.assert_array_equal(res.innovations, [0.0, 0.0, 0.0])
    assert res.loglikelihood == pytest.approx(3 * math.log(1 / math.sqrt(2 * math.pi)), abs=1e-14)


def test_single_observation_closed_form():
    model = local_level(0.0, 1.0, a0=0.0, p0=1.0)
    res = kalman_filter(model, [0.0])
    assert res.loglikelihood == pytest.approx(stats.norm(0, math.sqrt(2)).logpdf(0.0), abs=1e-14)


def test_local_level_matches_joint_gaussian():
    rng = np.random.default_rng(8)
    z = rng.normal(size=8).cumsum()
    model = local_level(0.7, 1.3, a0=0.2, p0=2.0)
    expected = joint_gaussian_loglik(z, T=[[1.0]], c=[0.0], R=[[1.0]], Q=[[0.7]], D=[1.0], d=0.0,
                                     H=1.3, a0=np.array([0.2]), P0=np.array([[2.0]]))
    assert abs(kalman_filter(model, z).loglikelihood - expected) < 1e-8


@pytest.mark.parametrize("seed", range(10))
def test_random_models_match_joint_gaussian(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, int(rng.integers(1, 4)))
    n = int(rng.integers(1, 11))
    z = rng.normal(size=n) * 2
    expected = joint_gaussian_loglik(z, **m)
    assert abs(kalman_filter(build(m), z).loglikelihood - expected) < 1e-8


def test_missing_observations_marginalise():
    rng = np.random.default_rng(3)
    m = random_model(rng, 2)
    z = rng.normal(size=6)
    z_missing = z.copy()
    z_missing[[1, 4]] = np.nan
    from oracles import joint_gaussian_moments
    mean, cov = joint_gaussian_moments(n=6, **m)
    keep = ~np.isnan(z_missing)
    expected = stats.multivariate_normal(mean[keep], cov[np.ix_(keep, keep)]).logpdf(z[keep])
    res = kalman_filter(build(m), z_missing)
    assert abs(res.loglikelihood - expected) < 1e-8
    assert np.isnan(res.innovations[1]) and res.nobs_effective == 4


def test_missing_never_shrinks_predicted_covariance():
    model = local_level(0.3, 1.0, p0=1.0)
    z = np.array([1.0, np.nan, np.nan, 2.0, np.nan])
    res = kalman_filter(model, z)
    P = res.predicted_state_covs[:, 0, 0]
    for t in np.flatnonzero(np.isnan(z)):
        assert P[t + 1] >= P[t]


def test_burn_in_counts_observed_steps():
    model = local_level(0.5, 1.0, n_diffuse=1)
    res = kalman_filter(model, [np.nan, np.nan, 1.0, 2.0, 3.0])
    assert res.nobs_effective == 2
    assert np.isnan(res.loglikelihood_terms[2]) and not np.isnan(res.loglikelihood_terms[3])


def test_split_filtering_is_equivalent():
    rng = np.random.default_rng(11)
    m = random_model(rng, 3)
    model = build(m)
    z = rng.normal(size=40)
    full = kalman_filter(model, z)
    first = kalman_filter(model, z[:17])
    cont = model.with_initial(first.predicted_state_means[-1], first.predicted_state_covs[-1])
    second = kalman_filter(cont, z[17:])
    np.testing.assert_allclose(np.r_[first.innovations, second.innovations], full.innovations, atol=1e-10)
    assert first.loglikelihood + second.loglikelihood == pytest.approx(full.loglikelihood, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(kappa=st.floats(-50, 50), seed=st.integers(0, 10_000))
def test_obs_intercept_shift_invariance(kappa, seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, 2)
    z = rng.normal(size=12)
    base = build(m)
    shifted = base.with_obs_intercept(base.obs_intercept + kappa)
    a = kalman_filter(base, z)
    b = kalman_filter(shifted, z + kappa)
    np.testing.assert_allclose(a.innovations, b.innovations, atol=1e-8)
    assert a.loglikelihood == pytest.approx(b.loglikelihood, abs=1e-8)


def test_steady_state_path_matches_full_recursion():
    # time-varying design disables the steady-state shortcut; results must agree
    rng = np.random.default_rng(5)
    z = rng.normal(size=500).cumsum()
    model = local_level(0.4, 1.2, p0=1.0)
    tv = StateSpaceModel.create(transition=[[1.0]], design=np.ones((500, 1)), selection=[[1.0]],
                                state_cov=[[0.4]], obs_cov=1.2, init_mean=[0.0], init_cov=[[1.0]])
    a, b = kalman_filter(model, z), kalman_filter(tv, z)
    np.testing.assert_allclose(a.innovations, b.innovations, rtol=1e-10, atol=1e-10)
    assert a.loglikelihood == pytest.approx(b.loglikelihood, rel=1e-12)


def test_dimension_mismatch_is_configuration_error():
    with pytest.raises(ConfigurationError):
        StateSpaceModel.create(transition=np.eye(2), design=[1.0, 0.0], selection=np.ones((3, 1)),
                               state_cov=[[1.0]], obs_cov=1.0)
    model = StateSpaceModel.create(transition=np.eye(1), design=[1.0], selection=[[1.0]], state_cov=[[1.0]],
                                   obs_cov=1.0, obs_intercept=np.zeros(5))
    with pytest.raises(ConfigurationError):
        kalman_filter(model, np.zeros(4))


def test_non_finite_matrix_is_input_error():
    with pytest.raises(InputError):
        StateSpaceModel.create(transition=[[np.nan]], design=[1.0], selection=[[1.0]], state_cov=[[1.0]], obs_cov=1.0)


def test_zero_innovation_variance_names_step():
    model = local_level(0.0, 0.0, p0=1.0)
    with pytest.raises(NumericalError) as err:
        kalman_filter(model, [1.0, 1.0])
    assert err.value.step == 1


# ---------------------------------------------------------------- smoother

def test_smoother_zero_noise_equals_filter():
    model = local_level(0.0, 1.0, a0=3.0, p0=0.0)
    z = [3.0, 2.0, 4.0]
    res = kalman_filter(model, z)
    means, _ = smooth(model, res)
    np.testing.assert_allclose(means, res.filtered_state_means, atol=1e-12)


def test_smoother_two_step_joint_gaussian():
    q, h, a0, p0 = 0.5, 1.5, 0.3, 2.0
    z = np.array([1.1, -0.4])
    model = local_level(q, h, a0=a0, p0=p0)
    means, covs = smooth(model, kalman_filter(model, z))
    # joint of (l0, z0, z1): l1 = l0 + eta
    mu = np.array([a0, a0, a0])
    S = np.array([[p0, p0, p0],
                  [p0, p0 + h, p0],
                  [p0, p0, p0 + q + h]])
    gain = S[0, 1:] @ np.linalg.inv(S[1:, 1:])
    assert means[0, 0] == pytest.approx(mu[0] + gain @ (z - mu[1:]), abs=1e-12)
    assert covs[0, 0, 0] == pytest.approx(S[0, 0] - gain @ S[1:, 0], abs=1e-12)


def test_smoother_boundary_and_variance_reduction():
    rng = np.random.default_rng(2)
    m = random_model(rng, 3)
    model = build(m)
    z = rng.normal(size=25)
    z[7] = np.nan
    res = kalman_filter(model, z)
    means, covs = smooth(model, res)
    np.testing.assert_allclose(means[-1], res.filtered_state_means[-1], atol=1e-10)
    np.testing.assert_allclose(covs[-1], res.filtered_state_covs[-1], atol=1e-10)
    for t in range(25):
        assert np.all(np.diag(covs[t]) <= np.diag(res.filtered_state_covs[t]) + 1e-9)


def test_smoother_rejects_unstored_result():
    model = local_level(0.5, 1.0)
    res = kalman_filter(model, np.ones(5), store=False)
    with pytest.raises(InputError):
        smooth(model, res)


# ---------------------------------------------------------------- forecast

def test_forecast_constant_model():
    model = local_level(0.0, 1.0, a0=5.0, p0=0.0)
    fc = forecast(model, kalman_filter(model, [5.0, 5.0]), 4)
    np.testing.assert_allclose(fc.point_forecasts, 5.0)


def test_forecast_random_walk_variance_growth():
    model = local_level(0.25, 1.0, p0=1.0)
    res = kalman_filter(model, [1.0, 2.0, 1.5, 3.0])
    fc = forecast(model, res, 5)
    np.testing.assert_allclose(fc.point_forecasts, res.filtered_state_means[-1, 0], atol=1e-12)
    np.testing.assert_allclose(np.diff(fc.forecast_variances), 0.25, atol=1e-12)


def test_forecast_ar1_hand_recursion():
    model = StateSpaceModel.create(transition=[[0.5]], design=[1.0], selection=[[1.0]], state_cov=[[1.0]],
                                   obs_cov=0.0, init_mean=[0.0], init_cov=[[1.0]])
    res = kalman_filter(model, [2.0])  # filtered state is exactly the observation
    assert res.filtered_state_means[-1, 0] == pytest.approx(2.0)
    fc = forecast(model, res, 3)
    np.testing.assert_allclose(fc.point_forecasts, [1.0, 0.5, 0.25], atol=1e-12)
    assert np.all(np.diff(fc.forecast_variances) >= 0)


def test_forecast_log_inverse_and_errors():
    model = local_level(0.0, 1.0, a0=math.log1p(9.0), p0=0.0)
    res = kalman_filter(model, [math.log1p(9.0)])
    fc = forecast(model, res, 2, log_transform=True)
    np.testing.assert_allclose(fc.point_forecasts, 9.0)
    with pytest.raises(InputError):
        forecast(model, res, 0)
    with pytest.raises(InputError):
        forecast(model, res, 2, future_obs_intercepts=[0.0])
