import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from churnssm.builders import (
    TREND_KINDS,
    ArimaSpec,
    RegressionSpec,
    UcSpec,
    build_arimax,
    build_uc,
    default_parameters,
    parameter_layout,
    spec_from_json,
    spec_to_json,
)
from churnssm.errors import ConfigurationError, ConstraintError, InputError
from churnssm.ssm import kalman_filter, smooth
from churnssm.transforms import (
    CYCLE_FREQUENCY_BOUNDS,
    ParameterVector,
    constrain_stationary,
    transform_parameters,
    unconstrain_stationary,
    untransform_parameters,
)


# ---------------------------------------------------------------- transforms

def test_variance_one_maps_to_zero():
    pv = ParameterVector(["s"], ["variance"], [1.0])
    assert transform_parameters(pv)[0] == 0.0


def test_ar_origin_fixed():
    pv = ParameterVector(["a"], ["ar"], [0.0])
    assert transform_parameters(pv)[0] == 0.0
    assert untransform_parameters(pv, [0.0]).values[0] == 0.0


def test_constrained_polynomials_are_stationary():
    rng = np.random.default_rng(0)
    for p in range(1, 6):
        for _ in range(20):
            phi = constrain_stationary(rng.normal(scale=3, size=p))
            roots = np.roots(np.r_[1.0, -phi][::-1])
            assert np.all(np.abs(roots) > 1.0)


def test_nonstationary_rejected():
    with pytest.raises(ConstraintError):
        unconstrain_stationary([1.2])
    with pytest.raises(ConstraintError):
        ParameterVector(["s"], ["variance"], [-1.0]).unconstrained()
    with pytest.raises(InputError):
        ParameterVector(["s"], ["variance"], [np.nan]).unconstrained()
    with pytest.raises(InputError):
        ParameterVector.from_unconstrained(["s"], ["variance"], [np.inf])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=9, max_size=9), st.integers(0, 5), st.integers(0, 5))
def test_round_trip(raw, p, q):
    names = ["beta.x", "ar1", "ar2", "ar3", "ar4", "ar5", "ma1", "ma2", "ma3", "ma4", "ma5", "s", "freq"]
    kinds = ["beta"] + ["ar"] * 5 + ["ma"] * 5 + ["variance", "frequency"]
    keep = [0] + list(range(1, 1 + p)) + list(range(6, 6 + q)) + [11, 12]
    names = [names[i] for i in keep]
    kinds = [kinds[i] for i in keep]
    x = np.resize(np.asarray(raw), len(names))
    natural = ParameterVector.from_unconstrained(names, kinds, x)
    back = ParameterVector.from_unconstrained(names, kinds, natural.unconstrained())
    np.testing.assert_allclose(back.values, natural.values, rtol=0, atol=1e-12)
    lo, hi = CYCLE_FREQUENCY_BOUNDS
    assert lo < natural.values[-1] < hi and natural.values[-2] > 0


# ---------------------------------------------------------------- ARIMA

def test_arma10_layout():
    spec = ArimaSpec(p=1, d=0, q=0)
    params = default_parameters(spec, **{"ar.L1": 0.4})
    m = build_arimax(spec, None, params, 10)
    assert m.state_dim == 1
    np.testing.assert_array_equal(m.transition[0], [[0.4]])
    np.testing.assert_array_equal(m.selection, [[1.0]])


def test_arma01_layout():
    spec = ArimaSpec(p=0, d=0, q=1)
    params = default_parameters(spec, **{"ma.L1": 0.3})
    m = build_arimax(spec, None, params, 10)
    np.testing.assert_array_equal(m.transition[0], [[0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(m.selection[:, 0], [1.0, 0.3])


@pytest.mark.parametrize("p,q", list(itertools.product(range(6), range(6))))
def test_arma_state_dimension(p, q):
    if p == q == 0:
        spec = ArimaSpec(p=0, d=1, q=0)
    else:
        spec = ArimaSpec(p=p, d=0, q=q)
    m = build_arimax(spec, None, default_parameters(spec), 20)
    assert m.state_dim == max(p, q + 1)


def test_seasonal_arma_polynomial_product():
    spec = ArimaSpec(p=1, d=0, q=1, seasonal_p=1, seasonal_q=1)
    params = default_parameters(spec, **{"ar.L1": 0.5, "ar.S7": 0.2, "ma.L1": 0.3, "ma.S7": 0.4})
    m = build_arimax(spec, None, params, 20)
    assert m.state_dim == 9
    col = m.transition[0][:, 0]
    # (1 - .5B)(1 - .2B^7) = 1 - .5B - .2B^7 + .1B^8
    np.testing.assert_allclose(col[[0, 6, 7]], [0.5, 0.2, -0.1])
    np.testing.assert_allclose(m.selection[[1, 7, 8], 0], [0.3, 0.4, 0.12])


def test_nonstationary_natural_params_rejected():
    spec = ArimaSpec(p=1, d=0)
    with pytest.raises(ConstraintError):
        build_arimax(spec, None, default_parameters(spec, **{"ar.L1": 1.5}), 10)


def test_param_mismatch_is_configuration_error():
    spec = ArimaSpec(p=1, d=0)
    with pytest.raises(ConfigurationError):
        build_arimax(spec, None, default_parameters(ArimaSpec(p=2, d=0)), 10)
    with pytest.raises(ConfigurationError):
        ArimaSpec(p=6)
    with pytest.raises(ConfigurationError):
        ArimaSpec(p=0, d=0, q=0)


def test_arima010_innovations_equal_differences():
    rng = np.random.default_rng(1)
    y = rng.normal(size=30).cumsum()
    spec = ArimaSpec(p=0, d=1, q=0)
    from churnssm.builders import prepare_data
    endog, _ = prepare_data(spec, y)
    res = kalman_filter(build_arimax(spec, None, default_parameters(spec), 30), endog)
    np.testing.assert_allclose(res.innovations[1:], np.diff(y), atol=1e-12)


def test_regression_only_reproduces_ols():
    rng = np.random.default_rng(4)
    n = 200
    x = rng.normal(size=n)
    y = 1.5 + 2.0 * x + rng.normal(size=n)
    reg = RegressionSpec(("x",), x[:, None])
    spec = ArimaSpec(p=0, d=0, q=0, include_regression=True, intercept=True)

    def ll(beta, alpha):
        params = default_parameters(spec, reg, **{"beta.x": beta, "intercept": alpha, "sigma2": 1.0})
        return kalman_filter(build_arimax(spec, reg, params, n), y).loglikelihood

    X = np.column_stack([x, np.ones(n)])
    ols = np.linalg.lstsq(X, y, rcond=None)[0]
    # loglik is exactly quadratic in (beta, alpha); solve its stationarity system by finite differences
    h = 0.5
    f0 = ll(0.0, 0.0)
    gb = (ll(h, 0) - ll(-h, 0)) / (2 * h)
    ga = (ll(0, h) - ll(0, -h)) / (2 * h)
    hbb = (ll(h, 0) - 2 * f0 + ll(-h, 0)) / h ** 2
    haa = (ll(0, h) - 2 * f0 + ll(0, -h)) / h ** 2
    hab = (ll(h, h) - ll(h, -h) - ll(-h, h) + ll(-h, -h)) / (4 * h * h)
    vertex = -np.linalg.solve([[hbb, hab], [hab, haa]], [gb, ga])
    np.testing.assert_allclose(vertex, ols, atol=1e-6)


def test_regression_delay_and_validation():
    X = np.arange(10.0)[:, None]
    reg = RegressionSpec(("x",), X, delay_days=3)
    np.testing.assert_array_equal(reg.design_matrix()[:, 0], [0, 0, 0, 0, 1, 2, 3, 4, 5, 6])
    with pytest.raises(ConfigurationError):
        RegressionSpec(("a", "b"), X)
    with pytest.raises(ConfigurationError):
        build_arimax(ArimaSpec(p=1, include_regression=True), None, default_parameters(ArimaSpec(p=1)), 10)


# ---------------------------------------------------------------- UC

def uc_specs():
    for trend, w, m, c in itertools.product(TREND_KINDS, (False, True), (False, True), (False, True)):
        if trend == "none" and not (w or m or c):
            continue
        yield UcSpec(trend_kind=trend, weekly_seasonal=w, monthly_seasonal=m, cycle=c)


@pytest.mark.parametrize("spec", list(uc_specs()), ids=lambda s: s.label)
def test_uc_state_dimension(spec):
    m = build_uc(spec, None, default_parameters(spec), 5)
    trend = {"none": 0, "fixed_intercept": 1, "local_level": 1}.get(spec.trend_kind, 2)
    assert m.state_dim == trend + 6 * spec.weekly_seasonal + 29 * spec.monthly_seasonal + 2 * spec.cycle
    assert m.n_diffuse == m.state_dim


def test_local_level_only():
    spec = UcSpec("local_level")
    m = build_uc(spec, None, default_parameters(spec), 5)
    np.testing.assert_array_equal(m.transition[0], [[1.0]])


def test_cycle_rotation_period_four():
    spec = UcSpec(trend_kind="none", cycle=True)
    params = default_parameters(spec, **{"frequency.cycle": math.pi / 2})
    with pytest.raises(ConstraintError):  # pi/2 is outside the admissible cycle band
        build_uc(spec, None, params, 5)
    from churnssm.builders import build_from_prepared
    m = build_from_prepared(spec, params, None, 5)
    T = m.transition[0]
    state = np.array([1.0, 0.0])
    seq = [state]
    for _ in range(4):
        seq.append(T @ seq[-1])
    np.testing.assert_allclose(seq[1], [0.0, -1.0], atol=1e-15)
    np.testing.assert_allclose(seq[2], [-1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(seq[4], seq[0], atol=1e-15)


def test_weekly_seasonal_sums_to_zero():
    rng = np.random.default_rng(7)
    n = 140
    pattern = np.array([1.0, -0.5, 0.3, 0.2, -0.4, 0.6, -1.2])
    y = 3.0 + np.tile(pattern, n // 7) + rng.normal(scale=0.1, size=n)
    spec = UcSpec("local_level", weekly_seasonal=True)
    params = default_parameters(spec, **{"sigma2.irregular": 0.01, "sigma2.level": 1e-4, "sigma2.weekly": 1e-12})
    model = build_uc(spec, None, params, n)
    means, _ = smooth(model, kalman_filter(model, y))
    seasonal = means[:, 1]
    sums = np.convolve(seasonal, np.ones(7), mode="valid")
    assert np.max(np.abs(sums)) < 1e-4


def test_fixed_intercept_innovations_detrended():
    y = np.array([4.0, 5.0, 2.5, 7.0])
    spec = UcSpec("fixed_intercept")
    model = build_uc(spec, None, default_parameters(spec, **{"sigma2.irregular": 1e-14}), 4)
    res = kalman_filter(model, y)
    np.testing.assert_allclose(res.innovations[1:], y[1:] - y[0], atol=1e-5)


def test_spec_json_round_trip():
    for spec in (ArimaSpec(p=2, d=1, q=1, log_transform=True), UcSpec("smooth_trend", cycle=True)):
        assert spec_from_json(spec_to_json(spec)) == spec
    with pytest.raises(ConfigurationError):
        spec_from_json('{"family": "garch"}')


def test_parameter_layout_names():
    reg = RegressionSpec(("hol",), np.zeros((5, 1)))
    names, kinds = parameter_layout(ArimaSpec(p=1, q=2, include_regression=True), reg)
    assert names == ("beta.hol", "ar.L1", "ma.L1", "ma.L2", "sigma2")
    names, _ = parameter_layout(UcSpec("local_linear_trend", weekly_seasonal=True, cycle=True))
    assert names == ("sigma2.irregular", "sigma2.level", "sigma2.trend", "sigma2.weekly", "sigma2.cycle",
                     "frequency.cycle")
