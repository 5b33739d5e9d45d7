"""
Declarative ARIMAX and unobserved-components specifications and the
construction of :class:`~churnssm.ssm.StateSpaceModel` instances from them.

Regression effects always enter through the observation intercept.  A
regular difference (``d=1``) is applied to the series *and* to every
covariate column before the model is built, so coefficients keep their
level interpretation; the first differenced step is marked missing to keep
arrays aligned with the input dates.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg

from .errors import ConfigurationError, InputError
from .ssm import DIFFUSE_VARIANCE, StateSpaceModel
from .transforms import ParameterVector

TREND_KINDS = ("none", "fixed_intercept", "local_level", "fixed_slope",
               "local_level_det_trend", "local_linear_trend", "smooth_trend")

# (number of states, has level shock, has slope shock)
_TREND_LAYOUT = {
    "none": (0, False, False),
    "fixed_intercept": (1, False, False),
    "local_level": (1, True, False),
    "fixed_slope": (2, False, False),
    "local_level_det_trend": (2, True, False),
    "local_linear_trend": (2, True, True),
    "smooth_trend": (2, False, True),
}
WEEKLY_PERIOD = 7
MONTHLY_PERIOD = 30


@dataclass(frozen=True)
class ArimaSpec:
    p: int = 0
    d: int = 1
    q: int = 0
    include_regression: bool = False
    log_transform: bool = False
    intercept: bool = False
    seasonal_p: int = 0
    seasonal_q: int = 0
    seasonal_period: int = WEEKLY_PERIOD

    family = "arima"

    def __post_init__(self):
        for name in ("p", "q", "seasonal_p", "seasonal_q"):
            if not 0 <= getattr(self, name) <= 5:
                raise ConfigurationError(f"{name}={getattr(self, name)} outside [0, 5]")
        if self.d not in (0, 1):
            raise ConfigurationError("d must be 0 or 1")
        if (self.p, self.d, self.q, self.seasonal_p, self.seasonal_q) == (0, 0, 0, 0, 0) \
                and not (self.include_regression or self.intercept):
            raise ConfigurationError("ARIMA(0,0,0) needs a regression or an intercept")

    @property
    def label(self):
        s = f"ARIMA({self.p},{self.d},{self.q})"
        if self.seasonal_p or self.seasonal_q:
            s += f"({self.seasonal_p},0,{self.seasonal_q})[{self.seasonal_period}]"
        return s

    @property
    def state_dim(self):
        per = self.seasonal_period
        return max(self.p + per * self.seasonal_p, self.q + per * self.seasonal_q + 1)

    @property
    def arma_order(self):
        return self.p + self.q + self.seasonal_p + self.seasonal_q


@dataclass(frozen=True)
class UcSpec:
    trend_kind: str = "local_level"
    weekly_seasonal: bool = False
    monthly_seasonal: bool = False
    cycle: bool = False
    include_regression: bool = False
    log_transform: bool = False

    family = "uc"

    def __post_init__(self):
        if self.trend_kind not in TREND_KINDS:
            raise ConfigurationError(f"unknown trend_kind {self.trend_kind!r}")
        if self.trend_kind == "none" and not (self.weekly_seasonal or self.monthly_seasonal
                                              or self.cycle or self.include_regression):
            raise ConfigurationError("UC model needs at least one component or a regression")

    @property
    def label(self):
        parts = [self.trend_kind]
        parts += [name for name, on in (("weekly", self.weekly_seasonal), ("monthly", self.monthly_seasonal),
                                        ("cycle", self.cycle)) if on]
        return "UC(" + "+".join(parts) + ")"

    @property
    def state_dim(self):
        return (_TREND_LAYOUT[self.trend_kind][0] + (WEEKLY_PERIOD - 1) * self.weekly_seasonal
                + (MONTHLY_PERIOD - 1) * self.monthly_seasonal + 2 * self.cycle)

    @property
    def arma_order(self):
        return 0


def spec_to_dict(spec):
    doc = asdict(spec)
    doc["family"] = spec.family
    return doc


def spec_from_dict(doc):
    doc = dict(doc)
    family = doc.pop("family", None)
    if family is None:
        family = "uc" if "trend_kind" in doc else "arima"
    cls = {"arima": ArimaSpec, "uc": UcSpec}.get(family)
    if cls is None:
        raise ConfigurationError(f"unknown model family {family!r}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def spec_to_json(spec):
    return json.dumps(spec_to_dict(spec), sort_keys=True)


def spec_from_json(text):
    return spec_from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class RegressionSpec:
    """Covariate columns for the observation intercept.

    ``delay_days`` shifts every column forward in time: the value used at
    step ``t`` is the column value at ``t - delay_days`` (zero before the
    start).
    """

    covariate_names: tuple
    covariate_matrix: np.ndarray
    delay_days: int = 0

    def __post_init__(self):
        names = tuple(self.covariate_names)
        X = np.asarray(self.covariate_matrix, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "covariate_matrix", X)
        if X.shape[1] != len(names):
            raise ConfigurationError(f"{X.shape[1]} covariate columns but {len(names)} names")
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate covariate names")
        if self.delay_days < 0:
            raise ConfigurationError("delay_days must be non-negative")
        if not np.all(np.isfinite(X)):
            raise InputError("covariate matrix contains non-finite values")

    @property
    def n_covariates(self):
        return len(self.covariate_names)

    def design_matrix(self):
        X = self.covariate_matrix
        k = self.delay_days
        if k == 0:
            return X
        out = np.zeros_like(X)
        out[k:] = X[:-k]
        return out

    def subset(self, names):
        idx = [self.covariate_names.index(n) for n in names]
        return RegressionSpec(tuple(names), self.covariate_matrix[:, idx], self.delay_days)

    def rows(self, stop):
        return RegressionSpec(self.covariate_names, self.covariate_matrix[:stop], self.delay_days)

    def with_columns(self, names, columns):
        cols = np.asarray(columns, dtype=float).reshape(self.covariate_matrix.shape[0], -1)
        return RegressionSpec(self.covariate_names + tuple(names),
                              np.column_stack([self.covariate_matrix, cols]), self.delay_days)


def _regression(spec, reg):
    if not spec.include_regression:
        return None
    if reg is None or reg.n_covariates == 0:
        raise ConfigurationError(f"{spec.label} expects a regression but none was given")
    return reg


def transform_series(spec, series):
    y = np.asarray(series, dtype=float)
    if spec.log_transform:
        if np.nanmin(y) <= -1:
            raise InputError("log1p transform needs values > -1")
        y = np.log1p(y)
    return y


def prepare_data(spec, series, reg=None):
    """Transformed (and, for ``d=1``, differenced) endog plus exog columns.

    Returns ``(endog, exog)``; ``exog`` is ``None`` without regression.
    """
    y = transform_series(spec, series)
    reg = _regression(spec, reg)
    X = None
    if reg is not None:
        X = reg.design_matrix()
        if X.shape[0] != y.shape[0]:
            raise ConfigurationError(f"covariates have {X.shape[0]} rows, series has {y.shape[0]}")
    if getattr(spec, "d", 0) == 1:
        y = np.r_[np.nan, np.diff(y)]
        if X is not None:
            X = np.vstack([np.zeros((1, X.shape[1])), np.diff(X, axis=0)])
    return y, X


def parameter_layout(spec, reg=None):
    """Ordered ``(names, kinds)`` of the free parameters of ``spec``."""
    reg = _regression(spec, reg)
    names, kinds = [], []
    if reg is not None:
        names += [f"beta.{n}" for n in reg.covariate_names]
        kinds += ["beta"] * reg.n_covariates
    if spec.family == "arima":
        if spec.intercept:
            names.append("intercept")
            kinds.append("intercept")
        for prefix, kind, order in (("ar.L", "ar", spec.p), ("ma.L", "ma", spec.q),
                                    ("ar.S", "seasonal_ar", spec.seasonal_p),
                                    ("ma.S", "seasonal_ma", spec.seasonal_q)):
            step = 1 if kind in ("ar", "ma") else spec.seasonal_period
            names += [f"{prefix}{step * (i + 1)}" for i in range(order)]
            kinds += [kind] * order
        names.append("sigma2")
        kinds.append("variance")
    else:
        _, level, slope = _TREND_LAYOUT[spec.trend_kind]
        names.append("sigma2.irregular")
        for name, on in (("sigma2.level", level), ("sigma2.trend", slope),
                         ("sigma2.weekly", spec.weekly_seasonal), ("sigma2.monthly", spec.monthly_seasonal),
                         ("sigma2.cycle", spec.cycle)):
            if on:
                names.append(name)
        kinds += ["variance"] * (len(names) - len(kinds))
        if spec.cycle:
            names.append("frequency.cycle")
            kinds.append("frequency")
    return tuple(names), tuple(kinds)


def _check_params(spec, reg, params):
    names, kinds = parameter_layout(spec, reg)
    if params.names != names or params.kinds != kinds:
        raise ConfigurationError(f"parameters {params.names} do not match {spec.label} layout {names}")


def _poly_product(a, b, period):
    """Coefficients (lag 1..) of (1 + sum a_i B^i)(1 + sum b_j B^{period j})."""
    full_a = np.r_[1.0, a]
    full_b = np.zeros(period * len(b) + 1)
    full_b[0] = 1.0
    full_b[period::period] = b
    return np.convolve(full_a, full_b)[1:]


def _obs_intercept(params, exog, n, intercept=0.0):
    betas = params.select("beta")
    if exog is None or betas.size == 0:
        return np.full(1, intercept) if n is None else np.full(n, intercept)
    return exog @ betas + intercept


def arma_matrices(spec, params):
    """Companion-form ``(T, R)`` for the (seasonal) ARMA part."""
    ar = _poly_product(-params.select("ar"), -params.select("seasonal_ar"), spec.seasonal_period)
    ma = _poly_product(params.select("ma"), params.select("seasonal_ma"), spec.seasonal_period)
    phi = -ar
    r = spec.state_dim
    T = np.zeros((r, r))
    T[: phi.size, 0] = phi
    T[:-1, 1:] = np.eye(r - 1)
    R = np.zeros((r, 1))
    R[0, 0] = 1.0
    R[1: ma.size + 1, 0] = ma
    return T, R


def _build_arima(spec, params, exog, n):
    T, R = arma_matrices(spec, params)
    sigma2 = params["sigma2"]
    r = T.shape[0]
    rqr = sigma2 * (R @ R.T)
    P0 = linalg.solve_discrete_lyapunov(T, rqr) if r > 1 else rqr / (1.0 - T[0, 0] ** 2)
    P0 = 0.5 * (P0 + P0.T)
    design = np.zeros(r)
    design[0] = 1.0
    d = _obs_intercept(params, exog, n, params.get("intercept", 0.0))
    return StateSpaceModel.create(transition=T, design=design, selection=R, state_cov=[[sigma2]],
                                  obs_cov=0.0, init_mean=np.zeros(r), init_cov=P0, obs_intercept=d,
                                  n_diffuse=0)


def _seasonal_block(period):
    m = period - 1
    T = np.zeros((m, m))
    T[0, :] = -1.0
    T[1:, :-1] = np.eye(m - 1)
    return T


def _build_uc(spec, params, exog, n):
    blocks = []  # (T, design, [(shock row, variance)])
    n_states, level, slope = _TREND_LAYOUT[spec.trend_kind]
    if n_states == 1:
        blocks.append((np.eye(1), [1.0], [(0, params["sigma2.level"])] if level else []))
    elif n_states == 2:
        shocks = []
        if level:
            shocks.append((0, params["sigma2.level"]))
        if slope:
            shocks.append((1, params["sigma2.trend"]))
        blocks.append((np.array([[1.0, 1.0], [0.0, 1.0]]), [1.0, 0.0], shocks))
    for on, period, name in ((spec.weekly_seasonal, WEEKLY_PERIOD, "sigma2.weekly"),
                             (spec.monthly_seasonal, MONTHLY_PERIOD, "sigma2.monthly")):
        if on:
            blocks.append((_seasonal_block(period), [1.0] + [0.0] * (period - 2), [(0, params[name])]))
    if spec.cycle:
        lam = params["frequency.cycle"]
        cs, sn = math.cos(lam), math.sin(lam)
        var = params["sigma2.cycle"]
        blocks.append((np.array([[cs, sn], [-sn, cs]]), [1.0, 0.0], [(0, var), (1, var)]))
    if not blocks:
        # regression-only: a single inert state keeps the filter dimensions valid
        T = np.zeros((1, 1))
        return StateSpaceModel.create(transition=T, design=[0.0], selection=[[0.0]], state_cov=[[0.0]],
                                      obs_cov=params["sigma2.irregular"], init_mean=[0.0], init_cov=[[0.0]],
                                      obs_intercept=_obs_intercept(params, exog, n), n_diffuse=0)
    L = sum(b[0].shape[0] for b in blocks)
    K = sum(len(b[2]) for b in blocks)
    T = np.zeros((L, L))
    Z = np.zeros(L)
    R = np.zeros((L, max(K, 1)))
    q = np.zeros(max(K, 1))
    i = j = 0
    for Tb, Zb, shocks in blocks:
        m = Tb.shape[0]
        T[i:i + m, i:i + m] = Tb
        Z[i:i + m] = Zb
        for row, var in shocks:
            R[i + row, j] = 1.0
            q[j] = var
            j += 1
        i += m
    return StateSpaceModel.create(transition=T, design=Z, selection=R, state_cov=np.diag(q),
                                  obs_cov=params["sigma2.irregular"], init_mean=np.zeros(L),
                                  init_cov=np.eye(L) * DIFFUSE_VARIANCE,
                                  obs_intercept=_obs_intercept(params, exog, n), n_diffuse=L)


def build_from_prepared(spec, params, exog, n):
    """Build on already prepared exog (the estimation hot path)."""
    if spec.family == "arima":
        return _build_arima(spec, params, exog, n)
    return _build_uc(spec, params, exog, n)


def build_arimax(spec: ArimaSpec, reg, params: ParameterVector, series_length) -> StateSpaceModel:
    if spec.family != "arima":
        raise ConfigurationError("build_arimax needs an ArimaSpec")
    _check_params(spec, reg, params)
    params.validate()
    _, exog = prepare_data(spec, np.zeros(series_length), reg)
    return _build_arima(spec, params, exog, series_length)


def build_uc(spec: UcSpec, reg, params: ParameterVector, series_length) -> StateSpaceModel:
    if spec.family != "uc":
        raise ConfigurationError("build_uc needs a UcSpec")
    _check_params(spec, reg, params)
    params.validate()
    _, exog = prepare_data(spec, np.zeros(series_length), reg)
    return _build_uc(spec, params, exog, series_length)


def build_model(spec, reg, params, series_length):
    return (build_arimax if spec.family == "arima" else build_uc)(spec, reg, params, series_length)


def default_parameters(spec, reg=None, **overrides):
    """Natural-scale parameters at the unconstrained origin, with overrides."""
    names, kinds = parameter_layout(spec, reg)
    params = ParameterVector.from_unconstrained(names, kinds, np.zeros(len(names)))
    values = params.values.copy()
    for name, value in overrides.items():
        key = name.replace("__", ".")
        if key not in names:
            raise ConfigurationError(f"unknown parameter {key!r} for {spec.label}")
        values[names.index(key)] = value
    return params.with_values(values)
