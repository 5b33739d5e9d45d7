"""
Maximum-likelihood estimation for ARIMAX and UC models.

The likelihood is maximised over unconstrained parameters with L-BFGS-B and
finite-difference gradients from several starting points.  The series is
divided by its standard deviation before optimisation (variances and
coefficients are rescaled afterwards), which keeps the problem well
conditioned for rates of order 1e-3 and log-counts alike.  Standard errors
come from a central-difference Hessian in the unconstrained scale mapped to
the natural scale with the delta method.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, stats

from .builders import (
    RegressionSpec,
    build_from_prepared,
    parameter_layout,
    prepare_data,
    spec_to_dict,
    transform_series,
)
from .errors import CollinearityError, ConfigurationError, ConstraintError, FitError, InputError, NumericalError
from .ssm import ForecastResult, forecast as ssm_forecast, kalman_filter
from .transforms import ParameterVector

logger = logging.getLogger(__name__)

HESSIAN_STEP = 1e-4
OPTIMIZER_TOL = 1e-8
MAX_ITER = 500
_PENALTY = 1e10
# optimiser box in the unconstrained scale; keeps variances away from exact
# zero and polynomials away from the unit circle
_BOUNDS = {"variance": (-30.0, 15.0), "ar": (-15.0, 15.0), "ma": (-15.0, 15.0),
           "seasonal_ar": (-15.0, 15.0), "seasonal_ma": (-15.0, 15.0), "frequency": (-15.0, 15.0)}


def information_criteria(loglik, k, nobs):
    aic = 2 * k - 2 * loglik
    bic = k * math.log(nobs) - 2 * loglik
    hqic = 2 * k * math.log(math.log(nobs)) - 2 * loglik
    return aic, bic, hqic


def _scale_factors(kinds, scale):
    f = np.ones(len(kinds))
    for i, kind in enumerate(kinds):
        if kind in ("beta", "intercept"):
            f[i] = scale
        elif kind == "variance":
            f[i] = scale * scale
    return f


@dataclass
class FitResult:
    """Estimated model, inference and diagnostics inputs."""

    spec: object
    regression: RegressionSpec | None
    params: ParameterVector
    loglikelihood: float
    standard_errors: np.ndarray
    z_scores: np.ndarray
    p_values: np.ndarray
    se_reliable: bool
    residuals: np.ndarray
    innovations: np.ndarray
    aic: float
    bic: float
    hqic: float
    nobs_effective: int
    convergence: dict
    model: object = field(repr=False)
    filter_result: object = field(repr=False)
    series: np.ndarray = field(repr=False)
    start: int = 0

    @property
    def k(self):
        return len(self.params)

    @property
    def residual_variance(self):
        v = self.innovations[self.filter_result.contributing]
        return float(np.var(v))

    @property
    def signal_to_noise(self):
        """Level-disturbance over irregular variance (UC fits with a level shock)."""
        level = self.params.get("sigma2.level")
        if level is None:
            return None
        return float(level / self.params["sigma2.irregular"])

    def summary_rows(self):
        return [{"name": n, "estimate": float(v), "std_error": float(s), "z": float(z), "p_value": float(p)}
                for n, v, s, z, p in zip(self.params.names, self.params.values, self.standard_errors,
                                         self.z_scores, self.p_values)]

    def to_dict(self):
        return {
            "spec": spec_to_dict(self.spec),
            "covariates": list(self.regression.covariate_names) if self.regression is not None else [],
            "parameters": self.summary_rows(),
            "se_reliable": self.se_reliable,
            "loglikelihood": self.loglikelihood,
            "aic": self.aic, "bic": self.bic, "hqic": self.hqic,
            "nobs_effective": self.nobs_effective, "k": self.k,
            "residual_variance": self.residual_variance,
            "signal_to_noise": self.signal_to_noise,
            "convergence": self.convergence,
        }

    def to_json(self):
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, indent=2)

    def forecast(self, horizon, future_exog=None) -> ForecastResult:
        """Forecast ``horizon`` steps past the end of the fitted sample.

        ``future_exog`` holds the covariate rows (same columns and delay
        convention as the design matrix) for the forecast days.  For ``d=1``
        models the differenced forecasts are integrated back to levels.
        """
        spec = self.spec
        horizon = int(horizon)
        if horizon < 1:
            raise InputError("horizon must be at least 1")
        d_future = np.full(horizon, self.params.get("intercept", 0.0))
        if self.regression is not None:
            if future_exog is None:
                raise InputError("future covariate rows are required for a regression model")
            Xf = np.asarray(future_exog, dtype=float).reshape(horizon, -1)
            if getattr(spec, "d", 0) == 1:
                last = self.regression.design_matrix()[-1]
                Xf = np.diff(np.vstack([last, Xf]), axis=0)
            d_future = d_future + Xf @ self.params.select("beta")
        fc = ssm_forecast(self.model, self.filter_result, horizon, d_future)
        if getattr(spec, "d", 0) != 1:
            return ForecastResult(horizon, fc.mean, fc.forecast_variances, spec.log_transform)
        level = transform_series(spec, self.series)[-1]
        if not np.isfinite(level):
            raise InputError("last training observation is missing; cannot integrate forecasts")
        mean = level + np.cumsum(fc.mean)
        return ForecastResult(horizon, mean, _integrated_variances(self.model, self.filter_result, horizon),
                              spec.log_transform)


def _integrated_variances(model, result, horizon):
    T, D = model.transition[-1], model.design[-1]
    a_cov = result.predicted_state_covs[-1].copy()
    cross = np.zeros(a_cov.shape[0])
    var = 0.0
    out = np.empty(horizon)
    for h in range(horizon):
        PD = a_cov @ D
        var = var + D @ PD + 2 * D @ cross + model.obs_cov
        cross = cross + PD
        out[h] = var
        cross = T @ cross
        a_cov = T @ a_cov @ T.T + model._rqr
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


class _Objective:
    def __init__(self, spec, names, kinds, endog, exog, burn=None):
        self.spec, self.names, self.kinds = spec, names, kinds
        self.burn = burn
        self.endog, self.exog = endog, exog
        self.n = endog.shape[0]
        self.nobs = max(1, int(np.sum(~np.isnan(endog))))

    def loglik(self, x):
        params = ParameterVector.from_unconstrained(self.names, self.kinds, x)
        model = build_from_prepared(self.spec, params, self.exog, self.n)
        return kalman_filter(model, self.endog, burn=self.burn, store=False).loglikelihood

    def __call__(self, x):
        try:
            ll = self.loglik(x)
        except (NumericalError, ConstraintError, InputError, np.linalg.LinAlgError, FloatingPointError):
            return _PENALTY
        if not math.isfinite(ll):
            return _PENALTY
        return -ll / self.nobs


def _ols_betas(endog, exog):
    ok = ~np.isnan(endog)
    if exog is None or ok.sum() <= exog.shape[1]:
        return None
    beta, *_ = np.linalg.lstsq(exog[ok], endog[ok], rcond=None)
    return beta


def _absorbed_columns(spec, n):
    """Regressors the model's own diffuse or constant states can reproduce."""
    t = np.arange(n, dtype=float)
    cols = []
    if spec.family == "arima":
        if spec.intercept:
            cols.append(np.ones(n))
        return cols
    n_trend = {"none": 0, "fixed_intercept": 1, "local_level": 1}.get(spec.trend_kind, 2)
    if n_trend:
        cols.append(np.ones(n))
    if n_trend == 2:
        cols.append(t)
    for on, period in ((spec.weekly_seasonal, 7), (spec.monthly_seasonal, 30)):
        if on:
            cols += [(t % period == j).astype(float) for j in range(period - 1)]
    return cols


def check_identifiable(spec, exog, observed, names):
    """Raise CollinearityError when covariates are linearly dependent on the
    training rows, either among themselves or with the model's own states."""
    X = exog[observed]
    extra = [c[observed] for c in _absorbed_columns(spec, exog.shape[0])]
    A = np.column_stack([X] + extra) if extra else X
    A = A / np.maximum(np.linalg.norm(A, axis=0), 1e-300)
    _, R, piv = linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(A.shape) * np.finfo(float).eps * 1e3 * (diag[0] if diag.size else 1.0)
    rank = int(np.sum(diag > tol))
    if rank < A.shape[1]:
        # order the state columns first so that the blame lands on covariates
        B = np.column_stack(extra + [X]) if extra else X
        B = B / np.maximum(np.linalg.norm(B, axis=0), 1e-300)
        bad = []
        basis = np.zeros((B.shape[0], 0))
        for j in range(B.shape[1]):
            cand = np.column_stack([basis, B[:, j]])
            if np.linalg.matrix_rank(cand, tol=tol) > basis.shape[1]:
                basis = cand
            elif j >= len(extra):
                bad.append(names[j - len(extra)])
        raise CollinearityError(f"{spec.label}: collinear covariates {bad}", columns=bad)


def _hessian(f, x, step=HESSIAN_STEP):
    k = x.size
    H = np.empty((k, k))
    f0 = f(x)
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = step
        fp, fm = f(x + ei), f(x - ei)
        H[i, i] = (fp - 2 * f0 + fm) / step ** 2
        for j in range(i):
            ej = np.zeros(k)
            ej[j] = step
            val = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * step ** 2)
            H[i, j] = H[j, i] = val
    return H


def _transform_jacobian(names, kinds, x, step=1e-6):
    k = x.size
    J = np.empty((k, k))
    for i in range(k):
        e = np.zeros(k)
        e[i] = step
        hi = ParameterVector.from_unconstrained(names, kinds, x + e).values
        lo = ParameterVector.from_unconstrained(names, kinds, x - e).values
        J[:, i] = (hi - lo) / (2 * step)
    return J


def _standard_errors(negll, xhat, names, kinds, factors):
    """Delta-method standard errors from the Hessian of ``negll`` at ``xhat``.

    Variances estimated at zero leave a flat direction in the likelihood; those
    parameters are held fixed (standard error NaN) and the rest of the Hessian
    is inverted on its own.  A variance counts as zero when its curvature is
    negligible or negative (the optimiser stalled on the way to zero) or it
    is below 1e-6 of the largest variance.  Returns
    ``(se, reliable, boundary_indices)``.
    """
    k = xhat.size
    se = np.full(k, np.nan)
    H = _hessian(negll, xhat)
    if not np.all(np.isfinite(H)):
        return se, False, []
    H = 0.5 * (H + H.T)
    diag = np.diag(H)
    var_idx = [i for i in range(k) if kinds[i] == "variance"]
    top = max((xhat[i] for i in var_idx), default=0.0)
    boundary = [i for i in var_idx if diag[i] <= 1e-6 * max(np.abs(diag).max(), 1.0) or xhat[i] < top + math.log(1e-6)]
    free = [i for i in range(k) if i not in boundary]
    if not free:
        return se, False, boundary
    Hf = H[np.ix_(free, free)]
    if np.linalg.eigvalsh(Hf).min() <= 0:
        return se, False, boundary
    cov_u = np.zeros((k, k))
    cov_u[np.ix_(free, free)] = np.linalg.inv(Hf)
    J = _transform_jacobian(names, kinds, xhat) * factors[:, None]
    cov = J @ cov_u @ J.T
    se[free] = np.sqrt(np.clip(np.diag(cov)[free], 0.0, None))
    return se, True, boundary


def fit(spec, series, reg=None, *, start=0, n_starts=3, seed=0, maxiter=MAX_ITER, tol=OPTIMIZER_TOL,
        start_params=None, compute_se=True, burn=None) -> FitResult:
    """Maximum-likelihood fit of ``spec`` (with optional covariates) to ``series``.

    Observations before index ``start`` are treated as missing.  The first
    start point is the unconstrained origin (covariate coefficients at their
    least-squares values); the others perturb it with seeded noise.
    ``start_params`` (natural scale) is tried in addition when given.
    ``burn`` overrides the number of leading observations left out of the
    likelihood (default: the model's diffuse state count); pass a common
    value to compare models with different diffuse dimensions on the same
    sample.
    """
    y = np.array(series, dtype=float, copy=True).ravel()
    if start:
        y[:start] = np.nan
    endog, exog = prepare_data(spec, y, reg)
    names, kinds = parameter_layout(spec, reg)
    k = len(names)
    observed = ~np.isnan(endog)
    if observed.sum() < 10 * k:
        raise InputError(f"{observed.sum()} usable observations for {k} parameters; need at least {10 * k}")
    if exog is not None:
        dead = np.all(exog[observed] == 0, axis=0)
        if dead.any():
            bad = [reg.covariate_names[i] for i in np.flatnonzero(dead)]
            raise ConfigurationError(f"covariates constant zero over the training window: {bad}")
        check_identifiable(spec, exog, observed, reg.covariate_names)

    scale = float(np.nanstd(endog))
    if not scale > 0 or not math.isfinite(scale):
        scale = 1.0
    factors = _scale_factors(kinds, scale)
    obj = _Objective(spec, names, kinds, endog / scale, exog, burn)

    x0 = np.zeros(k)
    beta0 = _ols_betas(endog / scale, exog)
    beta_idx = [i for i, kd in enumerate(kinds) if kd == "beta"]
    if beta0 is not None:
        x0[beta_idx] = beta0
    if "intercept" in kinds:
        x0[kinds.index("intercept")] = float(np.nanmean(endog)) / scale
    rng = np.random.default_rng(seed)
    starts = [x0]
    if start_params is not None:
        sp = ParameterVector(names, kinds, np.asarray(start_params, dtype=float) / factors)
        try:
            starts.insert(0, sp.unconstrained())
        except (ConstraintError, InputError):
            pass
    for _ in range(max(0, n_starts - 1)):
        starts.append(x0 + rng.normal(scale=0.5, size=k))
    bounds = [_BOUNDS.get(kd, (None, None)) for kd in kinds]
    starts = [np.clip(s, [b[0] if b[0] is not None else -np.inf for b in bounds],
                      [b[1] if b[1] is not None else np.inf for b in bounds]) for s in starts]

    best = None
    start_values = []
    for x in starts:
        start_values.append(float(obj(x)))
        res = optimize.minimize(obj, x, method="L-BFGS-B", jac="3-point", bounds=bounds,
                                options={"maxiter": maxiter, "ftol": tol, "gtol": 1e-6})
        ok = res.fun < _PENALTY and (res.success or np.max(np.abs(res.jac)) < 1e-3)
        cand = (ok, -res.fun, res)
        if best is None or (cand[0], cand[1]) > (best[0], best[1]):
            best = cand
    ok, _, res = best
    if not ok:
        raise FitError(f"{spec.label}: optimiser did not converge from {len(starts)} starts ({res.message})",
                       best=res.x, loglikelihood=-res.fun * obj.nobs if res.fun < _PENALTY else None)
    xhat = res.x

    natural_scaled = ParameterVector.from_unconstrained(names, kinds, xhat)
    params = natural_scaled.with_values(natural_scaled.values * factors)

    se = np.full(k, np.nan)
    reliable = False
    boundary = []
    if compute_se:
        negll = lambda x: -obj.loglik(x) if np.all(np.isfinite(x)) else np.inf
        try:
            se, reliable, boundary = _standard_errors(negll, xhat, names, kinds, factors)
        except (NumericalError, ConstraintError, InputError, np.linalg.LinAlgError):
            pass
        if not reliable:
            logger.warning("%s: Hessian not positive definite; standard errors unreliable", spec.label)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, params.values / se, np.where(params.values == 0, 0.0, np.nan))
    p = 2.0 * stats.norm.sf(np.abs(z))
    p = np.where(np.isnan(z), np.nan, p)

    model = build_from_prepared(spec, params, exog, endog.shape[0])
    fres = kalman_filter(model, endog, burn=burn)
    resid = np.where(fres.contributing, fres.standardized_innovations, np.nan)
    n_eff = fres.nobs_effective
    aic, bic, hqic = information_criteria(fres.loglikelihood, k, n_eff)
    convergence = {
        "status": int(res.status), "message": str(res.message), "iterations": int(res.nit),
        "grad_norm": float(np.linalg.norm(res.jac)), "n_starts": len(starts),
        "start_objectives": start_values, "best_objective": float(res.fun), "scale": scale,
        "burn": fres.burn, "boundary_parameters": [names[i] for i in boundary],
    }
    return FitResult(spec=spec, regression=reg if spec.include_regression else None, params=params,
                     loglikelihood=fres.loglikelihood, standard_errors=se, z_scores=z, p_values=p,
                     se_reliable=reliable, residuals=resid, innovations=fres.innovations, aic=aic, bic=bic,
                     hqic=hqic, nobs_effective=n_eff, convergence=convergence, model=model,
                     filter_result=fres, series=y, start=start)


@dataclass(frozen=True)
class Verdict:
    name: str
    estimate: float
    std_error: float
    z: float
    p_value: float
    keep: bool
    provisional: bool


def two_sided_p(estimate, std_error):
    if estimate == 0:
        return 0.0, 1.0
    if not std_error > 0:
        return float("nan"), float("nan")
    z = estimate / std_error
    return z, float(2.0 * stats.norm.sf(abs(z)))


def significance(fit_result: FitResult, alpha=0.1, names=None):
    """Keep/reject verdict per parameter from a two-sided normal test.

    Verdicts are marked provisional when the standard errors are unreliable;
    a parameter without a usable standard error is rejected.
    """
    out = {}
    for name, est, se in zip(fit_result.params.names, fit_result.params.values, fit_result.standard_errors):
        if names is not None and name not in names:
            continue
        z, p = two_sided_p(float(est), float(se))
        keep = bool(p < alpha) if math.isfinite(p) else False
        out[name] = Verdict(name, float(est), float(se), z, p, keep,
                            provisional=not fit_result.se_reliable or not math.isfinite(p))
    return out
