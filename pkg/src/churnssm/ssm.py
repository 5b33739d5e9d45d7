"""
Linear Gaussian state-space models with a univariate observation.

The model is

    l_t = T_t l_{t-1} + c_t + R eta_t,      eta_t ~ N(0, Q)
    z_t = D_t l_t + d_t + eps_t,            eps_t ~ N(0, H)

``init_mean`` / ``init_cov`` describe the distribution of the first state
``l_0`` before the first observation is seen.  Diffuse states are
approximated with a large diagonal variance and the first ``n_diffuse``
observed steps are left out of the likelihood.

Time-varying fields are stored with a leading time axis of length 1
(constant) or ``n`` (one entry per observation).  ``transition[t]`` and
``state_intercept[t]`` produce ``l_t`` from ``l_{t-1}``; out-of-sample
steps reuse the last entry.

The recursions themselves run in numba; everything else is plain numpy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .errors import ConfigurationError, InputError, NumericalError

DIFFUSE_VARIANCE = 1e7
PSD_TOLERANCE = 1e-10
_LOG_2PI = math.log(2.0 * math.pi)


def _as_stack(value, inner_ndim, name):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == inner_ndim:
        arr = arr[None, ...]
    elif arr.ndim != inner_ndim + 1:
        raise ConfigurationError(f"{name} has {arr.ndim} dims, expected {inner_ndim} or {inner_ndim + 1}")
    return np.ascontiguousarray(arr)


def _check_psd(mat, name):
    if not np.allclose(mat, mat.T, atol=1e-10, rtol=1e-10):
        raise ConfigurationError(f"{name} is not symmetric")
    if mat.size and np.linalg.eigvalsh(mat).min() < -PSD_TOLERANCE * max(1.0, np.abs(mat).max()):
        raise ConfigurationError(f"{name} is not positive semi-definite")


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    """Immutable system matrices of a univariate linear Gaussian SSM.

    Use :meth:`create` to build one from loosely-shaped inputs.
    """

    transition: np.ndarray
    state_intercept: np.ndarray
    selection: np.ndarray
    design: np.ndarray
    obs_intercept: np.ndarray
    state_cov: np.ndarray
    obs_cov: float
    init_mean: np.ndarray
    init_cov: np.ndarray
    n_diffuse: int = 0
    _rqr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        L = self.transition.shape[1]
        if self.transition.shape[1:] != (L, L):
            raise ConfigurationError("transition must be square")
        K = self.selection.shape[1]
        if self.selection.shape[0] != L:
            raise ConfigurationError(f"selection has {self.selection.shape[0]} rows, state_dim is {L}")
        if self.state_cov.shape != (K, K):
            raise ConfigurationError(f"state_cov must be {K}x{K}, got {self.state_cov.shape}")
        if self.design.shape[1] != L or self.state_intercept.shape[1] != L:
            raise ConfigurationError("design/state_intercept width differs from state_dim")
        if self.init_mean.shape != (L,) or self.init_cov.shape != (L, L):
            raise ConfigurationError("initial state has wrong dimensions")
        for name in ("transition", "state_intercept", "selection", "design", "obs_intercept",
                     "state_cov", "init_mean", "init_cov"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InputError(f"{name} contains non-finite values")
        if not math.isfinite(self.obs_cov) or self.obs_cov < 0:
            raise InputError("obs_cov must be a finite non-negative scalar")
        _check_psd(self.state_cov, "state_cov")
        _check_psd(self.init_cov, "init_cov")
        rqr = self.selection @ self.state_cov @ self.selection.T
        object.__setattr__(self, "_rqr", np.ascontiguousarray(0.5 * (rqr + rqr.T)))

    @classmethod
    def create(cls, transition, design, selection, state_cov, obs_cov, init_mean=None,
               init_cov=None, state_intercept=None, obs_intercept=None, n_diffuse=0):
        T = _as_stack(transition, 2, "transition")
        L = T.shape[1]
        D = _as_stack(np.reshape(design, (-1, L)) if np.ndim(design) <= 2 else design, 1, "design")
        if D.ndim == 3:
            D = D[:, 0, :]
        R = np.atleast_2d(np.asarray(selection, dtype=float))
        if R.shape[0] != L and R.shape[1] == L:
            R = R.T
        Q = np.atleast_2d(np.asarray(state_cov, dtype=float))
        c = _as_stack(np.zeros(L) if state_intercept is None else state_intercept, 1, "state_intercept")
        d = np.atleast_1d(np.asarray(0.0 if obs_intercept is None else obs_intercept, dtype=float))
        a0 = np.zeros(L) if init_mean is None else np.asarray(init_mean, dtype=float).reshape(L)
        P0 = np.eye(L) * DIFFUSE_VARIANCE if init_cov is None else np.atleast_2d(np.asarray(init_cov, dtype=float))
        return cls(T, c, np.ascontiguousarray(R), D, np.ascontiguousarray(d), np.ascontiguousarray(Q),
                   float(obs_cov), np.ascontiguousarray(a0), np.ascontiguousarray(P0), int(n_diffuse))

    @property
    def state_dim(self):
        return self.transition.shape[1]

    @property
    def time_invariant(self):
        return self.transition.shape[0] == 1 and self.design.shape[0] == 1

    def with_initial(self, mean, cov, n_diffuse=0):
        return replace(self, init_mean=np.ascontiguousarray(mean, dtype=float),
                       init_cov=np.ascontiguousarray(cov, dtype=float), n_diffuse=n_diffuse)

    def with_obs_intercept(self, obs_intercept):
        return replace(self, obs_intercept=np.ascontiguousarray(np.atleast_1d(obs_intercept), dtype=float))

    def subset(self, start, stop):
        """Restrict time-varying fields to steps ``start:stop``."""
        def cut(arr):
            return arr if arr.shape[0] == 1 else np.ascontiguousarray(arr[start:stop])
        return replace(self, transition=cut(self.transition), state_intercept=cut(self.state_intercept),
                       design=cut(self.design), obs_intercept=cut(self.obs_intercept))

    def check_length(self, n):
        for name in ("transition", "state_intercept", "design", "obs_intercept"):
            m = getattr(self, name).shape[0]
            if m not in (1, n):
                raise ConfigurationError(f"{name} has {m} time steps, observations have {n}")


@dataclass
class FilterResult:
    """Output of :func:`kalman_filter`.

    ``predicted_state_means[t]`` is E[l_t | z_0..z_{t-1}]; the array has one
    extra row holding the one-step-ahead prediction past the sample end.
    Missing steps carry NaN innovations.
    """

    predicted_state_means: np.ndarray
    predicted_state_covs: np.ndarray
    filtered_state_means: np.ndarray
    filtered_state_covs: np.ndarray
    innovations: np.ndarray
    innovation_variances: np.ndarray
    loglikelihood_terms: np.ndarray
    loglikelihood: float
    burn: int
    nobs_effective: int

    @property
    def standardized_innovations(self):
        return self.innovations / np.sqrt(self.innovation_variances)

    @property
    def contributing(self):
        """Boolean mask of steps entering the likelihood."""
        return ~np.isnan(self.loglikelihood_terms)


@numba.njit(cache=True)
def _kalman(y, T, c, RQR, D, d, H, a0, P0, burn, store):
    n = y.shape[0]
    L = a0.shape[0]
    nT = T.shape[0]
    nc = c.shape[0]
    nD = D.shape[0]
    nd = d.shape[0]
    ns = n if store else 1
    pm = np.empty((ns + 1, L))
    pc = np.empty((ns + 1, L, L))
    fm = np.empty((ns, L))
    fc = np.empty((ns, L, L))
    v = np.full(n, np.nan)
    F = np.full(n, np.nan)
    ll = np.full(n, np.nan)
    a = a0.copy()
    P = P0.copy()
    af = np.empty(L)
    Pf = np.empty((L, L))
    M = np.empty(L)
    TP = np.empty((L, L))
    Pn = np.empty((L, L))
    # steady-state cache (time-invariant covariance path)
    steady = False
    invariant = nT == 1 and nD == 1
    sparse = nT == 1
    ptr = np.zeros(L + 1, dtype=np.int64)
    col = np.empty(L * L, dtype=np.int64)
    val = np.empty(L * L)
    if sparse:
        q = 0
        for j in range(L):
            for k in range(L):
                if T[0, j, k] != 0.0:
                    col[q] = k
                    val[q] = T[0, j, k]
                    q += 1
            ptr[j + 1] = q
    sF = 0.0
    sK = np.empty(L)
    sPf = np.empty((L, L))
    sPn = np.empty((L, L))
    seen = 0
    fail = -1
    for t in range(n):
        Dt = D[t if nD > 1 else 0]
        Tn = T[min(t + 1, nT - 1)]
        cn = c[min(t + 1, nc - 1)]
        i = t if store else 0
        pm[i] = a
        pc[i] = P
        yt = y[t]
        if np.isnan(yt):
            steady = False
            for j in range(L):
                af[j] = a[j]
                for k in range(L):
                    Pf[j, k] = P[j, k]
        else:
            pred = d[t if nd > 1 else 0]
            for j in range(L):
                pred += Dt[j] * a[j]
            vt = yt - pred
            if steady:
                Ft = sF
                for j in range(L):
                    af[j] = a[j] + sK[j] * vt
                    for k in range(L):
                        Pf[j, k] = sPf[j, k]
            else:
                for j in range(L):
                    s = 0.0
                    for k in range(L):
                        s += P[j, k] * Dt[k]
                    M[j] = s
                Ft = H
                for j in range(L):
                    Ft += Dt[j] * M[j]
                if not (Ft > 0.0) or not np.isfinite(Ft):
                    fail = t
                    break
                for j in range(L):
                    af[j] = a[j] + M[j] * vt / Ft
                    for k in range(L):
                        Pf[j, k] = P[j, k] - M[j] * M[k] / Ft
                for j in range(L):
                    for k in range(j + 1, L):
                        s = 0.5 * (Pf[j, k] + Pf[k, j])
                        Pf[j, k] = s
                        Pf[k, j] = s
            v[t] = vt
            F[t] = Ft
            if seen >= burn:
                ll[t] = -0.5 * (_LOG_2PI + math.log(Ft) + vt * vt / Ft)
            seen += 1
        fm[i] = af
        fc[i] = Pf
        # predict
        for j in range(L):
            s = cn[j]
            for k in range(L):
                s += Tn[j, k] * af[k]
            a[j] = s
        if steady:
            for j in range(L):
                for k in range(L):
                    P[j, k] = sPn[j, k]
            continue
        if sparse:
            # T P T' over the non-zeros of a constant T (CSR rows)
            for j in range(L):
                for k in range(L):
                    s = 0.0
                    for q in range(ptr[j], ptr[j + 1]):
                        s += val[q] * Pf[col[q], k]
                    TP[j, k] = s
            for j in range(L):
                for k in range(j, L):
                    s = RQR[j, k]
                    for q in range(ptr[k], ptr[k + 1]):
                        s += TP[j, col[q]] * val[q]
                    Pn[j, k] = s
                    Pn[k, j] = s
        else:
            for j in range(L):
                for k in range(L):
                    s = 0.0
                    for m in range(L):
                        s += Tn[j, m] * Pf[m, k]
                    TP[j, k] = s
            for j in range(L):
                for k in range(j, L):
                    s = RQR[j, k]
                    for m in range(L):
                        s += TP[j, m] * Tn[k, m]
                    Pn[j, k] = s
                    Pn[k, j] = s
        diff = 0.0
        for j in range(L):
            for k in range(L):
                dd = abs(Pn[j, k] - P[j, k])
                if dd > diff:
                    diff = dd
                P[j, k] = Pn[j, k]
        # only an exact floating-point fixed point is cached, so the shortcut
        # reproduces the full recursion bit for bit
        if invariant and not np.isnan(yt) and seen > burn and diff == 0.0:
            steady = True
            sF = F[t]
            for j in range(L):
                sK[j] = M[j] / sF
                for k in range(L):
                    sPf[j, k] = Pf[j, k]
                    sPn[j, k] = P[j, k]
    i = n if store else 1
    pm[i] = a
    pc[i] = P
    return pm, pc, fm, fc, v, F, ll, fail


@numba.njit(cache=True)
def _smooth(pm, pc, v, F, T, D):
    n = v.shape[0]
    L = pm.shape[1]
    nT = T.shape[0]
    nD = D.shape[0]
    sm = np.empty((n, L))
    sc = np.empty((n, L, L))
    r = np.zeros(L)
    N = np.zeros((L, L))
    rp = np.empty(L)
    Np = np.empty((L, L))
    Lm = np.empty((L, L))
    tmp = np.empty((L, L))
    for t in range(n - 1, -1, -1):
        Tn = T[min(t + 1, nT - 1)]
        Dt = D[t if nD > 1 else 0]
        P = pc[t]
        if np.isnan(v[t]):
            for j in range(L):
                for k in range(L):
                    Lm[j, k] = Tn[j, k]
            for j in range(L):
                rp[j] = 0.0
        else:
            M = P @ Dt
            for j in range(L):
                Kj = 0.0
                for k in range(L):
                    Kj += Tn[j, k] * M[k]
                Kj /= F[t]
                for k in range(L):
                    Lm[j, k] = Tn[j, k] - Kj * Dt[k]
            for j in range(L):
                rp[j] = Dt[j] * v[t] / F[t]
        for j in range(L):
            s = rp[j]
            for k in range(L):
                s += Lm[k, j] * r[k]
            rp[j] = s
        tmp[:, :] = N @ Lm
        Np[:, :] = Lm.T @ tmp
        if not np.isnan(v[t]):
            for j in range(L):
                for k in range(L):
                    Np[j, k] += Dt[j] * Dt[k] / F[t]
        sm[t] = pm[t] + P @ rp
        PN = P @ Np
        sc[t] = P - PN @ P
        for j in range(L):
            for k in range(j + 1, L):
                s = 0.5 * (sc[t, j, k] + sc[t, k, j])
                sc[t, j, k] = s
                sc[t, k, j] = s
        r[:] = rp
        N[:, :] = Np
    return sm, sc


def _prepare_obs(model, observations):
    y = np.ascontiguousarray(np.asarray(observations, dtype=float).ravel())
    if y.size < 1:
        raise InputError("need at least one observation")
    if np.any(np.isinf(y)):
        raise InputError("observations contain infinite values")
    model.check_length(y.size)
    return y


def kalman_filter(model: StateSpaceModel, observations, burn=None, store=True) -> FilterResult:
    """Run the Kalman filter; NaN observations are treated as missing.

    ``burn`` defaults to ``model.n_diffuse`` and counts observed (non-missing)
    steps.  With ``store=False`` only the final state and per-step
    innovations are kept, which is what likelihood evaluation needs.
    """
    y = _prepare_obs(model, observations)
    burn = model.n_diffuse if burn is None else int(burn)
    pm, pc, fm, fc, v, F, ll, fail = _kalman(
        y, model.transition, model.state_intercept, model._rqr, model.design,
        model.obs_intercept, model.obs_cov, model.init_mean, model.init_cov, burn, store)
    if fail >= 0:
        raise NumericalError(f"innovation variance is not positive at step {fail}", step=int(fail))
    mask = ~np.isnan(ll)
    return FilterResult(pm, pc, fm, fc, v, F, ll, float(ll[mask].sum()), burn, int(mask.sum()))


def loglikelihood(model: StateSpaceModel, observations, burn=None) -> float:
    return kalman_filter(model, observations, burn=burn, store=False).loglikelihood


def smooth(model: StateSpaceModel, result: FilterResult):
    """Fixed-interval smoother (disturbance-smoother form, no matrix inverses).

    Returns ``(means, covs)`` with shapes ``(n, L)`` and ``(n, L, L)``.
    """
    n = result.innovations.shape[0]
    if result.predicted_state_means.shape[0] != n + 1:
        raise InputError("filter result was computed with store=False or has inconsistent lengths")
    model.check_length(n)
    return _smooth(result.predicted_state_means, result.predicted_state_covs, result.innovations,
                   result.innovation_variances, model.transition, model.design)


@dataclass
class ForecastResult:
    """Multi-step forecasts from the end of a filtered sample.

    ``mean`` is on the modelling scale; ``point_forecasts`` has the inverse
    transform applied when ``log_transform`` is set (``log1p`` modelling).
    """

    horizon: int
    mean: np.ndarray
    forecast_variances: np.ndarray
    log_transform: bool = False

    @property
    def point_forecasts(self):
        return np.expm1(self.mean) if self.log_transform else self.mean


def forecast(model: StateSpaceModel, result: FilterResult, horizon, future_obs_intercepts=None,
             log_transform=False) -> ForecastResult:
    horizon = int(horizon)
    if horizon < 1:
        raise InputError("horizon must be at least 1")
    if future_obs_intercepts is None:
        future_obs_intercepts = np.zeros(horizon)
    d = np.asarray(future_obs_intercepts, dtype=float).ravel()
    if d.size != horizon:
        raise InputError(f"future_obs_intercepts has {d.size} entries, horizon is {horizon}")
    T = model.transition[-1]
    c = model.state_intercept[-1]
    D = model.design[-1]
    a = result.predicted_state_means[-1].copy()
    P = result.predicted_state_covs[-1].copy()
    mean = np.empty(horizon)
    var = np.empty(horizon)
    for h in range(horizon):
        mean[h] = D @ a + d[h]
        var[h] = D @ P @ D + model.obs_cov
        a = T @ a + c
        P = T @ P @ T.T + model._rqr
        P = 0.5 * (P + P.T)
    return ForecastResult(horizon, mean, var, bool(log_transform))
