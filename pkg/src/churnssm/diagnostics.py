"""Residual diagnostics: correlograms, Ljung-Box and Jarque-Bera tests.

Missing values (NaN) are dropped before any statistic is computed, so the
burn-in steps of a filter and the days before a training start never enter
the correlograms.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import InputError

Z_95 = 1.959963984540054


def _clean(x):
    x = np.asarray(x, dtype=float).ravel()
    return x[~np.isnan(x)]


def confidence_band(n):
    """Half-width of the 95% white-noise band for sample (partial) autocorrelations."""
    return Z_95 / math.sqrt(n)


def acf(series, max_lag):
    """Sample autocorrelations at lags ``0..max_lag`` (biased 1/n estimator)."""
    x = _clean(series)
    n = x.size
    max_lag = int(max_lag)
    if max_lag < 0 or n <= max_lag + 1:
        raise InputError(f"need more than {max_lag + 1} observations for {max_lag} lags, got {n}")
    xc = x - x.mean()
    c0 = xc @ xc / n
    if not c0 > 0:
        raise InputError("autocorrelation undefined for a constant series")
    out = np.empty(max_lag + 1)
    out[0] = 1.0
    for k in range(1, max_lag + 1):
        out[k] = (xc[k:] @ xc[:-k]) / n / c0
    return out


def pacf(series, max_lag):
    """Partial autocorrelations at lags ``0..max_lag`` by Durbin-Levinson."""
    r = acf(series, max_lag)
    out = np.empty(max_lag + 1)
    out[0] = 1.0
    phi = np.zeros(0)
    v = 1.0
    for k in range(1, max_lag + 1):
        a = (r[k] - phi @ r[k - 1:0:-1]) / v if k > 1 else r[1]
        phi = np.r_[phi - a * phi[::-1], a]
        v *= 1.0 - a * a
        out[k] = a
    return out


@dataclass(frozen=True)
class LjungBox:
    lag: int
    statistic: float
    dof: int
    p_value: float


def ljung_box(residuals, lags, model_df=0):
    """Ljung-Box portmanteau statistics for each horizon in ``lags``.

    Degrees of freedom are ``h - model_df`` with a floor of one; pass the
    fitted ARMA order (p + q) as ``model_df`` for residuals of a fitted model.
    """
    x = _clean(residuals)
    n = x.size
    lags = sorted({int(h) for h in np.atleast_1d(lags)})
    if not lags or lags[0] < 1:
        raise InputError("lags must be positive")
    if n < 3 or not lags[-1] < n / 2:
        raise InputError(f"largest lag {lags[-1]} must be below n/2 = {n / 2}")
    r = acf(x, lags[-1])
    terms = np.cumsum(r[1:] ** 2 / (n - np.arange(1, lags[-1] + 1)))
    out = []
    for h in lags:
        q = float(n * (n + 2) * terms[h - 1])
        dof = max(1, h - int(model_df))
        out.append(LjungBox(h, q, dof, float(stats.chi2.sf(q, dof))))
    return out


def jarque_bera(residuals):
    """``(JB, p)`` from sample skewness and kurtosis (population moments)."""
    x = _clean(residuals)
    n = x.size
    if n < 8:
        raise InputError(f"Jarque-Bera needs at least 8 observations, got {n}")
    xc = x - x.mean()
    m2 = xc @ xc / n
    if not m2 > 0:
        raise InputError("Jarque-Bera undefined for zero-variance residuals")
    skew = np.mean(xc ** 3) / m2 ** 1.5
    kurt = np.mean(xc ** 4) / m2 ** 2
    jb = float(n / 6.0 * (skew ** 2 + (kurt - 3.0) ** 2 / 4.0))
    return jb, float(stats.chi2.sf(jb, 2))


@dataclass
class DiagnosticsReport:
    acf: np.ndarray
    pacf: np.ndarray
    band: float
    ljung_box: list
    jarque_bera: tuple
    residual_variance: float
    nobs: int
    extra: dict = field(default_factory=dict)

    def ljung_box_passes(self, level=0.05):
        return all(t.p_value >= level for t in self.ljung_box)

    def to_dict(self):
        return {
            "nobs": self.nobs,
            "band": self.band,
            "acf": [float(v) for v in self.acf],
            "pacf": [float(v) for v in self.pacf],
            "ljung_box": [{"lag": t.lag, "statistic": t.statistic, "dof": t.dof, "p_value": t.p_value}
                          for t in self.ljung_box],
            "jarque_bera": {"statistic": self.jarque_bera[0], "p_value": self.jarque_bera[1]},
            "residual_variance": self.residual_variance,
        }


def diagnose(residuals, max_lag=28, lags=(7, 14, 21), model_df=0):
    """Full report for a residual series; lags beyond the sample are dropped."""
    x = _clean(residuals)
    n = x.size
    max_lag = min(int(max_lag), n - 2)
    lags = [h for h in lags if h < n / 2] or [1]
    return DiagnosticsReport(acf=acf(x, max_lag), pacf=pacf(x, max_lag), band=confidence_band(n),
                             ljung_box=ljung_box(x, lags, model_df), jarque_bera=jarque_bera(x),
                             residual_variance=float(np.var(x)), nobs=n)


def write_correlogram(path, values, nobs):
    """Write ``lag,value,band`` rows for external plotting."""
    band = confidence_band(nobs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lag", "value", "band"])
        for lag, v in enumerate(values):
            w.writerow([lag, repr(float(v)), repr(band)])
