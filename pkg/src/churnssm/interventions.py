"""Residual-driven intervention detection and campaign classification.

Detection repeatedly takes the day with the largest standardized
innovation, adds a dummy for it and refits.  The dummy is kept when its
coefficient is significant and both the residual variance and the
Jarque-Bera statistic go down; the loop stops at the first rejection, when
the residuals already look normal (JB p-value above a floor), or after
``max_rounds``.

Intervention dates are cause dates.  On a delayed series (the churn rates)
the dummy sits ``delay`` days after the intervention dates.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .builders import RegressionSpec, parameter_layout
from .diagnostics import jarque_bera
from .errors import ChurnSSMError, InputError
from .estimation import FitResult, _jsonable, fit, two_sided_p

logger = logging.getLogger(__name__)

SHAPES = ("pulse", "window")
CLASSES = ("marketing", "promotion", "unknown", "unclassified")
LARGE = 3.0
PAIR_DAYS = 14
JB_FLOOR = 0.05
ALPHA = 0.1


@dataclass
class Intervention:
    """A dated dummy covariate: 1 on ``start_date..end_date`` (inclusive)."""

    name: str
    start_date: str
    end_date: str
    shape: str = "pulse"
    source_series: str = ""
    classification: str = "unclassified"
    impact_map: dict = field(default_factory=dict)
    conflict: bool = False

    def __post_init__(self):
        self.start_date = str(np.datetime64(self.start_date, "D"))
        self.end_date = str(np.datetime64(self.end_date, "D"))
        if self.start_date > self.end_date:
            raise InputError(f"intervention {self.name} starts after it ends")
        if self.shape not in SHAPES:
            raise InputError(f"unknown intervention shape {self.shape!r}")
        if self.classification not in CLASSES:
            raise InputError(f"unknown classification {self.classification!r}")

    def column(self, dates, delay=0):
        """Dummy on ``dates``; with ``delay`` the ones move ``delay`` days later."""
        dates = np.asarray(dates, dtype="datetime64[D]") - int(delay)
        return ((dates >= np.datetime64(self.start_date)) & (dates <= np.datetime64(self.end_date))).astype(float)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


# ---------------------------------------------------------------- detection

@dataclass
class DetectionResult:
    interventions: list
    final_fit: FitResult
    audit: list
    pending: list

    def to_dict(self):
        return {"interventions": [iv.to_dict() for iv in self.interventions], "audit": self.audit,
                "pending_review": self.pending}


def _with_column(fitted: FitResult, name, column):
    reg = fitted.regression
    if reg is None:
        return RegressionSpec((name,), np.asarray(column, float)[:, None], 0)
    if reg.delay_days:
        raise InputError("intervention columns need a regression without its own delay")
    return reg.with_columns((name,), column)


def _refit(fitted: FitResult, reg, fit_kwargs):
    spec = replace(fitted.spec, include_regression=True)
    start_params = None
    prev = fitted.params
    layout, _ = parameter_layout(spec, reg)
    if set(prev.names) <= set(layout):
        start_params = np.array([prev.get(nm, 0.0) if nm in prev.names else 0.0 for nm in layout])
    kw = {"n_starts": 1, **(fit_kwargs or {})}
    return fit(spec, fitted.series, reg, start=fitted.start, start_params=start_params, **kw)


def _jb(fr):
    r = fr.residuals[~np.isnan(fr.residuals)]
    return jarque_bera(r)


def _load_review(review):
    if review is None:
        return {}
    if isinstance(review, dict):
        return dict(review.get("proposals", review))
    with open(review) as fh:
        doc = json.load(fh)
    return dict(doc.get("proposals", doc))


def propose_window(resid, t, large=LARGE, pair_days=PAIR_DAYS):
    """Window proposal around the extreme residual at ``t``.

    A large residual followed within ``pair_days`` by a large one of the
    opposite sign suggests a campaign running from the first day to the day
    before the second.  Returns ``(start, end)`` indices or None.
    """
    r = np.nan_to_num(np.asarray(resid, float))
    s = math.copysign(1.0, r[t])
    n = r.size
    after = [u for u in range(t + 1, min(n, t + pair_days + 1)) if -s * r[u] > large]
    if after:
        u = max(after, key=lambda j: abs(r[j]))
        return t, u - 1
    before = [u for u in range(max(0, t - pair_days), t) if -s * r[u] > large]
    if before:
        u = max(before, key=lambda j: abs(r[j]))
        return u, t - 1
    return None


def detect_interventions(series, fitted: FitResult, mode="automatic", max_rounds=20, *, dates=None, delay=0,
                         series_name="", alpha=ALPHA, jb_floor=JB_FLOOR, review=None, default_decision="window",
                         fit_kwargs=None) -> DetectionResult:
    """Iterative residual-driven detection on ``fitted``.

    ``series`` must be the series ``fitted`` was estimated on.  In
    ``interactive`` mode window proposals are looked up in ``review`` (a path
    or dict mapping ``"series:start:end"`` to ``accept``, ``pulse`` or
    ``reject``); unreviewed proposals take ``default_decision`` and are
    listed in ``pending`` for a human to confirm.
    """
    if mode not in ("automatic", "interactive"):
        raise InputError(f"unknown mode {mode!r}")
    y = np.asarray(series, dtype=float)
    if y.shape != fitted.series.shape or not np.array_equal(np.isnan(y), np.isnan(fitted.series)) \
            or not np.allclose(y[~np.isnan(y)], fitted.series[~np.isnan(y)]):
        raise InputError("series differs from the one the model was fitted on")
    n = y.size
    dates = (np.datetime64("1970-01-01") + np.arange(n)) if dates is None else \
        np.asarray(dates, dtype="datetime64[D]")
    decisions = _load_review(review) if mode == "interactive" else {}
    current = fitted
    accepted, audit, pending = [], [], []
    used = np.zeros(n, bool)
    failures = 0
    for rnd in range(max_rounds):
        jb, jb_p = _jb(current)
        if jb_p > jb_floor:
            audit.append({"round": rnd, "action": "stop", "reason": "residuals normal",
                          "jb": jb, "jb_p_value": jb_p})
            break
        r = np.where(used, np.nan, current.residuals)
        if np.all(np.isnan(r)):
            audit.append({"round": rnd, "action": "stop", "reason": "no residuals left"})
            break
        t = int(np.nanargmax(np.abs(r)))
        lo = hi = t
        shape = "pulse"
        if mode == "interactive":
            win = propose_window(current.residuals, t)
            if win is not None:
                key = f"{series_name}:{dates[win[0]]}:{dates[win[1]]}"
                choice = decisions.get(key)
                if choice is None:
                    choice = default_decision
                    pending.append({"key": key, "series": series_name, "start_date": str(dates[win[0]]),
                                    "end_date": str(dates[win[1]]), "peak_date": str(dates[t]),
                                    "applied": choice})
                if choice in ("accept", "window"):
                    lo, hi = win
                    shape = "window"
                elif choice == "reject":
                    audit.append({"round": rnd, "action": "stop", "reason": "proposal rejected in review",
                                  "key": key})
                    break
        start_date, end_date = dates[lo] - delay, dates[hi] - delay
        name = f"iv_{series_name or 'series'}_{start_date}" + ("" if lo == hi else f"_{end_date}")
        col = np.zeros(n)
        col[lo:hi + 1] = 1.0
        entry = {"round": rnd, "day": str(dates[t]), "residual": float(current.residuals[t]), "name": name,
                 "shape": shape, "start_date": str(start_date), "end_date": str(end_date),
                 "jb_before": jb, "variance_before": current.residual_variance}
        try:
            cand = _refit(current, _with_column(current, name, col), fit_kwargs)
            jb_new, jb_p_new = _jb(cand)
        except ChurnSSMError as exc:
            entry.update(action="reject", reason=f"refit failed: {exc}")
            audit.append(entry)
            used[lo:hi + 1] = True
            failures += 1
            if failures > 1:
                audit.append({"round": rnd, "action": "stop", "reason": "repeated refit failure"})
                break
            continue
        failures = 0
        idx = cand.params.names.index(f"beta.{name}")
        est, se = float(cand.params.values[idx]), float(cand.standard_errors[idx])
        _, p = two_sided_p(est, se)
        var_new = cand.residual_variance
        checks = {"significant": bool(math.isfinite(p) and p < alpha),
                  "variance_decreased": bool(var_new < current.residual_variance),
                  "jb_decreased": bool(jb_new < jb)}
        entry.update(estimate=est, std_error=se, p_value=p, jb_after=jb_new, jb_p_after=jb_p_new,
                     variance_after=var_new, checks=checks)
        if all(checks.values()):
            entry["action"] = "accept"
            audit.append(entry)
            accepted.append(Intervention(name, str(start_date), str(end_date), shape=shape,
                                         source_series=series_name))
            used[lo:hi + 1] = True
            current = cand
        else:
            entry["action"] = "reject"
            audit.append(entry)
            audit.append({"round": rnd, "action": "stop", "reason": "proposal rejected"})
            break
    else:
        audit.append({"round": max_rounds, "action": "stop", "reason": "max_rounds"})
    return DetectionResult(accepted, current, audit, pending)


# ---------------------------------------------------------------- impacts and classification

def _impact(fitted, iv, dates, delay, fit_kwargs):
    name = iv.name
    reg = fitted.regression
    if reg is not None and name in reg.covariate_names and delay == 0:
        fr = fitted
    else:
        col = iv.column(dates, delay)
        train = ~np.isnan(fitted.series)
        if not col[train].any():
            return {"estimate": None, "std_error": None, "p_value": None, "delay": delay,
                    "note": "no active days in the training window"}
        label = name if reg is None or name not in reg.covariate_names else f"{name}+{delay}"
        try:
            fr = _refit(fitted, _with_column(fitted, label, col), fit_kwargs)
        except ChurnSSMError as exc:
            return {"estimate": None, "std_error": None, "p_value": None, "delay": delay,
                    "note": f"fit failed: {exc}"}
        name = label
    idx = fr.params.names.index(f"beta.{name}")
    est, se = float(fr.params.values[idx]), float(fr.standard_errors[idx])
    _, p = two_sided_p(est, se)
    return {"estimate": est, "std_error": se, "p_value": p, "delay": delay}


def _sig(entry, alpha):
    return entry is not None and entry.get("p_value") is not None and math.isfinite(entry["p_value"]) \
        and entry["p_value"] < alpha


def measure_impacts(interventions, series_fits, dates, delays, *, alpha=ALPHA, probe_delays=(1, 2),
                    fit_kwargs=None):
    """Try every intervention on every fitted series; fills ``impact_map``.

    ``series_fits`` maps series names to base FitResults on the common
    ``dates`` index and ``delays`` gives each series' covariate delay.  For
    interventions with a significant positive new-users effect, the
    conversion impact is also probed at the extra delays in
    ``probe_delays``.
    """
    dates = np.asarray(dates, dtype="datetime64[D]")
    out = []
    for iv in interventions:
        impacts = {}
        for s, fr in series_fits.items():
            impacts[s] = _impact(fr, iv, dates, int(delays.get(s, 0)), fit_kwargs)
        nu = impacts.get("new_users")
        if "conversion_to_pu" in series_fits and _sig(nu, alpha) and nu["estimate"] > 0:
            base = int(delays.get("conversion_to_pu", 0))
            probes = []
            for extra in probe_delays:
                e = _impact(series_fits["conversion_to_pu"], iv, dates, base + extra, fit_kwargs)
                e["significant"] = _sig(e, alpha)
                probes.append(e)
            impacts["conversion_to_pu"]["probes"] = probes
        for e in impacts.values():
            e["significant"] = _sig(e, alpha)
        out.append(replace(iv, impact_map=impacts))
    return out


def classify(impact_map, alpha=ALPHA):
    """``(classification, conflict)`` from an impact map.

    Marketing: significant positive effect on new users.  Promotion:
    significant positive effect on conversion and no significant effect on
    new users.  Anything else is unknown.  A marketing intervention that
    also lifts conversion (at its own delay or a probe delay) carries the
    conflict flag.
    """
    nu = impact_map.get("new_users")
    conv = impact_map.get("conversion_to_pu")
    nu_sig = _sig(nu, alpha)
    conv_pos = _sig(conv, alpha) and conv["estimate"] > 0
    if nu_sig and nu["estimate"] > 0:
        probes = (conv or {}).get("probes", [])
        lifted = conv_pos or any(_sig(p, alpha) and p["estimate"] > 0 for p in probes)
        return "marketing", bool(lifted)
    if conv_pos and not nu_sig:
        return "promotion", False
    return "unknown", False


def classify_interventions(interventions, per_series_fits=None, *, dates=None, delays=None, alpha=ALPHA,
                           fit_kwargs=None):
    """Classify interventions from their impact maps.

    When ``per_series_fits`` is given the impacts are measured first with
    :func:`measure_impacts`; otherwise existing impact maps are used.
    """
    if per_series_fits is not None:
        if dates is None or delays is None:
            raise InputError("dates and delays are needed to measure impacts")
        interventions = measure_impacts(interventions, per_series_fits, dates, delays, alpha=alpha,
                                        fit_kwargs=fit_kwargs)
    out = []
    for iv in interventions:
        label, conflict = classify(iv.impact_map, alpha)
        out.append(replace(iv, classification=label, conflict=conflict))
    return out


def write_ledger(path, interventions, audit=()):
    doc = {"interventions": [iv.to_dict() for iv in interventions], "audit": list(audit)}
    with open(path, "w") as fh:
        fh.write(json.dumps(_jsonable(doc), indent=2, sort_keys=True))
        fh.write("\n")


def load_ledger(path):
    with open(path) as fh:
        doc = json.load(fh)
    return [Intervention.from_dict(d) for d in doc.get("interventions", [])], doc.get("audit", [])
