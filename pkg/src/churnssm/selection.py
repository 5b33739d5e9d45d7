"""Model-space grid searches and grouped stepwise covariate selection."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .builders import TREND_KINDS, ArimaSpec, UcSpec, parameter_layout, spec_to_dict
from .diagnostics import ljung_box
from .errors import ChurnSSMError, CollinearityError, InputError
from .estimation import FitResult, _jsonable, fit, significance

logger = logging.getLogger(__name__)

TOP_N = 5
TIE_AIC = 2.0
LB_LAGS = (7, 14, 21)

CANDIDATE_FIELDS = ("rank", "variant", "label", "spec", "k", "loglikelihood", "aic", "bic", "hqic",
                    "residual_variance", "ljung_box_pass", "top")
GROUP_NAMES = ("day_of_week", "calendar", "holidays", "ingame_events", "event_counts",
               "interventions_marketing", "interventions_promotion", "interventions_unknown")


# ---------------------------------------------------------------- grid search

@dataclass
class ModelCandidate:
    spec: object
    fit: FitResult | None
    aic: float
    bic: float
    hqic: float
    k: int
    residual_variance: float
    ljung_box_pass: bool
    rank: int = 0
    top: bool = False
    variant: str = ""

    @property
    def label(self):
        return self.spec.label

    def row(self):
        return {"rank": self.rank, "variant": self.variant, "label": self.label,
                "spec": json.dumps(spec_to_dict(self.spec), sort_keys=True), "k": self.k,
                "loglikelihood": self.fit.loglikelihood if self.fit else math.nan,
                "aic": self.aic, "bic": self.bic, "hqic": self.hqic,
                "residual_variance": self.residual_variance, "ljung_box_pass": self.ljung_box_pass,
                "top": self.top}


@dataclass
class GridResult:
    """Candidates ranked by AIC plus the grid points that failed to fit."""

    candidates: list
    failures: list
    recommended: ModelCandidate | None = None

    def top(self, n=TOP_N):
        return self.candidates[:n]

    def to_rows(self):
        return [c.row() for c in self.candidates]

    def to_dict(self):
        return {"candidates": self.to_rows(), "failures": self.failures,
                "recommended": self.recommended.label if self.recommended else None}

    def to_json(self):
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CANDIDATE_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.to_rows():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _lb_pass(fr: FitResult):
    x = fr.residuals[~np.isnan(fr.residuals)]
    lags = [h for h in LB_LAGS if h < x.size / 2]
    if not lags:
        return False
    return all(t.p_value >= 0.05 for t in ljung_box(x, lags, fr.spec.arma_order))


def _fit_point(args):
    spec, series, reg, fit_kwargs = args
    try:
        fr = fit(spec, series, reg if spec.include_regression else None, **fit_kwargs)
    except ChurnSSMError as exc:
        return None, f"{type(exc).__name__}: {exc}"
    if not math.isfinite(fr.aic):
        return None, "non-finite AIC"
    return fr, None


def _run_grid(specs, series, reg, workers, fit_kwargs, variant=""):
    jobs = [(s, series, reg, fit_kwargs) for s in specs]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_point, jobs))
    else:
        results = [_fit_point(j) for j in jobs]
    cands, failures = [], []
    for spec, (fr, err) in zip(specs, results):
        if fr is None:
            failures.append({"label": spec.label, "variant": variant, "spec": spec_to_dict(spec), "error": err})
            logger.info("grid point %s failed: %s", spec.label, err)
            continue
        cands.append(ModelCandidate(spec, fr, fr.aic, fr.bic, fr.hqic, fr.k, fr.residual_variance,
                                    _lb_pass(fr), variant=variant))
    return rank_candidates(cands, failures)


def rank_candidates(candidates, failures=()):
    """Sort by AIC (ties by label), number the ranks, flag the top five and
    pick the recommended candidate with :func:`tie_break`."""
    order = sorted(candidates, key=lambda c: (c.aic, c.label))
    for i, c in enumerate(order):
        c.rank = i + 1
        c.top = i < TOP_N
    return GridResult(order, list(failures), tie_break(order))


def tie_break(candidates, window=TIE_AIC):
    """Among candidates within ``window`` AIC units of the best prefer fewer
    parameters, then a passing Ljung-Box test, then smaller residual variance."""
    if not candidates:
        return None
    best = min(c.aic for c in candidates)
    near = [c for c in candidates if c.aic <= best + window]
    return min(near, key=lambda c: (c.k, not c.ljung_box_pass, c.residual_variance, c.aic))


def arima_grid(max_order=5, max_seasonal_order=0, *, include_regression=False, log_transform=False,
               seasonal_period=7):
    return [ArimaSpec(p, 1, q, include_regression=include_regression, log_transform=log_transform,
                      seasonal_p=P, seasonal_q=Q, seasonal_period=seasonal_period)
            for P in range(max_seasonal_order + 1) for Q in range(max_seasonal_order + 1)
            for p in range(max_order + 1) for q in range(max_order + 1)]


def uc_grid_points(trend_kinds=TREND_KINDS, monthly_options=(False, True)):
    """``(trend, weekly, monthly, cycle)`` for the full cross product."""
    return [(trend, weekly, monthly, cycle) for trend in trend_kinds for weekly in (False, True)
            for monthly in monthly_options for cycle in (False, True)]


def grid_search_arima(series, reg=None, max_order=5, *, max_seasonal_order=0, log_transform=False, start=0,
                      workers=1, fit_kwargs=None) -> GridResult:
    """Fit every ARIMA(p,1,q)(P,0,Q)[7] with orders up to the given maxima.

    ``reg`` (when given) is included in every candidate.
    """
    if max_order < 0 or max_order > 5 or max_seasonal_order < 0 or max_seasonal_order > 5:
        raise InputError("orders must lie in [0, 5]")
    specs = arima_grid(max_order, max_seasonal_order, include_regression=reg is not None,
                       log_transform=log_transform)
    kw = {"start": start, **(fit_kwargs or {})}
    return _run_grid(specs, series, reg, workers, kw, variant="with_regression" if reg is not None else "plain")


def grid_search_uc(series, reg=None, *, log_transform=False, start=0, workers=1, fit_kwargs=None,
                   trend_kinds=TREND_KINDS, monthly_options=(False, True)) -> GridResult:
    """Fit the trend x weekly x monthly x cycle cross product.

    All candidates share one likelihood sample: the first ``burn``
    observations, with ``burn`` the largest diffuse state count in the grid,
    are left out of every likelihood so the AICs are comparable.  The bare
    ``none`` point without regression is not a valid model; it is recorded
    in the failure log so the grid stays exhaustive.
    """
    variant = "with_regression" if reg is not None else "plain"
    specs, invalid = [], []
    for trend, weekly, monthly, cycle in uc_grid_points(trend_kinds, monthly_options):
        try:
            specs.append(UcSpec(trend, weekly, monthly, cycle, reg is not None, log_transform))
        except ChurnSSMError as exc:
            invalid.append({"label": f"UC({trend})", "variant": variant,
                            "spec": {"family": "uc", "trend_kind": trend, "weekly_seasonal": weekly,
                                     "monthly_seasonal": monthly, "cycle": cycle},
                            "error": f"{type(exc).__name__}: {exc}"})
    kw = {"start": start, "burn": max((sp.state_dim for sp in specs), default=0), **(fit_kwargs or {})}
    result = _run_grid(specs, series, reg, workers, kw, variant=variant)
    result.failures += invalid
    return result


def dual_grid_search(family, series, dow_reg, **kwargs):
    """Run a grid without covariates and again with day-of-week dummies.

    Returns ``{"plain": GridResult, "with_dow": GridResult}``.
    """
    search = {"arima": grid_search_arima, "uc": grid_search_uc}[family]
    plain = search(series, None, **kwargs)
    dow = search(series, dow_reg, **kwargs)
    for c in dow.candidates:
        c.variant = "with_dow"
    for f in dow.failures:
        f["variant"] = "with_dow"
    return {"plain": plain, "with_dow": dow}


def choose_difference(series, period=7):
    """Pick none, regular or seasonal differencing by smallest variance.

    Ties (within 1e-12 relative) go to the lag-1 autocorrelation closest to
    zero.  Returns ``(choice, table)``.
    """
    y = np.asarray(series, dtype=float)
    y = y[~np.isnan(y)]
    if y.size < period + 3:
        raise InputError("series too short to compare differences")
    table = {}
    for name, x in (("none", y), ("regular", np.diff(y)), ("seasonal", y[period:] - y[:-period])):
        xc = x - x.mean()
        var = float(xc @ xc / x.size)
        r1 = float((xc[1:] @ xc[:-1]) / (xc @ xc)) if var > 0 else 0.0
        table[name] = {"variance": var, "lag1_acf": r1}
    best = min(v["variance"] for v in table.values())
    near = [k for k, v in table.items() if v["variance"] <= best * (1 + 1e-12)]
    choice = min(near, key=lambda k: abs(table[k]["lag1_acf"]))
    return choice, table


# ---------------------------------------------------------------- stepwise selection

@dataclass(frozen=True)
class CovariateGroup:
    name: str
    members: tuple

    @property
    def batch_size(self):
        return 10 if len(self.members) > 10 else max(1, len(self.members))

    def batches(self):
        b = self.batch_size
        return [self.members[i:i + b] for i in range(0, len(self.members), b)]


def group_order(series, round_number=1):
    """Order in which covariate groups are tried for ``series``.

    The first round follows the enumeration order with interventions last.
    In the second round marketing interventions precede in-game events for
    new users and precede the other interventions for the two churn series;
    promotion interventions precede the other interventions for conversion
    and purchase churn.  Unknown interventions always come last.
    """
    base = ["day_of_week", "calendar", "holidays", "ingame_events", "event_counts"]
    mk, pr, un = "interventions_marketing", "interventions_promotion", "interventions_unknown"
    if round_number == 1:
        return base + [mk, pr, un]
    if series == "new_users":
        return base[:3] + [mk] + base[3:] + [pr, un]
    if series in ("nonpu_churn", "pu_churn"):
        return base + [mk, pr, un]
    if series in ("conversion_to_pu", "purchase_churn"):
        return base + [pr, mk, un]
    return base + [mk, pr, un]


def default_groups(covariates, series, round_number=1, spec=None):
    """CovariateGroups from a CovariateMatrix in the default order.

    Day-of-week dummies are left out for UC specs with a weekly seasonal,
    whose state already carries the weekly pattern.
    """
    out = []
    for g in group_order(series, round_number):
        if g == "day_of_week" and spec is not None and getattr(spec, "weekly_seasonal", False):
            continue
        members = tuple(covariates.group_members(g))
        if members:
            out.append(CovariateGroup(g, members))
    return out


@dataclass
class StepwiseResult:
    selected: list
    rejected: list
    final_fit: FitResult
    audit: list
    converged: bool

    def to_dict(self):
        return {"selected": self.selected, "rejected": self.rejected, "converged": self.converged,
                "final_spec": spec_to_dict(self.final_fit.spec), "audit": self.audit,
                "parameters": self.final_fit.summary_rows()}

    def to_json(self):
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)

    def write_audit_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "phase", "group", "action", "covariate", "p_value", "note"])
            for e in self.audit:
                for name in e["covariates"] or [""]:
                    p = e["p_values"].get(name)
                    w.writerow([e["step"], e["phase"], e["group"], e["action"], name,
                                "" if p is None else repr(float(p)), e.get("note", "")])


class _Stepper:
    def __init__(self, series, base_spec, covariates, alpha, start, fit_kwargs):
        self.series = series
        self.base = replace(base_spec, include_regression=False)
        self.reg_spec = replace(base_spec, include_regression=True)
        self.cov = covariates
        self.alpha = alpha
        self.start = start
        self.kw = {"n_starts": 1, **(fit_kwargs or {})}
        self.audit = []
        self.cache = {}
        self.last = None

    def log(self, phase, group, action, names, pvals=None, note=""):
        entry = {"step": len(self.audit), "phase": phase, "group": group, "action": action,
                 "covariates": list(names), "p_values": {n: float(pvals[n]) for n in names if pvals and n in pvals}}
        if note:
            entry["note"] = note
        self.audit.append(entry)

    def fit(self, names):
        key = tuple(names)
        if key in self.cache:
            return self.cache[key]
        if not names:
            fr = fit(self.base, self.series, None, start=self.start, **self.kw)
        else:
            reg = self.cov.to_regression(list(names))
            fr = fit(self.reg_spec, self.series, reg, start=self.start,
                     start_params=self._warm(names), **self.kw)
        self.cache[key] = fr
        self.last = fr
        return fr

    def _warm(self, names):
        prev = self.last
        if prev is None:
            return None
        vals = []
        layout, _ = parameter_layout(self.reg_spec, self.cov.to_regression(list(names)))
        for nm in layout:
            vals.append(prev.params.get(nm, 0.0) if nm in prev.params.names else 0.0)
        return np.array(vals)

    def pvalues(self, fr, names):
        v = significance(fr, self.alpha, names=[f"beta.{n}" for n in names])
        return {n: v[f"beta.{n}"].p_value if math.isfinite(v[f"beta.{n}"].p_value) else math.nan for n in names}

    def keep(self, p):
        return math.isfinite(p) and p < self.alpha

    def try_add(self, current, batch, group, phase):
        """Fit ``current + batch``; returns the surviving batch members (or
        None when the fit failed for a singleton)."""
        try:
            fr = self.fit(current + list(batch))
        except CollinearityError as exc:
            return self._split(current, batch, group, phase, f"collinear: {list(exc.columns)}")
        except ChurnSSMError as exc:
            return self._split(current, batch, group, phase, f"fit failed: {exc}")
        members = list(batch)
        p = self.pvalues(fr, members)
        self.log(phase, group, "add", members, p)
        while True:
            drop = [n for n in members if not self.keep(p[n])]
            if not drop:
                return members
            members = [n for n in members if n not in drop]
            self.log(phase, group, "drop", drop, p)
            if not members:
                return members
            try:
                fr = self.fit(current + members)
            except ChurnSSMError as exc:
                self.log(phase, group, "drop", members, note=f"refit failed: {exc}")
                return []
            p = self.pvalues(fr, members)
            self.log(phase, group, "refit", members, p)

    def _split(self, current, batch, group, phase, note):
        if len(batch) == 1:
            self.log(phase, group, "reject", list(batch), note=note)
            return []
        self.log(phase, group, "split", list(batch), note=note)
        half = len(batch) // 2
        kept = self.try_add(current, batch[:half], group, phase)
        kept += self.try_add(current + kept, batch[half:], group, phase)
        return kept

    def prune(self, selected):
        """Drop non-significant kept covariates until all pass; returns the
        surviving list and the dropped names."""
        dropped = []
        while selected:
            fr = self.fit(selected)
            p = self.pvalues(fr, selected)
            bad = [n for n in selected if not self.keep(p[n])]
            if not bad:
                break
            self.log("final", "", "drop", bad, p)
            dropped += bad
            selected = [n for n in selected if n not in bad]
        return selected, dropped


def stepwise_covariates(series, base_spec, covariates, groups=None, alpha=0.1, *, start=0, series_name="",
                        round_number=1, max_passes=10, fit_kwargs=None) -> StepwiseResult:
    """Grouped forward selection with backward drops and a final retry pass.

    ``covariates`` is a CovariateMatrix (already delayed for the series).
    ``groups`` defaults to :func:`default_groups` for ``series_name``.
    Every decision goes to the audit trail with its p-values.
    """
    if groups is None:
        groups = default_groups(covariates, series_name, round_number, base_spec)
    for g in groups:
        missing = [m for m in g.members if m not in covariates.names]
        if missing:
            raise InputError(f"group {g.name} names unknown covariates {missing}")
    st = _Stepper(series, base_spec, covariates, alpha, start, fit_kwargs)
    st.fit([])
    selected, rejected = [], []
    for g in groups:
        for batch in g.batches():
            kept = st.try_add(selected, batch, g.name, "groups")
            selected += kept
            rejected += [n for n in batch if n not in kept]

    converged = False
    for _ in range(max_passes):
        selected, dropped = st.prune(selected)
        rejected += dropped
        added = False
        for name in list(rejected):
            try:
                fr = st.fit(selected + [name])
            except ChurnSSMError as exc:
                st.log("final", covariates.groups.get(name, ""), "retry_reject", [name], note=str(exc))
                continue
            p = st.pvalues(fr, [name])
            if st.keep(p[name]):
                st.log("final", covariates.groups.get(name, ""), "retry_keep", [name], p)
                selected.append(name)
                rejected.remove(name)
                added = True
            else:
                st.log("final", covariates.groups.get(name, ""), "retry_reject", [name], p)
        if not added:
            selected, dropped = st.prune(selected)
            if not dropped:
                converged = True
                break
            rejected += dropped
    final = st.fit(selected)
    return StepwiseResult(selected, rejected, final, st.audit, converged)


__all__ = ["ModelCandidate", "GridResult", "CovariateGroup", "StepwiseResult", "grid_search_arima",
           "grid_search_uc", "dual_grid_search", "choose_difference", "stepwise_covariates", "group_order",
           "default_groups", "rank_candidates", "tie_break", "arima_grid", "uc_grid_points"]
