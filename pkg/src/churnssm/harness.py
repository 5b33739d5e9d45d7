"""Rolling monthly forecast evaluation and report assembly."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .builders import spec_to_dict
from .diagnostics import acf, pacf, write_correlogram
from .errors import ChurnSSMError, InputError, MissingArtifactError
from .estimation import FitResult, _jsonable, fit

logger = logging.getLogger(__name__)


def _month_bounds(month):
    m = np.datetime64(month, "M")
    first = m.astype("datetime64[D]")
    last = (m + 1).astype("datetime64[D]") - 1
    return first, last


@dataclass
class RollingSchedule:
    """Evaluation months; each is forecast from the last day of the month before.

    ``training_start`` maps series names to their first training date (the
    key ``"*"`` is the fallback).
    """

    months: list
    training_start: dict = field(default_factory=dict)

    def __post_init__(self):
        self.months = [str(np.datetime64(m, "M")) for m in self.months]
        if not self.months:
            raise InputError("schedule has no months")
        cut = self.cutoffs()
        if any(b <= a for a, b in zip(cut, cut[1:])):
            raise InputError("evaluation months must be strictly increasing")
        self.training_start = {k: str(np.datetime64(v, "D")) for k, v in self.training_start.items()}
        for k, v in self.training_start.items():
            if np.datetime64(v) >= cut[0]:
                raise InputError(f"training start {v} for {k} is not before the first cutoff {cut[0]}")

    def cutoffs(self):
        return [_month_bounds(m)[0] - 1 for m in self.months]

    def start_for(self, series):
        v = self.training_start.get(series, self.training_start.get("*"))
        return None if v is None else np.datetime64(v, "D")

    def to_dict(self):
        return {"months": list(self.months), "training_start": dict(self.training_start)}

    @classmethod
    def from_dict(cls, doc):
        return cls(list(doc["months"]), dict(doc.get("training_start", {})))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def monthly(cls, first, last, training_start=None):
        """Every month from ``first`` to ``last`` inclusive."""
        a, b = np.datetime64(first, "M"), np.datetime64(last, "M")
        months = [str(a + i) for i in range(int((b - a).astype(int)) + 1)]
        return cls(months, {"*": training_start} if training_start else {})


CELL_FIELDS = ("series", "model", "month", "status", "n", "mae", "rmse", "note")


@dataclass
class EvaluationReport:
    """Per series, model and month MAE/RMSE on the natural scale."""

    cells: list = field(default_factory=list)
    forecasts: dict = field(default_factory=dict)

    def add(self, series, model, month, status, errors=None, message=""):
        cell = {"series": series, "model": model, "month": month, "status": status, "n": 0,
                "mae": math.nan, "rmse": math.nan, "note": message}
        if errors is not None:
            e = np.asarray(errors, float)
            e = e[~np.isnan(e)]
            if e.size:
                cell.update(n=int(e.size), mae=float(np.mean(np.abs(e))), rmse=float(np.sqrt(np.mean(e * e))))
            else:
                cell.update(status="no_actuals")
        self.cells.append(cell)
        return cell

    def summary(self):
        """Mean and standard deviation across successful months."""
        out = {}
        for c in self.cells:
            if c["status"] != "ok":
                continue
            out.setdefault((c["series"], c["model"]), []).append((c["mae"], c["rmse"]))
        rows = []
        for (s, m), vals in sorted(out.items()):
            a = np.array(vals)
            rows.append({"series": s, "model": m, "months": len(vals),
                         "mae_mean": float(a[:, 0].mean()), "mae_std": float(a[:, 0].std(ddof=1)) if len(a) > 1
                         else 0.0, "rmse_mean": float(a[:, 1].mean()),
                         "rmse_std": float(a[:, 1].std(ddof=1)) if len(a) > 1 else 0.0})
        return rows

    def merge(self, other):
        self.cells += other.cells
        self.forecasts.update(other.forecasts)
        return self

    def to_dict(self):
        return {"cells": self.cells, "summary": self.summary()}

    def to_json(self):
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        cells = []
        for c in doc["cells"]:
            c = dict(c)
            for k in ("mae", "rmse"):
                c[k] = math.nan if c[k] is None else float(c[k])
            cells.append(c)
        return cls(cells)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CELL_FIELDS)
            for c in self.cells:
                w.writerow([c["series"], c["model"], c["month"], c["status"], c["n"],
                            "" if math.isnan(c["mae"]) else repr(c["mae"]),
                            "" if math.isnan(c["rmse"]) else repr(c["rmse"]), c["note"]])

    def write_summary_csv(self, path):
        rows = self.summary()
        keys = ["series", "model", "months", "mae_mean", "mae_std", "rmse_mean", "rmse_std"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for r in rows:
                w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys])

    def write_forecasts_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["series", "model", "month", "date", "forecast", "actual"])
            for (s, m, month), rows in sorted(self.forecasts.items()):
                for date, f, a in rows:
                    w.writerow([s, m, month, date, repr(float(f)), "" if math.isnan(a) else repr(float(a))])


def _future_rows(covariates, rows, cutoff):
    """Covariate rows for the forecast days with unknown interventions zeroed.

    Intervention columns are only known up to the cutoff: a row keeps its
    value when its cause date (row date minus the matrix delay) is on or
    before the cutoff.
    """
    X = covariates.values[rows].copy()
    cause = covariates.dates[rows] - covariates.delay_days
    unknown = cause > cutoff
    for j, name in enumerate(covariates.names):
        if covariates.groups.get(name, "").startswith("interventions"):
            X[unknown, j] = 0.0
    return X


def rolling_forecast(series, covariates, spec, schedule: RollingSchedule, dates, *, series_name="",
                     model_name=None, fit_kwargs=None, start=None) -> EvaluationReport:
    """Refit on data through each cutoff and forecast the whole next month.

    ``series`` is on the natural scale (counts or rates), ``covariates`` a
    CovariateMatrix restricted to the model's covariates (or None).  Errors
    are forecast minus actual on the natural scale.  ``start`` (an index)
    overrides the schedule's training start for this series.
    """
    y = np.asarray(series, dtype=float)
    dates = np.asarray(dates, dtype="datetime64[D]")
    if y.shape != dates.shape:
        raise InputError("series and dates differ in length")
    if spec.include_regression and covariates is None:
        raise InputError(f"{spec.label} needs covariates")
    if covariates is not None and not np.array_equal(covariates.dates, dates):
        raise InputError("covariate dates do not match the series dates")
    model_name = model_name or spec.family
    report = EvaluationReport()
    if start is None:
        start_date = schedule.start_for(series_name)
        start = 0 if start_date is None else int(np.searchsorted(dates, start_date))
    for month, cutoff in zip(schedule.months, schedule.cutoffs()):
        first, last = _month_bounds(month)
        days = np.flatnonzero((dates >= first) & (dates <= last))
        c = int(np.searchsorted(dates, cutoff, side="right"))
        if days.size == 0 or c == 0 or dates[c - 1] != cutoff:
            report.add(series_name, model_name, month, "failed", message="month outside the data range")
            continue
        train = y[:c]
        cov, dropped = covariates, []
        if spec.include_regression:
            # a column that is zero throughout training (an intervention not yet seen) cannot be estimated
            seen = np.any(covariates.values[start:c] != 0, axis=0)
            dropped = [nm for nm, s in zip(covariates.names, seen) if not s]
            cov = covariates.subset([nm for nm, s in zip(covariates.names, seen) if s])
        use_reg = spec.include_regression and bool(cov.names)
        fspec = spec if use_reg or not spec.include_regression else replace(spec, include_regression=False)
        reg = cov.to_regression(stop=c) if use_reg else None
        try:
            fr = fit(fspec, train, reg, start=start, **(fit_kwargs or {}))
            future = _future_rows(cov, days, cutoff) if use_reg else None
            fc = fr.forecast(days.size, future)
        except ChurnSSMError as exc:
            logger.warning("%s %s %s: refit failed: %s", series_name, model_name, month, exc)
            report.add(series_name, model_name, month, "failed", message=f"{type(exc).__name__}: {exc}")
            continue
        point = fc.point_forecasts
        actual = y[days]
        cell = report.add(series_name, model_name, month, "ok", point - actual)
        if dropped:
            cell["note"] = "unseen in training: " + " ".join(dropped)
        report.forecasts[(series_name, model_name, month)] = [
            (str(dates[d]), float(p), float(a)) for d, p, a in zip(days, point, actual)]
    return report


# ---------------------------------------------------------------- report assembly

def format_estimate(value):
    """Three significant digits with a bare exponent, e.g. ``4.89e-2``."""
    if value is None or not math.isfinite(value):
        return ""
    if value == 0:
        return "0.00e0"
    mant, exp = f"{value:.2e}".split("e")
    return f"{mant}e{int(exp)}"


def parameter_table(fits):
    """Rows = covariates then model parameters, columns = series.

    ``fits`` maps series names to FitResults or their ``to_dict`` documents.
    Covariate cells are blank when the covariate is not in that series'
    model.  UC fits with a level shock add a ``signal_to_noise`` row.
    """
    columns = list(fits)
    cov_rows, other_rows = [], []
    cells = {}
    for s, fr in fits.items():
        doc = fr if isinstance(fr, dict) else fr.to_dict()
        for row in doc["parameters"]:
            name = row["name"]
            label = name[5:] if name.startswith("beta.") else name
            target = cov_rows if name.startswith("beta.") else other_rows
            if label not in target:
                target.append(label)
            cells[(label, s)] = format_estimate(row["estimate"])
        snr = doc.get("signal_to_noise")
        if snr is not None:
            if "signal_to_noise" not in other_rows:
                other_rows.append("signal_to_noise")
            cells[("signal_to_noise", s)] = format_estimate(snr)
    rows = [{"name": r, "cells": {s: cells.get((r, s), "") for s in columns}} for r in cov_rows + other_rows]
    return {"columns": columns, "rows": rows}


def write_parameter_table_csv(table, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter"] + table["columns"])
        for r in table["rows"]:
            w.writerow([r["name"]] + [r["cells"][s] for s in table["columns"]])


def read_parameter_table_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        columns = header[1:]
        rows = [{"name": r[0], "cells": dict(zip(columns, r[1:]))} for r in reader if r]
    return {"columns": columns, "rows": rows}


def write_json(obj, path):
    with open(path, "w") as fh:
        fh.write(json.dumps(_jsonable(obj), indent=2, sort_keys=True))
        fh.write("\n")


def read_json(path, command):
    if not os.path.exists(path):
        raise MissingArtifactError(path, command)
    with open(path) as fh:
        return json.load(fh)


def write_series_csv(path, dates, columns):
    names = list(columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date"] + names)
        for t in range(len(dates)):
            w.writerow([str(dates[t])] + ["" if math.isnan(columns[k][t]) else repr(float(columns[k][t]))
                                          for k in names])


def write_fit_artifacts(fr: FitResult, out_dir, stem, dates, max_lag=28):
    """Fit JSON, residual series and correlogram CSVs for one fitted model."""
    os.makedirs(out_dir, exist_ok=True)
    doc = fr.to_dict()
    write_json(doc, os.path.join(out_dir, f"{stem}.json"))
    write_series_csv(os.path.join(out_dir, f"{stem}_residuals.csv"), dates,
                     {"residual": fr.residuals, "innovation": fr.innovations})
    r = fr.residuals[~np.isnan(fr.residuals)]
    lag = min(max_lag, r.size - 2)
    if lag >= 1 and np.var(r) > 0:
        write_correlogram(os.path.join(out_dir, f"{stem}_acf.csv"), acf(r, lag), r.size)
        write_correlogram(os.path.join(out_dir, f"{stem}_pacf.csv"), pacf(r, lag), r.size)
    return doc


__all__ = ["RollingSchedule", "EvaluationReport", "rolling_forecast", "format_estimate", "parameter_table",
           "write_parameter_table_csv", "read_parameter_table_csv", "write_fit_artifacts", "write_json",
           "read_json", "write_series_csv", "spec_to_dict"]
