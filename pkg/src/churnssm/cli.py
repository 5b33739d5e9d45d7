"""Command-line pipeline: ingest, calibrate, fit, select, interventions, forecast, report, synth.

Every command reads and writes artifacts under ``--workdir``.  Outputs carry
no timestamps and JSON keys are sorted, so a fixed ``--seed`` with
``--workers 1`` reproduces every file byte for byte.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import shutil
import sys


from . import __version__
from .builders import spec_from_dict
from .errors import ChurnSSMError, ConfigurationError, InputError, MissingArtifactError, NumericalError
from .estimation import fit
from .harness import (
    RollingSchedule,
    parameter_table,
    read_json,
    rolling_forecast,
    write_fit_artifacts,
    write_json,
    write_parameter_table_csv,
    write_series_csv,
)
from .ingestion import (
    MODELLED_SERIES,
    SegmentPanel,
    build_covariates,
    build_segment_panel,
    calibrate_churn_window,
    load_calendar,
    load_event_log,
    series_delay,
    write_calendar,
    write_event_log,
)
from .interventions import detect_interventions, load_ledger, measure_impacts, classify_interventions, write_ledger
from .selection import dual_grid_search, stepwise_covariates
from .synthetic import generate, load_scenario, truth_to_json

logger = logging.getLogger("churnssm")

DEFAULT_CONFIG = {
    "churn_window": 9,
    "purchase_churn_window": 50,
    "series_start": {},
    "log_series": ["new_users"],
    "fit": {"n_starts": 3},
    "grid": {"max_order": 5, "max_seasonal_order": 0, "uc_monthly": True},
    "alpha": 0.1,
    "interventions": {"max_rounds": 20, "default_decision": "window"},
}

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_MISSING = 0, 1, 2, 3


def load_config(path):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    with open(path) as fh:
        user = json.load(fh)
    unknown = set(user) - set(cfg)
    if unknown:
        raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
    for k, v in user.items():
        if isinstance(cfg[k], dict) and isinstance(v, dict):
            cfg[k].update(v)
        else:
            cfg[k] = v
    return cfg


# ---------------------------------------------------------------- workdir helpers

class Workdir:
    def __init__(self, root):
        self.root = root

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def ensure(self, *parts):
        p = self.path(*parts)
        os.makedirs(p, exist_ok=True)
        return p

    def require(self, rel, command):
        p = self.path(rel)
        if not os.path.exists(p):
            raise MissingArtifactError(p, command)
        return p

    def fit_stem(self, series, family):
        return f"{series}__{family}"


def _load_panel(wd, cfg):
    meta = read_json(wd.path("meta.json"), "churnssm ingest")
    panel = SegmentPanel.from_csv(wd.require("panel.csv", "churnssm ingest"), meta["churn_window"],
                                  meta["purchase_churn_window"])
    calendar = load_calendar(wd.require("calendar.csv", "churnssm ingest"))
    return panel, calendar


def _ledger(wd):
    p = wd.path("interventions", "ledger.json")
    return load_ledger(p)[0] if os.path.exists(p) else []


class SeriesContext:
    """Series values, training start and delayed covariates for one modelled series."""

    def __init__(self, wd, cfg, name, interventions=None):
        if name not in MODELLED_SERIES:
            raise InputError(f"unknown series {name!r}; choose from {', '.join(MODELLED_SERIES)}")
        self.panel, self.calendar = _load_panel(wd, cfg)
        self.name = name
        self.dates = self.panel.dates
        self.delay = series_delay(name, self.panel.churn_window, self.panel.purchase_churn_window)
        start = self.panel.evaluable_from(name)
        if name in cfg["series_start"]:
            start = max(start, self.panel.index_of(cfg["series_start"][name]))
        self.start = start
        self.y = self.panel.series(name)
        self.log_transform = name in cfg["log_series"]
        ivs = _ledger(wd) if interventions is None else interventions
        self.covariates = build_covariates(self.calendar, self.dates, ivs, self.delay)

    def subset(self, names):
        missing = [n for n in names if n not in self.covariates.names]
        if any(n.startswith("iv_") for n in missing):
            raise MissingArtifactError(f"interventions/ledger.json (covariates {missing})", "churnssm interventions")
        if missing:
            raise InputError(f"unknown covariates {missing}")
        return self.covariates.subset(list(names))


def _fit_kwargs(args, cfg):
    return {"seed": args.seed, **cfg["fit"]}


def _save_fit(wd, fr, ctx, stem, extra=None):
    doc = write_fit_artifacts(fr, wd.ensure("fits"), stem, ctx.dates)
    doc.update({"series": ctx.name, "start": str(ctx.dates[ctx.start]), "delay": ctx.delay, **(extra or {})})
    write_json(doc, wd.path("fits", f"{stem}.json"))
    return doc


def _fit_docs(wd, series=None, family=None):
    d = wd.path("fits")
    if not os.path.isdir(d):
        raise MissingArtifactError(d, "churnssm fit")
    out = {}
    for fn in sorted(os.listdir(d)):
        if not fn.endswith(".json") or "__" not in fn:
            continue
        s, f = fn[:-5].split("__", 1)
        if (series is None or s in series) and (family is None or f == family):
            with open(os.path.join(d, fn)) as fh:
                out[(s, f)] = json.load(fh)
    if not out:
        raise MissingArtifactError(os.path.join(d, f"<series>__{family or '<family>'}.json"), "churnssm fit")
    return out


def _refit(doc, ctx, fit_kwargs):
    spec = spec_from_dict(doc["spec"])
    names = doc["covariates"]
    reg = ctx.subset(names).to_regression() if names else None
    start_params = [p["estimate"] for p in doc["parameters"]]
    return fit(spec, ctx.y, reg, start=ctx.start, start_params=start_params, **fit_kwargs)


def _parse_spec(text):
    if os.path.exists(text):
        with open(text) as fh:
            text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid spec JSON: {exc}") from None


def _parse_range(text):
    if ".." in text:
        a, b = text.split("..", 1)
        return list(range(int(a), int(b) + 1))
    return [int(v) for v in text.split(",") if v]


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg, wd):
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc.seed = args.seed
    out = args.out or wd.root
    os.makedirs(out, exist_ok=True)
    log, truth = generate(sc)
    write_event_log(log, os.path.join(out, "events.csv"))
    write_calendar(sc.calendar, os.path.join(out, "calendar.csv"))
    with open(os.path.join(out, "truth.json"), "w") as fh:
        fh.write(truth_to_json(truth))
        fh.write("\n")
    with open(os.path.join(out, "scenario.json"), "w") as fh:
        fh.write(sc.to_json())
        fh.write("\n")
    logger.info("generated %d events for %d players", len(log), log.n_players)


def cmd_ingest(args, cfg, wd):
    log = load_event_log(args.log, args.start, args.end)
    calendar = load_calendar(args.calendar)
    out = Workdir(args.out or wd.root)
    out.ensure()
    panel = build_segment_panel(log, cfg["churn_window"], cfg["purchase_churn_window"])
    panel.to_csv(out.path("panel.csv"))
    write_calendar(calendar, out.path("calendar.csv"))
    write_json({"first_date": str(panel.dates[0]), "last_date": str(panel.dates[-1]), "n_days": panel.n_days,
                "n_players": log.n_players, "n_events": len(log), "churn_window": cfg["churn_window"],
                "purchase_churn_window": cfg["purchase_churn_window"],
                "evaluable_from": {s: panel.evaluable_from(s) for s in MODELLED_SERIES}}, out.path("meta.json"))


def cmd_calibrate(args, cfg, wd):
    log = load_event_log(args.log)
    out = wd.ensure("calibration")
    mode = "purchase" if args.purchase else "login"
    try:
        window, table = calibrate_churn_window(log, _parse_range(args.candidates), args.max_false_churners,
                                               args.max_missed_sales, args.span_days, purchase_mode=args.purchase)
        err = None
    except ChurnSSMError as exc:
        if not hasattr(exc, "table"):
            raise
        window, table, err = None, exc.table, exc
    write_json({"mode": mode, "window": window, "span_days": args.span_days,
                "table": [vars(r) for r in table]}, os.path.join(out, f"{mode}.json"))
    if err is not None:
        raise err
    print(window)


def cmd_fit(args, cfg, wd):
    ctx = SeriesContext(wd, cfg, args.series)
    doc = _parse_spec(args.spec)
    doc.setdefault("family", args.family)
    if doc["family"] != args.family:
        raise ConfigurationError(f"spec family {doc['family']!r} does not match --family {args.family}")
    names = [c for c in (args.covariates or "").split(",") if c]
    doc["include_regression"] = bool(names)
    if "log_transform" not in doc:
        doc["log_transform"] = ctx.log_transform
    spec = spec_from_dict(doc)
    reg = ctx.subset(names).to_regression() if names else None
    fr = fit(spec, ctx.y, reg, start=ctx.start, **_fit_kwargs(args, cfg))
    _save_fit(wd, fr, ctx, wd.fit_stem(args.series, args.family))
    print(f"{args.series} {spec.label} aic={fr.aic:.6g}")


def cmd_select(args, cfg, wd):
    ctx = SeriesContext(wd, cfg, args.series)
    fk = _fit_kwargs(args, cfg)
    grid_cfg = cfg["grid"]
    dow = ctx.covariates.subset(ctx.covariates.group_members("day_of_week"))
    kw = {"log_transform": ctx.log_transform, "start": ctx.start, "workers": args.workers, "fit_kwargs": fk}
    if args.family == "arima":
        kw.update(max_order=grid_cfg["max_order"], max_seasonal_order=grid_cfg["max_seasonal_order"])
    else:
        kw.update(monthly_options=(False, True) if grid_cfg["uc_monthly"] else (False,))
    grids = dual_grid_search(args.family, ctx.y, dow.to_regression(), **kw)
    out = wd.ensure("selection")
    stem = wd.fit_stem(args.series, args.family)
    for variant, g in grids.items():
        g.write_csv(os.path.join(out, f"{stem}_grid_{variant}.csv"))
    plain = grids["plain"]
    if plain.recommended is None:
        raise NumericalError(f"every {args.family} grid point failed for {args.series}")
    base = plain.recommended.spec
    round_number = 2 if _ledger(wd) else 1
    step = stepwise_covariates(ctx.y, base, ctx.covariates, alpha=cfg["alpha"], start=ctx.start,
                               series_name=args.series, round_number=round_number, fit_kwargs=fk)
    step.write_audit_csv(os.path.join(out, f"{stem}_audit.csv"))
    write_json({"series": args.series, "family": args.family, "round": round_number,
                "grids": {v: g.to_dict() for v, g in grids.items()}, "stepwise": step.to_dict()},
               os.path.join(out, f"{stem}.json"))
    _save_fit(wd, step.final_fit, ctx, stem, {"round": round_number})
    print(f"{args.series} {step.final_fit.spec.label} covariates={','.join(step.selected) or '-'}")


def cmd_interventions(args, cfg, wd):
    docs = _fit_docs(wd, args.series.split(",") if args.series else None, args.family)
    fk = _fit_kwargs(args, cfg)
    icfg = cfg["interventions"]
    out = wd.ensure("interventions")
    found, audit, pending, fits, delays = {}, [], [], {}, {}
    dates = None
    for (s, _), doc in docs.items():
        ctx = SeriesContext(wd, cfg, s)
        dates = ctx.dates
        fr = _refit(doc, ctx, fk)
        fits[s], delays[s] = fr, ctx.delay
        y = ctx.y.copy()
        y[:ctx.start] = float("nan")
        res = detect_interventions(y, fr, args.mode, icfg["max_rounds"], dates=ctx.dates, delay=ctx.delay,
                                   series_name=s, alpha=cfg["alpha"], review=args.review,
                                   default_decision=icfg["default_decision"], fit_kwargs=fk)
        write_json(res.to_dict(), os.path.join(out, f"detection_{s}.json"))
        audit += [{"series": s, **a} for a in res.audit]
        pending += res.pending
        for iv in res.interventions:
            found.setdefault(iv.name, iv)
    ivs = [found[k] for k in sorted(found)]
    ivs = classify_interventions(measure_impacts(ivs, fits, dates, delays, alpha=cfg["alpha"], fit_kwargs=fk),
                                 alpha=cfg["alpha"]) if ivs else []
    write_ledger(os.path.join(out, "ledger.json"), ivs, audit)
    if args.mode == "interactive":
        write_json({"proposals": {p["key"]: p.get("decision", icfg["default_decision"]) for p in pending}},
                   os.path.join(out, "pending_review.json"))
    for iv in ivs:
        print(f"{iv.name} {iv.start_date} {iv.end_date} {iv.classification}{' conflict' if iv.conflict else ''}")


def cmd_forecast(args, cfg, wd):
    with open(args.schedule) as fh:
        schedule = RollingSchedule.from_json(fh.read())
    docs = _fit_docs(wd, args.series.split(",") if args.series else None, args.family)
    fk = {**_fit_kwargs(args, cfg), "compute_se": False}
    report = None
    for (s, f), doc in docs.items():
        ctx = SeriesContext(wd, cfg, s)
        spec = spec_from_dict(doc["spec"])
        cov = ctx.subset(doc["covariates"]) if doc["covariates"] else None
        given = schedule.start_for(s)
        start = ctx.start if given is None else max(ctx.start, ctx.panel.index_of(given))
        rep = rolling_forecast(ctx.y, cov, spec, schedule, ctx.dates, series_name=s, model_name=f,
                               fit_kwargs=fk, start=start)
        report = rep if report is None else report.merge(rep)
    out = wd.ensure("evaluation")
    write_json(report.to_dict(), os.path.join(out, "evaluation.json"))
    report.write_csv(os.path.join(out, "evaluation.csv"))
    report.write_summary_csv(os.path.join(out, "summary.csv"))
    report.write_forecasts_csv(os.path.join(out, "forecasts.csv"))
    for row in report.summary():
        print(f"{row['series']} {row['model']} MAE={row['mae_mean']:.6g} RMSE={row['rmse_mean']:.6g}")


def cmd_report(args, cfg, wd):
    panel, _ = _load_panel(wd, cfg)
    docs = _fit_docs(wd)
    evaluation = wd.require(os.path.join("evaluation", "evaluation.json"), "churnssm forecast")
    out = Workdir(args.out)
    out.ensure()
    files = []

    def copy(src, *dst):
        shutil.copyfile(src, out.path(*dst))
        files.append("/".join(dst))

    copy(evaluation, "evaluation.json")
    for fn in ("evaluation.csv", "summary.csv", "forecasts.csv"):
        copy(wd.require(os.path.join("evaluation", fn), "churnssm forecast"), fn if fn != "summary.csv"
             else "evaluation_summary.csv")
    for family in sorted({f for _, f in docs}):
        table = parameter_table({s: d for (s, f), d in docs.items() if f == family})
        write_json(table, out.path(f"parameters_{family}.json"))
        write_parameter_table_csv(table, out.path(f"parameters_{family}.csv"))
        files += [f"parameters_{family}.json", f"parameters_{family}.csv"]
    out.ensure("correlograms")
    for s, f in sorted(docs):
        for kind in ("acf", "pacf", "residuals"):
            src = wd.path("fits", f"{s}__{f}_{kind}.csv")
            if os.path.exists(src):
                copy(src, "correlograms", f"{s}__{f}_{kind}.csv")
    ledger = wd.path("interventions", "ledger.json")
    if os.path.exists(ledger):
        copy(ledger, "interventions.json")
    write_series_csv(out.path("series.csv"), panel.dates, {s: panel.series(s) for s in MODELLED_SERIES})
    files.append("series.csv")
    write_json({"files": sorted(files + ["manifest.json"]), "version": __version__}, out.path("manifest.json"))


# ---------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="churnssm", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="random seed for optimiser starts and synthesis")
    p.add_argument("--workers", type=int, default=1, help="processes for grid search")
    p.add_argument("--config", default=None, help="JSON configuration overriding the defaults")
    p.add_argument("--workdir", default=".", help="artifact directory (default: current directory)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic event log from a scenario")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", default=None)

    s = sub.add_parser("ingest", help="build the segment panel from an event log and calendar")
    s.add_argument("--log", required=True)
    s.add_argument("--calendar", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--start", default=None)
    s.add_argument("--end", default=None)

    s = sub.add_parser("calibrate", help="choose the churn window from candidate lengths")
    s.add_argument("--log", required=True)
    s.add_argument("--span-days", type=int, required=True)
    s.add_argument("--candidates", default="5..15", help="range a..b or comma list")
    s.add_argument("--purchase", action="store_true", help="calibrate the purchase-churn window")
    s.add_argument("--max-false-churners", type=float, default=0.10)
    s.add_argument("--max-missed-sales", type=float, default=0.015)

    s = sub.add_parser("fit", help="fit one model to one series")
    s.add_argument("--series", required=True)
    s.add_argument("--family", choices=("arima", "uc"), required=True)
    s.add_argument("--spec", required=True, help="spec JSON text or file")
    s.add_argument("--covariates", default="", help="comma-separated covariate names")

    s = sub.add_parser("select", help="grid search plus stepwise covariate selection")
    s.add_argument("--series", required=True)
    s.add_argument("--family", choices=("arima", "uc"), required=True)

    s = sub.add_parser("interventions", help="detect and classify interventions")
    s.add_argument("--mode", choices=("auto", "interactive"), default="auto")
    s.add_argument("--series", default=None, help="comma-separated subset of fitted series")
    s.add_argument("--family", choices=("arima", "uc"), default="arima")
    s.add_argument("--review", default=None, help="review decisions JSON for interactive mode")

    s = sub.add_parser("forecast", help="rolling monthly forecast evaluation")
    s.add_argument("--schedule", required=True)
    s.add_argument("--series", default=None)
    s.add_argument("--family", choices=("arima", "uc"), default=None)

    s = sub.add_parser("report", help="assemble tables, correlograms and plot-ready files")
    s.add_argument("--out", required=True)
    return p


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "calibrate": cmd_calibrate, "fit": cmd_fit,
            "select": cmd_select, "interventions": cmd_interventions, "forecast": cmd_forecast,
            "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "interventions":
        args.mode = {"auto": "automatic"}.get(args.mode, args.mode)
    try:
        cfg = load_config(args.config)
        if args.seed is None and args.command != "synth":
            args.seed = 0
        COMMANDS[args.command](args, cfg, Workdir(args.workdir))
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ChurnSSMError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
