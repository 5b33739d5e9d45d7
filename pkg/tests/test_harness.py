import json
import math

import numpy as np
import pytest

from churnssm.builders import ArimaSpec, UcSpec
from churnssm.errors import InputError, MissingArtifactError
from churnssm.estimation import fit
from churnssm.harness import (
    EvaluationReport,
    RollingSchedule,
    format_estimate,
    parameter_table,
    read_json,
    read_parameter_table_csv,
    _future_rows,
    rolling_forecast,
    write_parameter_table_csv,
)
from churnssm.ingestion import GameCalendar, build_covariates, build_segment_panel
from churnssm.interventions import Intervention
from churnssm.synthetic import Scenario, TrueIntervention, generate

LEVEL = UcSpec("local_level")
FAST = {"n_starts": 1, "compute_se": False}
DATES = np.datetime64("2016-01-01") + np.arange(520)


def walk(seed, n=DATES.size):
    rng = np.random.default_rng(seed)
    return 50 + np.cumsum(rng.normal(scale=0.5, size=n)) + rng.normal(size=n)


def test_schedule_cutoffs_and_validation():
    s = RollingSchedule(["2016-03", "2016-04"], {"*": "2016-01-01"})
    assert [str(c) for c in s.cutoffs()] == ["2016-02-29", "2016-03-31"]
    assert RollingSchedule.from_json(json.dumps(s.to_dict())).to_dict() == s.to_dict()
    assert RollingSchedule.monthly("2016-03", "2016-06").months == ["2016-03", "2016-04", "2016-05", "2016-06"]
    with pytest.raises(InputError):
        RollingSchedule(["2016-04", "2016-03"])
    with pytest.raises(InputError):
        RollingSchedule(["2016-03"], {"*": "2016-03-01"})
    with pytest.raises(InputError):
        RollingSchedule([])


def test_constant_series_has_zero_error():
    rep = rolling_forecast(np.full(200, 7.0), None, LEVEL, RollingSchedule(["2016-05", "2016-06"]), DATES[:200],
                           fit_kwargs=FAST)
    for c in rep.cells:
        assert c["status"] == "ok" and c["mae"] == 0.0 and c["rmse"] == 0.0


def hand_loop(y, dates, spec, months):
    """Independent evaluation: slice by calendar strings, refit, forecast, score."""
    out = []
    for m in months:
        days = [i for i, d in enumerate(dates) if str(d).startswith(m)]
        cut = days[0]
        fr = fit(spec, y[:cut], **FAST)
        f = fr.forecast(len(days)).point_forecasts
        e = f - y[days[0]: days[-1] + 1]
        out.append((float(np.mean(np.abs(e))), float(np.sqrt(np.mean(e ** 2)))))
    return out


def test_matches_hand_rolled_loop_bit_exact():
    y = walk(1)
    months = [str(np.datetime64("2016-05") + i) for i in range(12)]
    rep = rolling_forecast(y, None, LEVEL, RollingSchedule(months), DATES, fit_kwargs=FAST)
    got = [(c["mae"], c["rmse"]) for c in rep.cells]
    assert got == hand_loop(y, DATES, LEVEL, months)
    for c in rep.cells:
        assert c["rmse"] >= c["mae"] >= 0


def test_log_series_scored_on_counts():
    rng = np.random.default_rng(2)
    y = rng.poisson(60, size=300).astype(float)
    spec = ArimaSpec(0, 1, 1, log_transform=True)
    rep = rolling_forecast(y, None, spec, RollingSchedule(["2016-08"]), DATES[:300], fit_kwargs=FAST)
    fr = fit(spec, y[:213], **FAST)
    f = np.expm1(fr.forecast(31).mean)
    assert rep.cells[0]["mae"] == pytest.approx(np.mean(np.abs(f - y[213:244])), rel=1e-12)
    assert rep.cells[0]["mae"] > 1  # counts, not logs


@pytest.mark.parametrize("spec", [LEVEL, ArimaSpec(1, 1, 1)])
def test_poisoning_future_data_leaves_forecasts_unchanged(spec):
    y = walk(3)
    months = ["2016-06", "2016-09"]
    sched = RollingSchedule(months)
    base = rolling_forecast(y, None, spec, sched, DATES, fit_kwargs=FAST)
    for month, cutoff in zip(months, sched.cutoffs()):
        bad = y.copy()
        after = DATES > cutoff
        bad[after] = np.random.default_rng(0).normal(1e4, 1e3, size=after.sum())
        rep = rolling_forecast(bad, None, spec, RollingSchedule([month]), DATES, fit_kwargs=FAST)
        a = [f for _, f, _ in base.forecasts[("", spec.family, month)]]
        b = [f for _, f, _ in rep.forecasts[("", spec.family, month)]]
        assert a == b


def test_future_interventions_are_zeroed_by_cause_date():
    cal = GameCalendar()
    cut = np.datetime64("2016-05-31")
    rows = np.flatnonzero((DATES >= np.datetime64("2016-06-01")) & (DATES <= np.datetime64("2016-06-30")))
    # delayed series: a cause date before the cutoff stays visible in the forecast month
    cov10 = build_covariates(cal, DATES, [Intervention("late", "2016-05-28", "2016-05-31")], 10)
    X = _future_rows(cov10.subset(["late"]), rows, cut)
    assert np.flatnonzero(X[:, 0]).tolist() == [6, 7, 8, 9]  # June 7-10
    fut = build_covariates(cal, DATES, [Intervention("fut", "2016-06-05", "2016-06-06")]).subset(["fut"])
    assert not _future_rows(fut, rows, cut).any()
    # calendar columns are planned information and are kept
    hol = GameCalendar([], {np.datetime64("2016-06-15")}, set())
    cal_cols = build_covariates(hol, DATES).subset(["national_holiday"])
    assert _future_rows(cal_cols, rows, cut).sum() == 1


def test_intervention_unseen_in_training_is_dropped_for_that_month():
    y = walk(4)
    cov = build_covariates(GameCalendar(), DATES, [Intervention("camp", "2016-06-10", "2016-06-12")])
    spec = ArimaSpec(0, 1, 1, include_regression=True)
    rep = rolling_forecast(y, cov.subset(["camp"]), spec, RollingSchedule(["2016-06", "2016-08"]), DATES,
                           fit_kwargs=FAST)
    assert [c["status"] for c in rep.cells] == ["ok", "ok"]
    assert rep.cells[0]["note"] == "unseen in training: camp" and rep.cells[1]["note"] == ""


def test_failed_month_is_recorded_and_run_continues(monkeypatch):
    import churnssm.harness as h
    from churnssm.errors import FitError

    real = h.fit
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 1:
            raise FitError("did not converge")
        return real(*a, **k)

    monkeypatch.setattr(h, "fit", flaky)
    rep = rolling_forecast(walk(5), None, LEVEL, RollingSchedule(["2016-05", "2016-06"]), DATES, fit_kwargs=FAST)
    assert [c["status"] for c in rep.cells] == ["failed", "ok"]
    assert "FitError" in rep.cells[0]["note"]
    assert len(rep.summary()) == 1 and rep.summary()[0]["months"] == 1


def test_campaign_month_is_the_rmse_peak():
    cam = TrueIntervention("camp", "2015-09-10", "2015-09-24", "marketing", {"new_users": 1.2})
    sc = Scenario(horizon=420, seed=11, initial_cohort=500, arrival_base=80, interventions=[cam])
    log, _ = generate(sc)
    panel = build_segment_panel(log)
    y = panel.new_users
    spec = ArimaSpec(0, 1, 1, log_transform=True)
    months = [str(np.datetime64("2015-05") + i) for i in range(10)]
    rep = rolling_forecast(y, None, spec, RollingSchedule(months), panel.dates, series_name="new_users",
                           fit_kwargs=FAST)
    rmse = {c["month"]: c["rmse"] for c in rep.cells}
    assert max(rmse, key=rmse.get) == "2015-09"


def test_report_serialisation(tmp_path):
    rep = EvaluationReport()
    rep.add("a", "arima", "2016-01", "ok", [1.0, -3.0])
    rep.add("a", "arima", "2016-02", "failed", message="x")
    doc = json.loads(rep.to_json())
    assert doc["cells"][0]["rmse"] == pytest.approx(math.sqrt(5)) and doc["cells"][1]["mae"] is None
    back = EvaluationReport.from_dict(doc)
    assert back.cells[0] == rep.cells[0] and math.isnan(back.cells[1]["mae"])
    rep.write_csv(tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "series,model,month,status,n,mae,rmse,note"


def test_format_estimate():
    assert format_estimate(0.0489) == "4.89e-2"
    assert format_estimate(-1234.5) == "-1.23e3"
    assert format_estimate(1.0) == "1.00e0"
    assert format_estimate(float("nan")) == ""


def test_parameter_table_round_trip_and_signal_to_noise(tmp_path):
    rng = np.random.default_rng(6)
    n = 300
    hol = (rng.random(n) < 0.05).astype(float)
    from churnssm.builders import RegressionSpec
    reg = RegressionSpec(("national_holiday",), hol[:, None])
    y1 = np.cumsum(rng.normal(scale=0.3, size=n)) + rng.normal(size=n) + 2 * hol
    y2 = np.cumsum(rng.normal(size=n))
    fits = {"new_users": fit(UcSpec("local_level", include_regression=True), y1, reg, n_starts=1),
            "pu_churn": fit(ArimaSpec(0, 1, 1), y2, n_starts=1)}
    table = parameter_table(fits)
    assert table["columns"] == ["new_users", "pu_churn"]
    rows = {r["name"]: r["cells"] for r in table["rows"]}
    assert table["rows"][0]["name"] == "national_holiday"
    assert rows["national_holiday"]["pu_churn"] == ""
    assert rows["signal_to_noise"]["pu_churn"] == "" and rows["signal_to_noise"]["new_users"] != ""
    snr = fits["new_users"].params["sigma2.level"] / fits["new_users"].params["sigma2.irregular"]
    assert rows["signal_to_noise"]["new_users"] == format_estimate(snr)
    (tmp_path / "t.json").write_text(json.dumps(table, sort_keys=True))
    write_parameter_table_csv(json.loads((tmp_path / "t.json").read_text()), tmp_path / "t.csv")
    assert json.dumps(read_parameter_table_csv(tmp_path / "t.csv"), sort_keys=True) == \
        (tmp_path / "t.json").read_text()


def test_missing_artifact_names_prior_command(tmp_path):
    with pytest.raises(MissingArtifactError, match="churnssm ingest"):
        read_json(tmp_path / "panel.json", "churnssm ingest")
