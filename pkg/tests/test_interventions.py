import json

import numpy as np
import pytest

from churnssm import interventions as ivmod
from churnssm.builders import ArimaSpec
from churnssm.errors import InputError
from churnssm.estimation import fit
from churnssm.interventions import (
    Intervention,
    classify,
    classify_interventions,
    detect_interventions,
    load_ledger,
    measure_impacts,
    propose_window,
    write_ledger,
)

DATES = np.datetime64("2016-01-01") + np.arange(400)


def local_level(seed, n=400, level_sd=0.5):
    rng = np.random.default_rng(seed)
    return np.cumsum(rng.normal(scale=level_sd, size=n)) + rng.normal(size=n)


def innovation_sd(y):
    return fit(ArimaSpec(0, 1, 1), y).params["sigma2"] ** 0.5


def test_pulse_detected_on_its_day_with_positive_sign():
    for seed in range(5):
        y = local_level(seed)
        y[100] += 8 * innovation_sd(y)
        res = detect_interventions(y, fit(ArimaSpec(0, 1, 1), y), dates=DATES, series_name="s")
        assert len(res.interventions) == 1
        iv = res.interventions[0]
        assert iv.start_date == iv.end_date == str(DATES[100]) and iv.shape == "pulse"
        accepted = [a for a in res.audit if a["action"] == "accept"]
        assert accepted[0]["estimate"] > 0


def test_clean_series_rarely_gets_interventions():
    clean = 0
    for seed in range(100):
        y = local_level(1000 + seed, n=300)
        res = detect_interventions(y, fit(ArimaSpec(0, 1, 1), y, n_starts=1))
        clean += not res.interventions
    assert clean >= 90


def test_interactive_window_for_step():
    y = local_level(3)
    y[100:111] += 8 * innovation_sd(y)
    f = fit(ArimaSpec(0, 1, 1), y)
    r = f.residuals
    assert r[100] > 3 and r[111] < -3
    res = detect_interventions(y, f, mode="interactive", dates=DATES, series_name="s")
    iv = res.interventions[0]
    assert (iv.start_date, iv.end_date, iv.shape) == (str(DATES[100]), str(DATES[110]), "window")
    assert res.pending[0]["key"] == f"s:{DATES[100]}:{DATES[110]}"


def test_review_file_decisions(tmp_path):
    y = local_level(3)
    y[100:111] += 8 * innovation_sd(y)
    f = fit(ArimaSpec(0, 1, 1), y)
    key = f"s:{DATES[100]}:{DATES[110]}"
    path = tmp_path / "review.json"
    path.write_text(json.dumps({"proposals": {key: "reject"}}))
    res = detect_interventions(y, f, mode="interactive", dates=DATES, series_name="s", review=path)
    assert res.interventions == [] and res.audit[-1]["reason"] == "proposal rejected in review"
    res = detect_interventions(y, f, mode="interactive", dates=DATES, series_name="s",
                               review={key: "pulse"})
    assert res.interventions[0].shape == "pulse"
    assert all(p["key"] != key for p in res.pending)


def test_propose_window_pairs_opposite_signs():
    r = np.zeros(40)
    r[10], r[16] = 5.0, -4.0
    assert propose_window(r, 10) == (10, 15)
    assert propose_window(r, 16) == (10, 15)
    r[16] = -2.0
    assert propose_window(r, 10) is None
    r[16], r[30] = 0.0, -4.0
    assert propose_window(r, 10) is None


def test_accepted_steps_reduce_variance_and_jb():
    y = local_level(7)
    s = innovation_sd(y)
    y[80] += 9 * s
    y[250] -= 10 * s
    y[300] += 8 * s
    res = detect_interventions(y, fit(ArimaSpec(0, 1, 1), y), dates=DATES)
    acc = [a for a in res.audit if a["action"] == "accept"]
    assert len(acc) >= 3
    assert {a["day"] for a in acc[:3]} == {str(DATES[80]), str(DATES[250]), str(DATES[300])}
    for a in acc:
        assert a["variance_after"] < a["variance_before"] and a["jb_after"] < a["jb_before"]
        assert a["p_value"] < 0.1


def test_detection_is_deterministic():
    y = local_level(8)
    y[200] += 8 * innovation_sd(y)
    f = fit(ArimaSpec(0, 1, 1), y)
    a = detect_interventions(y, f, dates=DATES)
    b = detect_interventions(y, f, dates=DATES)
    assert json.dumps(a.to_dict(), default=str) == json.dumps(b.to_dict(), default=str)


def test_refit_failure_continues_once_then_stops(monkeypatch):
    y = local_level(9)
    y[50] += 10 * innovation_sd(y)
    f = fit(ArimaSpec(0, 1, 1), y)

    def broken(*a, **k):
        raise ivmod.ChurnSSMError("singular")

    monkeypatch.setattr(ivmod, "fit", broken)
    res = detect_interventions(y, f, dates=DATES)
    assert [a["action"] for a in res.audit] == ["reject", "reject", "stop"]
    assert res.audit[-1]["reason"] == "repeated refit failure"
    assert res.interventions == []


def test_series_mismatch_rejected():
    y = local_level(1)
    f = fit(ArimaSpec(0, 1, 1), y)
    with pytest.raises(InputError):
        detect_interventions(y + 1, f)


def imp(est, p, delay=0, **extra):
    return {"estimate": est, "std_error": abs(est) / 2 if est else 1.0, "p_value": p, "delay": delay, **extra}


def test_classification_examples():
    marketing = {"new_users": imp(0.5, 1e-4), "nonpu_churn": imp(0.02, 0.01, 10),
                 "conversion_to_pu": imp(0.001, 0.6)}
    assert classify(marketing) == ("marketing", False)
    promotion = {"new_users": imp(0.01, 0.7), "conversion_to_pu": imp(0.02, 1e-6),
                 "purchase_churn": imp(0.01, 0.02, 51)}
    assert classify(promotion) == ("promotion", False)
    unknown = {"new_users": imp(0.0, 0.9), "conversion_to_pu": imp(-0.01, 0.001),
               "nonpu_churn": imp(0.02, 0.01, 10), "pu_churn": imp(0.01, 0.03, 10)}
    assert classify(unknown) == ("unknown", False)
    both = {"new_users": imp(0.5, 1e-4), "conversion_to_pu": imp(0.01, 0.01)}
    assert classify(both) == ("marketing", True)
    probed = {"new_users": imp(0.5, 1e-4),
              "conversion_to_pu": imp(0.0, 0.8, probes=[imp(0.01, 0.3, 1), imp(0.02, 0.01, 2)])}
    assert classify(probed) == ("marketing", True)
    negative_nu = {"new_users": imp(-0.5, 1e-4), "conversion_to_pu": imp(0.02, 1e-6)}
    assert classify(negative_nu) == ("unknown", False)


def test_measure_impacts_with_delays_and_probes():
    rng = np.random.default_rng(4)
    n = 400
    iv = Intervention("camp", str(DATES[150]), str(DATES[150]))
    nu = np.log1p(rng.poisson(60, size=n).astype(float))
    nu[150] = np.log1p(400)
    conv = 0.01 + 0.002 * rng.normal(size=n)
    conv[152] += 0.02
    churn = 0.03 + 0.003 * rng.normal(size=n)
    churn[160] += 0.03
    fits = {"new_users": fit(ArimaSpec(0, 0, 0, intercept=True), nu),
            "conversion_to_pu": fit(ArimaSpec(0, 0, 0, intercept=True), conv),
            "nonpu_churn": fit(ArimaSpec(0, 0, 0, intercept=True), churn)}
    delays = {"new_users": 0, "conversion_to_pu": 0, "nonpu_churn": 10}
    out = classify_interventions([iv], fits, dates=DATES, delays=delays)[0]
    m = out.impact_map
    assert m["new_users"]["significant"] and m["new_users"]["estimate"] > 0
    assert m["nonpu_churn"]["delay"] == 10 and m["nonpu_churn"]["significant"]
    assert not m["conversion_to_pu"]["significant"]
    probes = m["conversion_to_pu"]["probes"]
    assert [p["delay"] for p in probes] == [1, 2] and probes[1]["significant"] and not probes[0]["significant"]
    assert (out.classification, out.conflict) == ("marketing", True)


def test_impact_outside_training_window():
    y = local_level(2, n=100)
    iv = Intervention("late", "2020-01-01", "2020-01-02")
    out = measure_impacts([iv], {"new_users": fit(ArimaSpec(0, 1, 1), y)}, DATES[:100], {"new_users": 0})[0]
    assert out.impact_map["new_users"]["estimate"] is None and not out.impact_map["new_users"]["significant"]


def test_detected_intervention_uses_existing_estimate():
    y = local_level(5)
    y[120] += 9 * innovation_sd(y)
    res = detect_interventions(y, fit(ArimaSpec(0, 1, 1), y), dates=DATES, series_name="new_users")
    (iv,) = res.interventions
    out = measure_impacts([iv], {"new_users": res.final_fit}, DATES, {"new_users": 0})[0]
    idx = res.final_fit.params.names.index(f"beta.{iv.name}")
    assert out.impact_map["new_users"]["estimate"] == res.final_fit.params.values[idx]


def test_delayed_series_places_dummy_after_cause_date():
    y = local_level(6)
    y[130] += 9 * innovation_sd(y)
    res = detect_interventions(y, fit(ArimaSpec(0, 1, 1), y), dates=DATES, delay=10, series_name="nonpu_churn")
    iv = res.interventions[0]
    assert iv.start_date == str(DATES[120])
    assert np.flatnonzero(iv.column(DATES, 10)).tolist() == [130]


def test_ledger_round_trip(tmp_path):
    ivs = [Intervention("a", "2016-02-01", "2016-02-03", "window", "new_users", "marketing",
                        {"new_users": imp(0.4, 0.001)}, False)]
    write_ledger(tmp_path / "ledger.json", ivs, [{"round": 0, "action": "accept"}])
    back, audit = load_ledger(tmp_path / "ledger.json")
    assert back == ivs and audit == [{"round": 0, "action": "accept"}]


def test_intervention_validation():
    with pytest.raises(InputError):
        Intervention("x", "2016-02-02", "2016-02-01")
    with pytest.raises(InputError):
        Intervention("x", "2016-02-01", "2016-02-01", shape="ramp")
    with pytest.raises(InputError):
        Intervention("x", "2016-02-01", "2016-02-01", classification="bogus")
