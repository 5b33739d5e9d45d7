"""A small end-to-end CLI run shared by the CLI tests and the acceptance suite."""
import json
import os

from churnssm.cli import main
from churnssm.synthetic import Scenario, TrueIntervention, holiday_calendar


def write_inputs(root):
    os.makedirs(root, exist_ok=True)
    sc = Scenario(horizon=330, seed=3, initial_cohort=800, arrival_base=40,
                  calendar=holiday_calendar("2015-01-01", 330, seed=1),
                  effects={"new_users": {"national_holiday": 0.4}, "nonpu_churn": {"national_holiday": 0.01}},
                  interventions=[TrueIntervention("camp", "2015-08-10", "2015-08-10", "marketing",
                                                  {"new_users": 1.5})])
    with open(os.path.join(root, "scenario.json"), "w") as fh:
        fh.write(sc.to_json())
    with open(os.path.join(root, "schedule.json"), "w") as fh:
        json.dump({"months": ["2015-10", "2015-11"]}, fh)
    with open(os.path.join(root, "config.json"), "w") as fh:
        # day 0 holds the launch cohort, which is not a daily arrival count
        json.dump({"grid": {"max_order": 1, "uc_monthly": False}, "fit": {"n_starts": 1},
                   "series_start": {"new_users": "2015-01-02"}}, fh)


COMMANDS = [
    ["synth", "--scenario", "{r}/scenario.json", "--out", "{r}/data"],
    ["ingest", "--log", "{r}/data/events.csv", "--calendar", "{r}/data/calendar.csv"],
    ["calibrate", "--log", "{r}/data/events.csv", "--span-days", "150", "--candidates", "5..15",
     "--max-false-churners", "0.5", "--max-missed-sales", "0.5"],
    ["fit", "--series", "pu_churn", "--family", "uc", "--spec", '{{"trend_kind": "local_level"}}',
     "--covariates", "national_holiday"],
    ["select", "--series", "nonpu_churn", "--family", "arima"],
    ["fit", "--series", "new_users", "--family", "arima", "--spec", '{{"p": 0, "d": 1, "q": 1}}',
     "--covariates", "national_holiday"],
    ["interventions", "--mode", "auto"],
    ["forecast", "--schedule", "{r}/schedule.json"],
    ["report", "--out", "{r}/report"],
]


def run_pipeline(root, seed=1):
    """Run every command once; returns the exit codes."""
    write_inputs(root)
    base = ["--seed", str(seed), "--workers", "1", "--config", f"{root}/config.json", "--workdir", f"{root}/w"]
    return [main(base + [a.format(r=root) for a in cmd]) for cmd in COMMANDS]


def snapshot(root):
    out = {}
    for d, _, files in os.walk(root):
        for fn in files:
            p = os.path.join(d, fn)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out
