"""
Finding and naming campaigns
============================

Two unannounced campaigns are injected: a marketing push that brings in new
players and a promotion that converts existing ones.  Residual-driven
detection finds the dates; the impact map across series labels them.
"""
import numpy as np

from churnssm.builders import ArimaSpec
from churnssm.estimation import fit
from churnssm.ingestion import build_segment_panel
from churnssm.interventions import classify_interventions, detect_interventions
from churnssm.synthetic import Scenario, TrueIntervention, generate

campaigns = [
    TrueIntervention("push", "2015-05-12", "2015-05-12", "marketing", {"new_users": 1.0}),
    TrueIntervention("sale", "2015-07-20", "2015-07-20", "promotion", {"conversion_to_pu": 0.03}),
]
scenario = Scenario(horizon=300, seed=4, initial_cohort=3000, arrival_base=80, interventions=campaigns)
log, _ = generate(scenario)
panel = build_segment_panel(log)

fits, found = {}, []
for name in ("new_users", "conversion_to_pu"):
    y = panel.series(name)
    y[0] = np.nan  # launch day
    fits[name] = fit(ArimaSpec(0, 1, 1, log_transform=name == "new_users"), y, start=1)
    res = detect_interventions(y, fits[name], dates=panel.dates, series_name=name)
    print(f"{name}: {len(res.interventions)} accepted")
    for entry in res.audit:
        if entry["action"] in ("accept", "reject"):
            print(f"  {entry['action']:<6} {entry['day']}  p={entry['p_value']:.3g}")
    found += res.interventions

# %% impact map and labels
labelled = classify_interventions(found, fits, dates=panel.dates,
                                  delays={"new_users": 0, "conversion_to_pu": 0})
for iv in labelled:
    impacts = ", ".join(f"{s} {v['estimate']:+.3g} (p={v['p_value']:.2g})"
                        for s, v in iv.impact_map.items() if v["estimate"] is not None)
    print(f"{iv.start_date}: {iv.classification}{' [conflict]' if iv.conflict else ''}  {impacts}")
