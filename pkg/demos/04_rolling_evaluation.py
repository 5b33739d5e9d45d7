"""
Monthly rolling forecasts
=========================

Each month the model is re-estimated on data up to the last day of the
previous month and forecasts the whole month.  A campaign the model knows
nothing about shows up as the worst month.
"""
from churnssm.builders import ArimaSpec, UcSpec
from churnssm.harness import RollingSchedule, rolling_forecast
from churnssm.ingestion import build_segment_panel
from churnssm.synthetic import Scenario, TrueIntervention, generate

campaign = TrueIntervention("camp", "2015-09-10", "2015-09-24", "marketing", {"new_users": 1.2})
scenario = Scenario(horizon=420, seed=11, initial_cohort=500, arrival_base=80, interventions=[campaign])
panel = build_segment_panel(generate(scenario)[0])
schedule = RollingSchedule.monthly("2015-05", "2016-02")

report = rolling_forecast(panel.new_users, None, ArimaSpec(0, 1, 1, log_transform=True), schedule,
                          panel.dates, series_name="new_users", model_name="arima")
report.merge(rolling_forecast(panel.new_users, None, UcSpec("local_level", log_transform=True), schedule,
                              panel.dates, series_name="new_users", model_name="uc"))

# %% per month, errors in players per day
print(f"{'month':<8} {'model':<6} {'MAE':>7} {'RMSE':>7}")
for cell in report.cells:
    print(f"{cell['month']:<8} {cell['model']:<6} {cell['mae']:7.2f} {cell['rmse']:7.2f}")

# %% averages across months
for row in report.summary():
    print(f"{row['model']}: MAE {row['mae_mean']:.2f} +- {row['mae_std']:.2f}, "
          f"RMSE {row['rmse_mean']:.2f} +- {row['rmse_std']:.2f}")
rmse = {c["month"]: c["rmse"] for c in report.cells if c["model"] == "arima"}
print("worst month:", max(rmse, key=rmse.get), "(campaign ran 2015-09-10 to 09-24)")
