"""
A local level, two ways
=======================

Simulate a random walk buried in noise, fit it as an unobserved-components
local level and as an ARIMA(0,1,1), then look at what the filter and the
smoother recover.
"""
import numpy as np

from churnssm.builders import ArimaSpec, UcSpec
from churnssm.estimation import fit
from churnssm.ssm import smooth

rng = np.random.default_rng(7)
n = 600
level = 20 + np.cumsum(rng.normal(scale=0.4, size=n))
y = level + rng.normal(scale=1.0, size=n)

uc = fit(UcSpec("local_level"), y)
ar = fit(ArimaSpec(0, 1, 1), y)

# %% estimates
print(uc.spec.label)
for row in uc.summary_rows():
    print(f"  {row['name']:<18} {row['estimate']:9.4f}  se {row['std_error']:.4f}")
print(f"  signal-to-noise {uc.signal_to_noise:.3f}  (true 0.16)")
print(ar.spec.label)
for row in ar.summary_rows():
    print(f"  {row['name']:<18} {row['estimate']:9.4f}  se {row['std_error']:.4f}")

# %% the two models make the same one-step predictions
common = uc.filter_result.contributing & ar.filter_result.contributing
gap = (uc.series - uc.innovations)[common] - (ar.series - ar.innovations)[common]
print(f"\nRMS gap between one-step predictions: {np.sqrt(np.mean(gap ** 2)):.2e}")
print(f"log-likelihoods: UC {uc.loglikelihood:.3f}  ARIMA {ar.loglikelihood:.3f}")

# %% smoothing pulls the level estimate closer to the truth
means, _ = smooth(uc.model, uc.filter_result)
filtered = (uc.series - uc.innovations)[1:]
print(f"\nRMSE of one-step predicted level: {np.sqrt(np.mean((filtered - level[1:]) ** 2)):.3f}")
print(f"RMSE of smoothed level:           {np.sqrt(np.mean((means[:, 0] - level) ** 2)):.3f}")

# %% a two-week forecast with 90% bands
fc = uc.forecast(14)
sd = np.sqrt(fc.forecast_variances)
for h in (1, 7, 14):
    m = fc.point_forecasts[h - 1]
    print(f"h={h:>2}: {m:7.2f}  [{m - 1.645 * sd[h - 1]:.2f}, {m + 1.645 * sd[h - 1]:.2f}]")
