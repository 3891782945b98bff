"""
A synthetic cohort
==================

Draws a few simulated individuals and prints their cycle characteristics,
their LH peaks and a coarse text profile of one cycle.
"""

import numpy as np

from hormone_recon import HORMONE_NAMES
from hormone_recon.datagen import default_population_gaussian, generate_cohort, lh_peak_days

pop = default_population_gaussian()
print("population mean (ovulation day, cycle length):", pop.mean)
print("population covariance:\n", pop.cov)

cohort = generate_cohort(6, pop, seed=0)
for s in cohort:
    c = s.characteristics
    print(f"{s.id}: L={c.cycle_length:5.2f} ov={c.ovulation_day:5.2f}  LH peaks {lh_peak_days(s)}")

# the same seed gives the same first individual whatever the cohort size
assert np.array_equal(generate_cohort(1, pop, seed=0)[0].values, cohort[0].values)

# one cycle of the first individual, each hormone scaled to its own range
s = cohort[0]
L = int(round(s.characteristics.cycle_length))
print(f"\nday  " + "  ".join(f"{h:>5}" for h in HORMONE_NAMES))
span = s.values.max(axis=1, keepdims=True) - s.values.min(axis=1, keepdims=True)
scaled = (s.values - s.values.min(axis=1, keepdims=True)) / span
for day in range(1, L + 1, 2):
    bars = "  ".join(f"{'#' * int(round(5 * v)):<5}" for v in scaled[:, day - 1])
    print(f"{day:3d}  {bars}")
