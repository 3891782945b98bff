"""
Expected Distance and a small measurement template
==================================================

The acquisition Psi = E|y - z| for z ~ N(mu, sigma^2) has a closed form. We check
it against sampling, then plan a five-day template on eight individuals and
materialize it for someone outside that group.
"""

import numpy as np

from hormone_recon import OBS_WINDOW, mgp
from hormone_recon.datagen import generate_cohort, lh_peak_days
from hormone_recon.evaluation import fit_scaler
from hormone_recon.sampling import CohortMember, ed_greedy, expected_distance, materialize

rng = np.random.default_rng(0)
for delta, sigma in ((0.0, 1.0), (1.5, 0.3), (-2.0, 2.0), (0.7, 0.0)):
    z = rng.normal(0.0, sigma, 200_000)
    print(f"y-mu={delta:+.1f} sigma={sigma:.1f}: closed form {expected_distance(delta, 0.0, sigma):.4f}"
          f"  sampled {np.abs(delta - z).mean():.4f}")

# large error or large uncertainty both raise the score
print("exploitation", expected_distance(np.array([0.0, 1.0, 2.0]), 0.0, 0.1))
print("exploration ", expected_distance(0.0, 0.0, np.array([0.1, 1.0, 2.0])))

cohort = generate_cohort(9, seed=2)
scaler = fit_scaler(cohort[:8])
members = [
    CohortMember(
        id=s.id,
        truth=scaler.apply(s.values),
        cycle_length=s.characteristics.cycle_length,
        seed_days=tuple(lh_peak_days(s, OBS_WINDOW)[:2]),
    )
    for s in cohort[:8]
]
template = ed_greedy(members, 5, mgp.BLOCKWISE, mgp.FitConfig(iterations=60, restarts=1))
print("\nphases after the two LH-peak seeds (cycle, fraction of cycle):", [(c, round(u, 3)) for c, u in template.phases])
print("summed Psi after each pick:", np.round(template.scores, 1))

new = cohort[8]
print(f"{new.id} (L={new.characteristics.cycle_length:.1f}) would be measured on", materialize(template, new).days)
print("first three picks only:", materialize(template.truncate(3), new).days)
