"""
A small end-to-end experiment
=============================

Twelve individuals, one split, budgets 10 and 35, with and without the
convolutional network on top of the blockwise GP. The full-size run is the
``evaluate`` command of the CLI; this one finishes in a few minutes.
"""

import tempfile
import warnings

from hormone_recon import mgp
from hormone_recon.evaluation import ExperimentConfig, emit_tables, experiment_dcnn, run_experiment

config = ExperimentConfig(
    cohort_size=12,
    budgets=(10, 35),
    schemes=("random",),
    variants=("B-MGP", "B-MGP-DCNN"),
    n_streams=30,
    mgp=mgp.FitConfig(iterations=150, restarts=1),
    dcnn=experiment_dcnn(max_iterations=800),
)

with warnings.catch_warnings():
    warnings.simplefilter("ignore")  # 12 individuals split 8:2:2 instead of 40:10:10
    results = run_experiment(config)

for r in results:
    overall, recon, pred = (r.value(scope) for scope in ("overall", "reconstruction", "prediction"))
    print(f"{r.row:<12} budget {r.budget:2d}: overall {overall:.3f}  days 1-70 {recon:.3f}  days 71-105 {pred:.3f}")

out = tempfile.mkdtemp()
for path in emit_tables(results, out)[:1]:
    print("\n" + open(path).read())
