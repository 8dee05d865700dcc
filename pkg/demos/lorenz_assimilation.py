"""Course-correcting a Lorenz 63 forecast with sparse measurements.

Past a few Lyapunov times an open-loop forecast of a chaotic system is no
better than the attractor mean.  Here a model is trained in two stages: first
to forecast, then (with random windows of the horizon revealed) to correct its
latent state from a measured window through learned gains.  At test time a
fraction alpha of the horizon windows is measured, and the error is scored on
the remaining windows only.
"""
import sys

from koda import experiments

full = "--full" in sys.argv
overrides = {} if full else dict(horizon=240, runs=2, train=dict(stage1_epochs=4, stage2_epochs=2))
cfg = experiments.preset("assimilation-lorenz63", **overrides)

report = experiments.run_experiment(cfg)
print("alpha   MSE on unmeasured windows")
for row in report.mean_rows():
    print(f"{row['alpha']:5.0%}   {row['mse']:.4f}")
for check in report.checks:
    print("PASS" if check.passed else "FAIL", check.name, check.detail)
