"""Recover spring and damper constants from a noisy drop test.

A drop log is synthesized from the nominal robot with 1 mm of sensor
noise, then fitted from a guess that is 30 % off.  Takes under a minute.

Run:  python3 demos/05_calibrate.py
"""
import numpy as np

from mmhop import fit_parameters, nominal_params
from mmhop.calibrate import FITTABLE, drop_residual, synthetic_drop_log

truth = nominal_params("double")
drop = synthetic_drop_log(truth, initial_height=0.5, duration=1.0, noise=1e-3, seed=0)

rng = np.random.default_rng(1)
guess = truth.replace(**{k: getattr(truth, k) * (1 + 0.3 * rng.choice([-1, 1])) for k in FITTABLE})
print(f"residual at the guess: {drop_residual(guess, drop) * 1e3:.2f} mm")

fitted, res = fit_parameters(drop, guess)
print(f"residual after fit:    {res.residual * 1e3:.2f} mm ({res.evaluations} residual evaluations)")
for k in FITTABLE:
    t, g, f = getattr(truth, k), getattr(guess, k), getattr(fitted, k)
    print(f"  {k:>4}: truth {t:8.2f}  guess {g:8.2f}  fitted {f:8.2f}  ({f / t - 1:+.2%})")
