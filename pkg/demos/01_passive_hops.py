"""Drop both hoppers from rest and watch the unforced bounces die out.

Run:  python3 demos/01_passive_hops.py
"""
import numpy as np

from mmhop import StopCondition, nominal_params, simulate_hybrid
from mmhop.hybrid import DomainId
from mmhop.model import State, mechanical_energy

for variant, start in (("double", DomainId.D1), ("single", DomainId.FLIGHT)):
    p = nominal_params(variant)
    apex = State([p.l0 + 0.3, 0.0, 0.0], np.zeros(3), start)
    traj = simulate_hybrid(p, apex, None, StopCondition(hops=5))

    print(f"\n{variant}-spring hopper, released 0.3 m above the ground")
    print("  domains in the first hop:", " -> ".join(ph.domain.value for ph in traj.phases[:4]))
    E0 = mechanical_energy(p, apex)
    for k, (t, x) in enumerate(traj.apexes, start=1):
        clearance = x[0] + x[2] - p.l0
        lost = E0 - mechanical_energy(p, State.from_x(x))
        print(f"  apex {k}: t = {t:6.3f} s  clearance = {clearance * 1e3:7.2f} mm  energy lost = {lost:6.3f} J")
