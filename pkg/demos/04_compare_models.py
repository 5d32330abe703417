"""Peak force and efficiency of the two spring arrangements over a height sweep.

Each height is warm-started from the previous one.  Takes about 30 s.

Run:  python3 demos/04_compare_models.py
"""
from mmhop import HopProblem, compare_models, energy_report, nominal_params, solve_hop

heights = (0.1, 0.2, 0.3, 0.4, 0.5)
reports = {}
for variant in ("single", "double"):
    p = nominal_params(variant)
    prev, reports[variant] = None, []
    for H in heights:
        sol = solve_hop(HopProblem(p, H), init=prev)
        reports[variant].append(energy_report(p, sol))
        prev = sol

cmp = compare_models(reports["single"], reports["double"])
print(" H_f   F_single  F_double  reduction  eta_mech ratio  eta_elec ratio")
for r in cmp.rows:
    print(f"{r.H_f:4.1f}  {r.single.F_max:8.2f}  {r.double.F_max:8.2f}  {r.force_reduction:9.1%}"
          f"  {r.mech_ratio:14.2f}  {r.elec_ratio:14.2f}")
