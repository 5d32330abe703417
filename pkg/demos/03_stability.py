"""Apex return-map stability with and without feedback on the mover.

The double-spring orbit is stable open loop.  The single-spring orbit has
a unit multiplier (the mover drifts freely in flight), which PD feedback
on the mover position removes.

Run:  python3 demos/03_stability.py
"""
from mmhop import HopProblem, nominal_params, solution_stability, solve_hop
from mmhop.control import DEFAULT_PD

for variant in ("double", "single"):
    sol = solve_hop(HopProblem(nominal_params(variant), 0.3))
    rep = solution_stability(sol)
    mags = ", ".join(f"{m:.4f}" for m in rep.eigenvalue_magnitudes)
    print(f"{variant:>6} open loop : lambda_max = {rep.lambda_max:.4f}  stable = {rep.stable}  |eig| = [{mags}]")

    if variant == "single":
        rep = solution_stability(sol, DEFAULT_PD)
        print(f"{variant:>6} PD {DEFAULT_PD.k_P:g},{DEFAULT_PD.k_D:g}: "
              f"lambda_max = {rep.lambda_max:.4f}  stable = {rep.stable}")
        half = solution_stability(sol, DEFAULT_PD, fd_step=5e-7)
        print(f"        halved fd step changes lambda_max by {abs(half.lambda_max - rep.lambda_max):.1e}")
