"""Find the minimum-effort periodic hop for a target foot clearance.

The optimizer returns a force profile for the moving mass; replaying it
open loop from the optimized apex reproduces the hop.

Run:  python3 demos/02_optimal_hop.py
"""
import numpy as np

from mmhop import HopProblem, StopCondition, nominal_params, simulate_hybrid, solve_hop, validate_solution

H_f = 0.3
p = nominal_params("double")
sol = solve_hop(HopProblem(p, H_f))

print(f"converged: {sol.converged}  cost: {sol.cost:.4g}  solve time: {sol.diagnostics['solve_time']:.1f} s")
for ph in sol.trajectory.phases:
    print(f"  {ph.domain.value}: {ph.duration * 1e3:6.1f} ms  peak |u| = {np.max(np.abs(ph.u)):6.2f} N")
print(f"peak motor force {sol.control.peak():.2f} N of {p.u_max:.0f} N available")

rep = validate_solution(p, sol)
print(f"re-integration deviation {rep.max_state_deviation:.1e}, one-hop apex error {rep.apex_error:.1e}")

traj = simulate_hybrid(p, sol.apex_state, sol.policy(), StopCondition(hops=20), clock0=sol.apex_clock)
clear = np.array([x[0] + x[2] - p.l0 for _, x in traj.apexes])
print(f"20 open-loop hops: clearance {clear.min():.5f} .. {clear.max():.5f} m (target {H_f})")
