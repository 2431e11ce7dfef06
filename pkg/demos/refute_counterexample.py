"""Walk the refutation pipeline on the built-in ``ccs126`` problem,
printing each intermediate object the CLI would normally summarize.

Run from the repository root:

    python3 demos/refute_counterexample.py
"""
from __future__ import annotations

import numpy as np

from noc.conditions import (active_sets, critical_sets,
                            find_first_order_multipliers, refute_optimality,
                            verify_singular_direction)
from noc.dynamics import integrate_state
from noc.presets import preset_text
from noc.problemfile import (build_control_problem, build_direction_arrays,
                             build_nominal_controls, parse_problem_file)


def main() -> None:
    # ------------------------------------------------------------------
    # 1. load the problem and integrate the nominal trajectory
    # ------------------------------------------------------------------
    pf = parse_problem_file(preset_text("ccs126"))
    problem = build_control_problem(pf)
    controls = build_nominal_controls(pf)
    traj = integrate_state(problem, pf.start, controls)
    print(f"grid: {pf.cells} cells on [0, {pf.horizon}]")
    print(f"endpoint state: {np.round(traj.states[-1], 6)}")
    print(f"nominal cost:   {problem.cost.value(traj.states[0], traj.states[-1]):+.6f}")

    # ------------------------------------------------------------------
    # 2. which endpoint rows are active, and is there a multiplier ray?
    # ------------------------------------------------------------------
    sets = active_sets(problem, traj)
    print(f"\nactive rows: {sorted(sets.active)}")
    rays = find_first_order_multipliers(problem, traj)
    for ray in rays:
        print(f"multiplier ray: {np.round(ray.weights, 6)}")

    # ------------------------------------------------------------------
    # 3. feed the candidate control direction through the second-order test
    # ------------------------------------------------------------------
    v, start_rate, _, _, _ = build_direction_arrays(pf)
    direction = verify_singular_direction(problem, traj, v, start_rate)
    crit = critical_sets(problem, traj, direction)
    print(f"critical rows along the direction: {sorted(crit.critical)}")
    cert = refute_optimality(problem, traj, direction)

    print(f"\nquadratic-form value: {cert.chosen_lhs:+.6f}")
    for name, value in cert.chosen_terms.items():
        print(f"  {name:16s} {value:+.6f}")
    print(f"verdict: {cert.verdict}")

    # ------------------------------------------------------------------
    # 4. compare against the closed form T(-T^2/3 + 5T/2 + theta - 2)
    # ------------------------------------------------------------------
    T = pf.horizon
    theta = pf.param_dict()["theta"]
    formula = T * (-T * T / 3.0 + 2.5 * T + theta - 2.0)
    print(f"\nclosed form:          {formula:+.6f}")
    print(f"quadrature deviation: {abs(cert.chosen_lhs - formula):.2e}")


if __name__ == "__main__":
    main()
