"""Exercise the finite-dimensional checker on three small programs whose
optimality status is known, and cross-check every verdict with the
exhaustive grid search.

Run from the repository root:

    python3 demos/finite_dimensional.py
"""
from __future__ import annotations

import numpy as np

from noc.cones import Ball, Box
from noc.optproblem import (build_separation, make_opt_problem, op_bruteforce,
                            op_first_order, op_second_order,
                            opt_scalar_from_expression)


def _show(title, problem, point, direction):
    print(f"--- {title} ---")
    rays = op_first_order(problem, point)
    if not rays:
        print("first order: no multiplier ray exists -> refuted")
    else:
        for ray in rays:
            print(f"first order: ray {np.round(ray.weights, 6)}")
        second = op_second_order(problem, point, direction)
        print(f"second order along {list(direction)}: "
              f"worst values {np.round(second.worst_values, 6)} -> "
              f"{'refuted' if second.refuted else 'consistent'}")
        if not second.refuted:
            sep = build_separation(problem, point, direction,
                                   num_samples=2000)
            print(f"separating functional: {np.round(sep.separator, 6)} "
                  f"(max pairing {sep.max_kappa_pairing:+.3e})")
    bf = op_bruteforce(problem, point, 1e-3)
    print(f"grid search: {bf.verdict} "
          f"(best {bf.best_value:+.6f} vs candidate {bf.reference_value:+.6f}, "
          f"slack {bf.slack:.2e})\n")


def main() -> None:
    disc = Ball(center=(0.0, 0.0), radius=1.0)
    left = np.array([-1.0, 0.0])

    # the true minimizer of a linear cost on the disc: everything passes
    _show("min x1 over the unit disc at (-1, 0)",
          make_opt_problem(disc, opt_scalar_from_expression("x1 + 1", 2,
                                                            label="cost")),
          left, [0.0, 1.0])

    # tilting the cost makes the same point fail at first order
    _show("min x1 + 0.1 x2 over the unit disc at (-1, 0)",
          make_opt_problem(disc, opt_scalar_from_expression("x1 + 0.1*x2", 2,
                                                            label="cost")),
          left, [0.0, 1.0])

    # height on a downward parabola: passes first order, fails second order
    parabola = make_opt_problem(
        Box(lower=(-1.0, -1.0), upper=(1.0, 1.0)),
        opt_scalar_from_expression("x2", 2, label="cost"),
        equalities=[opt_scalar_from_expression("x2 + x1^2", 2,
                                               label="constraint")])
    _show("min x2 on the curve x2 = -x1^2 at the origin",
          parabola, np.zeros(2), [1.0, 0.0])


if __name__ == "__main__":
    main()
