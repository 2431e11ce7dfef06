"""Necessary-condition pipeline: index sets, multiplier cone enumeration,
direction verification, second-order form, refutation search, and the
integral-cost augmentation. Expected values are hand-derived closed forms
(adjoints of small linear systems, polyhedral cones solved on paper)."""
from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from noc.cones import Box
from noc.conditions import (active_sets, critical_sets,
                            default_sigma_candidates,
                            find_first_order_multipliers, mayer_augment,
                            refute_optimality, second_order_lhs,
                            stationarity_residual, verify_singular_direction)
from noc.dynamics import (dynamics_from_expressions,
                          endpoint_from_expressions, integrate_state,
                          make_problem)
from noc.errors import (BoundNotVerified, ChartEscape, ConeViolation,
                        EndpointRowViolation, NoMultiplier, SigmaNotInB)
from noc.geometry import euclidean

from _problems import ccs126_nominal_controls, linear_endpoint, make_ccs126

# ----------------------------------------------------------------------------
# shared fixtures (plain builders, matching the hand computations below)
# ----------------------------------------------------------------------------


def _ccs126_run(horizon=0.5, theta=3.0, cells=200):
    problem = make_ccs126(horizon=horizon, theta=theta)
    traj = integrate_state(problem, [1.0, 0.0], ccs126_nominal_controls(cells))
    return problem, traj


def _corner_box_problem(cells=50):
    """Planar integrator driven into the box corner (-1, -1), start pinned.

    Cost = yT1, inequality row yT2 (active: ends at 0). Multiplier cone was
    solved by hand: adjoints are constant unit covectors, the start-boundary
    rows read l0 = -l_eq1 and l1 = -l_eq2, and the corner's tangent-cone rows
    duplicate the sign rows; extreme rays (-1,0,1,0) and (0,-1,0,1).
    """
    dyn = dynamics_from_expressions(("u1", "u2"), 2, 2)
    cost = linear_endpoint((0.0, 0.0), (1.0, 0.0), label="end-first-coord")
    ineq = linear_endpoint((0.0, 0.0), (0.0, 1.0), label="end-second-coord")
    eqs = (linear_endpoint((1.0, 0.0), (0.0, 0.0), offset=-1.0, label="start-pin-1"),
           linear_endpoint((0.0, 1.0), (0.0, 0.0), offset=-1.0, label="start-pin-2"))
    problem = make_problem(euclidean(2), 1.0, dyn, cost, (ineq,), eqs,
                           control_set=Box(lower=(-1.0, -1.0), upper=(1.0, 1.0)))
    traj = integrate_state(problem, [1.0, 1.0], np.tile([-1.0, -1.0], (cells, 1)))
    return problem, traj


def _scalar_box_problem(nominal, cells=40):
    """One-state integrator, cost yT1, start pinned at 0, |u| <= 1."""
    dyn = dynamics_from_expressions(("u1",), 1, 1)
    cost = linear_endpoint((0.0,), (1.0,), label="terminal-state")
    pin = linear_endpoint((1.0,), (0.0,), label="start-pin")
    problem = make_problem(euclidean(1), 1.0, dyn, cost, (), (pin,),
                           control_set=Box(lower=(-1.0,), upper=(1.0,)))
    traj = integrate_state(problem, [0.0], np.full((cells, 1), float(nominal)))
    return problem, traj


# ----------------------------------------------------------------------------
# index sets
# ----------------------------------------------------------------------------


def test_active_sets_without_inequalities():
    problem, traj = _ccs126_run(cells=20)
    sets = active_sets(problem, traj)
    assert sets.active == frozenset({0})
    assert sets.inactive == frozenset()


def test_active_sets_classifies_rows():
    dyn = dynamics_from_expressions(("u1", "u2"), 2, 2)
    cost = linear_endpoint((0.0, 0.0), (1.0, 0.0))
    slack = endpoint_from_expressions("yT1 - 100", 2, label="far-slack")
    tight = endpoint_from_expressions("yT2 - 1", 2, label="tight")
    problem = make_problem(euclidean(2), 1.0, dyn, cost, (slack, tight), ())
    traj = integrate_state(problem, [0.0, 0.0], np.tile([0.0, 1.0], (20, 1)))
    sets = active_sets(problem, traj)
    assert sets.active == frozenset({0, 2})
    assert sets.inactive == frozenset({1})


# ----------------------------------------------------------------------------
# direction verification
# ----------------------------------------------------------------------------


def test_verify_direction_accepts_tangential_direction():
    problem, traj = _ccs126_run()
    v = np.tile([1.0, 0.0], (traj.num_cells, 1))
    direction = verify_singular_direction(problem, traj, v)
    assert np.max(np.abs(direction.field.values)) < 1e-14
    assert abs(direction.endpoint_rates[0]) < 1e-14
    assert np.max(np.abs(direction.equality_residuals)) < 1e-14


def test_verify_direction_rejects_outward_direction():
    problem, traj = _ccs126_run()
    v = np.tile([0.0, -1.0], (traj.num_cells, 1))
    with pytest.raises(ConeViolation) as info:
        verify_singular_direction(problem, traj, v)
    assert info.value.node == 0


def test_verify_direction_accepts_zero():
    problem, traj = _corner_box_problem()
    direction = verify_singular_direction(problem, traj,
                                          np.zeros((traj.num_cells, 2)))
    assert np.max(np.abs(direction.endpoint_rates)) == 0.0


def test_verify_direction_flags_equality_row():
    problem, traj = _corner_box_problem()
    v = np.zeros((traj.num_cells, 2))
    with pytest.raises(EndpointRowViolation) as info:
        verify_singular_direction(problem, traj, v, start_vector=[-1.0, 0.0])
    assert info.value.index == 2  # first equality row in the multiplier layout


def test_verify_direction_flags_increasing_cost_row():
    problem, traj = _scalar_box_problem(-1.0)
    v = np.full((traj.num_cells, 1), 1.0)  # pushes the terminal state up
    with pytest.raises(EndpointRowViolation) as info:
        verify_singular_direction(problem, traj, v)
    assert info.value.index == 0


def test_critical_sets_partition():
    problem, traj = _ccs126_run()
    v = np.tile([1.0, 0.0], (traj.num_cells, 1))
    direction = verify_singular_direction(problem, traj, v)
    sets = critical_sets(problem, traj, direction)
    assert sets.critical == frozenset({0})
    assert sets.relaxed == frozenset()


def test_critical_sets_strict_descent_relaxes_cost():
    # with the nominal control in the box interior the descent direction is
    # admissible, the cost strictly decreases, and the cost row drops out
    problem, traj = _scalar_box_problem(0.0)
    v = np.full((traj.num_cells, 1), -1.0)
    direction = verify_singular_direction(problem, traj, v)
    sets = critical_sets(problem, traj, direction)
    assert direction.endpoint_rates[0] < -1e-3
    assert sets.relaxed == frozenset({0})
    assert sets.critical == frozenset()


# ----------------------------------------------------------------------------
# multiplier cone
# ----------------------------------------------------------------------------


def test_multipliers_ccs126_unique_ray():
    problem, traj = _ccs126_run(horizon=0.5)
    rays = find_first_order_multipliers(problem, traj)
    assert len(rays) == 1
    scale = 6 * 0.5 - 0.5**2  # 2.75
    expected = np.array([-1.0, -scale, 1.0]) / scale
    np.testing.assert_allclose(rays[0].weights, expected, atol=1e-9)
    assert not rays[0].from_lineality


@pytest.mark.parametrize("horizon", [0.3, 0.7])
def test_multipliers_ccs126_ray_formula(horizon):
    problem, traj = _ccs126_run(horizon=horizon, cells=300)
    rays = find_first_order_multipliers(problem, traj)
    assert len(rays) == 1
    scale = 6 * horizon - horizon**2
    np.testing.assert_allclose(rays[0].weights,
                               np.array([-1.0, -scale, 1.0]) / scale, atol=1e-9)


def test_multipliers_scalar_bound_cases():
    # at the correct bound the cost ray survives; at the wrong bound the sign
    # row and the tangent-cone row clash and the cone is trivial
    problem, traj = _scalar_box_problem(-1.0)
    rays = find_first_order_multipliers(problem, traj)
    assert len(rays) == 1
    np.testing.assert_allclose(rays[0].weights, [-1.0, 1.0], atol=1e-10)
    problem, traj = _scalar_box_problem(1.0)
    assert find_first_order_multipliers(problem, traj) == []


def test_multipliers_interior_control_trivial_cone():
    problem, traj = _scalar_box_problem(0.0)
    assert find_first_order_multipliers(problem, traj) == []


def test_multipliers_two_ray_cone_and_conic_closure():
    problem, traj = _corner_box_problem()
    rays = find_first_order_multipliers(problem, traj)
    assert len(rays) == 2
    np.testing.assert_allclose(rays[0].weights, [-1.0, 0.0, 1.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(rays[1].weights, [0.0, -1.0, 0.0, 1.0], atol=1e-9)
    # direct check of the defining conditions on a strict conic combination
    from noc.dynamics import integrate_adjoint, lagrange_data

    combo = 0.3 * rays[0].weights + 1.7 * rays[1].weights
    p = integrate_adjoint(problem, traj, combo)
    data = lagrange_data(problem, traj.states[0], traj.states[-1], combo)
    assert np.max(np.abs(p.values[0] + data.grad_start)) < 1e-9
    assert combo[0] <= 0 and combo[1] <= 0
    fu = np.array([[1.0, 0.0], [0.0, 1.0]])
    for node in (0, traj.num_cells // 2, traj.num_cells):
        hu = fu.T @ p.values[node]
        for gen in (np.array([1.0, 0.0]), np.array([0.0, 1.0])):
            assert hu @ gen <= 1e-9


def test_stationarity_residual_values():
    problem, traj = _ccs126_run()
    v_tan = np.tile([1.0, 0.0], (traj.num_cells, 1))
    direction = verify_singular_direction(problem, traj, v_tan)
    ray = find_first_order_multipliers(problem, traj)[0]
    assert stationarity_residual(problem, traj, ray, direction) <= 1e-10
    zero = verify_singular_direction(problem, traj,
                                     np.zeros((traj.num_cells, 2)))
    assert stationarity_residual(problem, traj, ray, zero) == 0.0
    # a direction with weight on the second control channel pairs with the
    # nonvanishing Hamiltonian gradient there; no such direction survives
    # endpoint verification (that is the content of the duality identity),
    # so swap the directions in on a verified carrier
    v_up = dataclasses.replace(
        direction, control_directions=np.tile([0.0, 1.0],
                                              (traj.num_cells, 1)))
    assert stationarity_residual(problem, traj, ray, v_up) > 0.3


# ----------------------------------------------------------------------------
# second-order form
# ----------------------------------------------------------------------------


def _lhs_formula(horizon, theta):
    return horizon * (-horizon**2 / 3.0 + 2.5 * horizon + theta - 2.0)


def test_second_order_lhs_matches_formula_precisely():
    problem, traj = _ccs126_run(horizon=0.5, theta=3.0, cells=1000)
    v = np.tile([1.0, 0.0], (traj.num_cells, 1))
    direction = verify_singular_direction(problem, traj, v)
    sigma = np.tile([0.0, 0.5], (traj.num_cells, 1))
    ell = np.array([-1.0, -2.75, 1.0])  # cost-normalized multiplier
    value, terms = second_order_lhs(problem, traj, ell, direction, sigma,
                                    with_terms=True)
    assert abs(value - _lhs_formula(0.5, 3.0)) < 1e-6
    assert abs(value - 1.0833333333333333) < 1e-6
    assert abs(terms["sigma_integral"] + 0.41666666666) < 1e-6
    assert abs(terms["control_control"] - 1.5) < 1e-6
    for name in ("state_state", "state_control", "curvature",
                 "start_start", "start_end", "end_end"):
        assert abs(terms[name]) < 1e-12


@pytest.mark.parametrize("horizon", [0.3, 0.5, 0.7])
@pytest.mark.parametrize("theta", [2.5, 3.0, 4.0])
def test_second_order_lhs_formula_grid(horizon, theta):
    problem, traj = _ccs126_run(horizon=horizon, theta=theta, cells=400)
    v = np.tile([1.0, 0.0], (traj.num_cells, 1))
    direction = verify_singular_direction(problem, traj, v)
    sigma = np.tile([0.0, 0.5], (traj.num_cells, 1))
    scale = 6 * horizon - horizon**2
    ell = np.array([-1.0, -scale, 1.0])
    value = second_order_lhs(problem, traj, ell, direction, sigma)
    assert abs(value - _lhs_formula(horizon, theta)) < 1e-3


def test_second_order_lhs_rejects_sigma_outside_set():
    problem, traj = _ccs126_run()
    v = np.tile([1.0, 0.0], (traj.num_cells, 1))
    direction = verify_singular_direction(problem, traj, v)
    ell = np.array([-1.0, -2.75, 1.0])
    with pytest.raises(SigmaNotInB) as info:
        second_order_lhs(problem, traj, ell, direction,
                         np.zeros((traj.num_cells, 2)))
    assert info.value.node == 0
    with pytest.raises(SigmaNotInB):
        second_order_lhs(problem, traj, ell, direction,
                         np.tile([0.0, 0.4], (traj.num_cells, 1)))


def test_second_order_lhs_bound_precondition():
    problem, traj = _ccs126_run()
    # an outward direction makes dist(u + eps v, U)/eps^2 diverge; bypass the
    # direction verifier on purpose to exercise the guard, and check that it
    # fires before the acceleration-membership check
    v = np.tile([1.0, 0.0], (traj.num_cells, 1))
    carrier = verify_singular_direction(problem, traj, v)
    bad = dataclasses.replace(
        carrier, control_directions=np.tile([0.0, -1.0],
                                            (traj.num_cells, 1)))
    with pytest.raises(BoundNotVerified):
        second_order_lhs(problem, traj, np.array([-1.0, -2.75, 1.0]), bad,
                         np.zeros((traj.num_cells, 2)))


def test_second_order_lhs_linear_in_acceleration():
    problem, traj = _ccs126_run(cells=100)
    v = np.tile([1.0, 0.0], (traj.num_cells, 1))
    direction = verify_singular_direction(problem, traj, v)
    ell = np.array([-1.0, -2.75, 1.0])
    s1 = np.tile([0.0, 0.5], (traj.num_cells, 1))
    s2 = np.tile([0.0, 1.5], (traj.num_cells, 1))
    a = second_order_lhs(problem, traj, ell, direction, s1)
    b = second_order_lhs(problem, traj, ell, direction, s2)
    # the difference must equal the cell-trapezoid of hu against (s2 - s1)
    from noc.dynamics import integrate_adjoint, trapezoid_cellwise

    p = integrate_adjoint(problem, traj, ell)
    dyn = problem.dynamics
    N = traj.num_cells
    left = np.empty(N)
    right = np.empty(N)
    ds = s2 - s1
    for i in range(N):
        u = traj.controls[i]
        left[i] = (dyn.rhs_u(traj.grid[i], traj.states[i], u).T
                   @ p.values[i]) @ ds[i]
        right[i] = (dyn.rhs_u(traj.grid[i + 1], traj.states[i + 1], u).T
                    @ p.values[i + 1]) @ ds[i]
    assert abs((b - a) - trapezoid_cellwise(traj.grid, left, right)) < 1e-12


# ----------------------------------------------------------------------------
# refutation search
# ----------------------------------------------------------------------------


def test_default_sigma_candidates_ccs126():
    problem, traj = _ccs126_run(cells=30)
    v = np.tile([1.0, 0.0], (traj.num_cells, 1))
    cands = default_sigma_candidates(problem.control_set, traj.controls, v)
    assert len(cands) == 4  # shift, one recession ray, +/- one two-sided dir
    np.testing.assert_allclose(cands[0], np.tile([0.0, 0.5],
                                                 (traj.num_cells, 1)), atol=1e-12)


def test_refute_ccs126_end_to_end():
    problem, traj = _ccs126_run(horizon=0.5, theta=3.0, cells=500)
    v = np.tile([1.0, 0.0], (traj.num_cells, 1))
    direction = verify_singular_direction(problem, traj, v)
    cert = refute_optimality(problem, traj, direction)
    assert cert.verdict == "refuted"
    assert len(cert.multipliers) == 1
    assert abs(cert.chosen_lhs - _lhs_formula(0.5, 3.0)) < 1e-5
    assert cert.chosen is not None and cert.chosen[1] == 0
    assert cert.lhs.shape == (len(cert.sigma_candidates), 1)
    assert cert.stationarity[0] <= 1e-8
    assert cert.index_sets.critical == frozenset({0})
    assert cert.chosen_terms is not None
    assert abs(sum(cert.chosen_terms.values()) - cert.chosen_lhs) < 1e-9
    assert cert.tolerances["margin"] == 1e-6


def test_refute_verdict_zones():
    # the closed-form value is T*(theta - 2 - T^2/3 + 2.5T); pick theta to
    # land in each verdict zone at T = 0.5
    base = 2.0 + 0.25 / 3.0 - 1.25
    for target, expected in ((4e-6, "inconclusive"), (-1.0 / 6.0, "consistent")):
        theta = base + target / 0.5
        problem, traj = _ccs126_run(horizon=0.5, theta=theta, cells=500)
        v = np.tile([1.0, 0.0], (traj.num_cells, 1))
        direction = verify_singular_direction(problem, traj, v)
        cert = refute_optimality(problem, traj, direction)
        assert cert.verdict == expected
        assert abs(cert.chosen_lhs - target) < 1e-6


def test_refute_raises_without_multiplier():
    problem, traj = _scalar_box_problem(1.0)
    v = np.full((traj.num_cells, 1), -1.0)
    direction = verify_singular_direction(problem, traj, v)
    with pytest.raises(NoMultiplier):
        refute_optimality(problem, traj, direction)


def test_refute_ray_budget_refusal():
    problem, traj = _ccs126_run(cells=50)
    v = np.tile([1.0, 0.0], (traj.num_cells, 1))
    direction = verify_singular_direction(problem, traj, v)
    fake = [np.eye(3)[i % 3] - 2 * np.eye(3)[0] for i in range(65)]
    cert = refute_optimality(problem, traj, direction, multipliers=fake)
    assert cert.verdict == "inconclusive"
    assert any("ray budget" in note for note in cert.notes)


def test_refute_start_acceleration_slot_is_inert():
    problem, traj = _ccs126_run(cells=200)
    v = np.tile([1.0, 0.0], (traj.num_cells, 1))
    direction = verify_singular_direction(problem, traj, v)
    plain = refute_optimality(problem, traj, direction)
    shifted = refute_optimality(problem, traj, direction,
                                w_candidates=[np.zeros(2), np.array([3.0, -2.0])])
    assert shifted.lhs.shape[0] == 2 * plain.lhs.shape[0]
    assert abs(shifted.chosen_lhs - plain.chosen_lhs) < 1e-12
    assert shifted.verdict == plain.verdict


# ----------------------------------------------------------------------------
# integral-cost augmentation
# ----------------------------------------------------------------------------


def _lq_augmented(cells=200):
    problem = mayer_augment(euclidean(1), 1.0, ("u1",), "0.5*u1^2",
                            [0.0], [1.0], control_dim=1,
                            control_set=Box(lower=(-2.0,), upper=(2.0,)))
    traj = integrate_state(problem, [0.0, 0.0], np.ones((cells, 1)))
    return problem, traj


def test_mayer_augment_shapes_and_rows():
    problem, traj = _lq_augmented(cells=50)
    assert problem.state_dim == 2
    assert problem.num_inequalities == 0
    assert problem.num_equalities == 3  # start pin, end pin, accumulator pin
    assert problem.chart.kind == "euclidean"
    # the accumulator integrates the running cost: J(u === 1) = 1/2
    assert abs(traj.states[-1, 1] - 0.5) < 1e-12
    assert abs(traj.states[-1, 0] - 1.0) < 1e-12


def test_mayer_augment_pipeline_consistent_at_optimum():
    # the constant control is the calculus-of-variations minimizer of the
    # quadratic running cost between pinned endpoints, so the certificate
    # must come out consistent with a strictly negative form
    problem, traj = _lq_augmented(cells=200)
    rays = find_first_order_multipliers(problem, traj)
    assert len(rays) == 1
    np.testing.assert_allclose(rays[0].weights, [-1.0, -1.0, 1.0, 1.0],
                               atol=1e-9)
    N = traj.num_cells
    v = np.ones((N, 1))
    v[N // 2:] = -1.0  # keeps both pinned endpoints to first order
    direction = verify_singular_direction(problem, traj, v)
    cert = refute_optimality(problem, traj, direction)
    assert cert.verdict == "consistent"
    assert abs(cert.chosen_lhs + 0.5) < 1e-9
    assert cert.stationarity[0] <= 1e-10


def test_mayer_augment_zero_running_cost():
    problem = mayer_augment(euclidean(1), 1.0, ("u1",), "0", [0.0], [1.0],
                            control_dim=1,
                            control_set=Box(lower=(-2.0,), upper=(2.0,)))
    traj = integrate_state(problem, [0.0, 0.0], np.ones((40, 1)))
    assert np.max(np.abs(traj.states[:, 1])) == 0.0
    rays = find_first_order_multipliers(problem, traj)
    assert rays  # a multiplier exists; the accumulator row carries it


def test_mayer_augment_rejects_unreachable_chart_point():
    from noc.geometry import sphere

    with pytest.raises(ChartEscape):
        mayer_augment(sphere(1.0), 1.0, ("u1", "0"), "u1^2",
                      [0.1, 0.0], [100.0, 0.0], control_dim=1)
