"""Double-description extreme-ray enumeration on known cones."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linprog

from noc.polyhedral import ConeVRep, cone_contains, extreme_rays, polyhedron_bounding_box


def _ray_set_matches(vrep: ConeVRep, expected_rays) -> bool:
    exp = np.array([r / np.linalg.norm(r) for r in expected_rays])
    got = vrep.rays
    if got.shape[0] != exp.shape[0]:
        return False
    used = set()
    for e in exp:
        hit = None
        for i, r in enumerate(got):
            if i not in used and np.linalg.norm(r - e) < 1e-8:
                hit = i
                break
        if hit is None:
            return False
        used.add(hit)
    return True


def test_full_space():
    v = extreme_rays(None, None, 3)
    assert v.lineality.shape == (3, 3)
    assert v.rays.shape[0] == 0


def test_nonnegative_orthant():
    A_le = -np.eye(3)
    v = extreme_rays(A_le, None, 3)
    assert v.lineality.shape[0] == 0
    assert _ray_set_matches(v, np.eye(3))


def test_single_halfspace():
    a = np.array([[1.0, 2.0, -2.0]])
    v = extreme_rays(a, None, 3)
    assert v.lineality.shape[0] == 2
    assert v.rays.shape[0] == 1
    # lineality orthogonal to a, the ray strictly feasible
    assert np.abs(v.lineality @ a[0]).max() < 1e-9
    assert v.rays[0] @ a[0] < -0.9


def test_equality_plus_inequality():
    # {x1 = 0, x2 <= 0} in R^3: lineality e3, ray -e2
    v = extreme_rays(np.array([[0.0, 1.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]), 3)
    assert v.lineality.shape[0] == 1
    assert abs(abs(v.lineality[0][2]) - 1.0) < 1e-12
    assert _ray_set_matches(v, [[0.0, -1.0, 0.0]])


def test_pointed_simplicial_cone():
    # x1 >= 0, x2 >= 0, x1 + x2 - x3 >= 0  (as <= rows with flipped signs)
    A_le = np.array([
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
        [-1.0, -1.0, 1.0],
    ])
    v = extreme_rays(A_le, None, 3)
    assert v.lineality.shape[0] == 0
    # hand enumeration: extreme rays e1±? -> (1,0,z) with z in {0? } ...
    # facets pair up: {x1=0,x2=0}: ray (0,0,-1); {x1=0, x1+x2=x3}: (0,1,1);
    # {x2=0, x1+x2=x3}: (1,0,1); {x1=0,x2=0} also admits (0,0,-1) only since
    # x3 <= x1+x2 = 0.
    assert _ray_set_matches(v, [[0.0, 0.0, -1.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0]])


def test_unique_ray_from_equalities_and_sign():
    # two independent equalities in R^3 leave a line; a sign row picks the half
    A_eq = np.array([[1.0, 0.4, 0.0], [0.0, 1.0, 1.0]])
    A_le = np.array([[0.0, 0.0, -1.0]])  # x3 >= 0
    v = extreme_rays(A_le, A_eq, 3)
    assert v.lineality.shape[0] == 0
    assert v.rays.shape[0] == 1
    r = v.rays[0]
    assert np.abs(A_eq @ r).max() < 1e-9
    assert r[2] > 0


def test_infeasible_direction_gives_trivial_cone():
    # x <= 0 and x >= 0 and x1 <= -x1 collapse to {0} in 1D with both sign rows
    A_le = np.array([[1.0], [-1.0]])
    v = extreme_rays(A_le, None, 1)
    assert v.is_trivial


def test_generators_satisfy_hrep_random():
    rng = np.random.default_rng(2024)
    for trial in range(25):
        dim = int(rng.integers(2, 6))
        n_le = int(rng.integers(1, 6))
        n_eq = int(rng.integers(0, 2))
        A_le = rng.standard_normal((n_le, dim))
        A_eq = rng.standard_normal((n_eq, dim)) if n_eq else None
        v = extreme_rays(A_le, A_eq, dim)
        for r in v.rays:
            assert cone_contains(A_le, A_eq, r, tol=1e-8), (trial, r)
        for l in v.lineality:
            assert cone_contains(A_le, A_eq, l, tol=1e-8)
            assert cone_contains(A_le, A_eq, -l, tol=1e-8)


def test_vrep_complete_against_lp_vertices():
    # truncate the cone by a box and check LP-optimal vertices decompose in
    # the V-representation (free lineality coefficients, nonneg ray coeffs)
    rng = np.random.default_rng(77)
    for trial in range(15):
        dim = int(rng.integers(2, 5))
        n_le = int(rng.integers(1, 5))
        A_le = rng.standard_normal((n_le, dim))
        v = extreme_rays(A_le, None, dim)
        c = rng.standard_normal(dim)
        res = linprog(c, A_ub=A_le, b_ub=np.zeros(n_le),
                      bounds=[(-1.0, 1.0)] * dim, method="highs")
        assert res.success
        x = res.x
        # decompose x = lineality^T mu + rays^T lam, lam >= 0 via LP feasibility
        G = []
        bounds = []
        for l in v.lineality:
            G.append(l)
            bounds.append((None, None))
        for r in v.rays:
            G.append(r)
            bounds.append((0.0, None))
        if not G:
            assert np.linalg.norm(x) < 1e-7
            continue
        G = np.array(G).T
        res2 = linprog(np.zeros(G.shape[1]), A_eq=G, b_eq=x, bounds=bounds,
                       method="highs")
        assert res2.success, (trial, x, v)


def test_bounding_box_of_box():
    A = np.vstack([np.eye(2), -np.eye(2)])
    b = np.array([1.0, 2.0, 0.5, 3.0])
    lo, hi = polyhedron_bounding_box(A, b)
    np.testing.assert_allclose(lo, [-0.5, -3.0], atol=1e-9)
    np.testing.assert_allclose(hi, [1.0, 2.0], atol=1e-9)


def test_bounding_box_unbounded_raises():
    A = np.array([[1.0, 0.0]])  # x1 <= 1, x2 free
    try:
        polyhedron_bounding_box(A, np.array([1.0]))
    except ValueError:
        return
    raise AssertionError("expected ValueError for unbounded polyhedron")
