"""Finite-dimensional constrained-minimization checks over convex base sets.

This module mirrors the trajectory pipeline at desk scale: a candidate
point of a smooth program min f0 over a convex set, subject to scalar
inequality and equality rows, is screened through the same multiplier-cone
machinery, a second-order test along a critical direction, an explicit
separating-functional construction, and an exhaustive grid oracle that can
independently confirm or refute local minimality.  The trajectory checker
reduces to this module once a control problem is flattened onto the grid
(see ``control_problem_as_op``), which is how the two implementations
cross-validate each other.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .cones import (Ball, Box, Polyhedron, ProductSet, _product_slices,
                    adjacent_cone_member, contains, second_cone_vrep,
                    set_dim, tangent_cone_vrep)
from .conditions import (IndexSets, MultiplierVector, _clean_rows,
                         _enumerate_normalized_rays, thread_count)
from .errors import (DegenerateCone, EmptySecondCone, NocError, PointNotInSet,
                     ResolutionTooCoarse)
from .expr import compile_expr, parse_expr

__all__ = [
    "BruteForceResult",
    "OptProblem",
    "OptScalar",
    "SecondOrderResult",
    "SeparationData",
    "build_separation",
    "control_problem_as_op",
    "make_opt_problem",
    "op_bruteforce",
    "op_first_order",
    "op_index_sets",
    "op_second_order",
    "opt_scalar",
    "opt_scalar_from_expression",
    "validate_expansion",
]

ACTIVITY_TOL = 1e-8
QUALIFY_TOL = 1e-9


# ----------------------------------------------------------------------------
# scalar rows and problem assembly
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OptScalar:
    """One scalar row of the program: value, gradient, and the directional
    second derivative d^2/de^2 f(e + t y) at t = 0 (no full Hessian needed).

    ``value_many`` (optional) evaluates a whole (P, N) batch of points at
    once; grid oracles use it when available.
    """

    value: object                 # e -> float
    grad: object                  # e -> (N,) array
    second: object                # (e, y) -> float
    supplied: frozenset
    label: str = "scalar"
    value_many: object = None


def _fd_grad(value, e: np.ndarray) -> np.ndarray:
    out = np.empty(e.size)
    for s in range(e.size):
        h = 1e-6 * (1.0 + abs(float(e[s])))
        ep = e.copy()
        em = e.copy()
        ep[s] += h
        em[s] -= h
        out[s] = (value(ep) - value(em)) / (2.0 * h)
    return out


def _fd_second(value, e: np.ndarray, y: np.ndarray) -> float:
    h = 1e-4 * (1.0 + float(np.max(np.abs(e))) + float(np.max(np.abs(y))))
    return (value(e + h * y) - 2.0 * value(e) + value(e - h * y)) / (h * h)


def opt_scalar(value, grad=None, second=None, label: str = "scalar",
               value_many=None) -> OptScalar:
    """Wrap callbacks into an OptScalar, filling missing derivatives with
    central differences (steps 1e-6 for first order, 1e-4 for the second
    difference, both scaled by the argument magnitude)."""
    supplied = frozenset(n for n, cb in [("grad", grad), ("second", second)]
                         if cb is not None)

    def val(e):
        return float(value(np.asarray(e, float)))

    g = (lambda e: np.asarray(grad(np.asarray(e, float)), float)) if grad \
        else (lambda e: _fd_grad(val, np.asarray(e, float)))
    s = (lambda e, y: float(second(np.asarray(e, float), np.asarray(y, float)))) \
        if second else (lambda e, y: _fd_second(val, np.asarray(e, float),
                                                np.asarray(y, float)))
    return OptScalar(value=val, grad=g, second=s, supplied=supplied,
                     label=label, value_many=value_many)


def opt_scalar_from_expression(text: str, dim: int, prefix: str = "x",
                               label: str | None = None) -> OptScalar:
    """Scalar row from an expression in x1..xN with exact symbolic
    derivatives; batch evaluation broadcasts over point arrays."""
    names = tuple(f"{prefix}{i + 1}" for i in range(dim))
    node = parse_expr(text, allowed_vars=set(names))
    fn = compile_expr(node, names)
    grads = tuple(node.diff(name) for name in names)
    grad_fns = tuple(compile_expr(g, names) for g in grads)
    hess_fns = tuple(tuple(compile_expr(g.diff(name), names) for name in names)
                     for g in grads)

    def value(e):
        return float(fn(*e))

    def grad(e):
        return np.array([g(*e) for g in grad_fns], float)

    def second(e, y):
        H = np.array([[h(*e) for h in row] for row in hess_fns], float)
        return float(y @ H @ y)

    def value_many(points):
        return np.asarray(fn(*points.T), float)

    return OptScalar(value=value, grad=grad, second=second,
                     supplied=frozenset({"grad", "second"}),
                     label=label or text, value_many=value_many)


@dataclass(frozen=True, eq=False)
class OptProblem:
    """min cost(e) over e in ``domain`` subject to inequality rows <= 0 and
    equality rows = 0.  Multipliers are laid out (cost, inequalities...,
    equalities...), matching the trajectory pipeline."""

    dim: int
    domain: object                # convex base set (Ball/Box/Polyhedron/Product)
    cost: OptScalar
    inequalities: tuple
    equalities: tuple

    @property
    def num_inequalities(self) -> int:
        return len(self.inequalities)

    @property
    def num_equalities(self) -> int:
        return len(self.equalities)

    @property
    def multiplier_dim(self) -> int:
        return 1 + len(self.inequalities) + len(self.equalities)

    @property
    def rows(self) -> tuple:
        return (self.cost,) + tuple(self.inequalities) + tuple(self.equalities)


def make_opt_problem(domain, cost: OptScalar, inequalities=(),
                     equalities=()) -> OptProblem:
    return OptProblem(dim=set_dim(domain), domain=domain, cost=cost,
                      inequalities=tuple(inequalities),
                      equalities=tuple(equalities))


def validate_expansion(problem: OptProblem, point, *, seed: int = 0,
                       rel_tol: float = 1e-4) -> list[tuple[str, tuple]]:
    """Numerically probe the quadratic-expansion property of every row at
    ``point``: the residual of value(e + eps y + eps^2 eta) against the
    declared first/second derivatives, divided by eps^2, must not grow as
    eps shrinks along (0.1, 0.05, 0.025).  Supplied gradients are also
    cross-checked against central differences.  Returns the per-row
    (label, residual-ratio triple) report; raises on inconsistency.

    Rows whose second derivative comes from a finite second difference get
    a wider noise floor: that difference carries roundoff of order
    machine-epsilon/step^2, which the ladder cannot resolve below.
    """
    e = np.asarray(point, float)
    rng = np.random.default_rng(seed)
    report: list[tuple[str, tuple]] = []
    for row in problem.rows:
        base = row.value(e)
        g = row.grad(e)
        scale = 1.0 + abs(base) + float(np.max(np.abs(g), initial=0.0))
        if "grad" in row.supplied:
            ref = _fd_grad(row.value, e)
            if np.max(np.abs(g - ref)) > rel_tol * (1.0 + np.max(np.abs(ref))):
                raise NocError(
                    f"row '{row.label}': supplied gradient disagrees with "
                    f"central differences")
        y = rng.standard_normal(e.size)
        y /= max(1.0, float(np.linalg.norm(y)))
        eta = rng.standard_normal(e.size)
        eta /= max(1.0, float(np.linalg.norm(eta)))
        d2 = row.second(e, y)
        ratios = []
        for eps in (0.1, 0.05, 0.025):
            pred = (base + eps * float(g @ y) + eps * eps * float(g @ eta)
                    + 0.5 * eps * eps * d2)
            res = abs(row.value(e + eps * y + eps * eps * eta) - pred)
            ratios.append(res / (eps * eps))
        report.append((row.label, tuple(ratios)))
        floor = (1e-10 if "second" in row.supplied else 5e-8) * scale
        if ratios[0] > floor:
            if not (ratios[2] <= ratios[1] + floor
                    and ratios[1] <= ratios[0] + floor
                    and ratios[2] <= 0.9 * ratios[0] + floor):
                raise NocError(
                    f"row '{row.label}': quadratic-expansion residual/eps^2 "
                    f"does not shrink ({[f'{r:.3e}' for r in ratios]}); the "
                    f"declared derivatives are inconsistent with the values")
    return report


# ----------------------------------------------------------------------------
# shared row/index preparation
# ----------------------------------------------------------------------------

def _require_in_domain(problem: OptProblem, e: np.ndarray):
    if e.shape != (problem.dim,):
        raise ValueError(f"point must have {problem.dim} coordinates")
    if not contains(problem.domain, e, tol=1e-8):
        raise PointNotInSet("candidate point lies outside the base set")


def _require_admissible(problem: OptProblem, e: np.ndarray,
                        tol: float = 1e-6):
    """The multiplier theory presumes the candidate satisfies its own
    constraint rows; reject plainly infeasible candidates up front."""
    _require_in_domain(problem, e)
    for i, row in enumerate(problem.inequalities):
        val = row.value(e)
        if val > tol:
            raise ValueError(
                f"candidate violates inequality row {i} (value {val:.3e})")
    for i, row in enumerate(problem.equalities):
        val = row.value(e)
        if abs(val) > tol:
            raise ValueError(
                f"candidate violates equality row {i} (value {val:.3e})")


def _shifted_values(problem: OptProblem, e: np.ndarray) -> np.ndarray:
    """Row values with the cost shifted to vanish at the candidate (the
    multiplier theory normalizes the cost level; derivatives are unchanged)."""
    vals = np.array([row.value(e) for row in (problem.cost,)
                     + problem.inequalities])
    vals[0] = 0.0
    return vals


def _activity(problem: OptProblem, vals: np.ndarray, act_tol: float):
    active = {0}
    inactive = set()
    for i in range(1, 1 + problem.num_inequalities):
        (active if vals[i] >= -act_tol else inactive).add(i)
    return active, inactive


def _gradient_matrix(problem: OptProblem, e: np.ndarray) -> np.ndarray:
    return np.stack([row.grad(e) for row in problem.rows])   # (1+j+k, N)


ROW_NOISE_TOL = 1e-8


def _denoise(row: np.ndarray) -> np.ndarray | None:
    """Rows assembled from numerical derivatives carry noise of order 1e-10;
    a row whose every entry sits below the noise floor encodes no constraint
    and must be dropped rather than normalized up to unit size."""
    return None if float(np.max(np.abs(row), initial=0.0)) <= ROW_NOISE_TOL \
        else row


def _first_order_rows(problem: OptProblem, G: np.ndarray, active, inactive,
                      rep, extra_zero=()):
    dim = problem.multiplier_dim
    ineq_rows: list[np.ndarray] = []
    eq_rows: list[np.ndarray] = []
    for i in sorted(active):
        row = np.zeros(dim)
        row[i] = 1.0
        ineq_rows.append(row)
    for i in sorted(set(inactive) | set(extra_zero)):
        row = np.zeros(dim)
        row[i] = 1.0
        eq_rows.append(row)
    for g in rep.rays:
        row = _denoise(G @ g)
        if row is not None:
            ineq_rows.append(row)
    for g in rep.lineality:
        row = _denoise(G @ g)
        if row is not None:
            eq_rows.append(row)
    return _clean_rows(ineq_rows, dim), _clean_rows(eq_rows, dim)


# ----------------------------------------------------------------------------
# first- and second-order multiplier tests
# ----------------------------------------------------------------------------

def op_index_sets(problem: OptProblem, point, *,
                  act_tol: float = ACTIVITY_TOL) -> IndexSets:
    """Active/inactive split of the cost and inequality rows at ``point``."""
    e = np.asarray(point, float)
    _require_in_domain(problem, e)
    active, inactive = _activity(problem, _shifted_values(problem, e),
                                 act_tol)
    return IndexSets(active=frozenset(active), inactive=frozenset(inactive))


def op_first_order(problem: OptProblem, point, *,
                   act_tol: float = ACTIVITY_TOL,
                   validate: bool = True) -> list[MultiplierVector]:
    """Extreme rays of the first-order multiplier cone at ``point``.

    The cone is cut out by the sign pattern on active rows, vanishing
    weights on inactive rows (which also enforces complementary
    slackness), and non-positivity of the weighted gradient sum on every
    generator of the base set's tangent cone.  An empty list is a discrete
    refutation of first-order necessity.
    """
    e = np.asarray(point, float)
    _require_admissible(problem, e)
    if validate:
        validate_expansion(problem, e)
    vals = _shifted_values(problem, e)
    active, inactive = _activity(problem, vals, act_tol)
    G = _gradient_matrix(problem, e)
    rep = tangent_cone_vrep(problem.domain, e)
    A_le, A_eq = _first_order_rows(problem, G, active, inactive, rep)
    return _enumerate_normalized_rays(A_le, A_eq, problem.multiplier_dim)


def _critical_rows(problem: OptProblem, G: np.ndarray, y: np.ndarray,
                   active, inactive, act_tol: float):
    """Index sets along the direction: rows whose weight must vanish are the
    inactive ones plus active rows strictly decreasing along y."""
    rates = G[:1 + problem.num_inequalities] @ y
    relaxed = set(inactive)
    for i in sorted(active):
        if rates[i] < -act_tol:
            relaxed.add(i)
    critical = set(range(1 + problem.num_inequalities)) - relaxed
    return rates, relaxed, critical


def _check_direction(problem: OptProblem, e: np.ndarray, y: np.ndarray,
                     rates: np.ndarray, active, act_tol: float):
    cert = adjacent_cone_member(problem.domain, e, y, with_oracle=False)
    if not cert.member:
        raise EmptySecondCone(
            "the second-order admissible set is empty: the direction leaves "
            f"the base set's tangent cone (margin {cert.margin:.3e})")
    for i in sorted(active):
        if rates[i] > act_tol:
            raise ValueError(
                f"direction increases active row {i} to first order "
                f"(rate {rates[i]:.3e}); it is not a critical direction")
    for idx, row in enumerate(problem.equalities):
        rate = float(row.grad(e) @ y)
        if abs(rate) > act_tol:
            raise ValueError(
                f"direction has nonzero first-order rate {rate:.3e} on "
                f"equality row {idx}; it is not a critical direction")


@dataclass(frozen=True, eq=False)
class SecondOrderResult:
    """Per-ray worst-case values of the second-order inequality.

    ``worst_values[r]`` is the maximum over the second-order admissible set
    of the linear part plus the fixed half-curvature terms for ray r
    (+inf when the linear part is unbounded above on the set).  A ray
    qualifies when its worst case stays below the tolerance; ``refuted``
    means no ray qualifies, i.e. the candidate fails the second-order
    necessary condition along this direction.
    """

    multipliers: tuple
    worst_values: tuple
    qualifying: tuple
    refuted: bool
    critical: frozenset
    base_point: np.ndarray        # shift of the second-order admissible set


def op_second_order(problem: OptProblem, point, direction, *,
                    act_tol: float = ACTIVITY_TOL,
                    qualify_tol: float = QUALIFY_TOL,
                    validate: bool = True) -> SecondOrderResult:
    e = np.asarray(point, float)
    y = np.asarray(direction, float)
    _require_admissible(problem, e)
    if y.shape != (problem.dim,):
        raise ValueError(f"direction must have {problem.dim} coordinates")
    if validate:
        validate_expansion(problem, e)
    vals = _shifted_values(problem, e)
    active, inactive = _activity(problem, vals, act_tol)
    G = _gradient_matrix(problem, e)
    rates, relaxed, critical = _critical_rows(problem, G, y, active, inactive,
                                              act_tol)
    _check_direction(problem, e, y, rates, active, act_tol)
    A_le, A_eq = _first_order_rows(problem, G, active, inactive,
                                   tangent_cone_vrep(problem.domain, e),
                                   extra_zero=relaxed)
    rays = _enumerate_normalized_rays(A_le, A_eq, problem.multiplier_dim)
    p0, rep2 = second_cone_vrep(problem.domain, e, y)
    halves = 0.5 * np.array([row.second(e, y) for row in problem.rows])
    worst: list[float] = []
    for mv in rays:
        c = G.T @ mv.weights
        tol_ray = 1e-9 * (1.0 + float(np.linalg.norm(c)))
        bounded = all(float(c @ r) <= tol_ray for r in rep2.rays) and \
            all(abs(float(c @ l)) <= tol_ray for l in rep2.lineality)
        if not bounded:
            worst.append(math.inf)
            continue
        worst.append(float(c @ p0) + float(mv.weights @ halves))
    qualifying = tuple(r for r, w in enumerate(worst) if w <= qualify_tol)
    return SecondOrderResult(multipliers=tuple(rays),
                             worst_values=tuple(worst),
                             qualifying=qualifying,
                             refuted=not qualifying,
                             critical=frozenset(critical),
                             base_point=p0)


# ----------------------------------------------------------------------------
# separation construction
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SeparationData:
    """Explicit separating functional between the image set of the
    second-order test and the open negative-orthant cone.

    ``kappa_points`` samples the image set; ``z_generators`` are recession
    generators of the closed negative set; ``separator`` is a nonzero
    functional with separator . kappa <= 0 <= separator . (z, 0) (None when
    the sets cannot be separated); ``max_kappa_pairing`` is the largest
    sampled pairing, a direct soundness check.
    """

    kappa_points: np.ndarray
    z_generators: tuple
    separator: np.ndarray | None
    max_kappa_pairing: float
    critical: frozenset


def _lp_coordinate_range(A_le, A_eq, dim: int) -> float:
    """Largest |coordinate| achievable over the cone intersected with the
    unit box — 0 certifies the cone is trivial (independent LP route)."""
    from scipy.optimize import linprog

    bounds = [(-1.0, 1.0)] * dim
    peak = 0.0
    for s in range(dim):
        for sign in (1.0, -1.0):
            c = np.zeros(dim)
            c[s] = -sign
            res = linprog(c, A_ub=A_le if A_le.size else None,
                          b_ub=np.zeros(A_le.shape[0]) if A_le.size else None,
                          A_eq=A_eq if A_eq.size else None,
                          b_eq=np.zeros(A_eq.shape[0]) if A_eq.size else None,
                          bounds=bounds, method="highs")
            if res.success:
                peak = max(peak, abs(float(res.x[s])))
    return peak


def build_separation(problem: OptProblem, point, direction, *,
                     num_samples: int = 256, seed: int = 0,
                     act_tol: float = ACTIVITY_TOL,
                     validate: bool = True) -> SeparationData:
    e = np.asarray(point, float)
    y = np.asarray(direction, float)
    _require_admissible(problem, e)
    if validate:
        validate_expansion(problem, e)
    vals = _shifted_values(problem, e)
    active, inactive = _activity(problem, vals, act_tol)
    G = _gradient_matrix(problem, e)
    rates, relaxed, critical = _critical_rows(problem, G, y, active, inactive,
                                              act_tol)
    _check_direction(problem, e, y, rates, active, act_tol)
    p0, rep2 = second_cone_vrep(problem.domain, e, y)
    halves = 0.5 * np.array([row.second(e, y) for row in problem.rows])
    # image map with non-critical inequality rows zeroed out
    M = G.copy()
    q = halves.copy()
    for i in range(1 + problem.num_inequalities):
        if i not in critical:
            M[i] = 0.0
            q[i] = 0.0
    # sampled image points (affine shift plus random cone combinations)
    rng = np.random.default_rng(seed)
    xs = np.tile(p0, (num_samples, 1))
    if rep2.rays.size:
        xs += rng.uniform(0.0, 2.0, (num_samples, rep2.rays.shape[0])) @ rep2.rays
    if rep2.lineality.size:
        xs += rng.standard_normal((num_samples, rep2.lineality.shape[0])) \
            @ rep2.lineality
    kappa_points = xs @ M.T + q
    # recession generators of the closed negative set in the first 1+j slots
    m_phi = 1 + problem.num_inequalities
    shifted = vals.copy()
    Yvec = np.where([i in active for i in range(m_phi)], rates, 0.0)
    z_generators = tuple(-np.eye(m_phi)[i] for i in range(m_phi))
    edge = -(shifted + Yvec)
    if float(np.max(np.abs(edge))) > 1e-14:
        z_generators = z_generators + (edge,)
    # the separator cone: nonnegative pairing with every generator of the
    # negative set (padded by zeros on equality slots) and nonpositive
    # pairing with the image set's base point and recession generators
    dim = problem.multiplier_dim
    ineq_rows = []
    for gz in z_generators:
        row = np.zeros(dim)
        row[:m_phi] = -gz
        ineq_rows.append(row)
    base_row = _denoise(M @ p0 + q)
    if base_row is not None:
        ineq_rows.append(base_row)
    eq_rows = []
    for r in rep2.rays:
        row = _denoise(M @ r)
        if row is not None:
            ineq_rows.append(row)
    for l in rep2.lineality:
        row = _denoise(M @ l)
        if row is not None:
            eq_rows.append(row)
    A_le = _clean_rows(ineq_rows, dim)
    A_eq = _clean_rows(eq_rows, dim)
    rays = _enumerate_normalized_rays(A_le, A_eq, dim)
    separator = rays[0].weights if rays else None
    lp_peak = _lp_coordinate_range(A_le, A_eq, dim)
    if separator is None and lp_peak > 1e-7:
        raise DegenerateCone(
            "separator enumeration returned an empty cone but the LP route "
            f"reaches coordinate magnitude {lp_peak:.3e}")
    if separator is not None and lp_peak <= 1e-7:
        raise DegenerateCone(
            "separator enumeration found a ray but the LP route certifies "
            "the cone is trivial")
    pairing = float(np.max(kappa_points @ separator)) if separator is not None \
        else math.nan
    return SeparationData(kappa_points=kappa_points,
                          z_generators=z_generators,
                          separator=separator,
                          max_kappa_pairing=pairing,
                          critical=frozenset(critical))


# ----------------------------------------------------------------------------
# exhaustive grid oracle
# ----------------------------------------------------------------------------

def _bounding_box(U) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(U, Ball):
        c = np.asarray(U.center, float)
        return c - U.radius, c + U.radius
    if isinstance(U, Box):
        lo = np.asarray(U.lower, float)
        hi = np.asarray(U.upper, float)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("base set is unbounded; the grid oracle needs "
                             "a bounded set")
        return lo, hi
    if isinstance(U, Polyhedron):
        from scipy.optimize import linprog

        A = np.asarray(U.A, float)
        b = np.asarray(U.b, float)
        m = A.shape[1]
        lo = np.empty(m)
        hi = np.empty(m)
        for s in range(m):
            for sign, out in ((1.0, lo), (-1.0, hi)):
                c = np.zeros(m)
                c[s] = sign
                res = linprog(c, A_ub=A, b_ub=b, bounds=[(None, None)] * m,
                              method="highs")
                if not res.success:
                    raise ValueError("base set is unbounded; the grid oracle "
                                     "needs a bounded set")
                out[s] = float(res.x[s])
        return lo, hi
    if isinstance(U, ProductSet):
        parts = [_bounding_box(f) for f in U.factors]
        return (np.concatenate([p[0] for p in parts]),
                np.concatenate([p[1] for p in parts]))
    raise TypeError(f"not a convex set: {U!r}")


def _membership_mask(U, pts: np.ndarray) -> np.ndarray:
    """Vectorized membership over a (P, N) batch."""
    if isinstance(U, Ball):
        c = np.asarray(U.center, float)
        return np.einsum("ij,ij->i", pts - c, pts - c) <= U.radius ** 2 + 1e-12
    if isinstance(U, Box):
        lo = np.asarray(U.lower, float)
        hi = np.asarray(U.upper, float)
        return np.all((pts >= lo - 1e-12) & (pts <= hi + 1e-12), axis=1)
    if isinstance(U, Polyhedron):
        A = np.asarray(U.A, float)
        b = np.asarray(U.b, float)
        return np.all(pts @ A.T <= b + 1e-12, axis=1)
    if isinstance(U, ProductSet):
        mask = np.ones(pts.shape[0], bool)
        for f, s in zip(U.factors, _product_slices(U)):
            mask &= _membership_mask(f, pts[:, s])
        return mask
    raise TypeError(f"not a convex set: {U!r}")


def _row_values(row: OptScalar, pts: np.ndarray) -> np.ndarray:
    if row.value_many is not None:
        vals = np.asarray(row.value_many(pts), float)
        if vals.ndim == 0:        # constant expression
            vals = np.full(pts.shape[0], float(vals))
        return vals
    return np.array([row.value(p) for p in pts])


def _lipschitz_estimate(row: OptScalar, lo: np.ndarray, hi: np.ndarray,
                        rng) -> float:
    pts = rng.uniform(lo, hi, (32, lo.size))
    return float(max(np.linalg.norm(row.grad(p)) for p in pts))


@dataclass(frozen=True, eq=False)
class BruteForceResult:
    """Grid-search outcome: 'confirmed' (the candidate is a grid minimizer
    up to the Lipschitz slack), 'refuted' (a strictly better feasible grid
    point exists beyond the slack, recorded as witness), or 'empty' (no
    feasible grid point)."""

    verdict: str
    best_point: np.ndarray | None
    best_value: float
    reference_value: float
    slack: float
    num_feasible: int
    equality_slab: float


def op_bruteforce(problem: OptProblem, point, resolution: float, *,
                  equality_slab: float | None = None,
                  seed: int = 0) -> BruteForceResult:
    """Exhaustive search over a uniform grid on the base set's bounding box.

    Feasibility keeps grid points inside the base set, below every
    inequality row, and inside a slab |equality row| <= slab sized from the
    row's Lipschitz constant and the grid spacing.  The verdict compares
    the best feasible grid value against the candidate's value with a
    Lipschitz slack (gradient bound times half the cell diagonal);
    improvements inside the slack raise ResolutionTooCoarse because the
    grid cannot distinguish them from discretization error.
    """
    e = np.asarray(point, float)
    _require_in_domain(problem, e)
    if problem.dim > 3:
        raise ValueError("the grid oracle is limited to three dimensions")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    lo, hi = _bounding_box(problem.domain)
    axes = []
    for a in range(problem.dim):
        count = max(int(round((hi[a] - lo[a]) / resolution)) + 1, 2)
        axes.append(np.linspace(lo[a], hi[a], count))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    rng = np.random.default_rng(seed)
    lip0 = _lipschitz_estimate(problem.cost, lo, hi, rng)
    half_diag = 0.5 * resolution * math.sqrt(problem.dim)
    slabs = []
    for row in problem.equalities:
        lip = _lipschitz_estimate(row, lo, hi, rng)
        slabs.append(equality_slab if equality_slab is not None
                     else max(lip, 1e-9) * half_diag)
    slack = lip0 * half_diag
    for row, slab in zip(problem.equalities, slabs):
        lip = max(_lipschitz_estimate(row, lo, hi, rng), 1e-9)
        slack += lip0 * slab / lip

    chunks = np.array_split(pts, max(1, pts.shape[0] // 262144 + 1))

    def scan(chunk: np.ndarray):
        mask = _membership_mask(problem.domain, chunk)
        if not mask.any():
            return 0, math.inf, None
        sel = chunk[mask]
        feas = np.ones(sel.shape[0], bool)
        for row in problem.inequalities:
            feas &= _row_values(row, sel) <= 1e-9
            if not feas.any():
                return 0, math.inf, None
        for row, slab in zip(problem.equalities, slabs):
            feas &= np.abs(_row_values(row, sel)) <= slab
            if not feas.any():
                return 0, math.inf, None
        sel = sel[feas]
        vals = _row_values(problem.cost, sel)
        best = int(np.argmin(vals))
        return sel.shape[0], float(vals[best]), sel[best]

    workers = thread_count(len(chunks))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(scan, chunks))
    else:
        results = [scan(c) for c in chunks]
    num_feasible = sum(r[0] for r in results)
    ref = float(problem.cost.value(e))
    if num_feasible == 0:
        return BruteForceResult(verdict="empty", best_point=None,
                                best_value=math.nan, reference_value=ref,
                                slack=slack, num_feasible=0,
                                equality_slab=max(slabs, default=0.0))
    best_value, best_point = min(((r[1], r[2]) for r in results),
                                 key=lambda t: t[0])
    improvement = ref - best_value
    scale = 1e-12 * (1.0 + abs(ref))
    if improvement > slack:
        verdict = "refuted"
    elif improvement > scale:
        raise ResolutionTooCoarse(
            f"best grid point improves the candidate by {improvement:.3e}, "
            f"within the grid Lipschitz slack {slack:.3e}; refine the grid")
    else:
        verdict = "confirmed"
    return BruteForceResult(verdict=verdict, best_point=best_point,
                            best_value=best_value, reference_value=ref,
                            slack=slack, num_feasible=num_feasible,
                            equality_slab=max(slabs, default=0.0))


# ----------------------------------------------------------------------------
# flattening a control problem onto the grid
# ----------------------------------------------------------------------------

def control_problem_as_op(problem, trajectory) -> tuple[OptProblem, np.ndarray]:
    """Flatten a control problem at a trajectory into grid coordinates.

    The unknown becomes e = (start point, control rows raveled); the base
    set is the product of a free box for the start point and one copy of
    the control set per cell; every endpoint row becomes a scalar row that
    re-integrates the dynamics from its coordinates.  Returns the flattened
    program and the coordinates of the supplied trajectory, so the two
    multiplier pipelines can be compared on the same candidate.
    """
    from .dynamics import integrate_state

    n = problem.state_dim
    m = problem.control_dim
    N = trajectory.num_cells
    inf = math.inf
    domain = ProductSet((Box(lower=(-inf,) * n, upper=(inf,) * n),)
                        + (problem.control_set,) * N)
    e_bar = np.concatenate([trajectory.states[0], trajectory.controls.ravel()])

    def endpoint_row(ep):
        def value(e):
            traj = integrate_state(problem, e[:n], e[n:].reshape(N, m))
            return float(ep.value(traj.states[0], traj.states[-1]))

        return opt_scalar(value, label=ep.label)

    cost = endpoint_row(problem.cost)
    ineqs = tuple(endpoint_row(ep) for ep in problem.inequality_maps)
    eqs = tuple(endpoint_row(ep) for ep in problem.equality_maps)
    return make_opt_problem(domain, cost, ineqs, eqs), e_bar
