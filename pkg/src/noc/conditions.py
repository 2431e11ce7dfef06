"""Necessary-condition pipeline along a nominal trajectory.

Given a control trajectory, this module classifies the endpoint constraint
rows (active/inactive, and which stay tight to first order along a chosen
direction), enumerates the polyhedral cone of admissible multipliers,
verifies candidate singular directions, evaluates the second-order quadratic
form, and assembles refutation certificates: a recorded control acceleration
that makes the form positive against every admissible multiplier certifies
that the examined control is not a local minimizer.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .cones import (adjacent_cone_member, quadratic_distance_bound,
                    second_adjacent_member, second_cone_vrep,
                    tangent_cone_vrep)
from .dynamics import (ControlProblem, EndpointMap, FieldAlongCurve,
                       Trajectory, curvature_pairing,
                       dynamics_from_expressions, hamiltonian_blocks,
                       integrate_adjoint, integrate_variational,
                       lagrange_data, make_problem, trapezoid_cellwise)
from .errors import (BoundNotVerified, ChartEscape, ConeViolation,
                     DegenerateCone, EndpointRowViolation, NoMultiplier,
                     SigmaNotInB)
from .geometry import euclidean, product_chart, valid_point
from .polyhedral import cone_contains, extreme_rays

__all__ = [
    "ACTIVITY_TOL",
    "IndexSets",
    "MultiplierVector",
    "RAY_BUDGET",
    "REFUTATION_MARGIN",
    "ROW_TOL",
    "RefutationCertificate",
    "STATIONARITY_TOL",
    "SingularDirection",
    "active_sets",
    "critical_sets",
    "default_sigma_candidates",
    "find_first_order_multipliers",
    "mayer_augment",
    "refute_optimality",
    "second_order_lhs",
    "stationarity_residual",
    "thread_count",
    "verify_singular_direction",
]

ACTIVITY_TOL = 1e-8
ROW_TOL = 1e-8
STATIONARITY_TOL = 1e-6
REFUTATION_MARGIN = 1e-6
RAY_BUDGET = 64

LHS_TERM_NAMES = (
    "sigma_integral",     # integral of the control gradient against sigma
    "state_state",        # 1/2 integral of the state Hessian at (X, X)
    "state_control",      # integral of the mixed block at (X, v)
    "control_control",    # 1/2 integral of the control Hessian at (v, v)
    "curvature",          # -1/2 integral of the curvature pairing
    "start_start",        # 1/2 endpoint Hessian at (X(0), X(0))
    "start_end",          # mixed endpoint Hessian at (X(0), X(T))
    "end_end",            # 1/2 endpoint Hessian at (X(T), X(T))
)


def thread_count(num_items: int) -> int:
    """Worker count for embarrassingly parallel stages (NOC_THREADS caps it)."""
    raw = os.environ.get("NOC_THREADS", "")
    try:
        cap = int(raw)
    except ValueError:
        cap = 0
    if cap <= 0:
        cap = min(4, os.cpu_count() or 1)
    return max(1, min(cap, num_items))


def _parallel_map(fn, items):
    items = list(items)
    workers = thread_count(len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ----------------------------------------------------------------------------
# domain types
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class IndexSets:
    """Classification of the scalar endpoint rows {0, ..., j} (0 = cost).

    ``active``/``inactive`` partition the rows by constraint activity at the
    trajectory endpoints (the cost row is always active). After a direction
    is fixed, ``relaxed`` collects the rows that are inactive or strictly
    decrease to first order along it; ``critical`` is the complement — the
    rows on which a second-order multiplier may carry weight.
    """

    active: frozenset
    inactive: frozenset
    relaxed: frozenset | None = None
    critical: frozenset | None = None


@dataclass(frozen=True, eq=False)
class MultiplierVector:
    """Endpoint multiplier, laid out (cost, inequalities..., equalities...).

    ``weights`` is |.|_inf-normalized. ``from_lineality`` marks vectors that
    span a sign-reversible (two-sided) direction of the multiplier cone.
    """

    weights: np.ndarray
    normalized: bool = True
    from_lineality: bool = False

    @property
    def cost_weight(self) -> float:
        return float(self.weights[0])

    def inequality_weights(self, problem: ControlProblem) -> np.ndarray:
        return self.weights[1:1 + problem.num_inequalities]

    def equality_weights(self, problem: ControlProblem) -> np.ndarray:
        return self.weights[1 + problem.num_inequalities:]


@dataclass(frozen=True, eq=False)
class SingularDirection:
    """A verified first-order-admissible control direction.

    ``endpoint_rates[i]`` is the first-order rate of endpoint row i along the
    direction (gradient at the start paired with the field at 0 plus gradient
    at the end paired with the field at T); ``equality_residuals`` are the
    same rates for the equality rows (must vanish within ``row_tol``).
    """

    control_directions: np.ndarray   # (N, m)
    field: FieldAlongCurve           # first-order state response X
    endpoint_rates: np.ndarray       # (1 + j,)
    equality_residuals: np.ndarray   # (k,)
    row_tol: float


@dataclass(frozen=True, eq=False)
class RefutationCertificate:
    """Outcome of the second-order refutation search.

    ``lhs[c, r]`` is the quadratic-form value for candidate c against
    multiplier ray r, evaluated with the ray rescaled so its cost weight is
    -1 when possible (values then match the cost-normalized convention).
    Verdict "refuted" requires one candidate whose value exceeds 10x the
    margin against every ray; values inside (margin, 10x margin] downgrade
    to "inconclusive".
    """

    verdict: str                    # refuted | consistent | inconclusive
    multipliers: tuple              # MultiplierVector rays examined
    sigma_candidates: tuple         # (N, m) arrays
    w_candidates: tuple             # start accelerations (recorded; see notes)
    lhs: np.ndarray                 # (num_candidates, num_rays)
    chosen: tuple | None            # (sigma_index, w_index) of the best candidate
    chosen_lhs: float               # min-over-rays value of the best candidate
    chosen_terms: dict | None       # per-term breakdown for (chosen, first ray)
    margin: float
    stationarity: tuple             # per-ray residual of the chosen direction
    index_sets: IndexSets
    tolerances: dict
    notes: tuple


# ----------------------------------------------------------------------------
# index sets and direction verification
# ----------------------------------------------------------------------------

def active_sets(problem: ControlProblem, trajectory: Trajectory,
                act_tol: float = ACTIVITY_TOL) -> IndexSets:
    """Partition the endpoint rows by activity; the cost row is always active."""
    y0, yT = trajectory.states[0], trajectory.states[-1]
    active = {0}
    inactive = set()
    for i, ep in enumerate(problem.inequality_maps, start=1):
        if ep.value(y0, yT) >= -act_tol:
            active.add(i)
        else:
            inactive.add(i)
    return IndexSets(active=frozenset(active), inactive=frozenset(inactive))


def verify_singular_direction(problem: ControlProblem, trajectory: Trajectory,
                              control_directions, start_vector=None, *,
                              row_tol: float = ROW_TOL,
                              act_tol: float = ACTIVITY_TOL) -> SingularDirection:
    """Check a direction against the pointwise cone and linearized endpoint rows.

    Requirements: every per-cell direction lies in the adjacent cone of the
    control set at the nominal control; active endpoint rows do not increase
    to first order; equality rows have zero first-order rate.
    """
    v_seq = np.asarray(control_directions, float)
    U = problem.control_set
    for i in range(trajectory.num_cells):
        cert = adjacent_cone_member(U, trajectory.controls[i], v_seq[i],
                                    with_oracle=False)
        if not cert.member:
            raise ConeViolation(
                f"direction leaves the control tangent cone in cell {i} "
                f"(margin {cert.margin:.3e})", node=i)
    if start_vector is None:
        start_vector = np.zeros(problem.state_dim)
    X = integrate_variational(problem, trajectory, v_seq, start_vector)
    y0, yT = trajectory.states[0], trajectory.states[-1]
    X0, XT = X.values[0], X.values[-1]
    sets = active_sets(problem, trajectory, act_tol)
    rates = np.empty(1 + problem.num_inequalities)
    for i, ep in enumerate((problem.cost,) + tuple(problem.inequality_maps)):
        g1, g2 = ep.grad(y0, yT)
        rates[i] = float(np.asarray(g1, float) @ X0 + np.asarray(g2, float) @ XT)
        if i in sets.active and rates[i] > row_tol:
            raise EndpointRowViolation(
                f"active endpoint row {i} increases along the direction "
                f"(rate {rates[i]:.3e} > tol {row_tol:g})", index=i)
    eq_res = np.empty(problem.num_equalities)
    for r, ep in enumerate(problem.equality_maps):
        g1, g2 = ep.grad(y0, yT)
        eq_res[r] = float(np.asarray(g1, float) @ X0 + np.asarray(g2, float) @ XT)
        if abs(eq_res[r]) > row_tol:
            raise EndpointRowViolation(
                f"equality row {r} has nonzero first-order rate "
                f"({eq_res[r]:.3e}, tol {row_tol:g})",
                index=1 + problem.num_inequalities + r)
    return SingularDirection(control_directions=v_seq, field=X,
                             endpoint_rates=rates, equality_residuals=eq_res,
                             row_tol=row_tol)


def critical_sets(problem: ControlProblem, trajectory: Trajectory,
                  direction: SingularDirection,
                  act_tol: float = ACTIVITY_TOL) -> IndexSets:
    """Split the rows into relaxed/critical along a verified direction.

    A row is relaxed if it is inactive or if its first-order rate along the
    direction is strictly negative; multipliers entering the second-order
    test must vanish on relaxed rows.
    """
    base = active_sets(problem, trajectory, act_tol)
    relaxed = set(base.inactive)
    for i in base.active:
        if direction.endpoint_rates[i] < -act_tol:
            relaxed.add(i)
    every = set(range(1 + problem.num_inequalities))
    return IndexSets(active=base.active, inactive=base.inactive,
                     relaxed=frozenset(relaxed),
                     critical=frozenset(every - relaxed))


# ----------------------------------------------------------------------------
# multiplier cone
# ----------------------------------------------------------------------------

def _weights_of(multiplier) -> np.ndarray:
    if isinstance(multiplier, MultiplierVector):
        return np.asarray(multiplier.weights, float)
    return np.asarray(multiplier, float)


def _inf_normalize(w: np.ndarray) -> np.ndarray:
    peak = float(np.max(np.abs(w)))
    if peak <= 0.0:
        raise DegenerateCone("attempted to normalize a zero multiplier")
    return w / peak


def _basis_adjoints(problem: ControlProblem, trajectory: Trajectory):
    """Adjoint field and endpoint-aggregate data per unit multiplier slot."""
    dim = problem.multiplier_dim
    fields, data = [], []
    for s in range(dim):
        e = np.zeros(dim)
        e[s] = 1.0
        data.append(lagrange_data(problem, trajectory.states[0],
                                  trajectory.states[-1], e))
        fields.append(integrate_adjoint(problem, trajectory, e))
    return fields, data


def _control_jacobian_arrays(problem: ControlProblem, trajectory: Trajectory):
    """rhs_u at both endpoints of every cell (the cell's control at both)."""
    dyn = problem.dynamics
    N = trajectory.num_cells
    n, m = problem.state_dim, problem.control_dim
    fuL = np.empty((N, n, m))
    fuR = np.empty((N, n, m))
    for i in range(N):
        u = trajectory.controls[i]
        fuL[i] = dyn.rhs_u(trajectory.grid[i], trajectory.states[i], u)
        fuR[i] = dyn.rhs_u(trajectory.grid[i + 1], trajectory.states[i + 1], u)
    return fuL, fuR


def _hu_arrays(fuL, fuR, p_values):
    """Control gradient of the Hamiltonian at both cell endpoints: (N, m) each."""
    return (np.einsum("ikm,ik->im", fuL, p_values[:-1]),
            np.einsum("ikm,ik->im", fuR, p_values[1:]))


def _clean_rows(rows, dim: int) -> np.ndarray:
    """Normalize, drop near-zero rows, and dedupe (order-preserving)."""
    if not rows:
        return np.zeros((0, dim))
    M = np.asarray(rows, float).reshape(-1, dim)
    norms = np.linalg.norm(M, axis=1)
    keep = norms > 1e-12
    M = M[keep] / norms[keep][:, None]
    if M.shape[0] == 0:
        return np.zeros((0, dim))
    _, idx = np.unique(np.round(M, 12), axis=0, return_index=True)
    return M[np.sort(idx)]


def _multiplier_cone_rows(problem: ControlProblem, trajectory: Trajectory, *,
                          act_tol: float, extra_zero_rows=()):
    """H-representation of the admissible multiplier cone.

    Rows express, linearly in the multiplier: (a) the sign pattern on
    active rows and vanishing on inactive rows, (b) the start-boundary
    identity (adjoint at 0 equals minus the start gradient of the weighted
    endpoint aggregate), and (c) non-positivity of the Hamiltonian control
    gradient on the tangent-cone generators of the control set at every
    cell endpoint. Lineality directions of a node cone give equality rows
    (the gradient must vanish on two-sided directions).
    """
    dim = problem.multiplier_dim
    fields, data = _basis_adjoints(problem, trajectory)
    sets = active_sets(problem, trajectory, act_tol)
    ineq_rows: list[np.ndarray] = []
    eq_rows: list[np.ndarray] = []
    for i in sorted(sets.active):
        row = np.zeros(dim)
        row[i] = 1.0
        ineq_rows.append(row)
    for i in sorted(sets.inactive):
        row = np.zeros(dim)
        row[i] = 1.0
        eq_rows.append(row)
    for i in sorted(set(extra_zero_rows)):
        row = np.zeros(dim)
        row[i] = 1.0
        eq_rows.append(row)
    # start-boundary identity: one equality row per state coordinate
    boundary = np.stack([f.values[0] + d.grad_start
                         for f, d in zip(fields, data)], axis=1)  # (n, dim)
    eq_rows.extend(boundary)
    # control-gradient rows at every cell endpoint, on the node-cone generators
    fuL, fuR = _control_jacobian_arrays(problem, trajectory)
    hu = [_hu_arrays(fuL, fuR, f.values) for f in fields]   # dim x (left, right)
    huL = np.stack([h[0] for h in hu])                      # (dim, N, m)
    huR = np.stack([h[1] for h in hu])
    vrep_cache: dict = {}
    for i in range(trajectory.num_cells):
        key = trajectory.controls[i].tobytes()
        rep = vrep_cache.get(key)
        if rep is None:
            rep = tangent_cone_vrep(problem.control_set, trajectory.controls[i])
            vrep_cache[key] = rep
        for w in rep.lineality:
            eq_rows.append(huL[:, i, :] @ w)
            eq_rows.append(huR[:, i, :] @ w)
        for w in rep.rays:
            ineq_rows.append(huL[:, i, :] @ w)
            ineq_rows.append(huR[:, i, :] @ w)
    return _clean_rows(ineq_rows, dim), _clean_rows(eq_rows, dim)


def _enumerate_normalized_rays(A_le, A_eq, dim: int) -> list[MultiplierVector]:
    """Extreme rays of {x : A_le x <= 0, A_eq x = 0}, |.|_inf-normalized.

    Lineality directions contribute a flagged +/- pair each; results are
    deduplicated and ordered lexicographically so enumeration is stable.
    """
    rep = extreme_rays(A_le if A_le is not None and A_le.size else None,
                       A_eq if A_eq is not None and A_eq.size else None, dim)
    out: list[MultiplierVector] = []
    for ray in rep.rays:
        if not cone_contains(A_le, A_eq, ray, tol=1e-8):
            raise DegenerateCone(
                "enumerated multiplier ray violates its defining rows "
                "(internal enumeration failure)")
        out.append(MultiplierVector(weights=_inf_normalize(ray)))
    for direction in rep.lineality:
        for sign in (1.0, -1.0):
            vec = sign * direction
            if cone_contains(A_le, A_eq, vec, tol=1e-8):
                out.append(MultiplierVector(weights=_inf_normalize(vec),
                                            from_lineality=True))
    seen = set()
    unique: list[MultiplierVector] = []
    for mv in out:
        key = tuple(np.round(mv.weights, 10))
        if key not in seen:
            seen.add(key)
            unique.append(mv)
    unique.sort(key=lambda mv: tuple(np.round(mv.weights, 10)))
    return unique


def find_first_order_multipliers(problem: ControlProblem, trajectory: Trajectory,
                                 *, act_tol: float = ACTIVITY_TOL,
                                 restrict_zero=()) -> list[MultiplierVector]:
    """Enumerate the extreme rays of the admissible multiplier cone.

    Returns |.|_inf-normalized representatives: the extreme rays plus a +/-
    pair per lineality direction (two-sided freedoms, flagged). An empty
    list means no nonzero multiplier satisfies the discretized first-order
    conditions. ``restrict_zero`` forces additional rows' weights to zero
    (used for the direction-restricted second-order cone).
    """
    A_le, A_eq = _multiplier_cone_rows(problem, trajectory, act_tol=act_tol,
                                       extra_zero_rows=restrict_zero)
    return _enumerate_normalized_rays(A_le, A_eq, problem.multiplier_dim)


def stationarity_residual(problem: ControlProblem, trajectory: Trajectory,
                          multiplier, direction: SingularDirection) -> float:
    """Largest |control gradient of H paired with the direction| over the grid."""
    weights = _weights_of(multiplier)
    p = integrate_adjoint(problem, trajectory, weights)
    fuL, fuR = _control_jacobian_arrays(problem, trajectory)
    huL, huR = _hu_arrays(fuL, fuR, p.values)
    v = direction.control_directions
    return float(max(np.max(np.abs(np.einsum("im,im->i", huL, v))),
                     np.max(np.abs(np.einsum("im,im->i", huR, v)))))


# ----------------------------------------------------------------------------
# second-order form
# ----------------------------------------------------------------------------

def _check_sigma_membership(problem: ControlProblem, trajectory: Trajectory,
                            v_seq: np.ndarray, sigma: np.ndarray):
    U = problem.control_set
    for i in range(trajectory.num_cells):
        cert = second_adjacent_member(U, trajectory.controls[i], v_seq[i],
                                      sigma[i], with_oracle=False)
        if not cert.member:
            raise SigmaNotInB(
                f"acceleration candidate leaves the second-order admissible "
                f"set in cell {i} (margin {cert.margin:.3e})", node=i)


def _check_quadratic_bound(problem: ControlProblem, trajectory: Trajectory,
                           v_seq: np.ndarray, eps0: float):
    bound = quadratic_distance_bound(problem.control_set, trajectory.controls,
                                     v_seq, eps0)
    if not bound.passed:
        raise BoundNotVerified(
            "the node-wise quadratic distance bound for (control, direction) "
            "diverges; the expansion hypothesis cannot be certified")
    return bound


def _lhs_terms(problem: ControlProblem, trajectory: Trajectory,
               weights: np.ndarray, direction: SingularDirection,
               sigma: np.ndarray) -> dict:
    """All named summands of the second-order form for one multiplier."""
    p = integrate_adjoint(problem, trajectory, weights)
    X = direction.field
    v = direction.control_directions
    N = trajectory.num_cells
    grid = trajectory.grid
    states = trajectory.states
    cols = {name: (np.empty(N), np.empty(N))
            for name in ("sigma_integral", "state_state", "state_control",
                         "control_control", "curvature")}
    for i in range(N):
        u = trajectory.controls[i]
        for side, node in ((0, i), (1, i + 1)):
            blocks = hamiltonian_blocks(problem, grid[node], states[node],
                                        p.values[node], u)
            Xn = X.values[node]
            cols["sigma_integral"][side][i] = blocks["hu"] @ sigma[i]
            cols["state_state"][side][i] = 0.5 * Xn @ blocks["hxx"] @ Xn
            cols["state_control"][side][i] = Xn @ blocks["hxu"] @ v[i]
            cols["control_control"][side][i] = 0.5 * v[i] @ blocks["huu"] @ v[i]
            cols["curvature"][side][i] = -0.5 * curvature_pairing(
                problem, trajectory, p, X, node, cell=i)
    terms = {name: float(trapezoid_cellwise(grid, L, R))
             for name, (L, R) in cols.items()}
    ld = lagrange_data(problem, states[0], states[-1], weights)
    X0, XT = X.values[0], X.values[-1]
    terms["start_start"] = 0.5 * float(X0 @ ld.hess_start_start @ X0)
    terms["start_end"] = float(X0 @ ld.hess_start_end @ XT)
    terms["end_end"] = 0.5 * float(XT @ ld.hess_end_end @ XT)
    return terms


def second_order_lhs(problem: ControlProblem, trajectory: Trajectory,
                     multiplier, direction: SingularDirection, accelerations,
                     start_acceleration=None, *, eps0: float = 0.1,
                     check: bool = True, with_terms: bool = False):
    """Evaluate the second-order quadratic form for one multiplier.

    The value is the sum of the five grid integrals (control gradient
    against the acceleration, state/mixed/control Hessian quadratics, and
    the curvature pairing) plus the three endpoint-Hessian terms. The
    ``start_acceleration`` slot is accepted for interface symmetry but does
    not enter the value: its two contributions cancel identically through
    the start-boundary identity of any admissible multiplier.
    """
    weights = _weights_of(multiplier)
    v_seq = direction.control_directions
    sigma = np.asarray(accelerations, float)
    if sigma.shape != v_seq.shape:
        raise ValueError("accelerations must match the direction shape")
    if check:
        _check_quadratic_bound(problem, trajectory, v_seq, eps0)
        _check_sigma_membership(problem, trajectory, v_seq, sigma)
    terms = _lhs_terms(problem, trajectory, weights, direction, sigma)
    total = float(sum(terms.values()))
    if with_terms:
        return total, terms
    return total


# ----------------------------------------------------------------------------
# refutation search
# ----------------------------------------------------------------------------

def default_sigma_candidates(control_set, controls, directions) -> list[np.ndarray]:
    """Acceleration candidates from the second-order admissible set geometry.

    Per cell the set is an affine shift of a polyhedral cone; candidates are
    the shift itself and the shift pushed along each recession generator
    (including both signs of two-sided directions) when the generator
    pattern is uniform across cells.
    """
    controls = np.asarray(controls, float)
    directions = np.asarray(directions, float)
    N = controls.shape[0]
    cache: dict = {}
    base = np.empty_like(controls)
    rays_per_cell, lins_per_cell = [], []
    for i in range(N):
        key = (controls[i].tobytes(), directions[i].tobytes())
        got = cache.get(key)
        if got is None:
            got = second_cone_vrep(control_set, controls[i], directions[i])
            cache[key] = got
        shift, rep = got
        base[i] = shift
        rays_per_cell.append(rep.rays)
        lins_per_cell.append(rep.lineality)
    candidates = [base]
    ray_counts = {r.shape[0] for r in rays_per_cell}
    if len(ray_counts) == 1:
        for j in range(rays_per_cell[0].shape[0]):
            step = np.array([rays_per_cell[i][j] for i in range(N)])
            candidates.append(base + step)
    lin_counts = {l.shape[0] for l in lins_per_cell}
    if len(lin_counts) == 1:
        for j in range(lins_per_cell[0].shape[0]):
            step = np.array([lins_per_cell[i][j] for i in range(N)])
            candidates.append(base + step)
            candidates.append(base - step)
    return candidates


def _evaluation_scale(weights: np.ndarray) -> np.ndarray:
    """Rescale a ray to cost weight -1 when it has one (reported convention)."""
    if weights[0] < -1e-12:
        return weights / (-weights[0])
    return weights


def refute_optimality(problem: ControlProblem, trajectory: Trajectory,
                      direction: SingularDirection, sigma_candidates=None,
                      w_candidates=None, *, multipliers=None,
                      margin: float = REFUTATION_MARGIN,
                      act_tol: float = ACTIVITY_TOL,
                      stationarity_tol: float = STATIONARITY_TOL,
                      ray_budget: int = RAY_BUDGET,
                      eps0: float = 0.1) -> RefutationCertificate:
    """Search for an acceleration making the second-order form positive
    against every admissible multiplier of the direction-restricted cone.

    Raises NoMultiplier when the restricted cone is trivial — the discrete
    necessary condition then fails already at first order and the caller
    should report non-optimality on that basis.
    """
    notes: list[str] = []
    sets = critical_sets(problem, trajectory, direction, act_tol)
    if multipliers is None:
        zero_rows = sorted(set(range(1 + problem.num_inequalities))
                           - set(sets.critical))
        rays = find_first_order_multipliers(problem, trajectory,
                                            act_tol=act_tol,
                                            restrict_zero=zero_rows)
        if not rays:
            unrestricted = find_first_order_multipliers(problem, trajectory,
                                                        act_tol=act_tol)
            if unrestricted:
                raise NoMultiplier(
                    "no first-order multiplier survives the restriction to "
                    "the direction-critical rows; the second-order necessary "
                    "condition fails at the discrete level")
            raise NoMultiplier(
                "the first-order multiplier cone is trivial; the necessary "
                "condition fails at the discrete level")
    else:
        rays = [m if isinstance(m, MultiplierVector)
                else MultiplierVector(weights=_inf_normalize(np.asarray(m, float)))
                for m in multipliers]
        if not rays:
            raise NoMultiplier("an empty multiplier list was supplied")
    tolerances = {"margin": margin, "act_tol": act_tol,
                  "stationarity_tol": stationarity_tol, "eps0": eps0,
                  "row_tol": direction.row_tol}
    if len(rays) > ray_budget:
        return RefutationCertificate(
            verdict="inconclusive", multipliers=tuple(rays),
            sigma_candidates=(), w_candidates=(),
            lhs=np.zeros((0, len(rays))), chosen=None,
            chosen_lhs=math.nan, chosen_terms=None, margin=margin,
            stationarity=(), index_sets=sets, tolerances=tolerances,
            notes=(f"multiplier cone has {len(rays)} generators, above the "
                   f"ray budget {ray_budget}; refusing a verdict",))
    if any(r.from_lineality for r in rays):
        notes.append("multiplier cone has two-sided directions; a uniformly "
                     "positive quadratic form over all of them is impossible")
    v_seq = direction.control_directions
    if sigma_candidates is None:
        sigma_candidates = default_sigma_candidates(problem.control_set,
                                                    trajectory.controls, v_seq)
    sigmas = [np.asarray(s, float) for s in sigma_candidates]
    ws = ([np.zeros(problem.state_dim)] if w_candidates is None
          else [np.asarray(w, float) for w in w_candidates])
    _check_quadratic_bound(problem, trajectory, v_seq, eps0)
    for s in sigmas:
        if s.shape != v_seq.shape:
            raise ValueError("every acceleration candidate must match the "
                             "direction shape")
        _check_sigma_membership(problem, trajectory, v_seq, s)

    fuL, fuR = _control_jacobian_arrays(problem, trajectory)

    def ray_values(ray: MultiplierVector):
        weights = _evaluation_scale(ray.weights)
        p = integrate_adjoint(problem, trajectory, weights)
        huL, huR = _hu_arrays(fuL, fuR, p.values)
        residual = float(max(np.max(np.abs(np.einsum("im,im->i", huL, v_seq))),
                             np.max(np.abs(np.einsum("im,im->i", huR, v_seq)))))
        rest_terms = _lhs_terms(problem, trajectory, weights, direction,
                                np.zeros_like(v_seq))
        rest = float(sum(rest_terms.values()))
        vals = [rest + float(trapezoid_cellwise(
                    trajectory.grid,
                    np.einsum("im,im->i", huL, s),
                    np.einsum("im,im->i", huR, s))) for s in sigmas]
        return vals, residual

    results = _parallel_map(ray_values, rays)
    stationarity = tuple(res for _, res in results)
    for ray, res in zip(rays, stationarity):
        if res > stationarity_tol:
            notes.append(f"stationarity residual {res:.3e} for ray "
                         f"{np.round(ray.weights, 6).tolist()} exceeds "
                         f"{stationarity_tol:g}")
    per_sigma = np.array([vals for vals, _ in results]).T   # (S, num_rays)
    lhs = np.repeat(per_sigma, len(ws), axis=0)             # W slot is inert
    worst = lhs.min(axis=1)
    best_idx = int(np.argmax(worst))
    best = float(worst[best_idx])
    if best > 10.0 * margin:
        verdict = "refuted"
    elif best > margin:
        verdict = "inconclusive"
        notes.append(f"best worst-case value {best:.3e} lies within 10x the "
                     f"refutation margin {margin:g}; downgraded")
    else:
        verdict = "consistent"
    chosen = (best_idx // len(ws), best_idx % len(ws))
    worst_ray = int(np.argmin(lhs[best_idx]))
    _, chosen_terms = second_order_lhs(
        problem, trajectory, _evaluation_scale(rays[worst_ray].weights),
        direction, sigmas[chosen[0]], check=False, with_terms=True)
    return RefutationCertificate(
        verdict=verdict, multipliers=tuple(rays),
        sigma_candidates=tuple(sigmas), w_candidates=tuple(ws),
        lhs=lhs, chosen=chosen, chosen_lhs=best, chosen_terms=chosen_terms,
        margin=margin, stationarity=stationarity, index_sets=sets,
        tolerances=tolerances, notes=tuple(notes))


# ----------------------------------------------------------------------------
# integral-cost augmentation
# ----------------------------------------------------------------------------

def _coordinate_pin(dim: int, slot: int, which: str, constant: float,
                    label: str) -> EndpointMap:
    """Exact endpoint row: (start or end) coordinate minus a constant."""

    def value(y0, yT):
        pt = y0 if which == "start" else yT
        return float(pt[slot]) - constant

    def grad(y0, yT):
        g1 = np.zeros(dim)
        g2 = np.zeros(dim)
        (g1 if which == "start" else g2)[slot] = 1.0
        return g1, g2

    def hess(y0, yT):
        z = np.zeros((dim, dim))
        return z, z, z

    return EndpointMap(value=value, grad=grad, hess=hess,
                       supplied=frozenset({"grad", "hess"}), label=label)


def mayer_augment(chart, horizon: float, dynamics_texts, running_cost_text: str,
                  start_point, end_point, control_dim: int, control_set=None, *,
                  validate: bool = True, label: str = "augmented") -> ControlProblem:
    """Rewrite an integral-cost, fixed-endpoint problem as an endpoint-cost one.

    Appends an accumulator state whose rate is the running cost; the cost
    becomes the accumulator's terminal value and the fixed endpoints become
    equality rows (start pins, end pins, accumulator-start pin — 2n+1 rows
    in that order). Dynamics and running cost are expressions in
    t, y1..yn, u1..um.
    """
    n = chart.dim
    start = np.asarray(start_point, float)
    end = np.asarray(end_point, float)
    if start.shape != (n,) or end.shape != (n,):
        raise ValueError("start/end points must have the chart dimension")
    if not valid_point(chart, start):
        raise ChartEscape("the start point lies outside the chart domain")
    if not valid_point(chart, end):
        raise ChartEscape("the target endpoint lies outside the chart domain")
    texts = tuple(dynamics_texts)
    if len(texts) != n:
        raise ValueError(f"expected {n} dynamics expressions, got {len(texts)}")
    aug_chart = product_chart(chart, euclidean(1))
    dynamics = dynamics_from_expressions(texts + (running_cost_text,), n + 1,
                                         control_dim, label=f"{label}-dynamics")
    cost = _coordinate_pin(n + 1, n, "end", 0.0, "accumulated-cost")
    equalities = []
    for i in range(n):
        equalities.append(_coordinate_pin(n + 1, i, "start", float(start[i]),
                                          f"start-pin-{i + 1}"))
    for i in range(n):
        equalities.append(_coordinate_pin(n + 1, i, "end", float(end[i]),
                                          f"end-pin-{i + 1}"))
    equalities.append(_coordinate_pin(n + 1, n, "start", 0.0,
                                      "accumulator-start"))
    probe = np.concatenate([start, [0.0]])
    return make_problem(aug_chart, horizon, dynamics, cost,
                        inequality_maps=(), equality_maps=tuple(equalities),
                        control_set=control_set, validate=validate,
                        probe_base=probe)
