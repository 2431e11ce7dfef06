"""Convex control-set geometry: projections, adjacent cones, lifts.

Four set variants (ball, box, polyhedron, product) with exact Euclidean
projections, analytic first/second-order adjacent-cone membership with signed
margins, a sequence-based oracle over an h-ladder, V-representations of the
cones (used to build multiplier inequalities and to pick candidate
directions), the quadratic distance bound, and the ε-lift of pointwise
second-order elements to admissible controls.

Conventions: a certificate's margin is positive on the member side and
negative on the non-member side, normalized so it is comparable to the
oracle's limiting residual. Activity detection uses an absolute tolerance
of 1e-9; set-membership preconditions use 1e-10.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundViolated, DirectionNotInCone, PointNotInSet
from .polyhedral import ConeVRep, extreme_rays

__all__ = [
    "Ball",
    "Box",
    "Polyhedron",
    "ProductSet",
    "ConeElementCertificate",
    "QuadraticBoundResult",
    "set_dim",
    "dist_and_project",
    "contains",
    "adjacent_cone_member",
    "second_adjacent_member",
    "cone_oracle",
    "oracle_verdict",
    "tangent_cone_vrep",
    "second_cone_vrep",
    "quadratic_distance_bound",
    "lift_sigma",
]

ACT_TOL = 1e-9          # constraint-activity detection
MEMBER_TOL = 1e-10      # "u in U" preconditions
ORACLE_TOL = 1e-3       # verdict threshold at the smallest ladder step
DEFAULT_LADDER = tuple(np.geomspace(1e-1, 1e-4, 12))


# ----------------------------------------------------------------------------
# set variants
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")


@dataclass(frozen=True)
class Box:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(x) for x in self.lower)
        hi = tuple(float(x) for x in self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if len(lo) != len(hi):
            raise ValueError("box bounds must have equal length")
        for a, b in zip(lo, hi):
            if not a <= b:
                raise ValueError(f"box has empty side: lower {a} > upper {b}")


@dataclass(frozen=True)
class Polyhedron:
    A: tuple          # q x m rows, meaning A x <= b
    b: tuple

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, float))
        b = np.asarray(self.b, float).ravel()
        if A.shape[0] != b.size:
            raise ValueError("polyhedron row count mismatch")
        object.__setattr__(self, "A", tuple(tuple(row) for row in A))
        object.__setattr__(self, "b", tuple(b))
        from scipy.optimize import linprog
        res = linprog(np.zeros(A.shape[1]), A_ub=A, b_ub=b,
                      bounds=[(None, None)] * A.shape[1], method="highs")
        if not res.success:
            raise ValueError("polyhedron is empty")


@dataclass(frozen=True)
class ProductSet:
    factors: tuple

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if not self.factors:
            raise ValueError("product of no sets")


ConvexSet = object  # union documented above; runtime dispatch by isinstance


def set_dim(U) -> int:
    if isinstance(U, Ball):
        return len(U.center)
    if isinstance(U, Box):
        return len(U.lower)
    if isinstance(U, Polyhedron):
        return len(U.A[0])
    if isinstance(U, ProductSet):
        return sum(set_dim(f) for f in U.factors)
    raise TypeError(f"not a convex set: {U!r}")


def _product_slices(U: ProductSet) -> list[slice]:
    out, start = [], 0
    for f in U.factors:
        d = set_dim(f)
        out.append(slice(start, start + d))
        start += d
    return out


# ----------------------------------------------------------------------------
# distance and projection
# ----------------------------------------------------------------------------

def dist_and_project(U, u) -> tuple[float, np.ndarray]:
    u = np.asarray(u, float)
    if isinstance(U, Ball):
        c = np.asarray(U.center)
        d = u - c
        nd = float(np.linalg.norm(d))
        if nd <= U.radius:
            return 0.0, u.copy()
        proj = c + d * (U.radius / nd)
        return nd - U.radius, proj
    if isinstance(U, Box):
        proj = np.clip(u, U.lower, U.upper)
        return float(np.linalg.norm(u - proj)), proj
    if isinstance(U, Polyhedron):
        return _project_polyhedron(U, u)
    if isinstance(U, ProductSet):
        proj = np.empty_like(u)
        total = 0.0
        for f, s in zip(U.factors, _product_slices(U)):
            d, p = dist_and_project(f, u[s])
            proj[s] = p
            total += d * d
        return math.sqrt(total), proj
    raise TypeError(f"not a convex set: {U!r}")


def _project_polyhedron(U: Polyhedron, u: np.ndarray) -> tuple[float, np.ndarray]:
    """Exact projection by KKT active-set enumeration (small row counts)."""
    A = np.asarray(U.A, float)
    b = np.asarray(U.b, float)
    q, m = A.shape
    viol = A @ u - b
    if viol.max(initial=-1.0) <= 1e-12 * (1.0 + np.abs(b).max(initial=0.0)):
        return 0.0, u.copy()
    if q > 14:
        raise ValueError("polyhedron projection supports at most 14 rows")
    tol = 1e-9 * (1.0 + np.abs(b).max(initial=0.0))
    # candidate active sets, smallest first; the projection KKT point is unique
    for size in range(1, min(q, m) + 1):
        for S in itertools.combinations(range(q), size):
            As = A[list(S)]
            # x = u - As^T λ with As x = b_S  =>  (As As^T) λ = As u - b_S
            G = As @ As.T
            try:
                lam = np.linalg.solve(G, As @ u - b[list(S)])
            except np.linalg.LinAlgError:
                continue
            if lam.min() < -1e-10:
                continue
            x = u - As.T @ lam
            if (A @ x - b).max() <= tol:
                return float(np.linalg.norm(u - x)), x
    raise RuntimeError("polyhedron projection failed to locate an active set")


def contains(U, u, tol: float = MEMBER_TOL) -> bool:
    d, _ = dist_and_project(U, u)
    return d <= tol


def _require_member(U, u):
    d, _ = dist_and_project(U, u)
    if d > MEMBER_TOL:
        raise PointNotInSet(f"point {np.asarray(u).tolist()} is outside the set (dist {d:.3e})")


# ----------------------------------------------------------------------------
# active-constraint structure (rows of the local H-representations)
# ----------------------------------------------------------------------------

def _active_rows(U, u) -> tuple[np.ndarray, list[float]]:
    """Outward normals of constraints active at u, plus inactive slacks.

    Returns (rows, slacks): rows is a (k, m) array with unit-normalized
    outward normals a such that the tangent cone is {v : a·v <= 0 for all a};
    slacks lists the distances-to-activation of the inactive constraints
    (used only for margin bookkeeping).
    """
    u = np.asarray(u, float)
    if isinstance(U, Ball):
        c = np.asarray(U.center)
        d = u - c
        nd = float(np.linalg.norm(d))
        gap = U.radius - nd
        if gap <= ACT_TOL:
            return (d / max(nd, 1e-300))[None, :], []
        return np.zeros((0, u.size)), [gap]
    if isinstance(U, Box):
        rows, slacks = [], []
        for i in range(u.size):
            lo, hi = U.lower[i], U.upper[i]
            e = np.zeros(u.size)
            if u[i] - lo <= ACT_TOL:
                e[i] = -1.0
                rows.append(e.copy())
            elif math.isfinite(lo):
                slacks.append(u[i] - lo)
            e = np.zeros(u.size)
            if hi - u[i] <= ACT_TOL:
                e[i] = 1.0
                rows.append(e.copy())
            elif math.isfinite(hi):
                slacks.append(hi - u[i])
        return (np.array(rows) if rows else np.zeros((0, u.size))), slacks
    if isinstance(U, Polyhedron):
        A = np.asarray(U.A, float)
        b = np.asarray(U.b, float)
        rows, slacks = [], []
        for a, bi in zip(A, b):
            na = np.linalg.norm(a)
            if na < 1e-300:
                continue
            slack = (bi - a @ u) / na
            if slack <= ACT_TOL:
                rows.append(a / na)
            else:
                slacks.append(float(slack))
        return (np.array(rows) if rows else np.zeros((0, u.size))), slacks
    if isinstance(U, ProductSet):
        all_rows, all_slacks = [], []
        m = set_dim(U)
        for f, s in zip(U.factors, _product_slices(U)):
            rows, slacks = _active_rows(f, u[s])
            for r in rows:
                big = np.zeros(m)
                big[s] = r
                all_rows.append(big)
            all_slacks.extend(slacks)
        return (np.array(all_rows) if all_rows else np.zeros((0, m))), all_slacks
    raise TypeError(f"not a convex set: {U!r}")


# ----------------------------------------------------------------------------
# certificates
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ConeElementCertificate:
    point: tuple
    direction: tuple            # v for order 1; (v, w) flattened handled by caller
    order: int
    verdict: str                # "member" | "non-member"
    margin: float               # signed analytic slack, > 0 on the member side
    oracle_residuals: tuple = field(default_factory=tuple)  # ((h, residual), ...)

    @property
    def member(self) -> bool:
        return self.verdict == "member"


def adjacent_cone_member(U, u, v, with_oracle: bool = True) -> ConeElementCertificate:
    """First-order adjacent-cone membership of v at u, with signed margin."""
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    _require_member(U, u)
    rows, slacks = _active_rows(U, u)
    denom = max(1.0, float(np.linalg.norm(v)))
    margins = [s / denom for s in slacks]
    for a in rows:
        margins.append(float(-(a @ v)) / denom)
    margin = min(margins) if margins else math.inf
    verdict = "member" if (not rows.size or (rows @ v).max() <= 1e-12 * denom) else "non-member"
    residuals = cone_oracle(U, u, v) if with_oracle else ()
    return ConeElementCertificate(point=tuple(u), direction=tuple(v), order=1,
                                  verdict=verdict, margin=margin,
                                  oracle_residuals=tuple(residuals))


def _binding_structure(U, u, v):
    """Split active constraints by their first-order slack along v.

    Returns (binding_rows, margins, ok) where binding_rows are active
    normals with a·v = 0 (second-order relevant), margins collects the
    robustness margins contributed by strictly-inactive-along-v rows, and
    ok=False means some active row has a·v > 0 (v not in the cone).
    """
    rows, slacks = _active_rows(U, u)
    denom_v = max(1.0, float(np.linalg.norm(v)))
    binding = []
    margins = [s / denom_v for s in slacks]
    for a in rows:
        s = float(a @ v)
        if s > 1e-12 * denom_v:
            return None, None, False
        if s >= -ACT_TOL * denom_v:
            binding.append(a)
        else:
            margins.append(-s / denom_v)
    return binding, margins, True


def second_adjacent_member(U, u, v, w, with_oracle: bool = True) -> ConeElementCertificate:
    """Second-order adjacent-set membership of w at (u, v)."""
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    w = np.asarray(w, float)
    _require_member(U, u)
    binding, margins, ok = _binding_structure(U, u, v)
    if not ok:
        raise DirectionNotInCone(
            f"direction {v.tolist()} is not in the adjacent cone at {u.tolist()}")
    denom_w = max(1.0, float(np.linalg.norm(w)))
    margins = list(margins)
    if isinstance(U, Ball) or not _is_polyhedral(U):
        margins2, verdict = _second_margins_curved(U, u, v, w, binding, denom_w)
        margins.extend(margins2)
    else:
        # purely polyhedral: binding rows constrain w linearly
        for a in binding:
            margins.append(float(-(a @ w)) / denom_w)
        verdict = "member" if all(float(a @ w) <= 1e-12 * denom_w for a in binding) else "non-member"
    margin = min(margins) if margins else math.inf
    residuals = cone_oracle(U, u, v, w) if with_oracle else ()
    return ConeElementCertificate(point=tuple(u), direction=tuple(np.concatenate([v, w])),
                                  order=2, verdict=verdict, margin=margin,
                                  oracle_residuals=tuple(residuals))


def _is_polyhedral(U) -> bool:
    if isinstance(U, (Box, Polyhedron)):
        return True
    if isinstance(U, ProductSet):
        return all(_is_polyhedral(f) for f in U.factors)
    return False


def _second_margins_curved(U, u, v, w, binding, denom_w):
    """Second-order margins for sets with curved boundary pieces (balls,
    possibly inside products). Returns (margins, verdict)."""
    margins = []
    ok = True
    if isinstance(U, Ball):
        if binding:
            c = np.asarray(U.center)
            d = u - c  # |d| = radius at the boundary
            lhs = float(w @ d) + 0.5 * float(v @ v)
            m = -lhs / (U.radius * denom_w)
            margins.append(m)
            if lhs > 1e-12 * (1.0 + denom_w):
                ok = False
        return margins, ("member" if ok else "non-member")
    if isinstance(U, Box) or isinstance(U, Polyhedron):
        for a in binding:
            margins.append(float(-(a @ w)) / denom_w)
            if float(a @ w) > 1e-12 * denom_w:
                ok = False
        return margins, ("member" if ok else "non-member")
    if isinstance(U, ProductSet):
        for f, s in zip(U.factors, _product_slices(U)):
            sub_binding, sub_margins, sub_ok = _binding_structure(f, u[s], v[s])
            # v already validated jointly; per-factor re-check is consistent
            ms, verdict = _second_margins_curved(f, u[s], v[s], w[s], sub_binding, denom_w)
            margins.extend(ms)
            margins.extend(sub_margins)
            if verdict == "non-member":
                ok = False
        return margins, ("member" if ok else "non-member")
    raise TypeError(f"not a convex set: {U!r}")


def cone_oracle(U, u, v, w=None, hs=None) -> tuple:
    """Residual ladder for the sequence characterizations.

    Order 1: dist(u + h v)/h per h. Order 2: dist(u + h v + h² w)/h² per h.
    """
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    hs = DEFAULT_LADDER if hs is None else tuple(float(h) for h in hs)
    out = []
    if w is None:
        for h in hs:
            d, _ = dist_and_project(U, u + h * v)
            out.append((h, d / h))
    else:
        w = np.asarray(w, float)
        for h in hs:
            d, _ = dist_and_project(U, u + h * v + h * h * w)
            out.append((h, d / (h * h)))
    return tuple(out)


def oracle_verdict(residuals) -> str:
    """member / non-member / inconclusive from a residual ladder.

    Member residuals decay geometrically along the ladder (the distance is
    o(h) resp. o(h²)); non-member residuals stabilize at a positive limit —
    possibly approaching it from above — so the discriminator is the decay
    rate over the last rungs, not monotonicity alone.
    """
    res = [r for _, r in residuals]
    if len(res) < 3:
        return "inconclusive"
    if res[-1] < 1e-12:
        return "member"
    tail = res[-3:]
    decreasing = tail[2] <= tail[1] + 1e-15 and tail[1] <= tail[0] + 1e-15
    if res[-1] < ORACLE_TOL and decreasing:
        return "member"
    stabilized = res[-1] > 0.7 * res[-3]  # two rungs of member decay would leave < 0.3x
    if res[-1] >= ORACLE_TOL and stabilized:
        return "non-member"
    return "inconclusive"


# ----------------------------------------------------------------------------
# V-representations of the cones
# ----------------------------------------------------------------------------

def tangent_cone_vrep(U, u) -> ConeVRep:
    """V-representation (lineality + extreme rays) of the adjacent cone at u."""
    u = np.asarray(u, float)
    _require_member(U, u)
    m = u.size
    rows, _ = _active_rows(U, u)
    if rows.size == 0:
        return ConeVRep(dim=m, lineality=np.eye(m), rays=np.zeros((0, m)))
    return extreme_rays(rows, None, m)


def second_cone_vrep(U, u, v) -> tuple[np.ndarray, ConeVRep]:
    """Affine V-representation (base point + recession cone) of the
    second-order adjacent set at (u, v)."""
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    _require_member(U, u)
    m = u.size
    binding, _, ok = _binding_structure(U, u, v)
    if not ok:
        raise DirectionNotInCone(
            f"direction {v.tolist()} is not in the adjacent cone at {u.tolist()}")
    if isinstance(U, Ball):
        if not binding:
            return np.zeros(m), ConeVRep(dim=m, lineality=np.eye(m), rays=np.zeros((0, m)))
        d = u - np.asarray(U.center)
        p0 = -(0.5 * float(v @ v) / float(d @ d)) * d  # <p0, d> = -|v|^2/2
        cone = extreme_rays(d[None, :], None, m)
        return p0, cone
    if isinstance(U, (Box, Polyhedron)):
        if not binding:
            return np.zeros(m), ConeVRep(dim=m, lineality=np.eye(m), rays=np.zeros((0, m)))
        return np.zeros(m), extreme_rays(np.array(binding), None, m)
    if isinstance(U, ProductSet):
        p0 = np.zeros(m)
        lin_rows, ray_rows = [], []
        for f, s in zip(U.factors, _product_slices(U)):
            sub_p0, sub = second_cone_vrep(f, u[s], v[s])
            p0[s] = sub_p0
            for l in sub.lineality:
                big = np.zeros(m)
                big[s] = l
                lin_rows.append(big)
            for r in sub.rays:
                big = np.zeros(m)
                big[s] = r
                ray_rows.append(big)
        lin = np.array(lin_rows) if lin_rows else np.zeros((0, m))
        rays = np.array(ray_rows) if ray_rows else np.zeros((0, m))
        return p0, ConeVRep(dim=m, lineality=lin, rays=rays)
    raise TypeError(f"not a convex set: {U!r}")


# ----------------------------------------------------------------------------
# quadratic distance bound and the ε-lift
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadraticBoundResult:
    ell: tuple            # per-node bound values (may contain inf)
    passed: bool
    norm: float           # discrete mean-square norm of ell (inf if failed)

    def __iter__(self):   # allows tuple-unpacking (ell, passed)
        yield np.asarray(self.ell)
        yield self.passed


def quadratic_distance_bound(U, u_seq, v_seq, eps0: float) -> QuadraticBoundResult:
    """Node-wise ℓ_i = sup_{ε ≤ ε₀} dist(u_i + ε v_i)/ε², with divergence
    detection: a node whose residuals grow as ε shrinks is reported as inf."""
    u_seq = np.atleast_2d(np.asarray(u_seq, float))
    v_seq = np.atleast_2d(np.asarray(v_seq, float))
    if u_seq.shape != v_seq.shape:
        raise ValueError("u and v sequences must have equal shapes")
    for i, u in enumerate(u_seq):
        if not contains(U, u, tol=1e-9):
            raise PointNotInSet(f"grid node {i}: control outside the set")
    eps = np.geomspace(1e-3 * eps0, eps0, 32)
    ells = []
    for u, v in zip(u_seq, v_seq):
        vals = np.array([dist_and_project(U, u + e * v)[0] / (e * e) for e in eps])
        increasing_tail = vals[2] < vals[1] < vals[0]  # eps sorted ascending: vals[0] is smallest ε
        diverges = increasing_tail and vals[0] > 1.5 * vals[-1] and vals[0] > 1e-9
        ells.append(math.inf if diverges else float(vals.max()))
    ells_arr = np.asarray(ells)
    passed = bool(np.all(np.isfinite(ells_arr)))
    nrm = float(np.sqrt(np.mean(ells_arr ** 2))) if passed else math.inf
    return QuadraticBoundResult(ell=tuple(ells), passed=passed, norm=nrm)


def lift_sigma(U, u_seq, v_seq, sigma_seq, eps: float):
    """σ_ε,i = (proj_U(u_i + ε v_i + ε² σ_i) − u_i − ε v_i)/ε².

    Checks σ_i ∈ second-order adjacent set pointwise, then verifies the
    discrete norm bound ‖σ_ε‖ ≤ ‖ℓ‖ + 2‖σ‖ with ℓ from
    quadratic_distance_bound at ε₀ = ε.
    """
    u_seq = np.atleast_2d(np.asarray(u_seq, float))
    v_seq = np.atleast_2d(np.asarray(v_seq, float))
    sigma_seq = np.atleast_2d(np.asarray(sigma_seq, float))
    for i, (u, v, s) in enumerate(zip(u_seq, v_seq, sigma_seq)):
        cert = second_adjacent_member(U, u, v, s, with_oracle=False)
        if not cert.member:
            raise DirectionNotInCone(
                f"grid node {i}: sigma is not in the second-order adjacent set "
                f"(margin {cert.margin:.3e})")
    bound = quadratic_distance_bound(U, u_seq, v_seq, eps0=eps)
    if not bound.passed:
        raise BoundViolated("quadratic distance bound diverges on some node")
    out = np.empty_like(sigma_seq)
    for i, (u, v, s) in enumerate(zip(u_seq, v_seq, sigma_seq)):
        _, p = dist_and_project(U, u + eps * v + eps * eps * s)
        out[i] = (p - u - eps * v) / (eps * eps)
    norm_sig_eps = float(np.sqrt(np.mean(np.sum(out ** 2, axis=1))))
    norm_sig = float(np.sqrt(np.mean(np.sum(sigma_seq ** 2, axis=1))))
    limit = bound.norm + 2.0 * norm_sig + 1e-9
    if norm_sig_eps > limit:
        raise BoundViolated(
            f"lifted controls violate the norm bound: {norm_sig_eps:.6g} > {limit:.6g}")
    return out
