"""Control-system integration on chart-described manifolds.

Forward state integration, first/second variational fields along a nominal
trajectory, backward adjoint covectors, Hamiltonian derivative blocks with
covariant corrections, and the second-order expansion residual used by
refutation certificates.

Controls are piecewise constant on a uniform grid; every integrator takes a
single classical RK4 step per grid cell, so variational fields produced by
the coupled integrators are the *exact* derivatives of the discrete flow.
Covariant ODEs are solved componentwise in the chart: for the first-order
field and the adjoint the Christoffel terms cancel identically against the
connection part of the covariant state Jacobian (both reduce to the plain
linearized/adjoint systems), while the second-order field Y is recovered
from a plain-coordinate integration B via Y = B + Γ(X, X)/2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cones import Box
from .errors import (BasePointMismatch, BoundViolated, ChartEscape, NocError,
                     NonFiniteState)
from .expr import compile_expr, parse_expr
from .geometry import (CotangentVector, ManifoldChart, TangentVector,
                       christoffel, christoffel_apply, dchristoffel, exp_map,
                       log_map, musical_dual, norm, parallel_transport,
                       riemann_apply, valid_point)

__all__ = [
    "ControlProblem", "DynamicsModel", "EndpointMap", "FieldAlongCurve",
    "LagrangeData", "Trajectory", "builtin_dynamics", "dynamics_from_callbacks",
    "dynamics_from_expressions", "endpoint_from_expressions", "endpoint_map",
    "expansion_residual", "hamiltonian", "hamiltonian_blocks",
    "integrate_adjoint", "integrate_second_variation", "integrate_state",
    "integrate_variational", "lagrange_data", "make_problem",
    "refine_controls", "trajectory_from_csv", "trajectory_to_csv",
    "trapezoid_cellwise", "trapezoid_quadrature",
]

# finite-difference steps for missing derivative callbacks
_FD1_SCALE = 1e-6   # first derivatives
_FD2_SCALE = 1e-4   # second derivatives (wider step keeps the quotient conditioned)


def _fd_step(x, scale: float) -> float:
    return scale * (1.0 + float(np.max(np.abs(x), initial=0.0)))


# ----------------------------------------------------------------------------
# dynamics models
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DynamicsModel:
    """Right-hand side ydot = f(t, y, u) together with derivative blocks.

    Array index conventions::

        rhs(t, y, u)    -> (n,)    chart components of a tangent vector at y
        rhs_y[k, i]     = d f^k / d y_i        (n, n)
        rhs_u[k, a]     = d f^k / d u_a        (n, m)
        rhs_yy[k, i, j] = d2 f^k / d y_i d y_j (n, n, n)
        rhs_yu[k, i, a] = d2 f^k / d y_i d u_a (n, n, m)
        rhs_uu[k, a, b] = d2 f^k / d u_a d u_b (n, m, m)
    """

    state_dim: int
    control_dim: int
    rhs: Callable
    rhs_y: Callable
    rhs_u: Callable
    rhs_yy: Callable
    rhs_yu: Callable
    rhs_uu: Callable
    supplied: frozenset
    label: str = "custom"


def _fd_first_block(fun, t, y, u, wrt: str):
    """Central-difference Jacobian of fun in y or u, columns indexed by the
    perturbed coordinate."""
    base = y if wrt == "y" else u
    h = _fd_step(base, _FD1_SCALE)
    cols = []
    for i in range(base.size):
        e = np.zeros(base.size)
        e[i] = h
        if wrt == "y":
            cols.append((fun(t, y + e, u) - fun(t, y - e, u)) / (2 * h))
        else:
            cols.append((fun(t, y, u + e) - fun(t, y, u - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def _fd_second_block(fun, t, y, u, wrt: str):
    """Central second differences of fun; wrt in {"yy", "yu", "uu"}."""
    n, m = y.size, u.size

    def at(dy, du):
        return fun(t, y + dy, u + du)

    if wrt == "yy":
        h = _fd_step(y, _FD2_SCALE)
        out = np.empty((fun(t, y, u).size, n, n))
        for i in range(n):
            for j in range(i, n):
                ei = np.zeros(n); ei[i] = h
                ej = np.zeros(n); ej[j] = h
                if i == j:
                    val = (at(ei, 0) - 2 * at(ei * 0, 0) + at(-ei, 0)) / (h * h)
                else:
                    val = (at(ei + ej, 0) - at(ei - ej, 0)
                           - at(-ei + ej, 0) + at(-ei - ej, 0)) / (4 * h * h)
                out[:, i, j] = val
                out[:, j, i] = val
        return out
    if wrt == "uu":
        h = _fd_step(u, _FD2_SCALE)
        out = np.empty((fun(t, y, u).size, m, m))
        for a in range(m):
            for b in range(a, m):
                ea = np.zeros(m); ea[a] = h
                eb = np.zeros(m); eb[b] = h
                if a == b:
                    val = (at(0, ea) - 2 * at(0, ea * 0) + at(0, -ea)) / (h * h)
                else:
                    val = (at(0, ea + eb) - at(0, ea - eb)
                           - at(0, -ea + eb) + at(0, -ea - eb)) / (4 * h * h)
                out[:, a, b] = val
                out[:, b, a] = val
        return out
    hy = _fd_step(y, _FD2_SCALE)
    hu = _fd_step(u, _FD2_SCALE)
    out = np.empty((fun(t, y, u).size, n, m))
    for i in range(n):
        for a in range(m):
            ei = np.zeros(n); ei[i] = hy
            ea = np.zeros(m); ea[a] = hu
            out[:, i, a] = (at(ei, ea) - at(ei, -ea)
                            - at(-ei, ea) + at(-ei, -ea)) / (4 * hy * hu)
    return out


def dynamics_from_callbacks(state_dim: int, control_dim: int, rhs,
                            rhs_y=None, rhs_u=None, rhs_yy=None, rhs_yu=None,
                            rhs_uu=None, label: str = "custom") -> DynamicsModel:
    """Wrap a right-hand-side callback; missing derivative blocks fall back
    to central finite differences."""
    supplied = frozenset(
        name for name, cb in [("rhs_y", rhs_y), ("rhs_u", rhs_u),
                              ("rhs_yy", rhs_yy), ("rhs_yu", rhs_yu),
                              ("rhs_uu", rhs_uu)]
        if cb is not None)

    def wrap(t, y, u):
        return np.asarray(rhs(t, np.asarray(y, float), np.asarray(u, float)), float)

    fy = rhs_y or (lambda t, y, u: _fd_first_block(wrap, t, np.asarray(y, float),
                                                   np.asarray(u, float), "y"))
    fu = rhs_u or (lambda t, y, u: _fd_first_block(wrap, t, np.asarray(y, float),
                                                   np.asarray(u, float), "u"))
    fyy = rhs_yy or (lambda t, y, u: _fd_second_block(wrap, t, np.asarray(y, float),
                                                      np.asarray(u, float), "yy"))
    fyu = rhs_yu or (lambda t, y, u: _fd_second_block(wrap, t, np.asarray(y, float),
                                                      np.asarray(u, float), "yu"))
    fuu = rhs_uu or (lambda t, y, u: _fd_second_block(wrap, t, np.asarray(y, float),
                                                      np.asarray(u, float), "uu"))
    return DynamicsModel(state_dim=state_dim, control_dim=control_dim, rhs=wrap,
                         rhs_y=fy, rhs_u=fu, rhs_yy=fyy, rhs_yu=fyu, rhs_uu=fuu,
                         supplied=supplied, label=label)


def dynamics_from_expressions(texts, state_dim: int, control_dim: int,
                              label: str = "expression") -> DynamicsModel:
    """Build a model from one expression string per state component.

    Allowed variables: ``t``, ``y1..yn``, ``u1..um``. All derivative blocks
    are produced by exact symbolic differentiation and compiled.
    """
    n, m = state_dim, control_dim
    ynames = tuple(f"y{i + 1}" for i in range(n))
    unames = tuple(f"u{a + 1}" for a in range(m))
    names = ("t",) + ynames + unames
    if len(texts) != n:
        raise ValueError(f"expected {n} component expressions, got {len(texts)}")
    exprs = [parse_expr(s, allowed_vars=set(names)) for s in texts]

    def comp(e):
        return compile_expr(e, names)

    f_fn = [comp(e) for e in exprs]
    fy_fn = [[comp(e.diff(yn)) for yn in ynames] for e in exprs]
    fu_fn = [[comp(e.diff(un)) for un in unames] for e in exprs]
    fyy_fn = [[[comp(e.diff(a).diff(b)) for b in ynames] for a in ynames] for e in exprs]
    fyu_fn = [[[comp(e.diff(a).diff(b)) for b in unames] for a in ynames] for e in exprs]
    fuu_fn = [[[comp(e.diff(a).diff(b)) for b in unames] for a in unames] for e in exprs]

    def args_of(t, y, u):
        return (t, *np.asarray(y, float), *np.asarray(u, float))

    def rhs(t, y, u):
        a = args_of(t, y, u)
        return np.array([fn(*a) for fn in f_fn], float)

    def block1(fns, rows, cols):
        def cb(t, y, u):
            a = args_of(t, y, u)
            return np.array([[fns[k][i](*a) for i in range(cols)]
                             for k in range(rows)], float)
        return cb

    def block2(fns, rows, d1, d2):
        def cb(t, y, u):
            a = args_of(t, y, u)
            return np.array([[[fns[k][i][j](*a) for j in range(d2)]
                              for i in range(d1)] for k in range(rows)], float)
        return cb

    return DynamicsModel(
        state_dim=n, control_dim=m, rhs=rhs,
        rhs_y=block1(fy_fn, n, n), rhs_u=block1(fu_fn, n, m),
        rhs_yy=block2(fyy_fn, n, n, n), rhs_yu=block2(fyu_fn, n, n, m),
        rhs_uu=block2(fuu_fn, n, m, m),
        supplied=frozenset({"rhs_y", "rhs_u", "rhs_yy", "rhs_yu", "rhs_uu"}),
        label=label)


def builtin_dynamics(name: str, **params) -> DynamicsModel:
    """Named example systems usable from problem files and presets.

    - ``ccs126``: planar system ydot1 = u2, ydot2 = -y1^2 + 4 y1 u2 - theta u1^2
      (parameter ``theta``, default 3).
    - ``linear``: ydot = A y + B u (parameters ``a``, ``b`` as matrices).
    """
    if name == "ccs126":
        theta = float(params.pop("theta", 3.0))
        if params:
            raise ValueError(f"unknown parameters for ccs126: {sorted(params)}")
        return dynamics_from_expressions(
            ("u2", f"-y1^2 + 4*y1*u2 - {theta!r}*u1^2"), 2, 2, label="ccs126")
    if name == "linear":
        A = np.asarray(params.pop("a"), float)
        B = np.asarray(params.pop("b"), float)
        if params:
            raise ValueError(f"unknown parameters for linear: {sorted(params)}")
        if A.ndim != 2 or A.shape[0] != A.shape[1] or B.ndim != 2 or B.shape[0] != A.shape[0]:
            raise ValueError("linear dynamics need square a and conforming b")
        n, m = B.shape
        return DynamicsModel(
            state_dim=n, control_dim=m,
            rhs=lambda t, y, u: A @ np.asarray(y, float) + B @ np.asarray(u, float),
            rhs_y=lambda t, y, u: A.copy(),
            rhs_u=lambda t, y, u: B.copy(),
            rhs_yy=lambda t, y, u: np.zeros((n, n, n)),
            rhs_yu=lambda t, y, u: np.zeros((n, n, m)),
            rhs_uu=lambda t, y, u: np.zeros((n, m, m)),
            supplied=frozenset({"rhs_y", "rhs_u", "rhs_yy", "rhs_yu", "rhs_uu"}),
            label="linear")
    raise ValueError(f"unknown builtin dynamics {name!r}")


# ----------------------------------------------------------------------------
# endpoint maps and problems
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EndpointMap:
    """Scalar function g(y_start, y_end) of the two trajectory endpoints.

    ``grad`` returns the pair of plain coordinate gradients, ``hess`` the
    plain coordinate Hessian blocks (h11, h12, h22) with
    h12[i, j] = d2 g / d y_start_i d y_end_j. Covariant corrections are the
    caller's business (see lagrange_data).
    """

    value: Callable
    grad: Callable
    hess: Callable
    supplied: frozenset
    label: str = "endpoint"


def endpoint_map(value, grad=None, hess=None, label: str = "endpoint") -> EndpointMap:
    supplied = frozenset(n for n, cb in [("grad", grad), ("hess", hess)] if cb is not None)

    def val(y0, yT):
        return float(value(np.asarray(y0, float), np.asarray(yT, float)))

    def fd_grad(y0, yT):
        y0 = np.asarray(y0, float)
        yT = np.asarray(yT, float)
        h0 = _fd_step(y0, _FD1_SCALE)
        hT = _fd_step(yT, _FD1_SCALE)
        g1 = np.empty(y0.size)
        g2 = np.empty(yT.size)
        for i in range(y0.size):
            e = np.zeros(y0.size); e[i] = h0
            g1[i] = (val(y0 + e, yT) - val(y0 - e, yT)) / (2 * h0)
        for i in range(yT.size):
            e = np.zeros(yT.size); e[i] = hT
            g2[i] = (val(y0, yT + e) - val(y0, yT - e)) / (2 * hT)
        return g1, g2

    def fd_hess(y0, yT):
        y0 = np.asarray(y0, float)
        yT = np.asarray(yT, float)
        joint = np.concatenate([y0, yT])
        n0 = y0.size
        h = _fd_step(joint, _FD2_SCALE)

        def at(d):
            z = joint + d
            return val(z[:n0], z[n0:])

        dim = joint.size
        H = np.empty((dim, dim))
        for i in range(dim):
            for j in range(i, dim):
                ei = np.zeros(dim); ei[i] = h
                ej = np.zeros(dim); ej[j] = h
                if i == j:
                    H[i, i] = (at(ei) - 2 * at(ei * 0) + at(-ei)) / (h * h)
                else:
                    H[i, j] = H[j, i] = (at(ei + ej) - at(ei - ej)
                                         - at(-ei + ej) + at(-ei - ej)) / (4 * h * h)
        return H[:n0, :n0], H[:n0, n0:], H[n0:, n0:]

    return EndpointMap(value=val, grad=grad or fd_grad, hess=hess or fd_hess,
                       supplied=supplied, label=label)


def endpoint_from_expressions(text: str, state_dim: int,
                              start_prefix: str = "y0", end_prefix: str = "yT",
                              label: str = "endpoint") -> EndpointMap:
    """Endpoint scalar from an expression in y01..y0n (start) and yT1..yTn (end)."""
    n = state_dim
    names = tuple(f"{start_prefix}{i + 1}" for i in range(n)) + \
        tuple(f"{end_prefix}{i + 1}" for i in range(n))
    e = parse_expr(text, allowed_vars=set(names))
    fn = compile_expr(e, names)
    g_fns = [compile_expr(e.diff(v), names) for v in names]
    h_fns = [[compile_expr(e.diff(a).diff(b), names) for b in names] for a in names]

    def value(y0, yT):
        return float(fn(*np.asarray(y0, float), *np.asarray(yT, float)))

    def grad(y0, yT):
        a = (*np.asarray(y0, float), *np.asarray(yT, float))
        g = np.array([f(*a) for f in g_fns], float)
        return g[:n], g[n:]

    def hess(y0, yT):
        a = (*np.asarray(y0, float), *np.asarray(yT, float))
        H = np.array([[f(*a) for f in row] for row in h_fns], float)
        return H[:n, :n], H[:n, n:], H[n:, n:]

    return EndpointMap(value=value, grad=grad, hess=hess,
                       supplied=frozenset({"grad", "hess"}), label=label)


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """A control system with endpoint cost/constraints and a control set.

    Multiplier vectors are laid out cost-first:
    (weight on cost, weights on inequality maps, weights on equality rows).
    """

    chart: ManifoldChart
    horizon: float
    dynamics: DynamicsModel
    cost: EndpointMap
    inequality_maps: tuple
    equality_maps: tuple
    control_set: object

    @property
    def state_dim(self) -> int:
        return self.dynamics.state_dim

    @property
    def control_dim(self) -> int:
        return self.dynamics.control_dim

    @property
    def num_inequalities(self) -> int:
        return len(self.inequality_maps)

    @property
    def num_equalities(self) -> int:
        return len(self.equality_maps)

    @property
    def multiplier_dim(self) -> int:
        return 1 + self.num_inequalities + self.num_equalities

    @property
    def endpoint_maps(self) -> tuple:
        return (self.cost,) + tuple(self.inequality_maps) + tuple(self.equality_maps)


def _validate_dynamics(problem: ControlProblem, probe_base, rng, tol: float):
    dyn = problem.dynamics
    n, m = dyn.state_dim, dyn.control_dim
    checks = [
        ("rhs_y", dyn.rhs_y, lambda t, y, u: _fd_first_block(dyn.rhs, t, y, u, "y")),
        ("rhs_u", dyn.rhs_u, lambda t, y, u: _fd_first_block(dyn.rhs, t, y, u, "u")),
        ("rhs_yy", dyn.rhs_yy, lambda t, y, u: _fd_second_block(dyn.rhs, t, y, u, "yy")),
        ("rhs_yu", dyn.rhs_yu, lambda t, y, u: _fd_second_block(dyn.rhs, t, y, u, "yu")),
        ("rhs_uu", dyn.rhs_uu, lambda t, y, u: _fd_second_block(dyn.rhs, t, y, u, "uu")),
    ]
    for _ in range(20):
        t = rng.uniform(0.0, problem.horizon)
        for _ in range(40):
            y = probe_base + 0.1 * rng.standard_normal(n)
            if valid_point(problem.chart, y):
                break
        else:
            raise NocError("could not sample valid probe points near probe_base")
        u = 0.5 * rng.standard_normal(m)
        for name, cb, ref in checks:
            a = np.asarray(cb(t, y, u), float)
            b = ref(t, y, u)
            scale = 1.0 + float(np.max(np.abs(b)))
            if np.max(np.abs(a - b)) > tol * scale:
                raise NocError(
                    f"dynamics block {name} disagrees with central differences "
                    f"by {np.max(np.abs(a - b)):.3e} (tol {tol * scale:.3e})")


def _validate_endpoints(problem: ControlProblem, probe_base, rng, tol: float):
    n = problem.state_dim
    for ep in problem.endpoint_maps:
        fd = endpoint_map(ep.value)
        for _ in range(6):
            for _ in range(40):
                y0 = probe_base + 0.1 * rng.standard_normal(n)
                yT = probe_base + 0.1 * rng.standard_normal(n)
                if valid_point(problem.chart, y0) and valid_point(problem.chart, yT):
                    break
            else:
                raise NocError("could not sample valid probe points near probe_base")
            g1, g2 = ep.grad(y0, yT)
            r1, r2 = fd.grad(y0, yT)
            h = ep.hess(y0, yT)
            rh = fd.hess(y0, yT)
            pairs = list(zip((g1, g2, *h), (r1, r2, *rh)))
            for a, b in pairs:
                a = np.asarray(a, float)
                b = np.asarray(b, float)
                scale = 1.0 + float(np.max(np.abs(b)))
                if np.max(np.abs(a - b)) > tol * scale:
                    raise NocError(
                        f"endpoint map {ep.label!r} derivative disagrees with "
                        f"central differences by {np.max(np.abs(a - b)):.3e}")


def make_problem(chart: ManifoldChart, horizon: float, dynamics: DynamicsModel,
                 cost: EndpointMap, inequality_maps=(), equality_maps=(),
                 control_set=None, validate: bool = True, probe_base=None,
                 seed: int = 0) -> ControlProblem:
    """Assemble and (by default) validate a ControlProblem.

    Validation probes every derivative block against independent central
    differences at random points near ``probe_base`` (default: chart origin)
    and requires agreement within 1e-4 relative.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if dynamics.state_dim != chart.dim:
        raise ValueError("dynamics state dimension does not match the chart")
    if control_set is None:
        m = dynamics.control_dim
        control_set = Box(lower=tuple(-math.inf for _ in range(m)),
                          upper=tuple(math.inf for _ in range(m)))
    problem = ControlProblem(chart=chart, horizon=float(horizon), dynamics=dynamics,
                             cost=cost, inequality_maps=tuple(inequality_maps),
                             equality_maps=tuple(equality_maps), control_set=control_set)
    if validate:
        base = np.zeros(chart.dim) if probe_base is None else np.asarray(probe_base, float)
        if not valid_point(chart, base):
            raise NocError("probe_base is not a valid chart point; pass one explicitly")
        rng = np.random.default_rng(seed)
        _validate_dynamics(problem, base, rng, tol=1e-4)
        _validate_endpoints(problem, base, rng, tol=1e-4)
    return problem


# ----------------------------------------------------------------------------
# trajectories and fields
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Trajectory:
    chart: ManifoldChart
    grid: np.ndarray      # (N+1,)
    states: np.ndarray    # (N+1, n)
    controls: np.ndarray  # (N, m), constant on [t_i, t_{i+1})

    @property
    def num_cells(self) -> int:
        return self.controls.shape[0]

    @property
    def step(self) -> float:
        return float(self.grid[-1] - self.grid[0]) / self.num_cells


@dataclass(frozen=True, eq=False)
class FieldAlongCurve:
    """One vector (or covector) per grid node, based at the matching state."""

    trajectory: Trajectory
    values: np.ndarray     # (N+1, n)
    kind: str              # "tangent" | "cotangent"

    def at(self, i: int):
        base = self.trajectory.states[i]
        if self.kind == "cotangent":
            return CotangentVector(base=base, components=self.values[i])
        return TangentVector(base=base, components=self.values[i])


def _rk4_step(fun, t, z, h):
    k1 = fun(t, z)
    k2 = fun(t + 0.5 * h, z + (0.5 * h) * k1)
    k3 = fun(t + 0.5 * h, z + (0.5 * h) * k2)
    k4 = fun(t + h, z + h * k3)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_controls(problem: ControlProblem, controls) -> np.ndarray:
    controls = np.asarray(controls, float)
    if controls.ndim != 2 or controls.shape[1] != problem.control_dim:
        raise ValueError(
            f"controls must have shape (N, {problem.control_dim}), got {controls.shape}")
    if controls.shape[0] < 1:
        raise ValueError("need at least one grid cell")
    if not np.all(np.isfinite(controls)):
        raise NonFiniteState("controls contain non-finite entries")
    return controls


def _start_components(trajectory: Trajectory, vec, what: str) -> np.ndarray:
    n = trajectory.states.shape[1]
    if isinstance(vec, (TangentVector, CotangentVector)):
        base = np.asarray(vec.base, float)
        y0 = trajectory.states[0]
        if base.shape != y0.shape or not np.allclose(base, y0, rtol=0.0,
                                                     atol=1e-9 * (1.0 + np.abs(y0).max())):
            raise BasePointMismatch(f"{what} must be based at the initial state")
        c = np.asarray(vec.components, float)
    else:
        c = np.asarray(vec, float)
    if c.shape != (n,):
        raise ValueError(f"{what} must have {n} components")
    return c


def integrate_state(problem: ControlProblem, start_point, controls) -> Trajectory:
    """One classical RK4 step per grid cell; the grid size is the number of
    control rows."""
    controls = _check_controls(problem, controls)
    y = np.asarray(start_point, float).copy()
    if y.shape != (problem.state_dim,):
        raise ValueError(f"start point must have {problem.state_dim} coordinates")
    if not valid_point(problem.chart, y):
        raise ChartEscape("start point is outside the chart domain")
    N = controls.shape[0]
    grid = np.linspace(0.0, problem.horizon, N + 1)
    h = problem.horizon / N
    states = np.empty((N + 1, problem.state_dim))
    states[0] = y
    rhs = problem.dynamics.rhs
    for i in range(N):
        u = controls[i]
        y = _rk4_step(lambda t, z: rhs(t, z, u), grid[i], y, h)
        if not np.all(np.isfinite(y)):
            raise NonFiniteState(f"state became non-finite in cell {i}")
        if not valid_point(problem.chart, y):
            raise ChartEscape(f"state left the chart domain in cell {i}")
        states[i + 1] = y
    return Trajectory(chart=problem.chart, grid=grid, states=states, controls=controls)


def _check_direction_shape(trajectory: Trajectory, directions) -> np.ndarray:
    directions = np.asarray(directions, float)
    if directions.shape != trajectory.controls.shape:
        raise ValueError(
            f"control directions must match the control array shape "
            f"{trajectory.controls.shape}, got {directions.shape}")
    return directions


def integrate_variational(problem: ControlProblem, trajectory: Trajectory,
                          control_directions, start_vector) -> FieldAlongCurve:
    """First-order response X of the flow to (start_vector, control_directions).

    Coupled (y, X) RK4 with shared stages: X is the exact derivative of the
    discrete flow. In the chart the connection terms of the covariant
    variational equation cancel, leaving Xdot = f_y X + f_u v.
    """
    v_seq = _check_direction_shape(trajectory, control_directions)
    X = _start_components(trajectory, start_vector, "start vector")
    dyn = problem.dynamics
    n = problem.state_dim
    N = trajectory.num_cells
    h = trajectory.step
    values = np.empty((N + 1, n))
    values[0] = X
    for i in range(N):
        u = trajectory.controls[i]
        v = v_seq[i]

        def fun(t, z):
            y, Xc = z[:n], z[n:]
            return np.concatenate([dyn.rhs(t, y, u),
                                   dyn.rhs_y(t, y, u) @ Xc + dyn.rhs_u(t, y, u) @ v])

        z = _rk4_step(fun, trajectory.grid[i], np.concatenate([trajectory.states[i], X]), h)
        if not np.all(np.isfinite(z)):
            raise NonFiniteState(f"variational field became non-finite in cell {i}")
        X = z[n:]
        values[i + 1] = X
    return FieldAlongCurve(trajectory=trajectory, values=values, kind="tangent")


def integrate_second_variation(problem: ControlProblem, trajectory: Trajectory,
                               control_directions, first_field: FieldAlongCurve,
                               control_accelerations, start_acceleration) -> FieldAlongCurve:
    """Second-order field Y along the trajectory.

    Solves the plain-coordinate system for B (exact one-half second
    derivative of the discrete flow) and restores the covariant field via
    Y(t) = B(t) + Γ_{y(t)}(X(t), X(t))/2 with B(0) = W - Γ_{y(0)}(X0, X0)/2,
    which is equivalent to the curvature-corrected covariant ODE for Y.
    """
    v_seq = _check_direction_shape(trajectory, control_directions)
    s_seq = _check_direction_shape(trajectory, control_accelerations)
    W = _start_components(trajectory, start_acceleration, "start acceleration")
    dyn = problem.dynamics
    chart = problem.chart
    n = problem.state_dim
    N = trajectory.num_cells
    h = trajectory.step
    X0 = first_field.values[0]
    B = W - 0.5 * christoffel_apply(chart, trajectory.states[0], X0, X0)
    Bs = np.empty((N + 1, n))
    Bs[0] = B
    X = X0.copy()
    for i in range(N):
        u = trajectory.controls[i]
        v = v_seq[i]
        s = s_seq[i]

        def fun(t, z):
            y, Xc, Bc = z[:n], z[n:2 * n], z[2 * n:]
            fy = dyn.rhs_y(t, y, u)
            Bdot = (fy @ Bc + dyn.rhs_u(t, y, u) @ s
                    + np.einsum("kia,i,a->k", dyn.rhs_yu(t, y, u), Xc, v)
                    + 0.5 * np.einsum("kij,i,j->k", dyn.rhs_yy(t, y, u), Xc, Xc)
                    + 0.5 * np.einsum("kab,a,b->k", dyn.rhs_uu(t, y, u), v, v))
            return np.concatenate([dyn.rhs(t, y, u),
                                   fy @ Xc + dyn.rhs_u(t, y, u) @ v, Bdot])

        z0 = np.concatenate([trajectory.states[i], first_field.values[i], B])
        z = _rk4_step(fun, trajectory.grid[i], z0, h)
        if not np.all(np.isfinite(z)):
            raise NonFiniteState(f"second-order field became non-finite in cell {i}")
        X, B = z[n:2 * n], z[2 * n:]
        drift = np.max(np.abs(X - first_field.values[i + 1]))
        if drift > 1e-8 * (1.0 + np.max(np.abs(first_field.values))):
            raise NocError(
                "first_field is not the variational field of the given directions "
                f"(drift {drift:.3e} in cell {i})")
        Bs[i + 1] = B
    if chart.kind == "euclidean":
        values = Bs
    else:
        values = np.array([Bs[i] + 0.5 * christoffel_apply(chart, trajectory.states[i],
                                                           first_field.values[i],
                                                           first_field.values[i])
                           for i in range(N + 1)])
    return FieldAlongCurve(trajectory=trajectory, values=values, kind="tangent")


def integrate_adjoint(problem: ControlProblem, trajectory: Trajectory,
                      multiplier) -> FieldAlongCurve:
    """Backward covector field with terminal value = endpoint-gradient of the
    weighted endpoint aggregate at the terminal slot.

    Per cell the pair (y, p) is re-integrated backwards from the stored node
    state, so the stage states track the forward pass to RK4 accuracy. The
    connection terms cancel in the chart, leaving pdot = -f_y^T p.
    """
    data = lagrange_data(problem, trajectory.states[0], trajectory.states[-1], multiplier)
    dyn = problem.dynamics
    n = problem.state_dim
    N = trajectory.num_cells
    h = trajectory.step
    values = np.empty((N + 1, n))
    p = np.asarray(data.grad_end, float).copy()
    values[N] = p
    for i in range(N - 1, -1, -1):
        u = trajectory.controls[i]

        def fun(t, z):
            y, pc = z[:n], z[n:]
            return np.concatenate([dyn.rhs(t, y, u), -dyn.rhs_y(t, y, u).T @ pc])

        z = _rk4_step(fun, trajectory.grid[i + 1],
                      np.concatenate([trajectory.states[i + 1], p]), -h)
        p = z[n:]
        if not np.all(np.isfinite(p)):
            raise NonFiniteState(f"adjoint became non-finite in cell {i}")
        values[i] = p
    return FieldAlongCurve(trajectory=trajectory, values=values, kind="cotangent")


# ----------------------------------------------------------------------------
# endpoint aggregate (weighted cost/constraint data)
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LagrangeData:
    """Weighted endpoint aggregate: value, gradients, covariant Hessians.

    Gradients are plain coordinate gradients (the differential of a scalar
    is already covariant); the two diagonal Hessian blocks carry the
    -Γ^k_{ij} d_k correction that turns coordinate Hessians into Hessians
    along geodesics.
    """

    multiplier: np.ndarray
    value: float
    grad_start: np.ndarray
    grad_end: np.ndarray
    hess_start_start: np.ndarray
    hess_start_end: np.ndarray   # [i, j] = start_i x end_j
    hess_end_end: np.ndarray


def lagrange_data(problem: ControlProblem, start_point, end_point,
                  multiplier) -> LagrangeData:
    ell = np.asarray(multiplier, float)
    if ell.shape != (problem.multiplier_dim,):
        raise ValueError(
            f"multiplier must have {problem.multiplier_dim} entries "
            f"(cost, {problem.num_inequalities} inequalities, "
            f"{problem.num_equalities} equalities)")
    y0 = np.asarray(start_point, float)
    yT = np.asarray(end_point, float)
    n = problem.state_dim
    value = 0.0
    g1 = np.zeros(n)
    g2 = np.zeros(n)
    h11 = np.zeros((n, n))
    h12 = np.zeros((n, n))
    h22 = np.zeros((n, n))
    for w, ep in zip(ell, problem.endpoint_maps):
        if w == 0.0:
            continue
        value += w * ep.value(y0, yT)
        a1, a2 = ep.grad(y0, yT)
        g1 += w * np.asarray(a1, float)
        g2 += w * np.asarray(a2, float)
        b11, b12, b22 = ep.hess(y0, yT)
        h11 += w * np.asarray(b11, float)
        h12 += w * np.asarray(b12, float)
        h22 += w * np.asarray(b22, float)
    if problem.chart.kind != "euclidean":
        h11 = h11 - np.einsum("kij,k->ij", christoffel(problem.chart, y0), g1)
        h22 = h22 - np.einsum("kij,k->ij", christoffel(problem.chart, yT), g2)
    h11 = 0.5 * (h11 + h11.T)
    h22 = 0.5 * (h22 + h22.T)
    return LagrangeData(multiplier=ell, value=float(value), grad_start=g1,
                        grad_end=g2, hess_start_start=h11, hess_start_end=h12,
                        hess_end_end=h22)


# ----------------------------------------------------------------------------
# Hamiltonian and derivative blocks
# ----------------------------------------------------------------------------

def _covector_components(p, y: np.ndarray, n: int) -> np.ndarray:
    if isinstance(p, CotangentVector):
        base = np.asarray(p.base, float)
        if base.shape != y.shape or not np.allclose(base, y, rtol=0.0,
                                                    atol=1e-9 * (1.0 + np.abs(y).max())):
            raise BasePointMismatch("covector is not based at the evaluation point")
        c = np.asarray(p.components, float)
    elif isinstance(p, TangentVector):
        raise BasePointMismatch("expected a covector, got a tangent vector")
    else:
        c = np.asarray(p, float)
    if c.shape != (n,):
        raise ValueError(f"covector must have {n} components")
    return c


def hamiltonian(problem: ControlProblem, t: float, point, covector, control) -> float:
    """Duality pairing of the covector with the dynamics vector."""
    y = np.asarray(point, float)
    u = np.asarray(control, float)
    pc = _covector_components(covector, y, problem.state_dim)
    return float(pc @ problem.dynamics.rhs(t, y, u))


def hamiltonian_blocks(problem: ControlProblem, t: float, point, covector, control,
                       self_check: bool = False) -> dict:
    """All derivative blocks of the Hamiltonian used by the second-order form.

    Returns a dict with keys:
      value  scalar H
      hu     (m,)  control gradient
      hx     CotangentVector, covariant state gradient
      hxx    (n, n) covariant state Hessian (symmetrized)
      hxu    (n, m) mixed block, contraction hxu[j, a] X^j v^a
      huu    (m, m) control Hessian

    With ``self_check`` every block is re-derived from finite differences of
    the Hamiltonian itself (along geodesics, with the covector parallel
    transported) and must agree within 1e-5 relative.
    """
    chart = problem.chart
    y = np.asarray(point, float)
    u = np.asarray(control, float)
    n, m = problem.state_dim, problem.control_dim
    pc = _covector_components(covector, y, n)
    dyn = problem.dynamics
    f = dyn.rhs(t, y, u)
    fy = dyn.rhs_y(t, y, u)
    fu = dyn.rhs_u(t, y, u)
    fyy = dyn.rhs_yy(t, y, u)
    fyu = dyn.rhs_yu(t, y, u)
    fuu = dyn.rhs_uu(t, y, u)
    value = float(pc @ f)
    hu = fu.T @ pc
    huu = np.einsum("k,kab->ab", pc, fuu)
    if chart.kind == "euclidean":
        hx = fy.T @ pc
        hxx = np.einsum("k,kij->ij", pc, fyy)
        hxu = np.einsum("k,kja->ja", pc, fyu)
    else:
        gamma = christoffel(chart, y)
        dgamma = dchristoffel(chart, y)
        # covariant state Jacobian A^k_j = d_j f^k + Γ^k_{jm} f^m
        A = fy + np.einsum("kjm,m->kj", gamma, f)
        hx = A.T @ pc
        # covariant Hessian (∇²f)^k_{ij} = ∇_i (∇f)^k_j
        H2 = (fyy
              + np.einsum("ikjm,m->kij", dgamma, f)
              + np.einsum("kjm,mi->kij", gamma, fy)
              + np.einsum("kim,mj->kij", gamma, fy)
              + np.einsum("kim,mjl,l->kij", gamma, gamma, f)
              - np.einsum("mij,km->kij", gamma, fy)
              - np.einsum("mij,kml,l->kij", gamma, gamma, f))
        hxx = np.einsum("k,kij->ij", pc, H2)
        hxu = (np.einsum("k,kja->ja", pc, fyu)
               + np.einsum("k,kjm,ma->ja", pc, gamma, fu))
    hxx = 0.5 * (hxx + hxx.T)
    blocks = {"value": value, "hu": hu,
              "hx": CotangentVector(base=y, components=hx),
              "hxx": hxx, "hxu": hxu, "huu": huu}
    if self_check:
        _self_check_blocks(problem, t, y, pc, u, blocks)
    return blocks


def _transported_pairing(problem: ControlProblem, t, y, pc, u, X, s):
    """H evaluated at exp_y(s X) with the covector parallel-transported there."""
    chart = problem.chart
    if chart.kind == "euclidean":
        return hamiltonian(problem, t, y + s * X, pc, u)
    segs = 8
    pts = np.array([exp_map(chart, y, (s * k / segs) * X) for k in range(segs + 1)])
    p_vec = musical_dual(chart, CotangentVector(base=y, components=pc))
    moved = parallel_transport(chart, pts, p_vec)
    p_cov = musical_dual(chart, moved)
    return hamiltonian(problem, t, pts[-1], p_cov, u)


def _self_check_blocks(problem, t, y, pc, u, blocks):
    rng = np.random.default_rng(7)
    n, m = problem.state_dim, problem.control_dim
    hs = 1e-3
    hu_step = _fd_step(u, _FD2_SCALE)
    for _ in range(3):
        X = rng.standard_normal(n)
        X /= max(1.0, np.linalg.norm(X))
        v = rng.standard_normal(m)
        v /= max(1.0, np.linalg.norm(v))
        H0 = blocks["value"]
        Hp = _transported_pairing(problem, t, y, pc, u, X, hs)
        Hm = _transported_pairing(problem, t, y, pc, u, X, -hs)
        checks = [
            ("hx", (Hp - Hm) / (2 * hs), float(blocks["hx"].components @ X)),
            ("hxx", (Hp - 2 * H0 + Hm) / (hs * hs), float(X @ blocks["hxx"] @ X)),
            ("hu", (hamiltonian(problem, t, y, pc, u + hu_step * v)
                    - hamiltonian(problem, t, y, pc, u - hu_step * v)) / (2 * hu_step),
             float(blocks["hu"] @ v)),
            ("huu", (hamiltonian(problem, t, y, pc, u + hu_step * v) - 2 * H0
                     + hamiltonian(problem, t, y, pc, u - hu_step * v)) / hu_step ** 2,
             float(v @ blocks["huu"] @ v)),
        ]
        mixed_fd = 0.0
        for sy, su in [(1, 1), (1, -1), (-1, 1), (-1, -1)]:
            up = u + su * hu_step * v
            Hval = _transported_pairing(problem, t, y, pc, up, X, sy * hs)
            mixed_fd += sy * su * Hval
        checks.append(("hxu", mixed_fd / (4 * hs * hu_step),
                       float(X @ blocks["hxu"] @ v)))
        for name, fd_val, an_val in checks:
            if abs(fd_val - an_val) > 1e-5 * (1.0 + abs(fd_val)):
                raise NocError(
                    f"hamiltonian block {name} disagrees with finite differences: "
                    f"{an_val:.10g} vs {fd_val:.10g}")


def curvature_pairing(problem: ControlProblem, trajectory: Trajectory,
                      adjoint: FieldAlongCurve, first_field: FieldAlongCurve,
                      node: int, cell: int | None = None) -> float:
    """<p, R(X, f) X> at a grid node (zero on flat charts).

    ``cell`` selects which cell's (constant) control evaluates f when the
    node sits on a cell boundary; default: the cell to the node's left.
    """
    chart = problem.chart
    if chart.kind == "euclidean":
        return 0.0
    i = node
    y = trajectory.states[i]
    u = trajectory.controls[min(i, trajectory.num_cells - 1) if cell is None else cell]
    f = problem.dynamics.rhs(trajectory.grid[i], y, u)
    p_vec = musical_dual(chart, adjoint.at(i))
    X = first_field.at(i)
    F = TangentVector(base=y, components=f)
    return riemann_apply(chart, p_vec, X, F, X)


# ----------------------------------------------------------------------------
# quadrature and expansion residual
# ----------------------------------------------------------------------------

def trapezoid_quadrature(grid, node_values) -> float | np.ndarray:
    """Trapezoid rule over the grid for integrands continuous at the nodes."""
    grid = np.asarray(grid, float)
    vals = np.asarray(node_values, float)
    dt = np.diff(grid)
    avg = 0.5 * (vals[:-1] + vals[1:])
    return np.tensordot(dt, avg, axes=(0, 0))


def trapezoid_cellwise(grid, left_values, right_values) -> float | np.ndarray:
    """Trapezoid rule for integrands that jump at interior nodes.

    Piecewise-constant controls make control-dependent integrands
    double-valued at cell boundaries; cell i contributes
    (left_i + right_i)/2 * dt_i where both evaluations use cell i's control
    (left at t_i, right at t_{i+1}).
    """
    dt = np.diff(np.asarray(grid, float))
    L = np.asarray(left_values, float)
    R = np.asarray(right_values, float)
    return np.tensordot(dt, 0.5 * (L + R), axes=(0, 0))


def refine_controls(controls, factor: int) -> np.ndarray:
    """The same piecewise-constant control on a grid refined by ``factor``."""
    if factor < 1:
        raise ValueError("refinement factor must be >= 1")
    return np.repeat(np.asarray(controls, float), factor, axis=0)


def expansion_residual(problem: ControlProblem, trajectory: Trajectory,
                       control_directions, first_field: FieldAlongCurve,
                       sigma_family, start_acceleration, eps_list,
                       sigma_cap: float | None = 100.0) -> list:
    """Sup-norm defect of the second-order expansion of the perturbed flow.

    For each ε the perturbed control is ū + ε v + ε² σ_ε (σ_ε from
    ``sigma_family``, either a constant (N, m) array or a callable of ε),
    the perturbed start is exp(ε X0 + ε² W), and the residual is
    sup_i | log(perturbed state) − ε X − ε² Y | in the Riemannian norm.
    Y is re-integrated per ε because σ_ε changes with ε.
    """
    v_seq = _check_direction_shape(trajectory, control_directions)
    W = _start_components(trajectory, start_acceleration, "start acceleration")
    chart = problem.chart
    X0 = first_field.values[0]
    h = trajectory.step
    out = []
    for eps in eps_list:
        eps = float(eps)
        if eps == 0.0:
            out.append((0.0, 0.0))
            continue
        sig = sigma_family(eps) if callable(sigma_family) else np.asarray(sigma_family, float)
        sig = _check_direction_shape(trajectory, sig)
        if sigma_cap is not None:
            l2 = math.sqrt(float(np.sum(sig ** 2) * h))
            if l2 > sigma_cap:
                raise BoundViolated(
                    f"sigma family exceeds the L2 cap at eps={eps:g}: "
                    f"{l2:.6g} > {sigma_cap:.6g}")
        second = integrate_second_variation(problem, trajectory, v_seq, first_field,
                                            sig, W)
        start = exp_map(chart, trajectory.states[0], eps * X0 + eps * eps * W)
        perturbed = integrate_state(problem, start,
                                    trajectory.controls + eps * v_seq + eps * eps * sig)
        worst = 0.0
        for i in range(trajectory.num_cells + 1):
            Vc = log_map(chart, trajectory.states[i], perturbed.states[i]).components
            defect = Vc - eps * first_field.values[i] - eps * eps * second.values[i]
            worst = max(worst, norm(chart, TangentVector(base=trajectory.states[i],
                                                         components=defect)))
        out.append((eps, float(worst)))
    return out


# ----------------------------------------------------------------------------
# CSV import/export
# ----------------------------------------------------------------------------

def trajectory_to_csv(trajectory: Trajectory) -> str:
    """Columnar CSV (t, y1..yn, u1..um) with 17-significant-digit floats.

    The control columns repeat the last cell's control on the final row so
    every row has the same width.
    """
    n = trajectory.states.shape[1]
    m = trajectory.controls.shape[1]
    header = ",".join(["t"] + [f"y{i + 1}" for i in range(n)]
                      + [f"u{a + 1}" for a in range(m)])
    lines = [header]
    N = trajectory.num_cells
    for i in range(N + 1):
        row = [trajectory.grid[i], *trajectory.states[i], *trajectory.controls[min(i, N - 1)]]
        lines.append(",".join(f"{x:.17g}" for x in row))
    return "\n".join(lines) + "\n"


def trajectory_from_csv(chart: ManifoldChart, text: str) -> Trajectory:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) < 3:
        raise ValueError("trajectory CSV needs a header and at least two rows")
    header = [c.strip() for c in lines[0].split(",")]
    if header[0] != "t":
        raise ValueError("trajectory CSV must start with a 't' column")
    n = sum(1 for c in header if c.startswith("y"))
    m = sum(1 for c in header if c.startswith("u"))
    if 1 + n + m != len(header) or n == 0:
        raise ValueError(f"unrecognized trajectory CSV header: {header}")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(header):
            raise ValueError(f"row width {len(parts)} does not match header")
        rows.append([float(x) for x in parts])
    data = np.asarray(rows, float)
    grid = data[:, 0]
    steps = np.diff(grid)
    if np.any(steps <= 0) or np.max(np.abs(steps - steps[0])) > 1e-12 * (1.0 + steps[0]):
        raise ValueError("trajectory CSV grid must be uniform and increasing")
    states = data[:, 1:1 + n]
    controls = data[:-1, 1 + n:]
    return Trajectory(chart=chart, grid=grid, states=states, controls=controls)
