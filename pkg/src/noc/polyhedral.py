"""Polyhedral-cone computations: extreme rays, lineality, LP feasibility.

The central routine enumerates the extreme rays and the lineality space of a
cone given in H-representation,

    C = { x : A_eq x = 0,  A_le x <= 0 },

by the double-description method with explicit lineality tracking. Problem
sizes here are tiny (multiplier spaces of dimension 1+j+k, a handful of
endpoint constraints), so clarity beats asymptotics.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog

__all__ = ["ConeVRep", "extreme_rays", "cone_contains", "polyhedron_bounding_box"]

_ZERO = 1e-11


@dataclass(frozen=True)
class ConeVRep:
    """V-representation of a polyhedral cone: span(lineality) + cone(rays)."""

    dim: int
    lineality: np.ndarray  # (L, dim), orthonormal rows
    rays: np.ndarray       # (R, dim), unit rows, extreme modulo lineality

    @property
    def is_trivial(self) -> bool:
        return self.lineality.shape[0] == 0 and self.rays.shape[0] == 0


def _normalize_rows(M: np.ndarray) -> np.ndarray:
    if M.size == 0:
        return M.reshape(0, M.shape[1] if M.ndim == 2 else 0)
    norms = np.linalg.norm(M, axis=1)
    keep = norms > _ZERO
    return M[keep] / norms[keep, None]


def _dedupe_rows_up_to_scale(M: np.ndarray) -> np.ndarray:
    """Drop rows that are positive multiples of an earlier row."""
    out: list[np.ndarray] = []
    for row in _normalize_rows(M):
        if not any(np.linalg.norm(row - r) < 1e-9 for r in out):
            out.append(row)
    if not out:
        return np.zeros((0, M.shape[1]))
    return np.array(out)


def _project_out(vectors: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Remove the span of (orthonormal) basis rows from each vector row."""
    if basis.shape[0] == 0 or vectors.shape[0] == 0:
        return vectors
    return vectors - (vectors @ basis.T) @ basis


def extreme_rays(A_le: np.ndarray | None, A_eq: np.ndarray | None, dim: int) -> ConeVRep:
    """Extreme rays + lineality of {x : A_eq x = 0, A_le x <= 0}.

    Classic double description with a lineality space: start from C = R^dim
    (lineality = identity, no rays) and insert halfspaces one at a time.
    """
    A_le = np.zeros((0, dim)) if A_le is None else np.atleast_2d(np.asarray(A_le, float))
    A_eq = np.zeros((0, dim)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, float))

    # equalities first: restrict the lineality space to their null space
    if A_eq.shape[0]:
        lin = null_space(A_eq).T  # orthonormal rows spanning {A_eq x = 0}
    else:
        lin = np.eye(dim)
    rays = np.zeros((0, dim))

    rows = _dedupe_rows_up_to_scale(A_le)
    inserted: list[np.ndarray] = []  # halfspace normals already processed
    for a in rows:
        ray_vals = rays @ a if rays.size else np.zeros(0)
        lin_vals = lin @ a if lin.size else np.zeros(0)

        if lin.shape[0] and np.abs(lin_vals).max() > _ZERO:
            # some lineality direction crosses the halfspace: split it off.
            piv = int(np.argmax(np.abs(lin_vals)))
            w = lin[piv].copy()
            if w @ a > 0:
                w = -w  # make w strictly feasible: a·w < 0
            wa = w @ a
            # remaining lineality directions get projected into a⊥
            new_lin = []
            for i, l in enumerate(lin):
                if i == piv:
                    continue
                new_lin.append(l - ((l @ a) / wa) * w)
            lin = _normalize_rows(np.array(new_lin)) if new_lin else np.zeros((0, dim))
            # re-orthonormalize via QR for numerical stability
            if lin.shape[0]:
                q, _ = np.linalg.qr(lin.T)
                lin = q.T
            # slide existing rays along w onto the hyperplane a·x = 0; this
            # preserves all previously inserted constraints since a_prev·w = 0
            if rays.shape[0]:
                shifts = (rays @ a) / wa
                rays = rays - shifts[:, None] * w
            rays = np.vstack([rays, w[None, :]]) if rays.size else w[None, :]
            rays = _normalize_rows(rays)
        else:
            neg = ray_vals < -_ZERO
            pos = ray_vals > _ZERO
            zero = ~neg & ~pos
            if not pos.any():
                inserted.append(a)
                continue
            kept = rays[neg | zero]
            # combine adjacent (negative, positive) pairs on the hyperplane
            new_rays = []
            neg_idx = np.where(neg)[0]
            pos_idx = np.where(pos)[0]
            for ip in pos_idx:
                for im in neg_idx:
                    if not _adjacent(rays, im, ip, inserted, lin):
                        continue
                    r = ray_vals[ip] * rays[im] - ray_vals[im] * rays[ip]
                    new_rays.append(r)
            rays = np.vstack([kept] + [np.array(new_rays)]) if new_rays else kept
            rays = _dedupe_rows_up_to_scale(rays) if rays.size else rays.reshape(0, dim)
        inserted.append(a)

    # squash rays that became lineality-equivalent or zero after projection
    if rays.shape[0]:
        rays = _project_out(rays, lin)
        rays = _dedupe_rows_up_to_scale(rays)
    return ConeVRep(dim=dim, lineality=lin, rays=rays)


def _adjacent(rays: np.ndarray, i: int, j: int, inserted: list[np.ndarray],
              lin: np.ndarray) -> bool:
    """Adjacency test: the common tight set of rays i, j is not contained in
    the tight set of any third ray (standard double-description criterion)."""
    if not inserted:
        return True
    A = np.array(inserted)
    ti = np.abs(A @ rays[i]) <= 1e-9
    tj = np.abs(A @ rays[j]) <= 1e-9
    common = ti & tj
    # low-dimensional shortcut: with few rays everything is adjacent
    if rays.shape[0] <= 2:
        return True
    for k in range(rays.shape[0]):
        if k in (i, j):
            continue
        tk = np.abs(A @ rays[k]) <= 1e-9
        if np.all(tk[common]):
            return False
    return True


def cone_contains(A_le: np.ndarray | None, A_eq: np.ndarray | None,
                  x: np.ndarray, tol: float = 1e-9) -> bool:
    """Membership of x in {A_eq x = 0, A_le x <= 0} (sanity checks for DD)."""
    x = np.asarray(x, float)
    ok = True
    if A_eq is not None and np.asarray(A_eq).size:
        ok &= bool(np.abs(np.atleast_2d(A_eq) @ x).max() <= tol)
    if A_le is not None and np.asarray(A_le).size:
        ok &= bool((np.atleast_2d(A_le) @ x).max() <= tol)
    return ok


def polyhedron_bounding_box(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate min/max of {x : A x <= b} via linear programs.

    Raises ValueError if the polyhedron is empty or unbounded in some
    coordinate (brute-force search needs a finite box).
    """
    A = np.atleast_2d(np.asarray(A, float))
    b = np.asarray(b, float).ravel()
    dim = A.shape[1]
    lo = np.empty(dim)
    hi = np.empty(dim)
    for i in range(dim):
        c = np.zeros(dim)
        c[i] = 1.0
        for sign, target in ((1.0, lo), (-1.0, hi)):
            res = linprog(sign * c, A_ub=A, b_ub=b, bounds=[(None, None)] * dim,
                          method="highs")
            if not res.success:
                raise ValueError(
                    f"polyhedron empty or unbounded along coordinate {i + 1}: {res.message}")
            target[i] = sign * res.fun
    return lo, hi
