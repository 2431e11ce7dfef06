"""Show the geometry layer at work: curvature of the unit sphere, the
holonomy picked up by parallel transport around a latitude circle, and the
way every curved correction switches off on a flat chart.

Run from the repository root:

    python3 demos/sphere_transport.py
"""
from __future__ import annotations

import math

import numpy as np

import noc.geometry as gm


def main() -> None:
    # ------------------------------------------------------------------
    # sectional curvature from the chart data alone
    # ------------------------------------------------------------------
    sphere = gm.sphere(1.0)
    for x in ([0.0, 0.0], [0.4, -0.3]):
        K = gm.sectional_curvature(sphere, x, [1.0, 0.0], [0.0, 1.0])
        print(f"sectional curvature at {x}: {K:.9f}")

    # ------------------------------------------------------------------
    # transport around a latitude circle rotates by 2 pi cos(theta0)
    # ------------------------------------------------------------------
    polar = gm.sphere(1.0, coords="polar")
    theta0 = 1.2
    s = np.linspace(0.0, 2.0 * math.pi, 4097)
    loop = np.column_stack([np.full_like(s, theta0), s])
    v0 = np.array([1.0, 0.0])
    moved = gm.parallel_transport(polar, loop, v0)
    g = gm.metric(polar, loop[-1])
    cosang = v0 @ g @ moved.components / math.sqrt(
        (v0 @ g @ v0) * (moved.components @ g @ moved.components))
    angle = math.acos(float(np.clip(cosang, -1.0, 1.0)))
    print(f"\nholonomy angle around latitude {theta0}: {angle:.9f}")
    print(f"2 pi cos(theta0):                       "
          f"{2.0 * math.pi * math.cos(theta0):.9f}")

    # ------------------------------------------------------------------
    # flat charts reduce to vector arithmetic
    # ------------------------------------------------------------------
    flat = gm.euclidean(2)
    x, v = np.array([0.3, -0.8]), np.array([1.1, 0.4])
    print(f"\nflat exp map:  {gm.exp_map(flat, x, v)} == {x + v}")
    line = x + np.linspace(0.0, 1.0, 8)[:, None] * v
    carried = gm.parallel_transport(flat, line, v)
    print(f"flat transport leaves components fixed: {carried.components}")


if __name__ == "__main__":
    main()
