"""Projection of Cartesian states onto a lane centerline (Frenet coordinates).

The polyline is given a continuous normal field: each vertex carries the
normalized average of its two adjacent segment normals and the normal is
linearly interpolated along each segment. Projection solves for the segment
parameter at which ``p - C(t)`` is parallel to the interpolated normal, which
makes :func:`reconstruct` an exact inverse inside the tube around the lane,
including the wedges outside convex vertices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tracks import Centerline


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class FrenetState:
    s: float
    l: float
    vs: float
    vl: float
    ambiguous: bool = False


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _segment_params(p: np.ndarray, cl: Centerline):
    """Candidate (t, l) on every segment; t is NaN where no solution exists."""
    P0 = cl.points[:-1]
    D = np.diff(cl.points, axis=0)
    vn = cl.vertex_normals
    N0, N1 = vn[:-1], vn[1:]
    q = p - P0
    dN = N1 - N0
    # cross((1-t) N0 + t N1, q - t D) = 0 is quadratic in t
    c0 = _cross(N0, q)
    c1 = _cross(dN, q) - _cross(N0, D)
    c2 = -_cross(dN, D)
    n = len(D)
    t = np.full(n, np.nan)
    lin = np.abs(c2) < 1e-14 * (np.abs(c1) + 1.0)
    t[lin] = -c0[lin] / np.where(np.abs(c1[lin]) > 0, c1[lin], np.nan)
    quad = ~lin
    if np.any(quad):
        disc = c1[quad] ** 2 - 4 * c2[quad] * c0[quad]
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        # numerically stable roots
        qq = -0.5 * (c1[quad] + np.copysign(sq, c1[quad]))
        r1 = qq / c2[quad]
        r2 = c0[quad] / np.where(qq != 0, qq, np.nan)
        pick = np.where(np.abs(r1 - 0.5) <= np.abs(r2 - 0.5), r1, r2)
        t[quad] = pick
    lo = np.zeros(n)
    hi = np.ones(n)
    lo[0] = -np.inf
    hi[-1] = np.inf
    tol = 1e-12
    ok = (t >= lo - tol) & (t <= hi + tol)
    t = np.where(ok, np.clip(t, lo, hi), np.nan)
    foot = P0 + t[:, None] * D
    nrm = (1 - t)[:, None] * N0 + t[:, None] * N1
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    l = np.einsum("ij,ij->i", p - foot, nrm)
    return t, l, nrm


def project_frenet(position, velocity, centerline: Centerline, max_offset: float = 10.0) -> FrenetState:
    """Frenet coordinates (s, l, vs, vl) of a Cartesian position/velocity.

    ``l`` is positive to the left of the direction of travel. When two
    non-adjacent segments are equally close the lower-``s`` one wins and the
    result is flagged ``ambiguous``.
    """
    p = np.asarray(position, dtype=np.float64)
    v = np.asarray(velocity, dtype=np.float64)
    t, l, nrm = _segment_params(p, centerline)
    absl = np.where(np.isnan(t), np.inf, np.abs(l))
    best = int(np.argmin(absl))
    if not np.isfinite(absl[best]) or absl[best] > max_offset:
        raise ProjectionError(f"point {p.tolist()} is more than {max_offset} m from the centerline")
    ties = np.flatnonzero(absl <= absl[best] + 1e-9)
    ambiguous = bool(np.any(np.abs(ties - best) > 1))
    seg_len = centerline.arclength[best + 1] - centerline.arclength[best]
    s = centerline.arclength[best] + t[best] * seg_len
    n = nrm[best]
    tang = np.array([n[1], -n[0]])
    return FrenetState(float(s), float(l[best]), float(v @ tang), float(v @ n), ambiguous)


def project_many(positions, velocities, centerline: Centerline, max_offset: float = 10.0):
    """Vectorised convenience wrapper; rows that cannot be projected are NaN."""
    out = np.full((len(positions), 4), np.nan)
    for i, (p, v) in enumerate(zip(positions, velocities)):
        try:
            f = project_frenet(p, v, centerline, max_offset)
        except ProjectionError:
            continue
        out[i] = (f.s, f.l, f.vs, f.vl)
    return out


def reconstruct(s: float, l: float, centerline: Centerline) -> np.ndarray:
    """Cartesian point at arclength ``s`` and lateral offset ``l``."""
    arc = centerline.arclength
    i = int(np.clip(np.searchsorted(arc, s, side="right") - 1, 0, len(arc) - 2))
    seg_len = arc[i + 1] - arc[i]
    t = (s - arc[i]) / seg_len
    vn = centerline.vertex_normals
    nrm = (1 - t) * vn[i] + t * vn[i + 1]
    nrm /= np.linalg.norm(nrm)
    foot = centerline.points[i] + t * (centerline.points[i + 1] - centerline.points[i])
    return foot + l * nrm
