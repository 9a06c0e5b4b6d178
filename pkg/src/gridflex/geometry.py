"""Small planar convex-geometry helpers for P-Q polygons."""

from __future__ import annotations

import numpy as np

__all__ = ["convex_hull", "polygon_area", "halfplanes", "clip_halfplane", "intersect_halfplanes"]


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points, eps: float = 1e-9) -> np.ndarray:
    """Counter-clockwise hull vertices (Andrew's monotone chain).

    Points closer than ``eps`` (relative to the cloud extent) are merged and
    vertices within that distance of the chord joining their neighbours are
    dropped, so a cloud of coincident points returns one vertex and a
    collinear cloud returns its two end points.  Every input point lies
    within ``3 * eps * extent`` of the returned hull (merge plus prune).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return pts
    scale = max(1.0, float(np.max(np.abs(pts))))
    tol = eps * scale
    uniq: list[tuple[float, float]] = []
    for p in sorted(map(tuple, pts)):
        j = len(uniq) - 1
        while j >= 0 and p[0] - uniq[j][0] <= tol:
            if abs(p[1] - uniq[j][1]) <= tol:
                break
            j -= 1
        else:
            uniq.append(p)
    if len(uniq) <= 2:
        return np.array(uniq)

    def chain(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and _cross(out[-2], out[-1], p) <= 0.0:
                out.pop()
            out.append(p)
        return out

    # exact hull first; popping on a tolerance would let an out-of-order
    # near-collinear point evict a true extreme
    hull = chain(uniq)[:-1] + chain(list(reversed(uniq)))[:-1]
    # then drop vertices within tol of the chord joining their neighbours;
    # points dropped earlier ride along so successive drops cannot compound
    dropped: list[list] = [[] for _ in hull]  # dropped[k]: points on the edge after hull[k]
    pruned = True
    while pruned and len(hull) > 2:
        pruned = False
        for k in range(len(hull)):
            a, b = hull[k - 1], hull[(k + 1) % len(hull)]
            chord = max(float(np.hypot(b[0] - a[0], b[1] - a[1])), tol)
            pool = dropped[k - 1] + [hull[k]] + dropped[k]
            if all(abs(_cross(a, p, b)) / chord <= tol for p in pool):
                dropped[k - 1] = pool
                del hull[k], dropped[k]
                pruned = True
                break
    if len(hull) < 3:
        # everything collinear: keep the extreme pair
        return np.array([uniq[0], uniq[-1]])
    return np.array(hull)


def polygon_area(vertices) -> float:
    v = np.asarray(vertices, dtype=float).reshape(-1, 2)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def halfplanes(vertices) -> np.ndarray:
    """Rows (a, b, c) with a*p + b*q <= c describing the hull of ``vertices``.

    ``vertices`` must be a counter-clockwise convex polygon.  One point gives
    four rows pinning p and q; a segment gives its supporting line as an
    equality pair plus two end caps.  Normals are unit length.
    """
    v = np.asarray(vertices, dtype=float).reshape(-1, 2)
    if len(v) == 0:
        raise ValueError("polygon needs at least one vertex")
    if len(v) == 1:
        p, q = v[0]
        return np.array([[1.0, 0.0, p], [-1.0, 0.0, -p], [0.0, 1.0, q], [0.0, -1.0, -q]])
    if len(v) == 2:
        d = v[1] - v[0]
        d = d / np.hypot(*d)
        nrm = np.array([d[1], -d[0]])
        return np.array([
            [nrm[0], nrm[1], nrm @ v[0]],
            [-nrm[0], -nrm[1], -(nrm @ v[0])],
            [d[0], d[1], d @ v[1]],
            [-d[0], -d[1], -(d @ v[0])],
        ])
    rows = []
    for k in range(len(v)):
        a, b = v[k], v[(k + 1) % len(v)]
        e = b - a
        nrm = np.array([e[1], -e[0]]) / np.hypot(*e)
        rows.append([nrm[0], nrm[1], nrm @ a])
    return np.array(rows)


def clip_halfplane(vertices, a: float, b: float, c: float, eps: float = 1e-12) -> np.ndarray:
    """Sutherland-Hodgman step: keep the part of a convex polygon with a*p + b*q <= c."""
    v = np.asarray(vertices, dtype=float).reshape(-1, 2)
    if len(v) == 0:
        return v
    val = v @ np.array([a, b]) - c
    if len(v) == 1:
        return v if val[0] <= eps else v[:0]
    out = []
    n = len(v)
    for k in range(n):
        cur, nxt = v[k], v[(k + 1) % n]
        fc, fn = val[k], val[(k + 1) % n]
        if fc <= eps:
            out.append(cur)
        if (fc < -eps and fn > eps) or (fc > eps and fn < -eps):
            t = fc / (fc - fn)
            out.append(cur + t * (nxt - cur))
        if n == 2 and k == 0:
            # a segment is traversed once
            if fn <= eps:
                out.append(nxt)
            break
    return convex_hull(out) if out else v[:0]


def intersect_halfplanes(vertices, rows, eps: float = 1e-12) -> np.ndarray:
    v = np.asarray(vertices, dtype=float)
    for a, b, c in rows:
        v = clip_halfplane(v, a, b, c, eps)
        if len(v) == 0:
            break
    return v
