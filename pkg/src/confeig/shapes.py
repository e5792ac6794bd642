"""Reference meshes: spheres, tori, disks and squares."""
from __future__ import annotations

import numpy as np

from .mesh import TriangleMesh, subdivide


def icosahedron():
    p = (1 + 5 ** 0.5) / 2
    v = np.array([
        [-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
        [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
        [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1],
    ], dtype=float)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    t = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return TriangleMesh(v, t)


def icosphere(level=3, radius=1.0):
    """Subdivided icosahedron on the sphere; 10 * 4**level + 2 vertices."""
    m = icosahedron()
    for _ in range(level):
        m = subdivide(m, project_to_sphere=True)
    return m if radius == 1.0 else m.scaled(radius)


def _grid_triangles(nu, nv, wrap_u, wrap_v):
    """Triangles of an nu x nv vertex grid (index = i * nv + j)."""
    tris = []
    iu = nu if wrap_u else nu - 1
    iv = nv if wrap_v else nv - 1
    for i in range(iu):
        for j in range(iv):
            a = i * nv + j
            b = ((i + 1) % nu) * nv + j
            c = ((i + 1) % nu) * nv + (j + 1) % nv
            d = i * nv + (j + 1) % nv
            tris += [(a, b, c), (a, c, d)]
    return np.array(tris)


def flat_torus(n=32):
    """Unit-area flat square torus as an n x n grid in R^4.

    The Clifford embedding makes every grid triangle congruent, so the
    cotangent weights are exactly those of the flat square lattice.
    """
    s = np.arange(n) / n
    x, y = np.meshgrid(s, s, indexing="ij")
    x, y = x.ravel(), y.ravel()
    # circle radius giving chord length 1/n, hence grid squares of area 1/n^2
    rho = 1.0 / (2 * n * np.sin(np.pi / n))
    v = rho * np.column_stack([np.cos(2 * np.pi * x), np.sin(2 * np.pi * x),
                                 np.cos(2 * np.pi * y), np.sin(2 * np.pi * y)])
    return TriangleMesh(v, _grid_triangles(n, n, True, True))


def torus(n_major=32, n_minor=16, R=1.0, r=0.4):
    """Torus of revolution in R^3."""
    u = 2 * np.pi * np.arange(n_major) / n_major
    w = 2 * np.pi * np.arange(n_minor) / n_minor
    U, W = np.meshgrid(u, w, indexing="ij")
    U, W = U.ravel(), W.ravel()
    v = np.column_stack([(R + r * np.cos(W)) * np.cos(U), (R + r * np.cos(W)) * np.sin(U), r * np.sin(W)])
    return TriangleMesh(v, _grid_triangles(n_major, n_minor, True, True))


def square(n=1, size=1.0):
    """Planar [0, size]^2 grid with n x n cells, two right triangles per cell."""
    s = np.linspace(0.0, size, n + 1)
    x, y = np.meshgrid(s, s, indexing="ij")
    v = np.column_stack([x.ravel(), y.ravel(), np.zeros(x.size)])
    return TriangleMesh(v, _grid_triangles(n + 1, n + 1, False, False))


def rectangle(nx, ny, width, height):
    sx = np.linspace(0.0, width, nx + 1)
    sy = np.linspace(0.0, height, ny + 1)
    x, y = np.meshgrid(sx, sy, indexing="ij")
    v = np.column_stack([x.ravel(), y.ravel(), np.zeros(x.size)])
    return TriangleMesh(v, _grid_triangles(nx + 1, ny + 1, False, False))


def disk(n_rings=20, radius=1.0):
    """Polar disk mesh: ring j sits at radius j / n_rings and carries 6 j vertices.

    Rings at exact radii make concentric capacitors representable without
    geometric error in the discrete regions.
    """
    pts = [np.zeros(2)]
    start = [0]
    for j in range(1, n_rings + 1):
        start.append(len(pts))
        k = 6 * j
        ang = 2 * np.pi * (np.arange(k) + 0.5 * (j % 2)) / k
        pts.extend(np.column_stack([np.cos(ang), np.sin(ang)]) * (j / n_rings))
    pts = np.array(pts) * radius
    tris = []
    for j in range(1, n_rings + 1):
        inner = [0] if j == 1 else list(range(start[j - 1], start[j - 1] + 6 * (j - 1)))
        outer = list(range(start[j], start[j] + 6 * j))
        tris += _zip_rings(pts, inner, outer)
    v = np.column_stack([pts, np.zeros(len(pts))])
    return TriangleMesh(v, np.array(tris))


def _zip_rings(pts, inner, outer):
    """Triangulate the band between two concentric vertex rings by angle merge."""
    def angle(i):
        a = np.arctan2(pts[i][1], pts[i][0])
        return a % (2 * np.pi)

    if len(inner) == 1:
        c = inner[0]
        return [(c, outer[k], outer[(k + 1) % len(outer)]) for k in range(len(outer))]
    ai = np.array([angle(i) for i in inner])
    ao = np.array([angle(i) for i in outer])
    oi = list(np.argsort(ai, kind="stable"))
    oo = list(np.argsort(ao, kind="stable"))
    inner = [inner[k] for k in oi]
    outer = [outer[k] for k in oo]
    ai, ao = np.sort(ai), np.sort(ao)
    # rotate the outer ring so it starts just after the first inner vertex
    shift = int(np.searchsorted(ao, ai[0]))
    outer = outer[shift:] + outer[:shift]
    ao = np.concatenate([ao[shift:], ao[:shift] + 2 * np.pi])
    ai = np.concatenate([ai, [ai[0] + 2 * np.pi]])
    inner = inner + [inner[0]]
    ao = np.concatenate([ao, [ao[0] + 2 * np.pi]])
    outer = outer + [outer[0]]
    tris = []
    i = o = 0
    while i < len(inner) - 1 or o < len(outer) - 1:
        take_outer = i == len(inner) - 1 or (o < len(outer) - 1 and ao[o + 1] <= ai[i + 1])
        if take_outer:
            tris.append((inner[i], outer[o], outer[o + 1]))
            o += 1
        else:
            tris.append((inner[i], outer[o], inner[i + 1]))
            i += 1
    return tris


def mobius_graded_sphere(level=4, strength=0.8, pole=(0.0, 0.0, 1.0)):
    """Icosphere whose vertices are pushed toward ``pole`` by a Mobius dilation.

    Resolution near the pole improves by roughly (1 + s) / (1 - s) while
    triangles keep their shape.
    """
    from .bounds import mobius_apply

    m = icosphere(level)
    a = strength * np.asarray(pole, dtype=float) / np.linalg.norm(pole)
    return m.with_vertices(mobius_apply(a, m.vertices))


def polar_graded_sphere(level=4, power=2.0, pole=(0.0, 0.0, 1.0)):
    """Icosphere with polar angle ``theta`` about ``pole`` remapped to ``pi (theta / pi) ** power``.

    Unlike the Mobius grading, this puts a fixed fraction of vertices into a
    cap whose radius is small compared with the median edge length.
    """
    m = icosphere(level)
    p = np.asarray(pole, dtype=float)
    p = p / np.linalg.norm(p)
    x = m.vertices
    c = np.clip(x @ p, -1.0, 1.0)
    theta = np.arccos(c)
    tang = x - c[:, None] * p
    tn = np.linalg.norm(tang, axis=1)
    e = np.zeros_like(tang)
    nz = tn > 1e-15
    e[nz] = tang[nz] / tn[nz, None]
    th2 = np.pi * (theta / np.pi) ** power
    v = np.cos(th2)[:, None] * p + np.sin(th2)[:, None] * e
    v[~nz] = np.where(c[~nz, None] > 0, p, -p)
    return m.with_vertices(v)
