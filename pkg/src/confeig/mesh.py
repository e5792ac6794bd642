"""Triangle meshes, the cotangent Dirichlet form and graph-metric regions.

A :class:`TriangleMesh` carries the reference conformal structure. Only
angles enter the stiffness matrix, so any vertex embedding with the right
angles will do; vertices may live in R^d for d >= 2 (the flat torus is
embedded in R^4).
"""
from __future__ import annotations

import io
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

logger = logging.getLogger(__name__)


class MeshError(ValueError):
    """Invalid mesh input. ``index`` names the offending element when known."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class TriangleMesh:
    """Oriented manifold triangle mesh.

    Parameters
    ----------
    vertices : array_like, shape (n, d)
        Vertex positions, d >= 2.
    triangles : array_like, shape (m, 3)
        Vertex indices. Orientation is made consistent on construction when
        possible; non-orientable input raises :class:`MeshError`.
    """

    def __init__(self, vertices, triangles):
        v = np.array(vertices, dtype=float)
        t = np.array(triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] < 2:
            raise MeshError("vertices must have shape (n, d) with d >= 2")
        if t.size == 0:
            raise MeshError("mesh has no triangles")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError("triangles must have shape (m, 3)")
        bad = np.nonzero((t < 0) | (t >= len(v)))[0]
        if bad.size:
            raise MeshError(
                f"triangle {bad[0]} references a vertex outside 0..{len(v) - 1}",
                index=int(bad[0]),
            )
        rep = (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
        if rep.any():
            i = int(np.argmax(rep))
            raise MeshError(f"triangle {i} repeats a vertex", index=i)
        self.vertices = v
        self.triangles = t
        self.vertices.setflags(write=False)
        area = self.triangle_areas
        scale = max(float(np.max(np.abs(v))), 1.0)
        tiny = np.nonzero(area <= 1e-14 * scale * scale)[0]
        if tiny.size:
            raise MeshError(f"triangle {tiny[0]} is degenerate (zero area)", index=int(tiny[0]))
        self._check_manifold()
        self.triangles = self._orient(t)
        self.triangles.setflags(write=False)

    # ------------------------------------------------------------------ basics
    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def dim(self):
        return self.vertices.shape[1]

    def __repr__(self):
        return f"TriangleMesh(V={self.n_vertices}, F={self.n_triangles}, dim={self.dim})"

    def _check_manifold(self):
        e = np.sort(self._directed_edges(self.triangles), axis=1)
        _, inv, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
        over = np.nonzero(counts[inv.ravel()] > 2)[0]
        if over.size:
            tri = int(over[0] // 3)
            raise MeshError(f"non-manifold edge in triangle {tri}", index=tri)

    @staticmethod
    def _directed_edges(t):
        return np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2)

    def _orient(self, t):
        """Flip triangles so that every interior edge is traversed once each way."""
        t = t.copy()
        m = len(t)
        und = np.sort(self._directed_edges(t), axis=1)
        _, inv = np.unique(und, axis=0, return_inverse=True)
        order = np.argsort(inv.ravel(), kind="stable")
        keys = inv.ravel()[order]
        neighbours = [[] for _ in range(m)]
        for p in np.nonzero(keys[1:] == keys[:-1])[0]:
            f, g = int(order[p] // 3), int(order[p + 1] // 3)
            shared = frozenset(und[order[p]].tolist())
            neighbours[f].append((g, shared))
            neighbours[g].append((f, shared))
        seen = np.zeros(m, dtype=bool)
        n_flips = 0
        for root in range(m):
            if seen[root]:
                continue
            seen[root] = True
            queue = deque([root])
            while queue:
                f = queue.popleft()
                for g, shared in neighbours[f]:
                    ef = self._edge_with(t[f], shared)
                    eg = self._edge_with(t[g], shared)
                    consistent = ef[0] == eg[1]
                    if not seen[g]:
                        seen[g] = True
                        if not consistent:
                            t[g] = t[g][::-1]
                            n_flips += 1
                        queue.append(g)
                    elif not consistent:
                        raise MeshError(f"mesh is not orientable (at triangle {g})", index=g)
        if n_flips:
            logger.info("reoriented %d triangles for a consistent orientation", n_flips)
        return t

    @staticmethod
    def _edge_with(tri, shared):
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            if a in shared and b in shared:
                return a, b
        raise AssertionError("shared edge not found")

    # ------------------------------------------------------------ geometry
    @cached_property
    def triangle_areas(self):
        v, t = self.vertices, self.triangles
        a = v[t[:, 1]] - v[t[:, 0]]
        b = v[t[:, 2]] - v[t[:, 0]]
        aa = np.einsum("ij,ij->i", a, a)
        bb = np.einsum("ij,ij->i", b, b)
        ab = np.einsum("ij,ij->i", a, b)
        return 0.5 * np.sqrt(np.maximum(aa * bb - ab * ab, 0.0))

    @cached_property
    def vertex_areas(self):
        """Lumped (barycentric) vertex areas: one third of incident triangle areas."""
        w = np.zeros(self.n_vertices)
        np.add.at(w, self.triangles.ravel(), np.repeat(self.triangle_areas / 3.0, 3))
        return w

    @property
    def area(self):
        return float(self.triangle_areas.sum())

    @cached_property
    def edges(self):
        """Unique undirected edges, shape (E, 2), sorted lexicographically."""
        e = np.sort(self._directed_edges(self.triangles), axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def edge_lengths(self):
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    @property
    def median_edge_length(self):
        return float(np.median(self.edge_lengths))

    @cached_property
    def edge_graph(self):
        """Symmetric sparse matrix of Euclidean edge lengths."""
        e, w = self.edges, self.edge_lengths
        n = self.n_vertices
        g = sparse.coo_matrix(
            (np.concatenate([w, w]), (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))),
            shape=(n, n),
        )
        return g.tocsr()

    @cached_property
    def boundary_edges(self):
        """Directed boundary edges (a, b), following the mesh orientation."""
        d = self._directed_edges(self.triangles)
        keys = set(map(tuple, d.tolist()))
        mask = np.array([(b, a) not in keys for a, b in d.tolist()], dtype=bool)
        return d[mask]

    @cached_property
    def boundary_loops(self):
        """List of boundary cycles, each an int array of vertex indices in order."""
        be = self.boundary_edges
        if len(be) == 0:
            return []
        nxt = {}
        for a, b in be.tolist():
            nxt.setdefault(a, []).append(b)
        used = set()
        loops = []
        for a0, b0 in be.tolist():
            if (a0, b0) in used:
                continue
            loop = [a0]
            a, b = a0, b0
            while True:
                used.add((a, b))
                if b == a0:
                    break
                loop.append(b)
                cands = [c for c in nxt[b] if (b, c) not in used]
                if not cands:
                    raise MeshError("open boundary chain; mesh is not a manifold with boundary")
                a, b = b, cands[0]
            loops.append(np.array(loop, dtype=np.int64))
        return loops

    @cached_property
    def boundary_vertices(self):
        if not self.boundary_loops:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(self.boundary_loops))

    @property
    def is_closed(self):
        return len(self.boundary_edges) == 0

    @cached_property
    def components(self):
        """Connected-component label per vertex."""
        _, labels = csgraph.connected_components(self.edge_graph, directed=False)
        return labels

    @property
    def n_components(self):
        return int(self.components.max()) + 1

    def euler_characteristic(self):
        used = np.unique(self.triangles)
        return len(used) - len(self.edges) + self.n_triangles

    # ------------------------------------------------------------ transforms
    def scaled(self, s):
        return TriangleMesh(self.vertices * s, self.triangles)

    def with_vertices(self, vertices):
        return TriangleMesh(vertices, self.triangles)


def genus(mesh):
    """Genus from V - E + F = 2 - 2*genus - b, for a connected orientable mesh."""
    if mesh.n_components != 1:
        raise MeshError("genus requires a connected mesh")
    chi = mesh.euler_characteristic()
    b = len(mesh.boundary_loops)
    g2 = 2 - b - chi
    if g2 < 0 or g2 % 2:
        raise MeshError(f"inconsistent Euler characteristic {chi} with {b} boundary loops")
    return g2 // 2


# ---------------------------------------------------------------- stiffness
def assemble_stiffness(mesh):
    """Cotangent stiffness matrix.

    ``u @ K @ u`` is the Dirichlet energy of the piecewise-linear interpolant
    of ``u``. Rows sum to zero; entries depend only on triangle angles, so
    they are unchanged by isotropic rescaling. Neumann conditions on the
    boundary are implicit.
    """
    v, t = mesh.vertices, mesh.triangles
    two_area = 2.0 * mesh.triangle_areas
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j, o = t[:, (k + 1) % 3], t[:, (k + 2) % 3], t[:, k]
        a = v[i] - v[o]
        b = v[j] - v[o]
        cot = np.einsum("ij,ij->i", a, b) / two_area
        w = 0.5 * cot
        rows += [i, j, i, j]
        cols += [j, i, i, j]
        vals += [-w, -w, w, w]
    n = mesh.n_vertices
    K = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    K.sum_duplicates()
    K.sort_indices()
    return K


# ---------------------------------------------------------------- regions
@dataclass(frozen=True)
class Region:
    """A vertex set, optionally remembering how it was built."""

    vertices: np.ndarray
    kind: str = "custom"
    center: int | None = None
    r: float | None = None
    R: float | None = None
    n_total: int | None = field(default=None, compare=False)

    def __post_init__(self):
        vs = np.unique(np.asarray(self.vertices, dtype=np.int64))
        object.__setattr__(self, "vertices", vs)

    def __len__(self):
        return len(self.vertices)

    def __eq__(self, other):
        if not isinstance(other, Region):
            return NotImplemented
        return (np.array_equal(self.vertices, other.vertices)
                and (self.kind, self.center, self.r, self.R)
                == (other.kind, other.center, other.r, other.R))

    def __hash__(self):
        return hash((self.vertices.tobytes(), self.kind, self.center, self.r, self.R))

    def __contains__(self, v):
        i = np.searchsorted(self.vertices, v)
        return i < len(self.vertices) and self.vertices[i] == v

    def mask(self, n):
        m = np.zeros(n, dtype=bool)
        m[self.vertices] = True
        return m

    def issubset(self, other):
        return bool(np.isin(self.vertices, other.vertices).all())

    def isdisjoint(self, other):
        return not np.intersect1d(self.vertices, other.vertices).size

    def to_json(self):
        return json.dumps([int(i) for i in self.vertices])

    def descriptor(self):
        d = {"kind": self.kind, "vertices": [int(i) for i in self.vertices]}
        if self.center is not None:
            d.update(center=int(self.center), r=self.r, R=self.R)
        return d

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        if isinstance(data, dict):
            return cls(np.array(data["vertices"], dtype=np.int64), data.get("kind", "custom"),
                       data.get("center"), data.get("r"), data.get("R"))
        return cls(np.array(data, dtype=np.int64))


def graph_distances(mesh, sources, limit=np.inf):
    """Shortest edge-path distances from each source, shape (len(sources), n)."""
    src = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    if src.size and (src.min() < 0 or src.max() >= mesh.n_vertices):
        raise MeshError("source vertex out of range")
    return csgraph.dijkstra(mesh.edge_graph, directed=False, indices=src, limit=limit)


def graph_ball(mesh, center, r):
    """Vertices at graph distance strictly less than ``r`` from ``center``."""
    if not 0 <= center < mesh.n_vertices:
        raise MeshError(f"center {center} out of range")
    if r < 0:
        raise ValueError("radius must be nonnegative")
    d = graph_distances(mesh, center, limit=r)[0]
    return Region(np.nonzero(d < r)[0], kind="ball", center=int(center), r=0.0, R=float(r))


def graph_annulus(mesh, center, r, R):
    """Return ``(A, 2A)`` with A = {r <= d < R} and 2A = {r/2 <= d < 2R}."""
    if not 0 <= center < mesh.n_vertices:
        raise MeshError(f"center {center} out of range")
    if not 0 <= r < R:
        raise ValueError("annulus radii need 0 <= r < R")
    d = graph_distances(mesh, center, limit=2 * R)[0]
    a = Region(np.nonzero((d >= r) & (d < R))[0], kind="annulus", center=int(center), r=float(r), R=float(R))
    a2 = Region(np.nonzero((d >= r / 2) & (d < 2 * R))[0], kind="annulus", center=int(center),
                r=float(r) / 2, R=2 * float(R))
    return a, a2


def vertex_neighbourhood(mesh, region):
    """``region`` plus every vertex sharing an edge with it."""
    m = region.mask(mesh.n_vertices)
    e = mesh.edges
    hit = m[e[:, 0]] | m[e[:, 1]]
    out = m.copy()
    out[e[hit].ravel()] = True
    return Region(np.nonzero(out)[0])


# ---------------------------------------------------------------- refinement
def subdivide(mesh, project_to_sphere=False):
    """Midpoint (1 -> 4) subdivision; optionally reproject onto the unit sphere."""
    v, t = mesh.vertices, mesh.triangles
    e = mesh.edges
    n = len(v)
    index = {tuple(ab): n + i for i, ab in enumerate(e.tolist())}
    mids = 0.5 * (v[e[:, 0]] + v[e[:, 1]])
    nv = np.vstack([v, mids])
    if project_to_sphere:
        nv = nv / np.linalg.norm(nv, axis=1, keepdims=True)

    def mid(a, b):
        return index[(a, b) if a < b else (b, a)]

    tris = []
    for a, b, c in t.tolist():
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        tris += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
    return TriangleMesh(nv, np.array(tris))


# ---------------------------------------------------------------- file io
def _read_bytes(source):
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if isinstance(source, (str, Path)):
        return Path(source).read_bytes()
    data = source.read()
    return data.encode() if isinstance(data, str) else data


def _clean_lines(text, comment="#"):
    for raw in text.splitlines():
        line = raw.split(comment, 1)[0].strip()
        if line:
            yield line


def _fan(face):
    return [(face[0], face[i], face[i + 1]) for i in range(1, len(face) - 1)]


def parse_off(text):
    lines = list(_clean_lines(text))
    if not lines or not lines[0].startswith("OFF"):
        raise MeshError("missing OFF header")
    head = lines[0][3:].split()
    rest = lines[1:]
    if not head:
        head, rest = rest[0].split(), rest[1:]
    try:
        nv, nf = int(head[0]), int(head[1])
        verts = [[float(x) for x in rest[i].split()[:3]] for i in range(nv)]
        faces = []
        for j in range(nf):
            tok = rest[nv + j].split()
            k = int(tok[0])
            face = [int(x) for x in tok[1:1 + k]]
            if len(face) != k or k < 3:
                raise MeshError(f"face {j} is malformed", index=j)
            faces += _fan(face)
    except (IndexError, ValueError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"OFF parse failure: {exc}") from exc
    return verts, faces


def parse_obj(text):
    verts, faces = [], []
    for lineno, line in enumerate(_clean_lines(text)):
        tok = line.split()
        try:
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = []
                for item in tok[1:]:
                    i = int(item.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise MeshError(f"face on line {lineno} has fewer than 3 vertices", index=lineno)
                faces += _fan(idx)
        except ValueError as exc:
            if isinstance(exc, MeshError):
                raise
            raise MeshError(f"OBJ parse failure on line {lineno}: {exc}", index=lineno) from exc
    return verts, faces


def load_mesh(source, format=None):
    """Read an ASCII OFF or OBJ mesh from a path, bytes or binary stream."""
    if format is None:
        if isinstance(source, (str, Path)):
            format = Path(source).suffix.lstrip(".")
        else:
            raise ValueError("format is required for stream input")
    data = _read_bytes(source).decode("utf-8", errors="replace")
    fmt = format.lower()
    if fmt == "off":
        verts, faces = parse_off(data)
    elif fmt == "obj":
        verts, faces = parse_obj(data)
    else:
        raise ValueError(f"unsupported mesh format {format!r}")
    if not verts:
        raise MeshError("mesh has no vertices")
    return TriangleMesh(np.array(verts, dtype=float), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_off(mesh, target=None):
    """Write an OFF file (3D only). Returns the text when ``target`` is None."""
    v = mesh.vertices
    if v.shape[1] == 2:
        v = np.column_stack([v, np.zeros(len(v))])
    if v.shape[1] != 3:
        raise MeshError("OFF output needs a 3D embedding")
    buf = io.StringIO()
    buf.write(f"OFF\n{len(v)} {mesh.n_triangles} {len(mesh.edges)}\n")
    for x in v:
        buf.write(" ".join(repr(float(c)) for c in x) + "\n")
    for a, b, c in mesh.triangles.tolist():
        buf.write(f"3 {a} {b} {c}\n")
    text = buf.getvalue()
    if target is None:
        return text
    Path(target).write_text(text)
    return None
