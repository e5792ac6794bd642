"""Discrete Radon measures on a mesh, conformal tilts and the integral distance.

A :class:`DiscreteMeasure` stores nonnegative per-vertex weights together
with an explicit list of atoms. On a fixed mesh every measure is formally a
sum of point masses; the atom flag records which continuum object is being
modelled, which matters for the concentration and growth diagnostics.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import graph_distances

SUPPORT_KINDS = ("interior", "boundary", "mixed")
SUPPORT_RTOL = 1e-14
EXP_GUARD = 700.0


class MeasureError(ValueError):
    pass


@dataclass(frozen=True)
class DiscreteMeasure:
    """Nonnegative vertex weights plus flagged atoms.

    Parameters
    ----------
    weights : ndarray, shape (n,)
        Diffuse part, one weight per vertex.
    atoms : tuple of (int, float)
        Point masses flagged as atoms. They add to the vertex mass but are
        tracked separately.
    support_kind : {"interior", "boundary", "mixed"}
        Whether the diffuse part lives on the surface, on its boundary, or both.
    kind : str
        Descriptor label used for serialization.
    """

    weights: np.ndarray
    atoms: tuple = ()
    support_kind: str = "interior"
    kind: str = "density"
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 1:
            raise MeasureError("weights must be one-dimensional")
        if not np.all(np.isfinite(w)) or (w < 0).any():
            raise MeasureError("weights must be finite and nonnegative")
        atoms = tuple((int(v), float(m)) for v, m in self.atoms)
        idx = [v for v, _ in atoms]
        if len(set(idx)) != len(idx):
            raise MeasureError("repeated atom vertex")
        for v, m in atoms:
            if not 0 <= v < len(w):
                raise MeasureError(f"atom vertex {v} out of range")
            if not m > 0 or not np.isfinite(m):
                raise MeasureError(f"atom mass {m} must be positive")
        if self.support_kind not in SUPPORT_KINDS:
            raise MeasureError(f"unknown support kind {self.support_kind!r}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "atoms", atoms)
        if not self.total > 0:
            raise MeasureError("total mass must be positive")

    @property
    def n(self):
        return len(self.weights)

    @property
    def masses(self):
        """Per-vertex mass: diffuse weight plus any atom at that vertex."""
        if "masses" not in self._cache:
            m = self.weights.copy()
            for v, a in self.atoms:
                m[v] += a
            m.setflags(write=False)
            self._cache["masses"] = m
        return self._cache["masses"]

    @property
    def total(self):
        return float(self.weights.sum() + sum(m for _, m in self.atoms))

    @property
    def support(self):
        """Boolean mask of vertices with mass above ``1e-14 * max mass``."""
        m = self.masses
        return m > SUPPORT_RTOL * m.max()

    @property
    def has_atoms(self):
        return bool(self.atoms)

    @property
    def is_dirac(self):
        return self.has_atoms and int(self.support.sum()) == 1

    def is_probability(self, tol=1e-12):
        return abs(self.total - 1.0) <= tol

    def normalized(self):
        s = self.total
        return DiscreteMeasure(self.weights / s, tuple((v, m / s) for v, m in self.atoms),
                               self.support_kind, self.kind)

    def scaled(self, s):
        if not s > 0:
            raise MeasureError("scale must be positive")
        return DiscreteMeasure(self.weights * s, tuple((v, m * s) for v, m in self.atoms),
                               self.support_kind, self.kind)

    def with_masses(self, masses):
        """Same atom pattern and support kind, with new per-vertex masses."""
        masses = np.asarray(masses, dtype=float)
        if not self.atoms:
            return DiscreteMeasure(masses, (), self.support_kind, self.kind)
        old = self.masses
        w = masses.copy()
        atoms = []
        for v, a in self.atoms:
            share = a / old[v]
            atoms.append((v, masses[v] * share))
            w[v] = masses[v] * (1 - share)
        return DiscreteMeasure(w, tuple(atoms), self.support_kind, self.kind)

    def integrate(self, f):
        return float(np.dot(self.masses, f))

    def mean(self, f):
        return self.integrate(f) / self.total

    def descriptor(self):
        """Exact descriptor: raw weights rather than a density relative to area."""
        return {"kind": "density", "support_kind": self.support_kind,
                "weights": [float(x) for x in self.weights],
                "atoms": [[int(v), float(m)] for v, m in self.atoms]}

    def to_json(self):
        from .serialize import dumps

        return dumps(self.descriptor())


def uniform_area_measure(mesh):
    """Lumped area measure: each vertex gets a third of its incident triangle areas."""
    if mesh.n_vertices == 0 or mesh.n_triangles == 0:
        raise MeasureError("empty mesh")
    return DiscreteMeasure(mesh.vertex_areas, (), "interior", "uniform")


def density_measure(mesh, density):
    """Measure with the given per-vertex density relative to the lumped area."""
    density = np.asarray(density, dtype=float)
    if density.shape != (mesh.n_vertices,):
        raise MeasureError("density must have one value per vertex")
    return DiscreteMeasure(density * mesh.vertex_areas, (), "interior", "density")


def boundary_lengths(mesh):
    """Half the lengths of the boundary edges adjacent to each vertex."""
    w = np.zeros(mesh.n_vertices)
    be = mesh.boundary_edges
    if len(be):
        L = np.linalg.norm(mesh.vertices[be[:, 0]] - mesh.vertices[be[:, 1]], axis=1)
        np.add.at(w, be[:, 0], 0.5 * L)
        np.add.at(w, be[:, 1], 0.5 * L)
    return w


def boundary_measure(mesh):
    """Boundary length measure, lumped to the boundary vertices."""
    if mesh.is_closed:
        raise MeasureError("no boundary")
    return DiscreteMeasure(boundary_lengths(mesh), (), "boundary", "boundary")


def atomic_measure(mesh, atoms):
    """Measure made only of point masses ``[(vertex, mass), ...]``."""
    atoms = [(int(v), float(m)) for v, m in atoms]
    if not atoms:
        raise MeasureError("at least one atom required")
    for v, _ in atoms:
        if not 0 <= v < mesh.n_vertices:
            raise MeasureError(f"atom vertex {v} out of range")
    return DiscreteMeasure(np.zeros(mesh.n_vertices), tuple(atoms), "interior", "atomic")


def measure_from_descriptor(mesh, desc, base_dir=None):
    """Build a measure from a descriptor dict (or a JSON string).

    Kinds: ``uniform``, ``boundary``, ``density`` (key ``density`` holds a
    per-vertex density relative to area, key ``weights`` raw vertex masses),
    ``atomic`` (key ``atoms``) and ``file`` (key
    ``path`` naming a JSON descriptor or a whitespace-separated list of
    per-vertex weights). A ``density`` descriptor may also carry ``atoms``.
    """
    if isinstance(desc, str):
        desc = json.loads(desc)
    kind = desc.get("kind")
    if kind == "uniform":
        return uniform_area_measure(mesh)
    if kind == "boundary":
        return boundary_measure(mesh)
    if kind == "atomic":
        return atomic_measure(mesh, desc.get("atoms", []))
    if kind == "density":
        if "weights" in desc:
            return DiscreteMeasure(np.asarray(desc["weights"], dtype=float),
                                   tuple(tuple(a) for a in desc.get("atoms", [])),
                                   desc.get("support_kind", "interior"), "density")
        m = density_measure(mesh, desc["density"])
        if desc.get("atoms"):
            m = DiscreteMeasure(m.weights, tuple(tuple(a) for a in desc["atoms"]), "interior", "density")
        return m
    if kind == "file":
        path = Path(desc["path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        text = path.read_text()
        try:
            inner = json.loads(text)
        except json.JSONDecodeError:
            w = np.array(text.split(), dtype=float)
            if w.shape != (mesh.n_vertices,):
                raise MeasureError("weight file must have one value per vertex")
            return DiscreteMeasure(w, (), "interior", "density")
        if isinstance(inner, list):
            return DiscreteMeasure(np.asarray(inner, dtype=float), (), "interior", "density")
        return measure_from_descriptor(mesh, inner, base_dir=path.parent)
    raise MeasureError(f"unknown measure kind {kind!r}")


# ---------------------------------------------------------------- deformations
class DeformationFamily:
    """Exponential tilt ``mu_t = exp(t phi) mu / Z(t)`` of a base measure.

    ``phi`` is shifted on construction to have zero mean against the base.
    """

    def __init__(self, base, phi):
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (base.n,):
            raise MeasureError("phi must have one value per vertex")
        if not np.all(np.isfinite(phi)):
            raise MeasureError("phi must be bounded")
        self.base = base
        self.phi = phi - base.mean(phi)
        self.phi.setflags(write=False)
        self.sup_norm = float(np.abs(self.phi[base.support]).max(initial=0.0))

    def __call__(self, t):
        return deform(self, t)


def deform(family, t):
    """Probability measure ``w_i exp(phi_i t) / sum_j w_j exp(phi_j t)``."""
    base, phi = family.base, family.phi
    if abs(t) * float(np.abs(phi).max(initial=0.0)) > EXP_GUARD:
        raise MeasureError("exponent overflow: |t| * sup|phi| exceeds 700")
    m = base.masses
    s = phi * t
    live = m > 0
    s = s - s[live].max()
    w = np.where(live, m * np.exp(s), 0.0)
    return base.with_masses(w / w.sum())


@dataclass(frozen=True)
class IntegralDistance:
    d: float
    delta: float

    def __iter__(self):
        return iter((self.d, self.delta))


def integral_distance(a, b, tol=1e-9):
    """Integral distance between probability measures and ``delta = exp(d) - 1``.

    For measures with a common vertex support the supremum over nonnegative
    test functions is attained at single-vertex indicators, giving
    ``max |ln(w_i / w'_i)|``. Different supports give infinity.
    """
    for m in (a, b):
        if not m.is_probability(tol):
            raise MeasureError(f"integral distance needs probability measures (mass {m.total})")
    sa, sb = a.support, b.support
    if not np.array_equal(sa, sb):
        return IntegralDistance(np.inf, np.inf)
    d = float(np.abs(np.log(a.masses[sa] / b.masses[sb])).max())
    return IntegralDistance(d, float(np.expm1(d)))


# ---------------------------------------------------------------- ball growth
@dataclass(frozen=True)
class BallGrowthProfile:
    radii: np.ndarray
    profile: np.ndarray
    q: float
    trend: str

    def to_dict(self):
        return {"q": self.q, "radii": list(map(float, self.radii)),
                "profile": list(map(float, self.profile)), "trend": self.trend,
                "label": "heuristic"}


def default_radii(mesh, n=16, r_min=1e-3):
    top = min(mesh.median_edge_length, 0.5)
    return np.geomspace(top, min(r_min, top / 2), n)


def _subcell_scales(mesh, mu):
    """Per-vertex cell size for the sub-mesh ball model (area or half-length)."""
    if mu.support_kind == "boundary":
        return boundary_lengths(mesh), 1
    return mesh.vertex_areas, 2


def ball_masses(mesh, mu, radii, chunk=512):
    """``max_x mu(B(x, r))`` for each radius, resolving balls below mesh size.

    A vertex cell is modelled as a small disk (or a segment for boundary
    measures) so that a ball of radius ``s`` around the vertex captures the
    fraction ``min(1, pi s^2 / area)`` (or ``min(1, 2 s / length)``) of its
    diffuse weight. Atoms count fully once inside the ball. Without this the
    profile would be flat at every radius below the edge length.
    """
    radii = np.asarray(radii, dtype=float)
    w, atoms = mu.weights, mu.atoms
    cell, dim = _subcell_scales(mesh, mu)
    cell = np.where(cell > 0, cell, np.inf)
    atom_v = np.array([v for v, _ in atoms], dtype=int)
    atom_m = np.array([m for _, m in atoms], dtype=float)
    live = mu.weights > 0
    rmax = float(radii.max())
    best = np.zeros(len(radii))
    n = mesh.n_vertices
    for start in range(0, n, chunk):
        src = np.arange(start, min(n, start + chunk))
        D = graph_distances(mesh, src, limit=rmax)
        rows, cols = np.nonzero(np.isfinite(D) & live[None, :])
        dist = D[rows, cols]
        wc, cc = w[cols], cell[cols]
        for k, r in enumerate(radii):
            s = np.clip(r - dist, 0.0, None)
            if dim == 2:
                f = np.minimum(1.0, np.pi * s ** 2 / cc)
            else:
                f = np.minimum(1.0, 2.0 * s / cc)
            tot = np.bincount(rows, weights=f * wc, minlength=len(src))
            if atom_v.size:
                tot = tot + (D[:, atom_v] < r) @ atom_m
            best[k] = max(best[k], float(tot.max()))
    return best


def ball_growth_diagnostic(mesh, mu, q=1.0, radii=None):
    """Profile ``r -> max_x mu(B(x, r)) * ln(1/r)**q`` with a trend verdict.

    The trend is ``"decaying"`` when the value at the smallest radius is below
    half the profile maximum, ``"non-decaying"`` otherwise. This is a
    heuristic: decay of the profile is a continuum property.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    radii = default_radii(mesh) if radii is None else np.asarray(radii, dtype=float)
    if (radii <= 0).any() or (radii >= 1).any():
        raise ValueError("radii must lie in (0, 1)")
    masses = ball_masses(mesh, mu, radii)
    prof = masses * np.log(1.0 / radii) ** q
    i_small = int(np.argmin(radii))
    peak = prof.max()
    trend = "decaying" if peak > 0 and prof[i_small] < 0.5 * peak else "non-decaying"
    return BallGrowthProfile(radii, prof, float(q), trend)


def max_ball_mass(mesh, mu, r, chunk=512):
    """Largest mass of a vertex-set graph ball ``{d(x, .) < r}`` and its center."""
    m = mu.masses
    best, arg = -1.0, 0
    n = mesh.n_vertices
    for start in range(0, n, chunk):
        src = np.arange(start, min(n, start + chunk))
        D = graph_distances(mesh, src, limit=r)
        tot = (D < r) @ m
        i = int(np.argmax(tot))
        if tot[i] > best:
            best, arg = float(tot[i]), int(src[i])
    return best, arg
