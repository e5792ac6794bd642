"""Capacities, fundamental tones and isocapacity estimates on meshes.

``CAP(F, G)`` is the least Dirichlet energy of a vertex function equal to 1
on ``F`` and to 0 off ``G``. The fundamental tone of a region is the least
Rayleigh quotient of functions vanishing off it. The isocapacity constant
``beta = sup_F mu(F) / CAP(F, omega)`` brackets the tone from both sides;
here ``beta`` is only estimated from below over a family of candidate sets.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse import linalg as spla

from .mesh import Region, graph_distances
from .measure import SUPPORT_RTOL

logger = logging.getLogger(__name__)

DENSE_MAX = 500


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class Capacitor:
    """Nested pair ``F`` inside ``G``."""

    F: Region
    G: Region

    def __post_init__(self):
        if not self.F.issubset(self.G):
            raise CapacityError("capacitor needs F inside G")


@dataclass
class CapacityReport:
    cap_value: float
    potential: np.ndarray
    tone: float | None = None
    beta_lower: float | None = None
    candidate_log: list = field(default_factory=list)
    max_principle: bool = True

    def to_dict(self):
        return {"cap_value": self.cap_value, "tone": self.tone, "beta_lower": self.beta_lower,
                "beta_is_lower_bound": True, "max_principle": self.max_principle,
                "candidate_log": self.candidate_log}


def _mask(n, region):
    if isinstance(region, Region):
        return region.mask(n)
    region = np.asarray(region)
    if region.dtype == bool:
        return region
    m = np.zeros(n, dtype=bool)
    m[region.astype(np.int64)] = True
    return m


def _free_components_check(K, free, fixed):
    """Raise if a component of the free set touches no fixed vertex."""
    idx = np.nonzero(free)[0]
    if not len(idx):
        return
    A = (K != 0).astype(np.int8)
    sub = A[idx][:, idx]
    ncomp, labels = csgraph.connected_components(sub, directed=False)
    touches = np.zeros(ncomp, dtype=bool)
    coupled = A[idx][:, np.nonzero(fixed)[0]]
    hit = np.asarray(coupled.sum(axis=1)).ravel() > 0
    touches[labels[hit]] = True
    if not touches.all():
        bad = int(np.nonzero(~touches)[0][0])
        raise CapacityError(f"free component {bad} (containing vertex {int(idx[labels == bad][0])}) "
                            "is isolated from both plates")


def capacitor_potential(K, F, G):
    """Equilibrium potential of ``(F, G)`` given as boolean masks."""
    n = K.shape[0]
    u = np.zeros(n)
    u[F] = 1.0
    free = G & ~F
    if not F.any():
        return u
    if G.all():
        raise CapacityError("G must leave some vertex outside for a nontrivial capacity")
    _free_components_check(K, free, ~free)
    fi = np.nonzero(free)[0]
    if len(fi):
        K = sparse.csr_matrix(K)
        Kff = K[fi][:, fi].tocsc()
        rhs = -(K[fi][:, np.nonzero(F)[0]] @ np.ones(int(F.sum())))
        u[fi] = spla.spsolve(Kff, rhs) if len(fi) > 1 else rhs / Kff.toarray().ravel()
    return u


def cap(mesh, K, capacitor):
    """Capacity of ``capacitor`` by a linear solve on ``G \\ F``."""
    n = mesh.n_vertices
    F = _mask(n, capacitor.F)
    G = _mask(n, capacitor.G)
    if not F.any():
        return CapacityReport(0.0, np.zeros(n))
    u = capacitor_potential(K, F, G)
    val = float(u @ (K @ u))
    ok = bool(u.min() >= -1e-10 and u.max() <= 1 + 1e-10)
    return CapacityReport(max(val, 0.0), u, max_principle=ok)


def cap_value(mesh, K, F, G):
    return cap(mesh, K, Capacitor(_region(mesh, F), _region(mesh, G))).cap_value


def _region(mesh, r):
    if isinstance(r, Region):
        return r
    r = np.asarray(r)
    if r.dtype == bool:
        r = np.nonzero(r)[0]
    return Region(r)


# ---------------------------------------------------------------- tones
def _smallest_pencil(Ksub, msub, want_vector=True):
    """Smallest eigenpair of ``Ksub u = lam diag(msub) u`` with PD ``Ksub``."""
    thr = SUPPORT_RTOL * msub.max()
    S = msub > thr
    ns = int(S.sum())
    n = len(msub)
    if n <= DENSE_MAX or ns <= 3:
        Kd = Ksub.toarray() if sparse.issparse(Ksub) else np.asarray(Ksub)
        O = ~S
        if O.any():
            X = scipy.linalg.solve(Kd[np.ix_(O, O)], Kd[np.ix_(O, S)], assume_a="pos")
            schur = Kd[np.ix_(S, S)] - Kd[np.ix_(O, S)].T @ X
        else:
            schur = Kd
        d = 1 / np.sqrt(msub[S])
        C = d[:, None] * schur * d[None, :]
        lam, Y = scipy.linalg.eigh(0.5 * (C + C.T), subset_by_index=[0, 0])
        u = np.zeros(n)
        u[S] = d * Y[:, 0]
        if O.any():
            u[O] = -X @ u[S]
        return float(lam[0]), u
    lu = spla.splu(sparse.csc_matrix(Ksub))
    idx = np.nonzero(S)[0]
    sq = np.sqrt(msub[idx])
    buf = np.zeros(n)

    def op(y):
        buf[:] = 0.0
        buf[idx] = sq * np.ravel(y)
        return sq * lu.solve(buf)[idx]

    T = spla.LinearOperator((ns, ns), matvec=op, dtype=float)
    v0 = np.random.default_rng(0).standard_normal(ns)
    theta, Y = spla.eigsh(T, k=1, which="LA", v0=v0, tol=0.0)
    lam = 1.0 / theta[0]
    buf[:] = 0.0
    buf[idx] = sq * Y[:, 0]
    u = lam * lu.solve(buf)
    return float(lam), u


def fundamental_tone(mesh, K, mu, omega, return_function=False):
    """Least Rayleigh quotient over functions vanishing off ``omega``.

    Returns ``+inf`` when ``mu(omega) = 0``.
    """
    n = mesh.n_vertices
    w = _mask(n, omega)
    if w.all():
        raise CapacityError("omega must be a proper subdomain")
    if not w.any():
        raise CapacityError("omega is empty")
    m = mu.masses
    thr = SUPPORT_RTOL * m.max()
    if not (m[w] > thr).any():
        return (np.inf, np.zeros(n)) if return_function else np.inf
    idx = np.nonzero(w)[0]
    Ksub = sparse.csr_matrix(K)[idx][:, idx]
    lam, v = _smallest_pencil(Ksub, np.where(m[idx] > thr, m[idx], 0.0))
    if not return_function:
        return lam
    u = np.zeros(n)
    u[idx] = v
    if u[idx].sum() < 0:
        u = -u
    return lam, u


# ---------------------------------------------------------------- isocapacity
def _farthest_point_sample(mesh, candidates, count):
    candidates = np.asarray(candidates)
    if len(candidates) <= count:
        return candidates
    chosen = [int(candidates[0])]
    dmin = graph_distances(mesh, chosen[0])[0][candidates]
    for _ in range(count - 1):
        j = int(np.argmax(dmin))
        chosen.append(int(candidates[j]))
        dmin = np.minimum(dmin, graph_distances(mesh, candidates[j])[0][candidates])
    return np.array(chosen)


def _superlevels(u, within, levels):
    sets = []
    top = u[within].max() if within.any() else 0
    if top <= 0:
        return sets
    for s in levels:
        F = within & (u >= s * top)
        if F.any():
            sets.append((s, F))
    return sets


def isocapacity_constant(mesh, K, mu, omega, family="default", n_centers=16, n_levels=8,
                         n_heavy=5):
    """Lower estimate of ``beta(omega, mu) = sup_F mu(F) / CAP(F, omega)``.

    The family is: graph balls inside ``omega`` around farthest-point
    sampled centres, the heaviest single vertices, superlevel sets of the
    tone eigenfunction, and superlevel sets of the equilibrium potentials
    of the ball candidates. Returns ``(beta_lower, candidate_log)``; the log
    lists every candidate with its mass and capacity, best first.
    """
    n = mesh.n_vertices
    w = _mask(n, omega)
    if w.all():
        raise CapacityError("omega must be a proper subdomain")
    m = mu.masses
    if m[w].sum() <= 0:
        return 0.0, []
    levels = np.linspace(0.1, 0.9, n_levels) if n_levels > 1 else [0.5]
    cands = []

    def add(kind, F, **info):
        if F.any() and F[w].sum() == F.sum():
            cands.append((kind, F, info))

    idx = np.nonzero(w)[0]
    h = mesh.median_edge_length
    centers = _farthest_point_sample(mesh, idx, n_centers)
    ball_sets = []
    for c in centers:
        d = graph_distances(mesh, int(c))[0]
        dout = d[~w].min() if (~w).any() else np.inf
        for r in h * np.array([0.5, 1.5, 3, 6, 12, 24, 48]):
            if r >= dout:
                break
            F = d < r
            add("ball", F, center=int(c), r=float(r))
            ball_sets.append(F)
    heavy = idx[np.argsort(-m[idx], kind="stable")[:n_heavy]]
    for v in heavy:
        F = np.zeros(n, dtype=bool)
        F[v] = True
        add("vertex", F, vertex=int(v))
    tone, u = fundamental_tone(mesh, K, mu, w, return_function=True)
    if np.isfinite(tone):
        for s, F in _superlevels(u, w, levels):
            add("tone-superlevel", F, level=float(s))
    for F0 in ball_sets[:: max(1, len(ball_sets) // 8)]:
        pot = capacitor_potential(K, F0, w)
        for s, F in _superlevels(pot, w, levels):
            add("potential-superlevel", F, level=float(s))
    if not cands:
        raise CapacityError("no candidate set fits inside omega")
    log = []
    seen = set()
    for kind, F, info in cands:
        key = np.packbits(F).tobytes()
        if key in seen:
            continue
        seen.add(key)
        c = cap(mesh, K, Capacitor(Region(np.nonzero(F)[0]), Region(idx))).cap_value
        mass = float(m[F].sum())
        ratio = mass / c if c > 0 else (np.inf if mass > 0 else 0.0)
        log.append({"kind": kind, **info, "size": int(F.sum()), "mass": mass, "cap": c, "ratio": ratio})
    log.sort(key=lambda e: -e["ratio"])
    return float(log[0]["ratio"]), log


@dataclass(frozen=True)
class MazjaReport:
    lhs: float
    tone: float
    rhs: float
    beta_lower: float
    passed: bool
    left_holds: bool

    def to_dict(self):
        return {"lhs": self.lhs, "tone": self.tone, "rhs": self.rhs, "beta_lower": self.beta_lower,
                "pass": self.passed, "left_informational": self.left_holds}


def mazja_bracket(mesh, K, mu, omega, tol=0.05, **kw):
    """Check ``tone <= 1 / beta_lower`` and report ``1 / (4 beta_lower) <= tone``.

    The right inequality holds for every candidate set, since the
    equilibrium potential of ``F`` is a test function for the tone with
    quotient at most ``CAP / mu(F)``. The left one involves the true
    ``beta`` and is informational only.
    """
    n = mesh.n_vertices
    w = _mask(n, omega)
    if mu.masses[w].sum() <= SUPPORT_RTOL * mu.masses.max():
        return MazjaReport(0.0, np.inf, np.inf, 0.0, True, True)
    tone = fundamental_tone(mesh, K, mu, w)
    beta, _ = isocapacity_constant(mesh, K, mu, w, **kw)
    rhs = 1.0 / beta if beta > 0 else np.inf
    lhs = 1.0 / (4 * beta) if beta > 0 else np.inf
    return MazjaReport(lhs, tone, rhs, beta, bool(tone <= rhs * (1 + tol)), bool(lhs <= tone))


# ---------------------------------------------------------------- tone bracket
def _lambda1(mesh, K, mu):
    from .spectrum import measure_spectrum

    r = measure_spectrum(mesh, mu, 1, K=K)
    return float(r.eigenvalues[1]), (r.eigenfunctions[:, 1] if r.n_computed > 1 else None)


def _median_split(u, m):
    order = np.argsort(u, kind="stable")
    cm = np.cumsum(m[order])
    j = int(np.searchsorted(cm, 0.5 * cm[-1]))
    return u[order[min(j, len(u) - 1)]]


@dataclass(frozen=True)
class ToneBracketReport:
    inf_tone: float
    inf_tone_est: float
    lambda1: float
    ratio: float
    upper_bound: float
    upper_ok: bool
    lower_ok: bool
    lower_asserted: bool
    passed: bool

    def to_dict(self):
        return dict(self.__dict__, **{"pass": self.passed})


def tone_bracket(mesh, K, mu, omegas, tol=1e-6):
    """Relate ``lam_1`` to tones of regions of mass at most 1/2.

    Two inequalities are checked:

    * ``lam_1 <= tone(omega) / (1 - mu(omega)) <= 2 tone(omega)`` for every
      region of the family (the tone eigenfunction minus its mean is a test
      function for ``lam_1``);
    * ``min tone <= lam_1`` once the two weighted-median nodal regions of the
      first eigenfunction are added to the family. This discrete step needs
      nonnegative off-diagonal couplings, so it is only asserted when every
      cotangent weight is nonnegative.
    """
    if not mu.is_probability(1e-9):
        raise ValueError("tone bracket expects a probability measure")
    n = mesh.n_vertices
    m = mu.masses
    masks = [_mask(n, o) for o in omegas]
    for i, w in enumerate(masks):
        mw = m[w].sum()
        if mw > 0.5 + 1e-12 or mw <= 0:
            raise CapacityError(f"region {i} has mass {mw}, outside (0, 1/2]")
    lam1, u1 = _lambda1(mesh, K, mu)
    tones = [fundamental_tone(mesh, K, mu, w) for w in masks]
    bounds = [t / (1 - m[w].sum()) for t, w in zip(tones, masks)]
    inf_tone = float(min(tones)) if tones else np.inf
    upper = float(min(bounds)) if bounds else np.inf
    est = inf_tone
    if u1 is not None:
        c = _median_split(u1, m)
        for w in (u1 > c, u1 < c):
            if w.any() and not w.all() and 0 < m[w].sum() <= 0.5 + 1e-12:
                est = min(est, fundamental_tone(mesh, K, mu, w))
    Kc = sparse.csr_matrix(K).copy()
    Kc.setdiag(0)
    nonneg = bool((Kc.data <= 1e-14).all())
    upper_ok = bool(lam1 <= upper * (1 + tol))
    lower_ok = bool(est <= lam1 * (1 + tol))
    passed = upper_ok and (lower_ok or not nonneg)
    ratio = lam1 / inf_tone if inf_tone > 0 else np.inf
    return ToneBracketReport(inf_tone, float(est), lam1, float(ratio), upper, upper_ok, lower_ok,
                             nonneg, passed)


def ball_family(mesh, mu, n_centers=16, max_mass=0.5, seed=0):
    """Graph balls around sampled centres, grown while their mass stays at most ``max_mass``."""
    rng = np.random.default_rng(seed)
    centers = rng.choice(mesh.n_vertices, size=min(n_centers, mesh.n_vertices), replace=False)
    h = mesh.median_edge_length
    out = []
    m = mu.masses
    for c in centers:
        d = graph_distances(mesh, int(c))[0]
        for r in h * 2.0 ** np.arange(0, 12):
            B = d < r
            mb = m[B].sum()
            if mb > max_mass:
                break
            if mb > 0 and not B.all():
                out.append(B)
    return out


# ---------------------------------------------------------------- whole-space capacity
def capty(mesh, K, F):
    """``min u K u + u A u`` over ``u = 1`` on ``F``, with ``A`` the lumped area."""
    n = mesh.n_vertices
    Fm = _mask(n, F)
    if not Fm.any():
        return 0.0, np.zeros(n)
    A = sparse.csr_matrix(K) + sparse.diags(mesh.vertex_areas)
    fi = np.nonzero(~Fm)[0]
    u = np.ones(n)
    if len(fi):
        Aff = A[fi][:, fi].tocsc()
        rhs = -(A[fi][:, np.nonzero(Fm)[0]] @ np.ones(int(Fm.sum())))
        u[fi] = spla.spsolve(Aff, rhs)
    return float(u @ (A @ u)), u


def mesh_constant(mesh, K, n_samples=16, radii=None, seed=0):
    """Empirical ``Q = max CAP(B, 2B)`` over sampled graph balls.

    Returns ``(Q, log)``. Balls whose double covers the whole mesh are skipped.
    """
    rng = np.random.default_rng(seed)
    h = mesh.median_edge_length
    if radii is None:
        radii = h * np.array([1.5, 3, 6, 12])
    centers = rng.choice(mesh.n_vertices, size=min(n_samples, mesh.n_vertices), replace=False)
    best, log = 0.0, []
    for c in centers:
        d = graph_distances(mesh, int(c))[0]
        for r in radii:
            B, B2 = d < r, d < 2 * r
            if B2.all() or not B.any():
                continue
            val = cap(mesh, K, Capacitor(Region(np.nonzero(B)[0]), Region(np.nonzero(B2)[0]))).cap_value
            log.append({"center": int(c), "r": float(r), "cap": val})
            best = max(best, val)
    return best, log


def lambda1_lower_from_beta(mesh, K, mu, beta_bound, tol=1e-6):
    """Report whether ``lam_1 >= 1 / (4 beta_bound)``.

    This is implied only when ``beta_bound`` bounds the true isocapacity
    constant over sets of mass at most 1/2; with a candidate-family lower
    estimate the outcome is empirical.
    """
    lam1, _ = _lambda1(mesh, K, mu)
    target = 1.0 / (4 * beta_bound) if beta_bound > 0 else np.inf
    return {"lambda1": lam1, "lower": target, "holds": bool(lam1 >= target * (1 - tol))}
