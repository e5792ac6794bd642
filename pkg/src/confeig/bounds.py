"""Upper bounds for ``lam_k * mu(M)``.

Two constructions are provided:

* Moebius balancing of a map to the sphere, after which the three
  coordinate functions are admissible test functions for ``lam_1``;
* a system of annuli with disjoint, non-touching doubles, whose equilibrium
  potentials bound ``lam_k`` by ``max CAP(A_i, 2A_i) / min mu(A_i)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .capacity import Capacitor, cap
from .measure import MeasureError
from .mesh import Region, graph_distances
from .spectrum import measure_spectrum

logger = logging.getLogger(__name__)


class BalanceError(RuntimeError):
    def __init__(self, message, a=None):
        super().__init__(message)
        self.a = a


@dataclass(frozen=True)
class MobiusParameter:
    """Point of the open unit ball indexing a conformal dilation of the sphere."""

    a: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(3)
        if not np.linalg.norm(a) < 1:
            raise ValueError("Moebius parameter must lie in the open unit ball")
        object.__setattr__(self, "a", a)

    @property
    def norm(self):
        return float(np.linalg.norm(self.a))


def _raw_mobius(a, x):
    ax = x @ a
    xx = np.einsum("ij,ij->i", x, x)
    aa = a @ a
    num = (1 - aa) * x + (1 + 2 * ax + xx)[:, None] * a[None, :]
    den = 1 + 2 * ax + aa * xx
    return num / den[:, None]


def mobius_apply(a, points, check=True):
    """Dilation of the sphere toward ``a / |a|`` with strength ``|a|``.

    ``x -> ((1 - |a|^2) x + (1 + 2 a.x + |x|^2) a) / (1 + 2 a.x + |a|^2 |x|^2)``
    maps the ball to itself, fixes the sphere, sends 0 to ``a`` and has
    inverse given by ``-a``.
    """
    a = a.a if isinstance(a, MobiusParameter) else np.asarray(a, dtype=float).reshape(3)
    if not np.linalg.norm(a) < 1:
        raise ValueError("|a| must be < 1")
    x = np.atleast_2d(np.asarray(points, dtype=float))
    if check and np.abs(np.linalg.norm(x, axis=1) - 1).max(initial=0) > 1e-12:
        raise ValueError("points must lie on the unit sphere")
    y = _raw_mobius(a, x)
    return y / np.linalg.norm(y, axis=1, keepdims=True)


def compose_parameter(a, b):
    """Parameter of ``g_b o g_a`` up to a rotation: the point sent to 0 is ``g_{-a}(-b)``."""
    p = _raw_mobius(-np.asarray(a, dtype=float), -np.asarray(b, dtype=float)[None, :])[0]
    return -p


@dataclass(frozen=True)
class BalanceResult:
    a: MobiusParameter
    residual: float
    iterations: int
    method: str

    def to_dict(self):
        return {"a": self.a.a.tolist(), "norm": self.a.norm, "residual": self.residual,
                "iterations": self.iterations, "method": self.method}


def _center(a, Y, w):
    Z = mobius_apply(a, Y, check=False)
    return w @ Z, Z


def _newton(Y, w, a0, tol, max_iter):
    a = np.array(a0, dtype=float)
    c, Z = _center(a, Y, w)
    res = float(np.linalg.norm(c))
    it = 0
    for it in range(1, max_iter + 1):
        if res <= tol:
            return a, res, it - 1, True
        J = 2 * (np.eye(3) - (Z * w[:, None]).T @ Z)
        try:
            b = -np.linalg.solve(J, c)
        except np.linalg.LinAlgError:
            b = -0.5 * c
        nb = np.linalg.norm(b)
        if nb > 0.5:
            b *= 0.5 / nb
        step = 1.0
        while step > 1e-8:
            an = compose_parameter(a, step * b)
            if np.linalg.norm(an) >= 1 - 1e-15:
                step *= 0.5
                continue
            cn, Zn = _center(an, Y, w)
            rn = float(np.linalg.norm(cn))
            if rn < res:
                a, c, Z, res = an, cn, Zn, rn
                break
            step *= 0.5
        else:
            return a, res, it, False
    return a, res, it, res <= tol


def hersch_balance(sphere_map, mu, tol=1e-8, max_iter=200, homotopy_steps=20):
    """Moebius parameter putting the pushed-forward centre of mass at the origin.

    Damped Newton on ``a -> int g_a(sphere_map) dmu``; each step is a small
    dilation in the current frame, composed back into a single parameter.
    When Newton stalls, the measure is continued from the counting measure
    on the vertices to ``mu``.

    Raises
    ------
    BalanceError
        When a single point carries mass at least ``1 - 1e-3`` (near-Dirac),
        at least half of the mass while unbalanced, or the iteration fails.
    """
    Y = np.asarray(sphere_map, dtype=float)
    if Y.shape != (mu.n, 3):
        raise ValueError("sphere map must give one unit 3-vector per vertex")
    if np.abs(np.linalg.norm(Y, axis=1) - 1).max() > 1e-9:
        raise ValueError("sphere map values must lie on the unit sphere")
    Y = Y / np.linalg.norm(Y, axis=1, keepdims=True)
    w = mu.masses / mu.total
    c0 = float(np.linalg.norm(w @ Y))
    if c0 <= tol:
        return BalanceResult(MobiusParameter(np.zeros(3)), c0, 0, "identity")
    top = float(w.max())
    if top >= 1 - 1e-3:
        raise BalanceError("near-Dirac measure: the balancing point escapes to the boundary",
                           a=float("nan"))
    if top >= 0.5:
        raise BalanceError(f"a point carries mass {top:.3f} >= 1/2; no balancing dilation exists")
    a, res, it, ok = _newton(Y, w, np.zeros(3), tol, max_iter)
    if ok:
        return BalanceResult(MobiusParameter(a), res, it, "newton")
    logger.info("Newton stalled at residual %.3e; continuing from the counting measure", res)
    u = np.ones(len(w)) / len(w)
    a = np.zeros(3)
    total = it
    for s in np.linspace(0, 1, homotopy_steps + 1):
        ws = (1 - s) * u + s * w
        a, res, it, ok = _newton(Y, ws, a, tol if s == 1 else 1e-10, max_iter)
        total += it
    if not ok:
        raise BalanceError(f"balancing failed, residual {res:.3e}, |a| = {np.linalg.norm(a):.6f}",
                           a=float(np.linalg.norm(a)))
    return BalanceResult(MobiusParameter(a), res, total, "homotopy")


@dataclass(frozen=True)
class HerschReport:
    bound: float
    ceiling: float
    lambda1_mass: float
    energies: tuple
    balance: BalanceResult
    passed: bool

    def to_dict(self):
        return {"bound": self.bound, "ceiling": self.ceiling, "lambda1_mass": self.lambda1_mass,
                "energies": list(self.energies), "balance": self.balance.to_dict(),
                "pass": self.passed}


def hersch_bound(mesh, K, mu, sphere_map, degree=1, mesh_tol=0.02, balance=None,
                 residual_tol=1e-6):
    """Upper bound for ``lam_1 * mu(M)`` from balanced sphere coordinates.

    The three coordinates ``z_i`` of the balanced map have zero mean and
    ``sum z_i^2 = 1``, so ``lam_1 mu(M) <= sum_i z_i K z_i``. The theoretical
    ceiling is ``8 pi degree``.
    """
    if balance is None:
        balance = hersch_balance(sphere_map, mu)
    Z = mobius_apply(balance.a, np.asarray(sphere_map, dtype=float), check=False)
    w = mu.masses / mu.total
    res = float(np.linalg.norm(w @ Z))
    if res > residual_tol:
        raise BalanceError(f"unbalanced input: centre-of-mass residual {res:.3e}")
    E = tuple(float(Z[:, i] @ (K @ Z[:, i])) for i in range(3))
    bound = float(sum(E))
    lam1 = float(measure_spectrum(mesh, mu, 1, K=K).eigenvalues[1]) * mu.total
    ceiling = 8 * np.pi * degree
    return HerschReport(bound, ceiling, lam1, E, balance, bool(bound <= ceiling * (1 + mesh_tol)))


# ---------------------------------------------------------------- annuli
@dataclass
class AnnulusSystem:
    """Annuli ``A_i`` with doubles ``2A_i`` that are disjoint and share no edge."""

    annuli: list
    A: list
    A2: list
    masses: np.ndarray
    caps: np.ndarray
    k: int
    total_mass: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def v(self):
        return float(self.masses.min())

    @property
    def kappa(self):
        return float(self.caps.max())

    @property
    def c_eff(self):
        return self.v * self.k / self.total_mass

    def to_dict(self):
        return {"k": self.k, "v": self.v, "kappa": self.kappa, "c_eff": self.c_eff,
                "annuli": [{"center": c, "r": r, "R": R, "mass": float(m), "cap": float(q),
                            "size": len(a), "size_double": len(a2)}
                           for (c, r, R), m, q, a, a2 in zip(self.annuli, self.masses, self.caps,
                                                             self.A, self.A2)]}


def farthest_point_sample(mesh, count, start=0):
    n = mesh.n_vertices
    count = min(count, n)
    chosen = [start]
    dmin = graph_distances(mesh, start)[0]
    for _ in range(count - 1):
        j = int(np.argmax(np.where(np.isfinite(dmin), dmin, -1)))
        chosen.append(j)
        dmin = np.minimum(dmin, graph_distances(mesh, j)[0])
    return np.array(chosen)


def _greedy(cands, v, k, nbr_of, n):
    picked = []
    blocked = np.zeros(n, dtype=bool)
    for c in cands:
        if c["mass"] < v or blocked[c["idx2"]].any():
            continue
        picked.append(c)
        blocked[nbr_of(c)] = True
        if len(picked) == k + 1:
            return picked
    return None


def gy_annuli(mesh, mu, k, n_centers=64, K=None):
    """Greedy system of ``k + 1`` annuli maximizing ``v = min mu(A_i)``.

    Centres come from a farthest-point sample, outer radii are dyadic
    multiples of the median edge and inner radii are ``0, R/4, R/2``. For a
    target ``v`` the greedy pass scans candidates by increasing size of the
    double (ties to the lowest centre index) and keeps those whose double
    neither meets nor touches an earlier one. Target masses are scanned
    from the largest candidate mass down.
    """
    if mu.has_atoms:
        raise MeasureError("annulus bounds need a measure without atoms")
    if k < 1:
        raise ValueError("k must be >= 1")
    n = mesh.n_vertices
    m = mu.masses
    h = mesh.median_edge_length
    centers = farthest_point_sample(mesh, n_centers)
    dist = {int(c): graph_distances(mesh, int(c))[0] for c in centers}
    dmax = max(float(d[np.isfinite(d)].max()) for d in dist.values())
    Rs = h * 2.0 ** np.arange(0, 40)
    Rs = Rs[Rs <= dmax]
    cands = []
    for ci, c in enumerate(centers):
        d = dist[int(c)]
        for R in Rs:
            for r in (0.0, R / 4, R / 2):
                mask = (d >= r) & (d < R)
                mask2 = (d >= r / 2) & (d < 2 * R)
                if not mask.any() or mask2.all():
                    continue
                cands.append({"center": int(c), "order": ci, "r": float(r), "R": float(R),
                              "mass": float(m[mask].sum()), "mask": mask, "mask2": mask2,
                              "idx2": np.nonzero(mask2)[0], "size2": int(mask2.sum())})
    cands.sort(key=lambda c: (c["size2"], c["order"], c["R"], c["r"]))
    e = mesh.edges

    def nbr_of(c):
        if "nbr" not in c:
            mask = c["mask2"]
            hit = mask[e[:, 0]] | mask[e[:, 1]]
            c["nbr"] = np.union1d(c["idx2"], e[hit].ravel())
        return c["nbr"]

    # scan target masses from the top; the first feasible one is the greedy optimum
    best = None
    for v in np.unique([c["mass"] for c in cands if c["mass"] > 0])[::-1]:
        best = _greedy(cands, v, k, nbr_of, n)
        if best is not None:
            break
    if best is None:
        raise ValueError(f"mesh too coarse to separate {k + 1} annuli with disjoint doubles "
                         f"({len(cands)} candidates, {len(centers)} centres)")
    if K is None:
        from .mesh import assemble_stiffness

        K = assemble_stiffness(mesh)
    A = [Region(np.nonzero(c["mask"])[0], "annulus", c["center"], c["r"], c["R"]) for c in best]
    A2 = [Region(np.nonzero(c["mask2"])[0], "annulus", c["center"], c["r"] / 2, 2 * c["R"])
          for c in best]
    caps = np.array([cap(mesh, K, Capacitor(a, a2)).cap_value for a, a2 in zip(A, A2)])
    return AnnulusSystem([(c["center"], c["r"], c["R"]) for c in best], A, A2,
                         np.array([c["mass"] for c in best]), caps, k, mu.total,
                         {"candidates": len(cands), "centres": len(centers)})


@dataclass(frozen=True)
class CapacitorBoundReport:
    bound: float
    kappa: float
    v: float
    lambda_k: float
    passed: bool

    def to_dict(self):
        return {"bound": self.bound, "kappa": self.kappa, "v": self.v, "lambda_k": self.lambda_k,
                "pass": self.passed}


def capacitor_bound(mesh, K, mu, system, k, tol=1e-8):
    """``kappa / v`` with ``kappa = max CAP(A_i, 2A_i)`` and ``v = min mu(A_i)``.

    The equilibrium potentials of the ``k + 1`` annuli have disjoint,
    non-adjacent supports, hence are orthogonal for both forms, which gives
    ``lam_k <= kappa / v`` on the same mesh.
    """
    if len(system.annuli) < k + 1:
        raise ValueError(f"system has {len(system.annuli)} annuli, need {k + 1}")
    masses = np.array([float(mu.masses[a.vertices].sum()) for a in system.A])
    v = float(masses.min())
    if v <= 0:
        raise ValueError("v = 0: an annulus carries no mass")
    kappa = system.kappa
    bound = kappa / v
    lam = float(measure_spectrum(mesh, mu, k, K=K).eigenvalues[k])
    return CapacitorBoundReport(bound, kappa, v, lam, bool(lam <= bound * (1 + tol)))
