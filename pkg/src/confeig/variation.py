"""First variation of eigenvalues along conformal tilts, and extremality.

Along ``mu_t = exp(t phi) mu / Z`` with zero-mean ``phi`` the eigenvalue
``lam_k`` has one-sided derivatives given by the extreme values of

    L_phi(u) = -lam * int u^2 phi dmu / int u^2 dmu

over its eigenspace. A measure is extremal when no tilt increases (or
decreases) ``lam_k`` to first order. Extremality is certified by a
nonnegative combination of squared eigenfunctions equal to 1 on the support,
and refuted by a direction ``phi`` on which the form is negative definite.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, nnls

from .measure import DeformationFamily, deform, integral_distance
from .mesh import assemble_stiffness
from .spectrum import DEFAULT_CLUSTER_TOL, eigenspace_of, measure_spectrum

logger = logging.getLogger(__name__)


def _check_zero_mean(mu, phi, tol=1e-9):
    scale = max(1.0, float(np.abs(phi).max(initial=0.0))) * mu.total
    if abs(mu.integrate(phi)) > tol * scale:
        raise ValueError("phi must have zero mean against mu")


def l_phi(u, mu, phi, lam):
    """``-lam * int u^2 phi dmu / int u^2 dmu``."""
    u = np.asarray(u, dtype=float)
    phi = np.asarray(phi, dtype=float)
    _check_zero_mean(mu, phi)
    den = mu.integrate(u * u)
    if den <= 0:
        raise ZeroDivisionError("u vanishes on the support of mu")
    return -lam * mu.integrate(u * u * phi) / den


def form_matrix(U, mu, phi):
    """Gram matrix ``U^T diag(mass * phi) U`` of ``u -> int u^2 phi dmu``."""
    w = mu.masses * phi
    return U.T @ (w[:, None] * U)


# ---------------------------------------------------------------- derivatives
@dataclass(frozen=True)
class DerivativePair:
    left: float
    right: float
    eigenvalue: float
    multiplicity: int

    def to_dict(self):
        return {"left": self.left, "right": self.right, "eigenvalue": self.eigenvalue,
                "multiplicity": self.multiplicity}


def one_sided_derivatives(mesh, mu, phi, k, K=None, cluster_tol=DEFAULT_CLUSTER_TOL):
    """Left and right t-derivatives of ``lam_k(mu_t)`` at ``t = 0``.

    With ``G`` the form on an M-orthonormal basis of the eigenvalue's full
    cluster and ``j`` the position of ``k`` inside it, the right derivative
    is ``-lam`` times the j-th largest eigenvalue of ``G`` and the left one
    ``-lam`` times the j-th smallest. For ``k`` at the bottom of its cluster
    these are the infimum and supremum of ``L_phi`` over the eigenspace.
    """
    phi = np.asarray(phi, dtype=float)
    phi = phi - mu.mean(phi)
    if K is None:
        K = assemble_stiffness(mesh)
    _, E = eigenspace_of(mesh, mu, k, K=K, cluster_tol=cluster_tol)
    lam = E.eigenvalue
    g = np.linalg.eigvalsh(form_matrix(E.basis, mu, phi))
    j = k - E.indices[0]
    vals = np.sort(-lam * g)
    return DerivativePair(float(vals[-1 - j]), float(vals[j]), lam, E.multiplicity)


def lambda_along(mesh, mu, phi, k, ts, K=None):
    """``lam_k(mu_t)`` for each t (``mu`` is normalized first)."""
    if K is None:
        K = assemble_stiffness(mesh)
    fam = DeformationFamily(mu.normalized(), phi)
    return np.array([measure_spectrum(mesh, deform(fam, t), k, K=K).eigenvalues[k] for t in ts])


def finite_difference_derivatives(mesh, mu, phi, k, t=1e-4, K=None):
    """Forward, backward and central secants of ``lam_k`` along the tilt.

    The measure is normalized to a probability first, so compare against
    :func:`one_sided_derivatives` of ``mu.normalized()``.
    """
    lm, l0, lp = lambda_along(mesh, mu, phi, k, [-t, 0.0, t], K=K)
    return {"forward": (lp - l0) / t, "backward": (l0 - lm) / t, "central": (lp - lm) / (2 * t),
            "t": t, "values": (lm, l0, lp)}


# ---------------------------------------------------------------- projections
@dataclass(frozen=True)
class ProjectionGap:
    gap: float
    delta: float
    inconclusive: bool
    multiplicities: tuple

    def to_dict(self):
        return {"gap": self.gap, "delta": self.delta, "inconclusive": self.inconclusive,
                "multiplicities": list(self.multiplicities)}


def _cluster_isolated(res, E, tol):
    lam = res.eigenvalues[: res.n_computed]
    lo, hi = E.indices[0], E.indices[-1]
    width = 10 * tol * max(1.0, abs(E.eigenvalue))
    below = lo == 0 or E.eigenvalue - lam[lo - 1] > width
    above = hi + 1 >= len(lam) or lam[hi + 1] - E.eigenvalue > width
    return below and above


def projection_gap(mesh, mu, mu2, k, K=None, cluster_tol=DEFAULT_CLUSTER_TOL):
    """L2(mu) operator norm of the difference of the two k-th eigenprojections.

    Each projection is orthogonal in its own measure. The difference is a
    low-rank operator, so its norm comes from the small factor matrices.
    The result is flagged inconclusive when the clusters have different
    sizes or sit within ten cluster widths of a neighbouring eigenvalue.
    """
    if K is None:
        K = assemble_stiffness(mesh)
    if not np.array_equal(mu.support, mu2.support):
        raise ValueError("projection gap needs a common support")
    r1, E1 = eigenspace_of(mesh, mu, k, K=K, cluster_tol=cluster_tol)
    r2, E2 = eigenspace_of(mesh, mu2, k, K=K, cluster_tol=cluster_tol)
    S = mu.support
    m1, m2 = mu.masses[S], mu2.masses[S]
    s1 = np.sqrt(m1)
    a = s1[:, None] * E1.basis[S]
    b = s1[:, None] * E2.basis[S]
    c = (m2 / s1)[:, None] * E2.basis[S]
    X = np.hstack([a, -b])
    Y = np.hstack([a, c])
    _, Rx = np.linalg.qr(X)
    _, Ry = np.linalg.qr(Y)
    gap = float(np.linalg.norm(Rx @ Ry.T, 2))
    try:
        delta = integral_distance(mu.normalized(), mu2.normalized()).delta
    except ValueError:
        delta = np.inf
    inconclusive = (E1.multiplicity != E2.multiplicity
                    or not _cluster_isolated(r1, E1, cluster_tol)
                    or not _cluster_isolated(r2, E2, cluster_tol))
    return ProjectionGap(gap, float(delta), bool(inconclusive), (E1.multiplicity, E2.multiplicity))


# ---------------------------------------------------------------- certificates
@dataclass
class ExtremalityCertificate:
    """Nonnegative weights on squared eigenfunctions matching 1 on the support.

    ``coefficients`` refer to ``generators``: index pairs ``(i, j, sign)``
    meaning ``(b_i + sign * b_j)^2`` (``j = i`` for plain squares), where the
    ``b_i`` are the eigenspace basis scaled so that ``int b_i^2 dmu`` equals
    ``mu(M) / multiplicity``. ``gram`` is the equivalent quadratic form.
    """

    coefficients: np.ndarray
    residual: float
    verdict: str
    tol: float
    dimension: int
    eigenvalue: float
    generators: list = field(default_factory=list)
    gram: np.ndarray | None = None
    margin: float | None = None
    seed: int = 0

    def to_dict(self):
        return {"coefficients": [float(c) for c in self.coefficients], "residual": self.residual,
                "verdict": self.verdict, "tolerance": self.tol, "dimension": self.dimension,
                "eigenvalue": self.eigenvalue, "separation_margin": self.margin,
                "generators": [list(g) for g in self.generators], "seed": self.seed}


def _generators(dim, pairwise):
    gens = [(i, i, 1) for i in range(dim)]
    if pairwise:
        gens += [(i, j, s) for i in range(dim) for j in range(i + 1, dim) for s in (1, -1)]
    return gens


def _gen_matrix(B, gens):
    cols = [(B[:, i] + s * B[:, j]) ** 2 if i != j else B[:, i] ** 2 for i, j, s in gens]
    return np.column_stack(cols)


def _gram_from(coef, gens, dim):
    Q = np.zeros((dim, dim))
    for c, (i, j, s) in zip(coef, gens):
        if i == j:
            Q[i, i] += c
        else:
            Q[i, i] += c
            Q[j, j] += c
            Q[i, j] += s * c
            Q[j, i] += s * c
    return Q


def _fit(A, target):
    """NNLS fit, then a minimax LP on the sup residual; keep the better one."""
    coef, _ = nnls(A, target, maxiter=50 * A.shape[1])
    best = (float(np.abs(A @ coef - target).max()), coef)
    p = A.shape[1]
    # variables (c, s): minimize s with |A c - target| <= s, c >= 0
    cost = np.zeros(p + 1)
    cost[-1] = 1.0
    ones = np.ones((A.shape[0], 1))
    A_ub = np.vstack([np.hstack([A, -ones]), np.hstack([-A, -ones])])
    b_ub = np.concatenate([target, -target])
    lp = linprog(cost, A_ub=A_ub, b_ub=b_ub, bounds=[(0, None)] * (p + 1), method="highs")
    if lp.status == 0:
        c = lp.x[:p]
        r = float(np.abs(A @ c - target).max())
        if r < best[0]:
            best = (r, c)
    return best


def _scaled_basis(mu, E):
    S = mu.support
    scale = np.sqrt(mu.total / E.multiplicity)
    return E.basis[S] * scale, S


def extremality_certificate(mesh, mu, k, tol=1e-2, K=None, cluster_tol=DEFAULT_CLUSTER_TOL,
                            pairwise="auto", margin_tol=1e-9, seed=0, eigenpair=None):
    """Certify or refute extremality of ``mu`` for ``lam_k``.

    A nonnegative combination of squared cluster eigenfunctions is fitted to
    the constant 1 on the support (NNLS polished by a minimax LP). The
    verdict is ``extremal`` when the sup residual is at most ``tol``,
    ``non-extremal`` when the separation LP finds a tilt with positive
    margin, and ``inconclusive`` otherwise.

    ``pairwise="auto"`` adds the generators ``(b_i +- b_j)^2`` only when the
    plain squares miss the tolerance.
    """
    if K is None:
        K = assemble_stiffness(mesh)
    if eigenpair is None:
        _, E = eigenspace_of(mesh, mu, k, K=K, cluster_tol=cluster_tol)
    else:
        E = eigenpair
    if E.multiplicity == 0:
        raise ValueError("empty eigenspace")
    B, S = _scaled_basis(mu, E)
    target = np.ones(B.shape[0])
    dim = E.multiplicity
    gens = _generators(dim, pairwise is True)
    resid, coef = _fit(_gen_matrix(B, gens), target)
    if resid > tol and pairwise == "auto" and dim > 1:
        g2 = _generators(dim, True)
        r2, c2 = _fit(_gen_matrix(B, g2), target)
        if r2 < resid:
            resid, coef, gens = r2, c2, g2
    Q = _gram_from(coef, gens, dim)
    cert = ExtremalityCertificate(np.asarray(coef), resid, "extremal", tol, dim, E.eigenvalue,
                                  gens, Q, None, seed)
    if resid <= tol:
        return cert
    sep = separation_lp(mu, E)
    cert.margin = sep.margin
    cert.verdict = "non-extremal" if sep.ok and sep.margin > margin_tol else "inconclusive"
    return cert


def certificate_soundness_bound(cert, phi):
    """Bound ``eps * |phi|_inf / (1 - eps)`` on the normalized form.

    For a certificate with sup residual ``eps < 1`` the extreme values of
    ``int u^2 phi dmu / int u^2 dmu`` over the eigenspace cannot both exceed
    this bound with the same sign.
    """
    eps = cert.residual
    if eps >= 1:
        return np.inf
    return eps * float(np.abs(phi).max()) / (1 - eps)


# ---------------------------------------------------------------- separation
@dataclass
class Separation:
    phi: np.ndarray | None
    margin: float
    upper: float
    ok: bool
    rounds: int
    method: str

    def to_dict(self):
        return {"margin": self.margin, "upper_bound": self.upper, "ok": self.ok,
                "rounds": self.rounds, "method": self.method}


def _min_eig(G):
    w, V = np.linalg.eigh(0.5 * (G + G.T))
    return w, V


def separation_lp(mu, E, free=None, max_rounds=60, rel_gap=1e-3, nonpositive=None):
    """Box-bounded tilt maximizing the minimum of ``-int u^2 phi dmu`` over
    unit vectors of the eigenspace.

    Cutting planes replace a fixed net of the eigenspace sphere: each round
    adds the eigenvector where the current ``phi`` is weakest, so the LP
    value is an upper bound and the realized margin a lower bound on the
    optimum. ``phi`` is fixed to 0 outside ``free``; ``nonpositive`` marks
    vertices where only ``phi <= 0`` is allowed.
    """
    S = mu.support
    n = mu.n
    if free is None:
        live = S.copy()
    else:
        live = S & (free if nonpositive is None else free | nonpositive)
    idx = np.nonzero(live)[0]
    U = E.basis
    m = mu.masses
    Ui = U[idx]
    mi = m[idx]
    dim = U.shape[1]
    cuts = [np.eye(dim)[i] for i in range(dim)]
    for i in range(dim):
        for j in range(i + 1, dim):
            for s in (1, -1):
                c = np.zeros(dim)
                c[i], c[j] = 1, s
                cuts.append(c / np.sqrt(2))
    bounds = [(-1.0, 1.0)] * len(idx) + [(None, None)]
    if nonpositive is not None and free is not None:
        for t in np.nonzero(nonpositive[idx] & ~free[idx])[0]:
            bounds[t] = (-1.0, 0.0)
    cost = np.zeros(len(idx) + 1)
    cost[-1] = -1.0
    A_eq = np.concatenate([mi, [0.0]])[None, :]
    best = Separation(None, -np.inf, np.inf, False, 0, "lp")
    for rnd in range(1, max_rounds + 1):
        rows = []
        for c in cuts:
            f = (Ui @ c) ** 2 * mi
            rows.append(np.concatenate([f, [1.0]]))
        lp = linprog(cost, A_ub=np.array(rows), b_ub=np.zeros(len(rows)), A_eq=A_eq, b_eq=[0.0],
                     bounds=bounds, method="highs")
        if lp.status != 0:
            best.ok = False
            best.rounds = rnd
            return best
        x = lp.x[:-1]
        upper = float(lp.x[-1])
        phi = np.zeros(n)
        phi[idx] = x
        phi[idx] -= np.dot(mi, x) / mi.sum()
        w, V = _min_eig(form_matrix(U, mu, phi))
        margin = float(-w[-1])
        if margin > best.margin:
            best = Separation(phi, margin, upper, True, rnd, "lp")
        best.upper = min(best.upper, upper)
        if upper <= 0 or best.margin >= best.upper - rel_gap * abs(best.upper):
            break
        cuts.append(V[:, -1])
    best.rounds = rnd
    return best


def _spectraplex_project(Q):
    """Frobenius projection onto ``{P >= 0, trace P = 1}``."""
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    u = np.sort(w)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, len(u) + 1)
    rho = ind[u - css / ind > 0][-1]
    theta = css[rho - 1] / rho
    p = np.maximum(w - theta, 0.0)
    return (V * p) @ V.T


def min_norm_direction(mu, E, free=None, iters=500, tol=1e-12):
    """Steepest-ascent tilt: ``phi = -Pi(rho_P)`` for the trace-one PSD ``P``
    minimizing ``|Pi(rho_P)|_mu``.

    ``rho_P(x) = u(x)^T P u(x)`` over the M-orthonormal eigenbasis ``u`` and
    ``Pi`` restricts to ``free`` vertices and removes the mean there. By
    optimality of ``P``, ``int u^2 phi dmu <= -|phi|^2`` for every unit
    ``u`` in the eigenspace, so the returned margin is ``|phi|_mu^2``.
    """
    S = mu.support
    live = S if free is None else S & free
    idx = np.nonzero(live)[0]
    m = mu.masses[idx]
    U = E.basis[idx]
    dim = U.shape[1]
    # rho_P = sum_ab P_ab U_a U_b; centre each product column over the free set
    prods = (U[:, :, None] * U[:, None, :]).reshape(len(idx), dim * dim)
    prods = prods - (m @ prods) / m.sum()
    H = prods.T @ (m[:, None] * prods)
    H = 0.5 * (H + H.T)
    L = max(np.linalg.eigvalsh(H).max(), 1e-300)
    P = np.eye(dim) / dim
    Y, t = P.copy(), 1.0
    prev = np.inf
    for _ in range(iters):
        g = (H @ Y.ravel()).reshape(dim, dim)
        Pn = _spectraplex_project(Y - g / L)
        tn = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        Y = Pn + ((t - 1) / tn) * (Pn - P)
        P, t = Pn, tn
        f = float(P.ravel() @ H @ P.ravel())
        if prev - f <= tol * max(prev, 1e-300) and prev < np.inf:
            break
        prev = f
    rho = prods @ P.ravel()
    phi = np.zeros(mu.n)
    phi[idx] = -rho
    w, _ = _min_eig(form_matrix(E.basis, mu, phi))
    return Separation(phi, float(-w[-1]), float(m @ rho ** 2), True, 0, "min-norm"), P


def separating_direction(mesh, mu, k, K=None, tol=1e-2, cluster_tol=DEFAULT_CLUSTER_TOL,
                         method="lp", free=None):
    """Zero-mean tilt raising ``lam_k`` to first order, or ``None`` if extremal.

    The returned ``phi`` satisfies ``int u^2 phi dmu < 0`` for every nonzero
    ``u`` in the eigenspace, so the right derivative of ``lam_k`` along it
    is positive. ``method`` is ``"lp"`` (box-bounded, |phi| <= 1) or
    ``"min-norm"`` (smooth steepest ascent). Raises ``RuntimeError`` when
    the dual solve fails.
    """
    if K is None:
        K = assemble_stiffness(mesh)
    _, E = eigenspace_of(mesh, mu, k, K=K, cluster_tol=cluster_tol)
    cert = extremality_certificate(mesh, mu, k, tol=tol, K=K, cluster_tol=cluster_tol, eigenpair=E)
    if cert.verdict == "extremal":
        return None
    if method == "lp":
        sep = separation_lp(mu, E, free=free)
    else:
        sep, _ = min_norm_direction(mu, E, free=free)
    if not sep.ok or sep.phi is None:
        raise RuntimeError("separation solve failed (inconclusive)")
    phi = sep.phi
    phi = phi - mu.mean(phi) * mu.support
    return phi


# ---------------------------------------------------------------- claim probe
def lower_form_probe(mesh, mu, phi, k, ts, K=None, cluster_tol=DEFAULT_CLUSTER_TOL):
    """Minimum of ``L_phi`` over the tilted eigenspaces ``E_t`` as ``t -> 0``.

    ``E_t`` is spanned by the eigenfunctions of ``mu_t`` with the indices of
    the cluster of ``lam_k(mu)``. Returns the limit value at ``t = 0``, the
    sequence, and whether the distance to the limit shrinks along the sweep.
    """
    if K is None:
        K = assemble_stiffness(mesh)
    mu = mu.normalized()
    fam = DeformationFamily(mu, phi)
    res0, E0 = eigenspace_of(mesh, mu, k, K=K, cluster_tol=cluster_tol)
    g0 = np.linalg.eigvalsh(form_matrix(E0.basis, mu, fam.phi))
    base = float(-E0.eigenvalue * g0.max())
    hi = E0.indices[-1]
    vals = []
    for t in ts:
        mt = deform(fam, t)
        r = measure_spectrum(mesh, mt, hi + 1, K=K)
        Ut = r.eigenfunctions[:, list(E0.indices)]
        lam_t = float(r.eigenvalues[k])
        # Ut is M_t-orthonormal, so the form's extreme values are eigenvalues
        g = np.linalg.eigvalsh(form_matrix(Ut, mt, fam.phi - mt.mean(fam.phi)))
        vals.append(float(-lam_t * g.max()))
    vals = np.array(vals)
    err = np.abs(vals - base)
    order = np.argsort(-np.abs(np.asarray(ts)))
    e = err[order]
    shrinking = bool(np.all(np.diff(e) <= 1e-12 + 1e-9 * np.abs(base)))
    return {"limit": base, "values": vals.tolist(), "errors": err.tolist(), "converging": shrinking}
