"""Eigenvalues of the Dirichlet form against a discrete measure.

The generalized problem ``K u = lam M u`` has a diagonal, possibly singular
mass matrix. Vertices outside the support of the measure carry no mass, so
eigenfunctions are harmonic there: the problem is reduced to the support by
a Schur complement, and only ``|support|`` eigenvalues are finite. The rest
are reported as ``+inf``.

Two solvers share that reduction. The dense path forms the Schur complement
explicitly. The sparse path runs Lanczos (ARPACK) on the shift-inverted
operator, where one sparse LU of ``K - sigma M`` with ``sigma < 0`` applies
the inverse Schur complement implicitly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse import linalg as spla

from .measure import SUPPORT_RTOL

logger = logging.getLogger(__name__)

DENSE_MAX = 500
DEFAULT_CLUSTER_TOL = 1e-6


class SpectrumError(RuntimeError):
    """Eigen-solve failure. ``best_residual`` holds the best relative residual seen."""

    def __init__(self, message, best_residual=None):
        super().__init__(message)
        self.best_residual = best_residual


@dataclass(frozen=True)
class MassMatrix:
    """Diagonal lumped mass matrix, stored as its diagonal."""

    diag: np.ndarray

    @property
    def n(self):
        return len(self.diag)

    @property
    def support(self):
        d = self.diag
        return d > SUPPORT_RTOL * d.max()

    @property
    def rank(self):
        return int(self.support.sum())

    @property
    def trace(self):
        return float(self.diag.sum())

    def tosparse(self):
        return sparse.diags(self.diag, format="csr")

    def __matmul__(self, u):
        u = np.asarray(u)
        return self.diag[:, None] * u if u.ndim == 2 else self.diag * u


def assemble_mass(mesh, mu):
    """Diagonal mass matrix with entries ``vertex weight + atom mass``."""
    if mu.n != mesh.n_vertices:
        raise ValueError(f"measure has {mu.n} weights for {mesh.n_vertices} vertices")
    return MassMatrix(np.array(mu.masses, dtype=float))


def _as_mass(M):
    if isinstance(M, MassMatrix):
        return M
    if sparse.issparse(M):
        return MassMatrix(np.asarray(M.diagonal(), dtype=float))
    M = np.asarray(M, dtype=float)
    return MassMatrix(M if M.ndim == 1 else np.diag(M).copy())


def rayleigh(K, M, u):
    """``u K u / u M u``; ``+inf`` when only the denominator vanishes."""
    M = _as_mass(M)
    u = np.asarray(u, dtype=float)
    if not np.any(u):
        raise ValueError("Rayleigh quotient of the zero function")
    num = float(u @ (K @ u))
    den = float(u @ (M.diag * u))
    scale = float(np.abs(K).sum(axis=1).max()) * float(u @ u)
    if num <= 1e-14 * scale:
        num = 0.0
    if den <= 0.0:
        if num > 0.0:
            return np.inf
        raise ValueError("Rayleigh quotient 0/0: u is constant off the support")
    return max(num, 0.0) / den


@dataclass(frozen=True)
class SpectralResult:
    """Eigenpairs in min-max order.

    ``eigenfunctions[:, j]`` is M-orthonormal for ``j < n_computed``; entries
    of ``eigenvalues`` past ``n_finite`` are ``+inf`` and have no
    eigenfunction.
    """

    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    n_finite: int
    residuals: np.ndarray
    mass: float
    method: str
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_computed(self):
        return self.eigenfunctions.shape[1]

    def clusters(self, cluster_tol=DEFAULT_CLUSTER_TOL):
        """Index groups of numerically equal finite eigenvalues."""
        lam = self.eigenvalues[: self.n_computed]
        groups, cur = [], [0] if len(lam) else []
        for j in range(1, len(lam)):
            if abs(lam[j] - lam[cur[0]]) <= cluster_tol * max(1.0, abs(lam[cur[0]])):
                cur.append(j)
            else:
                groups.append(cur)
                cur = [j]
        if cur:
            groups.append(cur)
        return groups

    def to_dict(self, cluster_tol=DEFAULT_CLUSTER_TOL):
        return {
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "residuals": [float(x) for x in self.residuals],
            "n_finite": self.n_finite,
            "mass": self.mass,
            "method": self.method,
            "clusters": self.clusters(cluster_tol),
        }


def _norm1(K):
    return float(abs(K).sum(axis=1).max())


def _residuals(K, m, lam, U):
    R = K @ U - U * (m[:, None] * lam[None, :])
    return np.linalg.norm(R, axis=0)


def _dense_restricted(K, m, S, n_req):
    Kd = K.toarray() if sparse.issparse(K) else np.asarray(K, dtype=float)
    O = ~S
    Kss = Kd[np.ix_(S, S)]
    if O.any():
        Koo = Kd[np.ix_(O, O)]
        Kos = Kd[np.ix_(O, S)]
        try:
            X = scipy.linalg.solve(Koo, Kos, assume_a="sym")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
            raise SpectrumError("a mesh component carries no mass") from exc
        schur = Kss - Kos.T @ X
    else:
        schur = Kss
    d = 1.0 / np.sqrt(m[S])
    C = d[:, None] * schur * d[None, :]
    C = 0.5 * (C + C.T)
    lam, Y = scipy.linalg.eigh(C, subset_by_index=[0, n_req - 1])
    U = np.zeros((len(m), n_req))
    U[S] = d[:, None] * Y
    if O.any():
        U[O] = -X @ U[S]
    return lam, U


def _lanczos_restricted(K, m, S, n_req, sigma, seed):
    n = len(m)
    idx = np.nonzero(S)[0]
    ns = len(idx)
    A = (K - sparse.diags(sigma * m)).tocsc()
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SpectrumError(f"shifted stiffness is singular: {exc}") from exc
    sq = np.sqrt(m[idx])
    v0 = sq / np.linalg.norm(sq)
    buf = np.zeros(n)

    def solve(y):
        buf[:] = 0.0
        buf[idx] = sq * y
        return sq * lu.solve(buf)[idx]

    def op(y):
        y = np.ravel(y)
        y = y - v0 * (v0 @ y)
        z = solve(y)
        return z - v0 * (v0 @ z)

    T = spla.LinearOperator((ns, ns), matvec=op, dtype=float)
    rng = np.random.default_rng(seed)
    start = rng.standard_normal(ns)
    start -= v0 * (v0 @ start)
    k = n_req - 1
    try:
        theta, Y = spla.eigsh(T, k=k, which="LA", v0=start, tol=0.0,
                              ncv=min(ns - 1, max(2 * k + 1, k + 20)), maxiter=50 * ns)
    except spla.ArpackNoConvergence as exc:
        raise SpectrumError("Lanczos did not converge", getattr(exc, "eigenvalues", None)) from exc
    order = np.argsort(-theta)
    theta, Y = theta[order], Y[:, order]
    lam = sigma + 1.0 / theta
    Y = np.column_stack([v0, Y])
    lam = np.concatenate([[0.0], lam])
    # an eigenvector u satisfies (K - sigma M) u = (lam - sigma) M u, which
    # also yields its harmonic extension off the support
    U = np.zeros((n, n_req))
    for j in range(n_req):
        buf[:] = 0.0
        buf[idx] = Y[:, j] * sq
        U[:, j] = (lam[j] - sigma) * lu.solve(buf)
        U[idx, j] = Y[:, j] / sq
    return lam, U


def solve_spectrum(K, M, k_max=6, tol=1e-8, method="auto", seed=0, sigma=None):
    """First ``k_max + 1`` eigenpairs of ``K u = lam M u``.

    Parameters
    ----------
    K : sparse matrix
        Stiffness matrix of a connected mesh.
    M : MassMatrix or array_like
        Diagonal mass (a vector, a diagonal matrix or a :class:`MassMatrix`).
    k_max : int
        Highest eigenvalue index wanted; indices at or beyond the support
        size are ``+inf``.
    tol : float
        Acceptance threshold on ``|K u - lam M u| / ((|K| + lam |M|) |u|)``.
    method : {"auto", "dense", "lanczos"}
        ``auto`` uses the dense path up to 500 vertices.
    seed : int
        Seeds the Lanczos start vector.
    sigma : float, optional
        Negative shift for shift-invert; defaults to ``-1 / trace(M)``.

    Returns
    -------
    SpectralResult
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    M = _as_mass(M)
    m = M.diag
    n = len(m)
    if K.shape != (n, n):
        raise ValueError("stiffness and mass sizes differ")
    S = M.support
    ns = int(S.sum())
    n_req = min(k_max + 1, ns)
    if method == "auto":
        method = "dense" if n <= DENSE_MAX else "lanczos"
    if method == "lanczos" and n_req >= ns - 1:
        method = "dense"
    mass = M.trace
    mm = np.where(S, m, 0.0)
    if method == "dense":
        lam, U = _dense_restricted(K, mm, S, n_req)
    elif method == "lanczos":
        if sigma is None:
            sigma = -1.0 / mass
        if sigma >= 0:
            raise ValueError("shift must be negative")
        lam, U = _lanczos_restricted(sparse.csr_matrix(K), mm, S, n_req, sigma, seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    order = np.argsort(lam, kind="stable")
    lam, U = lam[order], U[:, order]
    lam = np.maximum(lam, 0.0)
    # M-orthonormalize (the dense path is exact; Lanczos may drift in degenerate clusters)
    G = U.T @ (mm[:, None] * U)
    L = np.linalg.cholesky(0.5 * (G + G.T))
    U = scipy.linalg.solve_triangular(L, U.T, lower=True).T
    res = _residuals(K, mm, lam, U)
    scale = (_norm1(K) + np.abs(lam) * m.max()) * np.linalg.norm(U, axis=0)
    rel = res / scale
    if rel.max() > tol:
        raise SpectrumError(f"eigen-residual {rel.max():.3e} exceeds tolerance {tol:.1e}",
                            float(rel.max()))
    eig = np.full(k_max + 1, np.inf)
    eig[:n_req] = lam
    resid = np.full(k_max + 1, np.nan)
    resid[:n_req] = res
    return SpectralResult(eig, U, ns, resid, mass, method, {"relative_residuals": rel})


def measure_spectrum(mesh, mu, k_max=6, K=None, **kw):
    """Convenience wrapper assembling stiffness and mass for ``mu``."""
    from .mesh import assemble_stiffness

    if K is None:
        K = assemble_stiffness(mesh)
    return solve_spectrum(K, assemble_mass(mesh, mu), k_max, **kw)


# ---------------------------------------------------------------- eigenspaces
@dataclass(frozen=True)
class Eigenspace:
    k: int
    eigenvalue: float
    indices: tuple
    basis: np.ndarray
    cluster_tol: float
    truncated: bool = False

    @property
    def multiplicity(self):
        return self.basis.shape[1]


def eigenspace(result, k, cluster_tol=DEFAULT_CLUSTER_TOL):
    """All computed eigenfunctions whose eigenvalue is within
    ``cluster_tol * max(1, lam_k)`` of ``lam_k``.

    ``truncated`` is set when the cluster reaches the last computed index,
    so more eigenpairs may belong to it.
    """
    if k < 0 or k >= result.n_computed:
        raise IndexError(f"eigenvalue index {k} outside the computed finite range "
                         f"(0..{result.n_computed - 1})")
    lam = result.eigenvalues[: result.n_computed]
    lk = lam[k]
    sel = np.nonzero(np.abs(lam - lk) <= cluster_tol * max(1.0, abs(lk)))[0]
    truncated = bool(sel[-1] == result.n_computed - 1 and result.n_computed < result.n_finite)
    return Eigenspace(int(k), float(lk), tuple(int(i) for i in sel),
                      result.eigenfunctions[:, sel], cluster_tol, truncated)


def eigenspace_of(mesh, mu, k, K=None, cluster_tol=DEFAULT_CLUSTER_TOL, extra=6, **kw):
    """Solve and return ``(result, eigenspace)``, enlarging the solve until
    the cluster at ``k`` is not cut off."""
    k_max = k + extra
    while True:
        res = measure_spectrum(mesh, mu, k_max, K=K, **kw)
        if k >= res.n_computed:
            raise IndexError(f"eigenvalue {k} is infinite for this measure")
        E = eigenspace(res, k, cluster_tol)
        if not E.truncated:
            return res, E
        k_max *= 2


# ---------------------------------------------------------------- checks
def weak_eigen_identity_residual(K, M, result, k):
    """``max_i |(K u)_i - lam (M u)_i| / |u|`` for the k-th pair.

    Testing the weak identity against every hat function gives exactly the
    components of the discrete residual.
    """
    M = _as_mass(M)
    if k >= result.n_computed:
        raise IndexError(f"eigenvalue index {k} has no eigenfunction")
    u = result.eigenfunctions[:, k]
    lam = result.eigenvalues[k]
    r = K @ u - lam * (M.diag * u)
    return float(np.abs(r).max() / np.linalg.norm(u))


@dataclass(frozen=True)
class SemicontinuityReport:
    sequence: np.ndarray
    limsup: float
    limit_value: float
    passed: bool
    tol: float

    def to_dict(self):
        return {"sequence": list(map(float, self.sequence)), "limsup": self.limsup,
                "limit_value": self.limit_value, "pass": self.passed, "tol": self.tol}


def _lambda_k(mesh, K, mu, k):
    if k >= int(mu.support.sum()):
        return np.inf
    return float(measure_spectrum(mesh, mu, k, K=K).eigenvalues[k])


def semicontinuity_probe(mesh, measures, mu, k, tol=1e-6, K=None):
    """Compare ``lam_k`` along a sequence of measures with ``lam_k`` at the limit.

    The lim-sup is estimated as the maximum over the second half of the
    sequence. Upper semicontinuity predicts ``limsup <= lam_k(mu) + tol``.
    """
    from .mesh import assemble_stiffness

    if K is None:
        K = assemble_stiffness(mesh)
    for m in list(measures) + [mu]:
        if not m.is_probability(1e-9):
            raise ValueError("semicontinuity probe expects probability measures")
    seq = np.array([_lambda_k(mesh, K, m, k) for m in measures])
    tail = seq[len(seq) // 2:]
    limsup = float(tail.max()) if len(tail) else np.nan
    lim = _lambda_k(mesh, K, mu, k)
    passed = bool(limsup <= lim + tol * max(1.0, abs(lim)) if np.isfinite(lim) else True)
    return SemicontinuityReport(seq, limsup, lim, passed, tol)
