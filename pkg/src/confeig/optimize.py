"""Maximize ``lam_1 * mu(M)`` over measures with capped density.

For each cap ``C`` the admissible measures are probability measures whose
density against the normalized reference area is at most ``C``. Inside a
cap stage the log-density is moved along steepest-ascent tilts of ``lam_1``
(see :func:`confeig.variation.min_norm_direction`) with backtracking, and
each trial point is projected back onto the capped set. Stages are
warm-started from the previous cap.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .measure import DiscreteMeasure, ball_masses
from .mesh import assemble_stiffness, genus, graph_distances
from .serialize import dumps, loads
from .spectrum import SpectrumError, eigenspace, measure_spectrum
from .variation import extremality_certificate, min_norm_direction

logger = logging.getLogger(__name__)


class OptimizeError(ValueError):
    pass


@dataclass(frozen=True)
class DensityCapSchedule:
    caps: tuple
    budget: int = 100

    def __post_init__(self):
        caps = tuple(float(c) for c in self.caps)
        if not caps:
            raise OptimizeError("empty cap schedule")
        if any(c <= 0 for c in caps) or any(b <= a for a, b in zip(caps, caps[1:])):
            raise OptimizeError("caps must be positive and strictly increasing")
        if self.budget < 1:
            raise OptimizeError("iteration budget must be positive")
        object.__setattr__(self, "caps", caps)


@dataclass
class MaximizerOptions:
    tol: float = 1e-3
    margin_tol: float = 1e-9
    cluster_tols: tuple = (0.05, 0.01, 0.002, 1e-6)
    init_noise: float = 0.3
    smoothing: int = 10
    max_halvings: int = 30
    concentration_eps: float = 0.05
    concentration_radius: float = 3.0
    certificate_every: int = 1
    k_extra: int = 8

    def to_dict(self):
        return dict(self.__dict__, cluster_tols=list(self.cluster_tols))


@dataclass
class MaximizerResult:
    measure: DiscreteMeasure
    lambda1: float
    trace: list
    saturated_set: np.ndarray
    certificate: object
    stages: list
    status: str
    density: np.ndarray
    cap: float
    message: str = ""
    checkpoint: str | None = None

    @property
    def lambda1_mass(self):
        return self.lambda1 * self.measure.total

    def to_dict(self):
        return {"lambda1": self.lambda1, "lambda1_mass": self.lambda1_mass, "status": self.status,
                "cap": self.cap, "message": self.message,
                "saturated_set": [int(i) for i in self.saturated_set],
                "certificate": self.certificate.to_dict() if self.certificate is not None else None,
                "stages": self.stages, "iterations": len(self.trace)}


class CancelToken:
    """Cooperative cancellation flag checked between iterations."""

    def __init__(self):
        self._flag = False

    def cancel(self):
        self._flag = True

    @property
    def cancelled(self):
        return self._flag


def _is_cancelled(token):
    if token is None:
        return False
    if hasattr(token, "is_set"):
        return bool(token.is_set())
    if hasattr(token, "cancelled"):
        return bool(token.cancelled)
    return bool(token())


def project_to_cap(rho, area, cap, rounds=50):
    """Clip the density at ``cap`` and rescale the unclipped part to unit mass.

    Repeated until no vertex exceeds the cap (at most ``rounds`` times).
    """
    rho = np.asarray(rho, dtype=float).copy()
    if cap * area.sum() < 1 - 1e-12:
        raise OptimizeError("cap below uniform density")
    for _ in range(rounds):
        rho = np.minimum(rho, cap)
        total = float(rho @ area)
        if total >= 1.0:
            # uniform shrink keeps every vertex below the cap
            return rho / total
        sat = rho >= cap
        mass_sat = float(area[sat].sum()) * cap
        free_mass = float(rho[~sat] @ area[~sat])
        if free_mass <= 0:
            break
        rho[~sat] *= (1.0 - mass_sat) / free_mass
        if rho.max() <= cap * (1 + 1e-12):
            break
    return np.minimum(rho, cap)


def smooth_noise(mesh, rng, amplitude, steps=10):
    """Zero-mean Gaussian field smoothed by neighbour averaging, scaled to ``amplitude`` std."""
    n = mesh.n_vertices
    x = rng.standard_normal(n)
    if amplitude == 0:
        return np.zeros(n)
    A = mesh.edge_graph.copy()
    A.data[:] = 1.0
    A = A + sparse.identity(n, format="csr")
    deg = np.asarray(A.sum(axis=1)).ravel()
    for _ in range(steps):
        x = (A @ x) / deg
    x -= x.mean()
    s = x.std()
    return x * (amplitude / s) if s > 0 else x


class _BallOperator:
    """Sparse ``x -> mu(B(x, r))`` for a fixed radius."""

    def __init__(self, mesh, r, chunk=512):
        n = mesh.n_vertices
        rows, cols = [], []
        for start in range(0, n, chunk):
            src = np.arange(start, min(n, start + chunk))
            D = graph_distances(mesh, src, limit=r)
            i, j = np.nonzero(D < r)
            rows.append(src[i])
            cols.append(j)
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        self.B = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

    def max_mass(self, w):
        return float((self.B @ w).max())


def _measure(rho, area):
    return DiscreteMeasure(rho * area, (), "interior", "density")


def _lambda1(mesh, K, rho, area, k_extra):
    mu = _measure(rho, area)
    res = measure_spectrum(mesh, mu, 1 + k_extra, K=K)
    return float(res.eigenvalues[1]), res, mu


def _write_checkpoint(path, state):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(dumps(state))
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path) as f:
        state = loads(f.read())
    state["rho"] = np.array(state["rho"], dtype=float)
    return state


def _best_certificate(mesh, K, mu, res, opts):
    """Smallest-residual certificate over the configured cluster widths."""
    best = None
    for ct in opts.cluster_tols:
        E = eigenspace(res, 1, ct)
        if E.truncated:
            continue
        c = extremality_certificate(mesh, mu, 1, tol=opts.tol, K=K, eigenpair=E,
                                    pairwise="auto", margin_tol=opts.margin_tol)
        if best is None or c.residual < best.residual:
            best = c
    return best


def maximize_lambda1(mesh, K=None, schedule=None, seed=0, opts=None, cancel=None,
                     checkpoint=None, resume=None, callback=None):
    """Direct method over density caps.

    Parameters
    ----------
    mesh : TriangleMesh
        Connected reference surface.
    K : sparse matrix, optional
        Stiffness matrix; assembled when omitted.
    schedule : DensityCapSchedule
    seed : int
        Seeds the initial smooth log-normal density.
    opts : MaximizerOptions, optional
    cancel : object, optional
        Anything with ``is_set()``, ``cancelled`` or a call returning a bool.
        Checked between iterations.
    checkpoint : str, optional
        File rewritten after every accepted iteration (exact float JSON).
    resume : str, optional
        Checkpoint to continue from; the continued run is bit-identical to
        an uninterrupted one.
    callback : callable, optional
        Called with each trace row.

    Returns
    -------
    MaximizerResult
        ``status`` is ``"done"``, ``"cancelled"`` or ``"failed"`` (eigen-solver
        error; the result then holds the last accepted iterate).
    """
    if schedule is None:
        schedule = DensityCapSchedule((10.0, 100.0))
    opts = opts or MaximizerOptions()
    if mesh.n_components != 1:
        raise OptimizeError("mesh must be connected")
    if K is None:
        K = assemble_stiffness(mesh)
    area = mesh.vertex_areas / mesh.area
    if schedule.caps[0] < 1.0:
        raise OptimizeError("cap below uniform density")
    ball = _BallOperator(mesh, opts.concentration_radius * mesh.median_edge_length)

    if resume is not None:
        state = load_checkpoint(resume)
        rho = state["rho"]
        stage0, it0 = int(state["stage"]), int(state["iteration"])
        trace, stages = state["trace"], state["stages"]
    else:
        rng = np.random.default_rng(seed)
        rho = np.exp(smooth_noise(mesh, rng, opts.init_noise, opts.smoothing))
        rho /= rho @ area
        stage0, it0, trace, stages = 0, 0, [], []

    def save(stage, iteration, rho):
        if checkpoint is not None:
            _write_checkpoint(checkpoint, {"rho": rho, "stage": stage, "iteration": iteration,
                                           "trace": trace, "stages": stages, "seed": seed,
                                           "caps": list(schedule.caps), "budget": schedule.budget,
                                           "opts": opts.to_dict()})

    status, message = "done", ""
    cert = None
    lam = np.nan
    for si in range(stage0, len(schedule.caps)):
        C = schedule.caps[si]
        if not (resume is not None and si == stage0):
            # a checkpointed density is already feasible; projecting again moves bits
            rho = project_to_cap(rho, area, C)
        try:
            lam, res, mu = _lambda1(mesh, K, rho, area, opts.k_extra)
        except SpectrumError as exc:
            status, message = "failed", str(exc)
            break
        reason = "budget"
        start = it0 if si == stage0 else 0
        for it in range(start, schedule.budget):
            if _is_cancelled(cancel):
                status, message = "cancelled", f"cancelled at cap {C}, iteration {it}"
                save(si, it, rho)
                break
            sat = rho >= C * (1 - 1e-9)
            free = ~sat
            row = {"cap": C, "iteration": it, "lambda1": lam, "step": 0.0, "residual": np.nan,
                   "margin": np.nan, "concentration": ball.max_mass(mu.masses), "cluster_tol": np.nan}
            if it % opts.certificate_every == 0:
                cert = _best_certificate(mesh, K, mu, res, opts)
                row["residual"] = cert.residual
                if cert.residual <= opts.tol and not sat.any():
                    reason = "certified"
                    trace.append(row)
                    break
            accepted = False
            try:
                # each cluster width gives an ascent direction; keep the best step
                best = None
                for ct in opts.cluster_tols:
                    E = eigenspace(res, 1, ct)
                    if E.truncated:
                        continue
                    sep, _ = min_norm_direction(mu, E, free=free)
                    if sep.margin <= opts.margin_tol:
                        continue
                    phi = sep.phi
                    t = 0.1 / float(np.abs(phi).max())
                    for _ in range(opts.max_halvings):
                        trial = project_to_cap(rho * np.exp(t * phi - (t * phi).max()), area, C)
                        trial /= trial @ area
                        lam_t, res_t, mu_t = _lambda1(mesh, K, trial, area, opts.k_extra)
                        if lam_t > lam:
                            if best is None or lam_t > best[0]:
                                best = (lam_t, trial, res_t, mu_t, t, ct, sep.margin)
                            break
                        t *= 0.5
                if best is not None:
                    lam, rho, res, mu = best[0], best[1], best[2], best[3]
                    row.update(step=best[4], cluster_tol=best[5], margin=best[6])
                    accepted = True
            except SpectrumError as exc:
                status, message = "failed", str(exc)
                trace.append(row)
                save(si, it, rho)
                break
            row["lambda1_new"] = lam
            trace.append(row)
            if callback is not None:
                callback(row)
            if not accepted:
                reason = "stationary"
                break
            save(si, it + 1, rho)
        else:
            reason = "budget"
        if status != "done":
            break
        sat = rho >= C * (1 - 1e-9)
        stages.append({"cap": C, "lambda1": lam, "reason": reason,
                       "saturated": [int(i) for i in np.nonzero(sat)[0]],
                       "area_fraction": float(area[sat].sum()),
                       "density": [float(x) for x in rho]})
        logger.info("cap %g: lambda1 * mass = %.10g (%s)", C, lam, reason)
        save(si + 1, 0, rho)
    C = schedule.caps[min(len(stages), len(schedule.caps)) - 1] if stages else schedule.caps[0]
    mu = _measure(rho, area)
    if cert is None or status == "done":
        try:
            r_final = measure_spectrum(mesh, mu, 1 + opts.k_extra, K=K)
            lam = float(r_final.eigenvalues[1])
            cert = _best_certificate(mesh, K, mu, r_final, opts)
        except SpectrumError as exc:
            status, message = "failed", str(exc)
    sat = np.nonzero(rho >= C * (1 - 1e-9))[0]
    return MaximizerResult(mu, lam, trace, sat, cert, stages, status, rho, C, message, checkpoint)


def write_trace_csv(result, path):
    """Plot-ready CSV: cap, iteration, lambda1, step, residual, margin, concentration."""
    cols = ["cap", "iteration", "lambda1", "lambda1_new", "step", "residual", "margin",
            "concentration", "cluster_tol"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for row in result.trace:
            w.writerow(["%.17g" % row[c] if isinstance(row.get(c), float) else row.get(c, "")
                        for c in cols])


# ---------------------------------------------------------------- monitors
@dataclass(frozen=True)
class ConcentrationEntry:
    max_ball_mass: float
    profile: np.ndarray
    flagged: bool
    lambda1_mass: float | None
    within_ceiling: bool | None

    def to_dict(self):
        return {"max_ball_mass": self.max_ball_mass, "profile": list(map(float, self.profile)),
                "flagged": self.flagged, "lambda1_mass": self.lambda1_mass,
                "within_ceiling": self.within_ceiling}


def concentration_monitor(mesh, measures, eps=0.05, rho=None, slack=0.05, radii=None, K=None):
    """Flag measures with mass ``>= 1 - eps`` in one ball of radius ``rho``.

    ``rho`` defaults to three median edge lengths. For flagged measures the
    product ``lam_1 * mu(M)`` is compared with ``8 pi (1 + slack)``. The
    profile lists ``max_x mu(B(x, r))`` over ``radii``.
    """
    if rho is None:
        rho = 3.0 * mesh.median_edge_length
    if radii is None:
        radii = np.geomspace(rho, mesh.median_edge_length * 0.5, 6)
    if K is None:
        K = assemble_stiffness(mesh)
    ball = _BallOperator(mesh, rho)
    out = []
    for mu in measures:
        if not mu.is_probability(1e-9):
            raise ValueError("concentration monitor expects probability measures")
        top = ball.max_mass(mu.masses)
        prof = ball_masses(mesh, mu, radii)
        flagged = top >= 1 - eps
        lm = ok = None
        if flagged:
            r = measure_spectrum(mesh, mu, 1, K=K)
            lm = float(r.eigenvalues[1] * mu.total)
            ok = bool(lm <= 8 * np.pi * (1 + slack))
        out.append(ConcentrationEntry(top, prof, bool(flagged), lm, ok))
    return out


@dataclass(frozen=True)
class SingularSetEstimate:
    vertices: np.ndarray
    nested: np.ndarray
    area_fraction: float
    nested_area_fraction: float
    per_cap: list

    def to_dict(self):
        return {"vertices": [int(i) for i in self.vertices], "nested": [int(i) for i in self.nested],
                "area_fraction": self.area_fraction, "nested_area_fraction": self.nested_area_fraction,
                "per_cap": self.per_cap}


def singular_set_estimate(result, eta=0.05, mesh=None):
    """Vertices with density ``>= (1 - eta) C`` at the final cap, and their
    intersection over all caps.

    Area fractions are against the normalized reference area; at a cap ``C``
    the fully saturated part has area at most ``1 / C``.
    """
    if not 0 <= eta <= 1:
        raise ValueError("eta must lie in [0, 1]")
    if mesh is not None:
        area = mesh.vertex_areas / mesh.area
    else:
        # reference area recovered from the measure: mass = density * area
        rho = result.density
        area = np.where(rho > 0, result.measure.masses / np.where(rho > 0, rho, 1), 0.0)
    stages = result.stages or [{"cap": result.cap, "density": list(result.density)}]
    sets, per_cap = [], []
    for st in stages:
        rho = np.asarray(st["density"], dtype=float)
        S = (rho >= (1 - eta) * st["cap"]) & (rho > 0)
        sets.append(S)
        per_cap.append({"cap": st["cap"], "size": int(S.sum()), "area_fraction": float(area[S].sum())})
    last = sets[-1]
    nested = np.logical_and.reduce(sets)
    return SingularSetEstimate(np.nonzero(last)[0], np.nonzero(nested)[0], float(area[last].sum()),
                               float(area[nested].sum()), per_cap)


def genus_ceiling(mesh):
    """``8 pi (genus + 1)`` for a closed connected mesh."""
    return 8 * np.pi * (genus(mesh) + 1)
