"""Command-line entry point: ``confeig <command> --mesh ... --measure ...``.

Every command writes ``<out>/<command>.json`` and prints a one-line summary.
Exit status is 0 on success, 1 on bad input and 2 on numerical failure.
The thread count for the linear algebra backends is read from
``CONFEIG_THREADS`` before numpy is imported.
"""

import os
import sys

if os.environ.get("CONFEIG_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = os.environ["CONFEIG_THREADS"]

import argparse
import datetime
import json
import logging
from pathlib import Path

import numpy as np

from . import __version__, shapes
from .bounds import BalanceError, capacitor_bound, gy_annuli, hersch_bound
from .capacity import CapacityError, ball_family, cap, Capacitor, isocapacity_constant
from .measure import MeasureError, ball_growth_diagnostic, measure_from_descriptor
from .mesh import MeshError, Region, assemble_stiffness, genus, graph_ball, load_mesh
from .optimize import (DensityCapSchedule, MaximizerOptions, OptimizeError, maximize_lambda1,
                       write_trace_csv)
from .serialize import config_hash, dumps, write_eigenfunctions
from .spectrum import SpectrumError, measure_spectrum
from .variation import extremality_certificate, one_sided_derivatives, separating_direction

logger = logging.getLogger(__name__)

EIGHT_PI = 8 * np.pi
COMMANDS = ("eigs", "maximize", "capacity", "bounds", "extremality", "diagnose")
GENERATORS = {
    "icosphere": lambda a: shapes.icosphere(int(a[0]) if a else 4),
    "flat_torus": lambda a: shapes.flat_torus(int(a[0]) if a else 32),
    "torus": lambda a: shapes.torus(*(int(x) for x in a)),
    "square": lambda a: shapes.square(int(a[0]) if a else 1),
    "disk": lambda a: shapes.disk(int(a[0]) if a else 20),
}


class InputError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors are input errors: exit status 1, not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- inputs
def resolve_mesh(arg):
    """A mesh file path, or ``gen:<shape>[:<param>...]`` for a built-in shape."""
    if arg.startswith("gen:"):
        name, *args = arg[4:].split(":")
        if name not in GENERATORS:
            raise InputError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}")
        return GENERATORS[name](args)
    if not Path(arg).is_file():
        raise InputError(f"mesh file not found: {arg}")
    return load_mesh(arg)


def resolve_measure(mesh, arg):
    """``uniform``, ``boundary``, a JSON descriptor, or a path to one."""
    if arg in ("uniform", "boundary"):
        return measure_from_descriptor(mesh, {"kind": arg})
    if arg.lstrip().startswith("{"):
        return measure_from_descriptor(mesh, json.loads(arg))
    path = Path(arg)
    if not path.is_file():
        raise InputError(f"measure descriptor not found: {arg}")
    return measure_from_descriptor(mesh, {"kind": "file", "path": str(path)})


def _vertex(mesh, token):
    if "," in token:
        p = np.array([float(x) for x in token.split(",")])
        X = mesh.vertices[:, : len(p)]
        return int(np.argmin(np.linalg.norm(X - p, axis=1)))
    v = int(token)
    if not 0 <= v < mesh.n_vertices:
        raise InputError(f"vertex {v} out of range")
    return v


def resolve_region(mesh, arg):
    """Parse a vertex region.

    ``ball:<v>:<r>`` is the open graph ball, ``disk:<x,y[,z]>:<r>`` the closed
    Euclidean ball and ``odisk:<x,y[,z]>:<r>`` the open one; anything else is
    read as a region JSON file. A centre given as coordinates snaps to the
    nearest vertex.
    """
    kind, _, rest = arg.partition(":")
    if kind == "ball":
        c, r = rest.rsplit(":", 1)
        return graph_ball(mesh, _vertex(mesh, c), float(r))
    if kind in ("disk", "odisk"):
        c, r = rest.rsplit(":", 1)
        r = float(r)
        p = np.array([float(x) for x in c.split(",")])
        d = np.linalg.norm(mesh.vertices[:, : len(p)] - p, axis=1)
        inside = d < r if kind == "odisk" else d <= r * (1 + 1e-9)
        return Region(np.nonzero(inside)[0], "euclidean-ball", _vertex(mesh, c), r)
    path = Path(arg)
    if path.is_file():
        return Region.from_json(path.read_text())
    raise InputError(f"cannot parse region {arg!r}")


# ---------------------------------------------------------------- commands
def cmd_eigs(args, mesh, mu, K):
    res = measure_spectrum(mesh, mu, args.k, K=K, tol=args.tol, method=args.method,
                           seed=args.seed)
    lam1 = float(res.eigenvalues[1]) if res.n_computed > 1 else np.inf
    clusters = res.clusters(args.cluster_tol)
    out = {"eigenvalues": [float(x) for x in res.eigenvalues],
           "n_finite": res.n_finite, "multiplicities": [len(c) for c in clusters],
           "lambda1_mass": lam1 * mu.total, "lambda1_mass_over_8pi": lam1 * mu.total / EIGHT_PI,
           "max_residual": float(np.max(res.residuals)) if len(res.residuals) else 0.0,
           "method": res.method, "mass": mu.total}
    if args.save_eigenfunctions:
        path = Path(args.out) / "eigenfunctions.eigf"
        write_eigenfunctions(path, res.eigenfunctions)
        out["eigenfunctions_file"] = path.name
    mult1 = next((len(c) for c in clusters if 1 in c), 0)
    summary = (f"eigs: {len(res.eigenvalues)} eigenvalues, lambda1*mass = {lam1 * mu.total:.6g} "
               f"({lam1 * mu.total / EIGHT_PI:.4f} x 8pi), multiplicity {mult1}")
    return out, summary


def cmd_extremality(args, mesh, mu, K):
    cert = extremality_certificate(mesh, mu, args.k, tol=args.tol, K=K,
                                   cluster_tol=args.cluster_tol, seed=args.seed)
    out = cert.to_dict()
    if cert.verdict == "non-extremal":
        phi = separating_direction(mesh, mu, args.k, K=K, tol=args.tol,
                                   cluster_tol=args.cluster_tol)
        if phi is not None:
            d = one_sided_derivatives(mesh, mu, phi, args.k, K=K, cluster_tol=args.cluster_tol)
            out["separating_direction"] = {"phi": [float(x) for x in phi],
                                           "right_derivative": d.right}
    coeffs = ", ".join(f"{c:.3g}" for c in cert.coefficients)
    summary = (f"extremality: k={args.k} verdict {cert.verdict}, residual {cert.residual:.3g}, "
               f"coefficients ({coeffs})")
    return out, summary


def cmd_maximize(args, mesh, mu, K):
    caps = tuple(float(c) for c in args.caps.split(","))
    opts = MaximizerOptions(tol=args.tol, init_noise=args.init_noise)
    res = maximize_lambda1(mesh, K=K, schedule=DensityCapSchedule(caps, args.budget),
                           seed=args.seed, opts=opts, checkpoint=args.checkpoint,
                           resume=args.resume)
    trace = Path(args.out) / "maximize_trace.csv"
    write_trace_csv(res, trace)
    out = res.to_dict()
    out["trace_file"] = trace.name
    out["density"] = [float(x) for x in res.density]
    if res.status == "failed":
        raise SpectrumError(res.message)
    resid = res.certificate.residual if res.certificate is not None else np.nan
    summary = (f"maximize: lambda1*mass = {res.lambda1_mass:.6g} "
               f"({res.lambda1_mass / EIGHT_PI:.4f} x 8pi) after {len(res.trace)} iterations, "
               f"certificate residual {resid:.3g}, status {res.status}")
    return out, summary


def cmd_capacity(args, mesh, mu, K):
    F = resolve_region(mesh, args.inner)
    G = resolve_region(mesh, args.outer)
    rep = cap(mesh, K, Capacitor(F, G))
    out = rep.to_dict()
    out.update(inner=F.descriptor(), outer=G.descriptor(), inner_mass=float(mu.masses[F.vertices].sum()))
    if args.beta:
        beta, log = isocapacity_constant(mesh, K, mu, G.mask(mesh.n_vertices))
        out.update(beta_lower=beta, candidate_log=log[:20])
    summary = f"capacity: CAP = {rep.cap_value:.8g} ({len(F)} inner, {len(G)} outer vertices)"
    return out, summary


def radial_sphere_map(mesh):
    """Radial projection about the area centroid; valid for star-shaped spheres."""
    w = mesh.vertex_areas
    X = mesh.vertices[:, :3] - (w @ mesh.vertices[:, :3]) / w.sum()
    return X / np.linalg.norm(X, axis=1)[:, None]


def cmd_bounds(args, mesh, mu, K):
    out = {}
    parts = []
    if mesh.is_closed and mesh.dim == 3 and genus(mesh) == 0 and not mu.has_atoms:
        h = hersch_bound(mesh, K, mu, radial_sphere_map(mesh))
        out["hersch"] = h.to_dict()
        out["hersch"]["sphere_map"] = "radial projection"
        parts.append(f"hersch {h.bound:.6g} <= 8pi: {h.passed}")
    else:
        out["hersch"] = None
    ks = [int(x) for x in args.k_list.split(",")]
    out["annuli"] = []
    for k in ks:
        system = gy_annuli(mesh, mu, k, K=K)
        rep = capacitor_bound(mesh, K, mu, system, k)
        out["annuli"].append({"k": k, "system": system.to_dict(), "bound": rep.to_dict()})
        parts.append(f"k={k} lam={rep.lambda_k:.5g} <= {rep.bound:.5g}: {rep.passed}")
    return out, "bounds: " + "; ".join(parts)


def diagnose_verdict(q1, q2):
    """Heuristic classification from the ``q = 1`` and ``q = 2`` profiles."""
    if q2.trend == "decaying":
        return "compact-like"
    p = q1.profile
    i_small = int(np.argmin(q1.radii))
    i_large = int(np.argmax(q1.radii))
    if p[i_small] >= p.max() * (1 - 1e-12) and p[i_small] >= 1.5 * p[i_large]:
        return "degenerate"
    return "positive-lambda1-like"


def cmd_diagnose(args, mesh, mu, K):
    q1 = ball_growth_diagnostic(mesh, mu, 1.0)
    q2 = ball_growth_diagnostic(mesh, mu, 2.0)
    verdict = diagnose_verdict(q1, q2)
    profiles = []
    for B in ball_family(mesh, mu, n_centers=args.n_balls, seed=args.seed):
        beta, _ = isocapacity_constant(mesh, K, mu, B, n_centers=4, n_levels=4)
        profiles.append({"mass": float(mu.masses[B].sum()), "size": int(B.sum()),
                         "beta_lower": beta})
    out = {"ball_growth": {"q1": q1.to_dict(), "q2": q2.to_dict()},
           "isocapacity_profiles": profiles, "verdict": verdict, "label": "heuristic"}
    return out, f"diagnose: {verdict} (heuristic; q=1 {q1.trend}, q=2 {q2.trend})"


HANDLERS = {"eigs": cmd_eigs, "maximize": cmd_maximize, "capacity": cmd_capacity,
            "bounds": cmd_bounds, "extremality": cmd_extremality, "diagnose": cmd_diagnose}


# ---------------------------------------------------------------- plumbing
def build_parser():
    p = _Parser(prog="confeig", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--mesh", required=True, help="OFF/OBJ path or gen:<shape>[:<n>]")
        sp.add_argument("--measure", default="uniform",
                        help="uniform, boundary, JSON descriptor or descriptor file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    sp = common(sub.add_parser("eigs", help="eigenvalues of the measure"))
    sp.add_argument("--k", type=int, default=5, help="highest eigenvalue index")
    sp.add_argument("--tol", type=float, default=1e-8)
    sp.add_argument("--method", choices=("auto", "dense", "lanczos"), default="auto")
    sp.add_argument("--cluster-tol", type=float, default=1e-6)
    sp.add_argument("--save-eigenfunctions", action="store_true")

    sp = common(sub.add_parser("extremality", help="sum-of-squares certificate for lambda_k"))
    sp.add_argument("--k", type=int, default=1)
    sp.add_argument("--tol", type=float, default=1e-2)
    sp.add_argument("--cluster-tol", type=float, default=1e-6)

    sp = common(sub.add_parser("maximize", help="maximize lambda_1 over density caps"))
    sp.add_argument("--caps", default="10,100")
    sp.add_argument("--budget", type=int, default=100)
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.add_argument("--init-noise", type=float, default=0.3)
    sp.add_argument("--checkpoint")
    sp.add_argument("--resume")

    sp = common(sub.add_parser("capacity", help="capacity of a capacitor"))
    sp.add_argument("--inner", required=True, help="ball:<v>:<r>, disk:<x,y>:<r>, odisk:<x,y>:<r> or region JSON")
    sp.add_argument("--outer", required=True)
    sp.add_argument("--beta", action="store_true", help="also estimate the isocapacity constant")

    sp = common(sub.add_parser("bounds", help="Hersch and annulus upper bounds"))
    sp.add_argument("--k-list", default="1,2,3")

    sp = common(sub.add_parser("diagnose", help="heuristic ball-growth and isocapacity report"))
    sp.add_argument("--n-balls", type=int, default=6)
    return p


def run_config(args):
    """The reproducible part of the invocation, as a plain dict."""
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "verbose")}
    return cfg


def run(args):
    """Execute one parsed command; returns the exit status."""
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = Path(args.out)
    cfg = run_config(args)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        mesh = resolve_mesh(args.mesh)
        mu = resolve_measure(mesh, args.measure)
        K = assemble_stiffness(mesh)
        result, summary = HANDLERS[args.command](args, mesh, mu, K)
        status = 0
    except (InputError, MeshError, MeasureError, CapacityError, OptimizeError, OSError,
            ValueError, KeyError) as exc:
        result, summary, status = {"error": str(exc)}, f"{args.command}: input error: {exc}", 1
    except (SpectrumError, BalanceError, RuntimeError, np.linalg.LinAlgError) as exc:
        result, summary, status = ({"error": str(exc)},
                                   f"{args.command}: numerical failure: {exc}", 2)
    report = {"command": args.command, "version": __version__, "seed": args.seed,
              "config": cfg, "config_hash": config_hash(cfg), "exit_status": status,
              "result": result,
              "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat()}
    try:
        (out_dir / f"{args.command}.json").write_text(dumps(report) + "\n")
    except OSError as exc:
        print(f"{args.command}: cannot write report: {exc}", file=sys.stderr)
        status = status or 1
    print(summary)
    return status


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # usage errors exit 1, --help and --version exit 0
        return int(exc.code or 0)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
