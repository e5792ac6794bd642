"""End-to-end acceptance criteria at their stated tolerances.

Each criterion prints one ``PASS``/``FAIL`` line; under pytest the lines are
repeated in the terminal summary. ``python tests/test_acceptance.py`` runs
the criteria without pytest.
"""
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE, bump_density, random_density  # noqa: E402
from test_capacity import kkt_capacity  # noqa: E402

from confeig import shapes  # noqa: E402
from confeig.bounds import capacitor_bound, gy_annuli  # noqa: E402
from confeig.capacity import Capacitor, cap, mazja_bracket  # noqa: E402
from confeig.measure import (DeformationFamily, atomic_measure, boundary_measure,  # noqa: E402
                             deform, density_measure, uniform_area_measure)
from confeig.mesh import Region, assemble_stiffness, genus, graph_distances  # noqa: E402
from confeig.optimize import (DensityCapSchedule, concentration_monitor,  # noqa: E402
                              maximize_lambda1, smooth_noise)
from confeig.spectrum import eigenspace, eigenspace_of, measure_spectrum  # noqa: E402
from confeig.variation import (extremality_certificate, finite_difference_derivatives,  # noqa: E402
                               one_sided_derivatives, projection_gap, separating_direction)

EIGHT_PI = 8 * np.pi


def criterion_1():
    t0 = time.perf_counter()
    m = shapes.icosphere(5)
    mu = uniform_area_measure(m)
    res = measure_spectrum(m, mu, 4)
    ratio = res.eigenvalues[1] * mu.total / EIGHT_PI
    mult = eigenspace(res, 1).multiplicity
    dt = time.perf_counter() - t0
    ok = m.n_vertices >= 10_000 and 0.99 <= ratio <= 1.001 and mult == 3 and dt <= 30
    return ok, f"|V|={m.n_vertices} lambda1*mass/8pi={ratio:.6f} multiplicity={mult} time={dt:.1f}s"


def criterion_2():
    t0 = time.perf_counter()
    worst = {}
    ok = True
    for m in (shapes.icosphere(3), shapes.torus(32, 16)):
        g = genus(m)
        K = assemble_stiffness(m)
        ceiling = EIGHT_PI * (g + 1) * 1.02
        vals = []
        for seed in range(50):
            mu = density_measure(m, random_density(m, seed, sigma=1.0))
            vals.append(measure_spectrum(m, mu, 1, K=K).eigenvalues[1] * mu.total)
        worst[g] = max(vals) / (EIGHT_PI * (g + 1))
        ok &= max(vals) <= ceiling
    dt = time.perf_counter() - t0
    ok &= dt <= 300
    return bool(ok), (f"max lambda1*mass/(8pi(g+1)): sphere {worst[0]:.4f}, torus {worst[1]:.4f}; "
                      f"100 densities in {dt:.1f}s")


def criterion_3():
    d = shapes.disk(45)
    lam = measure_spectrum(d, boundary_measure(d).normalized(), 2).eigenvalues[1]
    ratio = lam / (2 * np.pi)
    return bool(d.n_vertices >= 5000 and 0.98 <= ratio <= 1.02), \
        f"|V|={d.n_vertices} lambda1/2pi={ratio:.5f}"


def criterion_4():
    lams, ok = [], True
    for level in (1, 2, 3, 4):
        m = shapes.icosphere(level)
        z = m.vertices[:, 2]
        mu = atomic_measure(m, [(int(np.argmax(z)), 0.5), (int(np.argmin(z)), 0.5)])
        res = measure_spectrum(m, mu, 3)
        lams.append(res.eigenvalues[1])
        ok &= bool(np.isinf(res.eigenvalues[2]) and res.n_finite == 2)
    ok &= all(b < a for a, b in zip(lams, lams[1:]))
    detail = "lambda1 over refinements: " + ", ".join(f"{x:.5f}" for x in lams)
    return bool(ok), detail + "; lambda2 = inf at every level"


def criterion_5():
    m = shapes.icosphere(2)
    K = assemble_stiffness(m)
    worst, pairs, seed = 0.0, 0, 0
    while pairs < 20:
        mu = density_measure(m, random_density(m, 1000 + seed)).normalized()
        seed += 1
        res, E = eigenspace_of(m, mu, 1, K=K)
        if E.multiplicity != 1:
            continue
        phi = np.random.default_rng(seed).uniform(-1, 1, m.n_vertices)
        d = one_sided_derivatives(m, mu, phi, 1, K=K)
        fd = finite_difference_derivatives(m, mu, phi, 1, t=1e-4, K=K)
        tol = max(1e-6, 1e-3 * E.eigenvalue)
        worst = max(worst, abs(fd["central"] - d.right) / tol)
        pairs += 1
    s = shapes.icosphere(3)
    Ks = assemble_stiffness(s)
    mu = uniform_area_measure(s).normalized()
    z2 = s.vertices[:, 2] ** 2
    phi = z2 - mu.mean(z2)
    d = one_sided_derivatives(s, mu, phi, 1, K=Ks)
    fd = finite_difference_derivatives(s, mu, phi, 1, t=1e-4, K=Ks)
    tol = 1e-3 * d.eigenvalue
    bracket = (d.multiplicity == 3 and d.right <= fd["central"] <= d.left
               and abs(fd["forward"] - d.right) <= tol and abs(fd["backward"] - d.left) <= tol)
    ok = worst <= 1 and bracket
    return bool(ok), (f"20 simple pairs: max |fd - formula| / tol = {worst:.3g}; sphere "
                      f"right={d.right:.4f} <= fwd={fd['forward']:.4f}, "
                      f"bwd={fd['backward']:.4f} <= left={d.left:.4f}")


def criterion_6():
    parts, ok = [], True
    for name, m in (("sphere", shapes.icosphere(5)), ("torus", shapes.flat_torus(100))):
        K = assemble_stiffness(m)
        cert = extremality_certificate(m, uniform_area_measure(m), 1, K=K)
        ok &= m.n_vertices >= 10_000 and cert.verdict == "extremal" and cert.residual <= 1e-2
        parts.append(f"{name} |V|={m.n_vertices} {cert.verdict} residual={cert.residual:.2e}")
        if name == "sphere":
            noise = smooth_noise(m, np.random.default_rng(6), 1.0)
            mu = density_measure(m, 1 + 0.1 * noise / np.abs(noise).max())
            cert = extremality_certificate(m, mu, 1, K=K)
            phi = separating_direction(m, mu, 1, K=K)
            right = one_sided_derivatives(m, mu, phi, 1, K=K).right if phi is not None else -np.inf
            ok &= cert.verdict == "non-extremal" and right >= 1e-4
            parts.append(f"10% perturbed: {cert.verdict}, right derivative {right:.3g}")
    return bool(ok), "; ".join(parts)


def criterion_7():
    m = shapes.icosphere(3)
    K = assemble_stiffness(m)
    rng = np.random.default_rng(7)
    worst, ok = 0.0, True
    for seed in range(20):
        mu = density_measure(m, random_density(m, 700 + seed))
        w = graph_distances(m, int(rng.integers(m.n_vertices)))[0] < rng.uniform(0.4, 1.5)
        rep = mazja_bracket(m, K, mu, w)
        ok &= rep.passed
        worst = max(worst, rep.tone / rep.rhs)
    small = shapes.icosphere(2)
    Ks = assemble_stiffness(small)
    err = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        d = graph_distances(small, int(r.integers(small.n_vertices)))[0]
        rad = r.uniform(0.1, 0.6)
        F, G = d < rad, d < rad + r.uniform(0.2, 1.5)
        F[np.argmin(d)] = True
        val = cap(small, Ks, Capacitor(Region(np.nonzero(F)[0]), Region(np.nonzero(G)[0]))).cap_value
        ref = kkt_capacity(Ks, F, G)
        err = max(err, abs(val - ref) / max(1.0, ref))
    ok &= small.n_vertices <= 200 and err <= 1e-10
    return bool(ok), f"max tone * beta_lower = {worst:.4f} (<= 1.05); capacity vs oracle {err:.1e}"


def criterion_8():
    # rings sit at radii j / 80, so both plates and both outer radii fall on rings
    d = shapes.disk(80)
    K = assemble_stiffness(d)
    rho = np.linalg.norm(d.vertices, axis=1)
    errs = []
    for r, R in ((0.1, 0.5), (0.05, 0.4)):
        F = np.nonzero(rho <= r * (1 + 1e-9))[0]
        G = np.nonzero(rho < R)[0]
        val = cap(d, K, Capacitor(Region(F), Region(G))).cap_value
        errs.append(abs(val / (2 * np.pi / np.log(R / r)) - 1))
    return bool(max(errs) <= 0.05), f"|V|={d.n_vertices} relative errors " + ", ".join(f"{e:.4f}" for e in errs)


def criterion_9():
    m = shapes.icosphere(4)
    K = assemble_stiffness(m)
    uni = uniform_area_measure(m).normalized()
    two = density_measure(m, bump_density(m, 1)).normalized()
    ok, parts = True, []
    for k in (1, 2, 3):
        for mu in (uni, two):
            rep = capacitor_bound(m, K, mu, gy_annuli(m, mu, k, K=K), k)
            ok &= rep.bound >= rep.lambda_k
        bumps = density_measure(m, bump_density(m, k)).normalized()
        system = gy_annuli(m, bumps, k, K=K)
        rep = capacitor_bound(m, K, bumps, system, k)
        ok &= system.v >= bumps.total / (4 * (k + 1)) and rep.bound >= rep.lambda_k
        parts.append(f"k={k} v={system.v:.3f} (>= {1 / (4 * (k + 1)):.3f})")
    return bool(ok), "; ".join(parts)


def criterion_10():
    # mesh refined toward the north pole so the shrinking bump stays resolved
    g = shapes.polar_graded_sphere(5, 3.0)
    K = assemble_stiffness(g)
    fam = DeformationFamily(uniform_area_measure(g).normalized(), -np.log(1 - g.vertices[:, 2] + 1e-6))
    ts = np.linspace(0.0, 45.0, 10)
    reps = concentration_monitor(g, [deform(fam, t) for t in ts], K=K)
    flagged = [r for r in reps if r.flagged]
    worst = max(r.lambda1_mass for r in flagged) / EIGHT_PI if flagged else np.nan
    ok = bool(flagged) and all(r.lambda1_mass <= EIGHT_PI * 1.05 for r in flagged)
    return ok, f"{len(flagged)}/{len(reps)} flagged, max lambda1*mass/8pi = {worst:.4f}"


def criterion_11():
    t0 = time.perf_counter()
    m = shapes.icosphere(3)
    res = maximize_lambda1(m, schedule=DensityCapSchedule((10.0, 100.0), budget=30), seed=0)
    lam = [row["lambda1"] for row in res.trace] + [res.lambda1]
    mono = all(b >= a - 1e-10 for a, b in zip(lam, lam[1:]))
    fractions = [(st["cap"], st["area_fraction"]) for st in res.stages]
    sat_ok = all(f <= 1.1 / c for c, f in fractions)
    ratio = res.lambda1_mass / EIGHT_PI
    dt = time.perf_counter() - t0
    ok = ratio >= 0.98 and mono and res.certificate.residual <= 1e-2 and sat_ok and dt <= 600
    return bool(ok), (f"lambda1*mass/8pi={ratio:.4f} residual={res.certificate.residual:.2e} "
                      f"monotone={mono} saturated fractions={fractions} time={dt:.1f}s")


def criterion_12():
    m = shapes.icosphere(3)
    K = assemble_stiffness(m)
    mu = density_measure(m, random_density(m, 21)).normalized()
    _, E = eigenspace_of(m, mu, 1, K=K)
    fam = DeformationFamily(mu, np.sin(2 * m.vertices[:, 1]))
    gaps = [projection_gap(m, mu, deform(fam, t), 1, K=K) for t in (1e-1, 1e-2, 1e-3, 1e-4)]
    ratios = np.array([g.gap / g.delta for g in gaps])
    spread = ratios.max() / ratios.min()
    ok = E.multiplicity == 1 and not any(g.inconclusive for g in gaps) and spread <= 10
    return bool(ok), "gap/delta " + ", ".join(f"{r:.4g}" for r in ratios) + f"; max/min {spread:.3f}"


CRITERIA = {
    1: ("sphere equality", criterion_1),
    2: ("genus bound over random densities", criterion_2),
    3: ("Steklov disk", criterion_3),
    4: ("two-atom refinement trend", criterion_4),
    5: ("first-variation formula", criterion_5),
    6: ("extremality certificate", criterion_6),
    7: ("isocapacity bracket and capacity oracle", criterion_7),
    8: ("annulus capacity", criterion_8),
    9: ("annulus capacitor bound", criterion_9),
    10: ("concentration ceiling", criterion_10),
    11: ("maximizer end to end", criterion_11),
    12: ("projection perturbation", criterion_12),
}


def run_criterion(n):
    name, fn = CRITERIA[n]
    ok, detail = fn()
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d} ({name}): {detail}"
    print(line)
    ACCEPTANCE[n] = line
    return ok, line


@pytest.mark.slow
@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    ok, line = run_criterion(n)
    assert ok, line


if __name__ == "__main__":
    results = [run_criterion(n)[0] for n in sorted(CRITERIA)]
    sys.exit(0 if all(results) else 1)
