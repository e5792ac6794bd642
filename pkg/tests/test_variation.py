import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from confeig import shapes
from confeig.measure import (DeformationFamily, DiscreteMeasure, deform, density_measure,
                             uniform_area_measure)
from confeig.mesh import assemble_stiffness
from confeig.spectrum import eigenspace_of
from confeig.variation import (certificate_soundness_bound, extremality_certificate,
                               finite_difference_derivatives, form_matrix, l_phi,
                               lower_form_probe, min_norm_direction, one_sided_derivatives,
                               projection_gap, separating_direction, separation_lp)

from conftest import random_density


def zsq(mesh, mu):
    z2 = mesh.vertices[:, 2] ** 2
    return z2 - mu.mean(z2)


def test_l_phi_examples():
    mu = DiscreteMeasure(np.array([0.5, 0.5]))
    assert l_phi([1.0, 0.0], mu, [1.0, -1.0], 1.0) == -1.0
    assert l_phi([1.0, 0.0], mu, [0.0, 0.0], 3.0) == 0.0
    assert l_phi([1.0, 1.0], mu, [2.0, -2.0], 3.0) == 0.0
    with pytest.raises(ValueError):
        l_phi([1.0, 0.0], mu, [1.0, 1.0], 1.0)


def test_zero_direction(sphere2):
    mu = uniform_area_measure(sphere2)
    d = one_sided_derivatives(sphere2, mu, np.zeros(sphere2.n_vertices), 1)
    assert d.left == 0 and d.right == 0


def test_simple_eigenvalue_derivative_is_form(sphere2, stiffness):
    K = stiffness(sphere2)
    mu = density_measure(sphere2, random_density(sphere2, 11)).normalized()
    phi = np.cos(2 * sphere2.vertices[:, 0])
    phi = phi - mu.mean(phi)
    res, E = eigenspace_of(sphere2, mu, 1, K=K)
    assert E.multiplicity == 1
    d = one_sided_derivatives(sphere2, mu, phi, 1, K=K)
    ref = l_phi(E.basis[:, 0], mu, phi, E.eigenvalue)
    assert d.left == pytest.approx(ref, rel=1e-12) and d.right == pytest.approx(ref, rel=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_simple_eigenvalue_matches_central_difference(seed):
    m = shapes.icosphere(2)
    K = assemble_stiffness(m)
    rng = np.random.default_rng(seed)
    mu = density_measure(m, random_density(m, seed)).normalized()
    res, E = eigenspace_of(m, mu, 1, K=K)
    gap = min(res.eigenvalues[2] - res.eigenvalues[1], res.eigenvalues[1])
    assume(E.multiplicity == 1 and gap > 1e-2 * res.eigenvalues[1])
    phi = rng.uniform(-1, 1, m.n_vertices)
    d = one_sided_derivatives(m, mu, phi, 1, K=K)
    fd = finite_difference_derivatives(m, mu, phi, 1, t=1e-4, K=K)
    tol = max(1e-6, 1e-3 * E.eigenvalue)
    assert abs(fd["central"] - d.right) <= tol and abs(fd["central"] - d.left) <= tol


@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_right_never_exceeds_left(seed, k):
    m = shapes.icosphere(2)
    rng = np.random.default_rng(seed)
    mu = density_measure(m, random_density(m, seed, 0.1)).normalized()
    phi = rng.uniform(-1, 1, m.n_vertices)
    K = assemble_stiffness(m)
    _, E = eigenspace_of(m, mu, k, K=K, cluster_tol=1e-2)
    d = one_sided_derivatives(m, mu, phi, k, K=K, cluster_tol=1e-2)
    j = k - E.indices[0]
    # inf <= sup over the eigenspace; the ordering flips in the upper half of a cluster
    if 2 * j <= E.multiplicity - 1:
        assert d.right <= d.left + 1e-12
    else:
        assert d.right >= d.left - 1e-12


def test_sphere_multiple_eigenvalue_brackets_secants(sphere3, stiffness):
    K = stiffness(sphere3)
    mu = uniform_area_measure(sphere3).normalized()
    phi = zsq(sphere3, mu)
    d = one_sided_derivatives(sphere3, mu, phi, 1, K=K)
    assert d.multiplicity == 3 and d.left > 0 > d.right
    fd = finite_difference_derivatives(sphere3, mu, phi, 1, K=K)
    tol = 1e-3 * d.eigenvalue
    assert abs(fd["forward"] - d.right) <= tol and abs(fd["backward"] - d.left) <= tol
    assert d.right <= fd["central"] <= d.left


def test_z_coordinate_gives_zero_form_by_symmetry(sphere3):
    mu = uniform_area_measure(sphere3).normalized()
    _, E = eigenspace_of(sphere3, mu, 1)
    G = form_matrix(E.basis, mu, sphere3.vertices[:, 2])
    assert np.abs(G).max() < 1e-10


def test_projection_gap_identity_and_small_t(sphere3, stiffness):
    K = stiffness(sphere3)
    mu = density_measure(sphere3, random_density(sphere3, 21)).normalized()
    assert projection_gap(sphere3, mu, mu, 1, K=K).gap < 1e-10
    fam = DeformationFamily(mu, np.sin(2 * sphere3.vertices[:, 1]))
    gaps = [projection_gap(sphere3, mu, deform(fam, t), 1, K=K) for t in (1e-1, 1e-2, 1e-3)]
    assert not any(g.inconclusive for g in gaps)
    ratios = np.array([g.gap / g.delta for g in gaps])
    assert gaps[0].gap > gaps[1].gap > gaps[2].gap
    assert ratios.max() / ratios.min() <= 10


def test_projection_gap_swapped_modes():
    sq = shapes.square(24)
    x, y = sq.vertices[:, 0], sq.vertices[:, 1]
    a = density_measure(sq, 1 + 0.5 * np.cos(2 * np.pi * x)).normalized()
    b = density_measure(sq, 1 + 0.5 * np.cos(2 * np.pi * y)).normalized()
    g = projection_gap(sq, a, b, 1)
    assert g.gap > 0.9 and not g.inconclusive


def test_certificate_sphere_and_torus(sphere4, torus16):
    cert = extremality_certificate(sphere4, uniform_area_measure(sphere4), 1)
    assert cert.verdict == "extremal" and cert.residual <= 1e-2 and cert.dimension == 3
    np.testing.assert_allclose(cert.coefficients, 1.0, atol=0.02)
    cert = extremality_certificate(torus16, uniform_area_measure(torus16), 1)
    assert cert.verdict == "extremal" and cert.dimension == 4
    np.testing.assert_allclose(cert.coefficients, cert.coefficients[0], rtol=1e-6)


def test_certificate_residual_converges():
    r = [extremality_certificate(m, uniform_area_measure(m), 1).residual
         for m in (shapes.icosphere(2), shapes.icosphere(3), shapes.icosphere(4))]
    assert r[0] > r[1] > r[2]


def test_perturbed_measure_is_not_extremal(sphere3, stiffness):
    K = stiffness(sphere3)
    mu = density_measure(sphere3, random_density(sphere3, 2, 0.1))
    cert = extremality_certificate(sphere3, mu, 1, K=K)
    assert cert.verdict == "non-extremal" and cert.residual > 0.05 and cert.margin > 0
    phi = separating_direction(sphere3, mu, 1, K=K)
    assert abs(mu.integrate(phi)) <= 1e-12
    assert one_sided_derivatives(sphere3, mu, phi, 1, K=K).right > 0
    phi2 = separating_direction(sphere3, mu, 1, K=K, method="min-norm")
    assert one_sided_derivatives(sphere3, mu, phi2, 1, K=K).right > 0


def test_extremal_measure_has_no_separating_direction(sphere3):
    assert separating_direction(sphere3, uniform_area_measure(sphere3), 1) is None


def test_extremal_dichotomy_over_random_battery(sphere3, stiffness):
    K = stiffness(sphere3)
    mu = uniform_area_measure(sphere3).normalized()
    cert = extremality_certificate(sphere3, mu, 1, K=K)
    rng = np.random.default_rng(0)
    for _ in range(20):
        phi = rng.uniform(-1, 1, sphere3.n_vertices)
        phi -= mu.mean(phi)
        d = one_sided_derivatives(sphere3, mu, phi, 1, K=K)
        slack = d.eigenvalue * certificate_soundness_bound(cert, phi)
        assert d.right <= slack and d.left >= -slack


@pytest.mark.parametrize("seed, sigma", [(0, 0.0), (1, 0.05), (2, 0.3)])
def test_certificate_soundness(sphere3, stiffness, seed, sigma):
    K = stiffness(sphere3)
    mu = density_measure(sphere3, random_density(sphere3, seed, sigma)).normalized()
    _, E = eigenspace_of(sphere3, mu, 1, K=K, cluster_tol=0.05)
    cert = extremality_certificate(sphere3, mu, 1, K=K, eigenpair=E)
    rng = np.random.default_rng(seed)
    for _ in range(30):
        phi = rng.uniform(-1, 1, sphere3.n_vertices)
        phi -= mu.mean(phi)
        g = np.linalg.eigvalsh(form_matrix(E.basis, mu, phi))
        b = certificate_soundness_bound(cert, phi)
        assert not (g.min() > b or g.max() < -b)


def test_separation_margin_agrees_between_solvers(sphere3, stiffness):
    K = stiffness(sphere3)
    mu = density_measure(sphere3, random_density(sphere3, 4, 0.1)).normalized()
    _, E = eigenspace_of(sphere3, mu, 1, K=K, cluster_tol=0.05)
    lp = separation_lp(mu, E)
    mn, _ = min_norm_direction(mu, E)
    assert lp.ok and lp.margin > 0 and mn.margin > 0
    for sep in (lp, mn):
        g = np.linalg.eigvalsh(form_matrix(E.basis, mu, sep.phi - mu.mean(sep.phi)))
        assert g.max() < 0


def test_lower_form_probe_converges(sphere3, stiffness):
    mu = uniform_area_measure(sphere3)
    out = lower_form_probe(sphere3, mu, zsq(sphere3, mu.normalized()), 1,
                           [1e-1, 1e-2, 1e-3], K=stiffness(sphere3))
    assert out["converging"]


@pytest.mark.parametrize("k", [2, 3])
def test_derivatives_inside_a_cluster_match_secants(sphere3, stiffness, k):
    K = stiffness(sphere3)
    mu = uniform_area_measure(sphere3).normalized()
    phi = zsq(sphere3, mu) + 0.3 * sphere3.vertices[:, 0] ** 2
    phi -= mu.mean(phi)
    d = one_sided_derivatives(sphere3, mu, phi, k, K=K)
    fd = finite_difference_derivatives(sphere3, mu, phi, k, K=K)
    tol = 1e-3 * d.eigenvalue
    assert abs(fd["forward"] - d.right) <= tol and abs(fd["backward"] - d.left) <= tol
