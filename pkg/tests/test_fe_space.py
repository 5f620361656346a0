import numpy as np
import pytest

from afemtv.fe_space import (DgScalar, FeScalar, FeVector, bilinear_sample,
                             evaluate, gradient, interpolate_image,
                             pixel_assignment, prolongate, resample_to_image,
                             sample_vector_at_pixels)
from afemtv.mesh import bisect, build_grid_mesh, build_image_mesh
from afemtv.quadrature import (CellQuadrature, lattice_degrees, lattice_rule,
                               midpoint_rule)
from conftest import make_triangle, smooth_image

METHODS = ("nodal", "l2_lagrange", "qi_lagrange", "l2_pixel")


# -- quadrature rules ------------------------------------------------------

def test_lattice_rule_counts_and_weights():
    for deg in (1, 2, 3, 7):
        bary = lattice_rule(deg)
        assert bary.shape == ((deg + 1) * (deg + 2) // 2, 3)
        assert np.allclose(bary.sum(axis=1), 1.0)


def test_lattice_degree_tracks_cell_diameter():
    mesh = build_grid_mesh(3, 3, (1.0, 13.0), (1.0, 13.0))
    degs = lattice_degrees(mesh)
    assert np.all(degs == np.ceil(mesh.cell_diameters).astype(int))
    cq = CellQuadrature(mesh, kind="lattice")
    counts = cq.points_per_cell()
    assert np.all(counts == (degs + 1) * (degs + 2) // 2)


def test_lattice_quadrature_weights_sum_to_area():
    mesh = build_grid_mesh(3, 4, (1.0, 9.0), (1.0, 7.0))
    cq = CellQuadrature(mesh, kind="lattice")
    total = sum(float((w * np.ones((1, bary.shape[0]))).sum())
                for _ids, bary, _pts, w in cq)
    assert total == pytest.approx(float(mesh.cell_areas.sum()), rel=1e-13)


def test_midpoint_rule_exact_for_quadratics():
    # integrate x^2 y^0, x y, y^2 ... on the reference triangle
    exact = {(2, 0): 1 / 12, (1, 1): 1 / 24, (0, 2): 1 / 12,
             (1, 0): 1 / 6, (0, 0): 1 / 2}
    for level in (0, 1, 3):
        bary = midpoint_rule(level)
        x, y = bary[:, 1], bary[:, 2]
        for (a, b), val in exact.items():
            approx = 0.5 * np.mean(x ** a * y ** b)
            assert approx == pytest.approx(val, abs=1e-14)


# -- evaluation, gradient, prolongation -------------------------------------

def test_eval_constant_and_linear():
    mesh = build_image_mesh(4, 4)
    const = FeScalar(mesh, np.full(mesh.num_vertices, 0.3))
    assert evaluate(const, (2.2, 3.1)) == pytest.approx(0.3, abs=1e-14)
    fx = FeScalar(mesh, mesh.vertices[:, 0])
    assert evaluate(fx, (1.5, 2.0)) == pytest.approx(1.5, abs=1e-13)


def test_eval_barycenter_is_nodal_mean(rng):
    mesh = build_image_mesh(4, 4)
    f = FeScalar(mesh, rng.random(mesh.num_vertices))
    k = 5
    bc = mesh.barycenters()[k]
    expected = f.values[mesh.cells[k]].mean()
    assert evaluate(f, bc) == pytest.approx(expected, abs=1e-13)


def test_eval_outside_domain_raises():
    mesh = build_image_mesh(3, 3)
    f = FeScalar(mesh, np.zeros(9))
    with pytest.raises(ValueError):
        evaluate(f, (10.0, 10.0))


def test_gradient_constant_and_linear():
    mesh = build_image_mesh(4, 4)
    const = FeScalar(mesh, np.full(mesh.num_vertices, 2.0))
    assert np.abs(gradient(const).values).max() < 1e-14
    fx = FeScalar(mesh, mesh.vertices[:, 0])
    gx = gradient(fx).values
    assert np.allclose(gx[:, 0, 0], 1.0, atol=1e-13)
    assert np.allclose(gx[:, 1, 0], 0.0, atol=1e-13)


def test_gradient_matches_finite_differences(rng):
    mesh = make_triangle(((0.2, 0.1), (1.7, 0.4), (0.6, 1.9)))
    f = FeScalar(mesh, rng.random(3))
    grad = gradient(f).values[0, :, 0]
    x0 = np.array([0.7, 0.7])
    h = 1e-6
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        fd = (evaluate(f, x0 + e) - evaluate(f, x0 - e)) / (2 * h)
        assert grad[d] == pytest.approx(fd, abs=1e-8)


def test_prolongate_preserves_p1_functions(rng):
    mesh = build_image_mesh(4, 4)
    f = FeScalar(mesh, rng.random(mesh.num_vertices))
    fine = bisect(mesh, rng.choice(mesh.num_cells, size=6, replace=False))
    ff = prolongate(f, fine)
    pts = rng.uniform(1.0, 4.0, size=(100, 2))
    assert np.allclose(evaluate(f, pts), evaluate(ff, pts), atol=1e-12)


def test_prolongate_constant_and_linear(rng):
    mesh = build_image_mesh(3, 3)
    fine = bisect(mesh, [0, 1, 2])
    fc = prolongate(FeScalar(mesh, np.full(9, 0.7)), fine)
    assert np.allclose(fc.values, 0.7, atol=1e-14)
    lin = FeScalar(mesh, 2 * mesh.vertices[:, 0] - mesh.vertices[:, 1])
    lf = prolongate(lin, fine)
    assert np.allclose(lf.values,
                       2 * fine.vertices[:, 0] - fine.vertices[:, 1],
                       atol=1e-12)


def test_prolongate_mesh_mismatch_raises():
    mesh = build_image_mesh(3, 3)
    other = build_image_mesh(4, 4)
    fine = bisect(other, [0])
    with pytest.raises(ValueError):
        prolongate(FeScalar(mesh, np.zeros(9)), fine)


def test_prolongate_dg_restricts_exactly(rng):
    mesh = build_image_mesh(3, 3)
    dg = DgScalar(mesh, rng.random((mesh.num_cells, 3)))
    fine = bisect(mesh, [0, 3, 4])
    dgf = prolongate(dg, fine)
    # sample each fine cell at its barycenter through the ancestor's
    # linear polynomial
    for k in range(fine.num_cells):
        anc = fine.cell_ancestor[k]
        bc = fine.barycenters()[k]
        lam = mesh.barycentric_coordinates(np.array([anc]), bc[None, :])[0]
        expected = float(lam @ dg.values[anc])
        got = float(dgf.values[k].mean())
        assert got == pytest.approx(expected, abs=1e-12)


# -- image interpolation -----------------------------------------------------

def test_bilinear_sample_constant_extension():
    img = np.array([[0.2, 0.4], [0.6, 0.8]])
    assert bilinear_sample(img, np.array([0.0, 0.0])) == \
        pytest.approx(0.2, abs=1e-15)
    assert bilinear_sample(img, np.array([5.0, 5.0])) == \
        pytest.approx(0.8, abs=1e-15)
    assert bilinear_sample(img, np.array([1.5, 1.0])) == \
        pytest.approx(0.4, abs=1e-15)


def test_nodal_aligned_reproduces_image():
    img = smooth_image(16)
    mesh = build_image_mesh(16, 16)
    back = resample_to_image(interpolate_image(img, mesh, "nodal"), 16, 16)
    assert np.mean((back - img) ** 2) < 1e-20


def test_constant_image_all_methods():
    img = np.full((12, 12), 0.37)
    mesh = build_grid_mesh(5, 5, (1.0, 12.0), (1.0, 12.0))
    for method in METHODS:
        gh = interpolate_image(img, mesh, method)
        assert np.allclose(gh.values, 0.37, atol=1e-10), method


def test_affine_image_all_methods_exact():
    n = 16
    X, Y = np.meshgrid(np.arange(1, n + 1), np.arange(1, n + 1),
                       indexing="ij")
    img = 0.1 + 0.02 * X + 0.013 * Y
    for nx in (7, 5):
        mesh = build_grid_mesh(nx, nx, (1.0, float(n)), (1.0, float(n)))
        for method in METHODS:
            gh = interpolate_image(img, mesh, method)
            back = resample_to_image(gh, n, n)
            assert np.abs(back - img).max() < 1e-10, method


def test_l2_pixel_minimizes_pixel_error():
    img = smooth_image(24, seed=3)
    mesh = build_grid_mesh(9, 9, (1.0, 24.0), (1.0, 24.0))
    sse = {}
    for method in METHODS:
        back = resample_to_image(interpolate_image(img, mesh, method),
                                 24, 24)
        sse[method] = float(np.sum((back - img) ** 2))
    for method in METHODS:
        assert sse["l2_pixel"] <= sse[method] + 1e-12


def test_l2_lagrange_is_discrete_orthogonal_projection():
    """<g - g_h, phi_i> = 0 under the module's lattice quadrature,
    re-evaluated here with an independent dense loop."""
    img = smooth_image(16, seed=5)
    mesh = build_grid_mesh(6, 6, (1.0, 16.0), (1.0, 16.0))
    gh = interpolate_image(img, mesh, "l2_lagrange")
    residual = np.zeros(mesh.num_vertices)
    for k in range(mesh.num_cells):
        deg = int(np.ceil(mesh.cell_diameters[k]))
        pts = []
        for i in range(deg + 1):
            for j in range(deg + 1 - i):
                pts.append((i / deg, j / deg, (deg - i - j) / deg))
        corners = mesh.vertices[mesh.cells[k]]
        w = mesh.cell_areas[k] / len(pts)
        for lam in pts:
            x = lam[0] * corners[0] + lam[1] * corners[1] \
                + lam[2] * corners[2]
            gval = bilinear_sample(img, x)
            ghval = float(np.dot(lam, gh.values[mesh.cells[k]]))
            for loc in range(3):
                residual[mesh.cells[k][loc]] += \
                    w * (gval - ghval) * lam[loc]
    assert np.abs(residual).max() < 1e-8


def test_l2_pixel_regularized_when_mesh_finer_than_image():
    img = smooth_image(6, seed=7)
    mesh = build_image_mesh(6, 6)
    fine = bisect(mesh, np.arange(mesh.num_cells))
    fine = bisect(fine, np.arange(fine.num_cells))
    gh = interpolate_image(img, fine, "l2_pixel")
    assert np.all(np.isfinite(gh.values))
    back = resample_to_image(gh, 6, 6)
    assert np.abs(back - img).max() < 1e-6


def test_resample_constant_and_roundtrip():
    mesh = build_image_mesh(8, 8)
    const = FeScalar(mesh, np.full(mesh.num_vertices, 0.5))
    out = resample_to_image(const, 8, 8)
    assert np.allclose(out, 0.5, atol=1e-14)
    img = smooth_image(8, seed=2)
    gh = interpolate_image(img, mesh, "nodal")
    assert np.array_equal(resample_to_image(gh, 8, 8), img)


def test_resample_halfres_psnr_finite():
    img = smooth_image(16, seed=9)
    mesh = build_grid_mesh(8, 8, (1.0, 16.0), (1.0, 16.0))
    back = resample_to_image(interpolate_image(img, mesh, "l2_lagrange"),
                             16, 16)
    mse = np.mean((back - img) ** 2)
    assert 0 < mse < 1.0


def test_resample_clamps_only_on_request():
    mesh = build_image_mesh(4, 4)
    f = FeScalar(mesh, np.linspace(-0.5, 1.5, mesh.num_vertices))
    raw = resample_to_image(f, 4, 4)
    assert raw.min() < 0.0 and raw.max() > 1.0
    clamped = resample_to_image(f, 4, 4, clamp=True)
    assert clamped.min() >= 0.0 and clamped.max() <= 1.0


def test_pixel_assignment_covers_grid_once():
    mesh = build_grid_mesh(5, 4, (1.0, 10.0), (1.0, 8.0))
    pix, cells, lam = pixel_assignment(mesh, 10, 8)
    assert len(pix) == 80
    assert len(np.unique(pix)) == 80
    assert lam.min() >= -1e-9


def test_sample_vector_at_pixels(rng):
    mesh = build_image_mesh(6, 6)
    f = FeVector(mesh, np.stack([mesh.vertices[:, 0],
                                 2 * mesh.vertices[:, 1]], axis=1))
    out = sample_vector_at_pixels(f, 6, 6)
    X, Y = np.meshgrid(np.arange(1, 7), np.arange(1, 7), indexing="ij")
    assert np.allclose(out[..., 0], X, atol=1e-12)
    assert np.allclose(out[..., 1], 2 * Y, atol=1e-12)
