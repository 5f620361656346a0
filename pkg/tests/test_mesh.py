import numpy as np
import pytest

from afemtv.mesh import (MeshError, bisect, build_grid_mesh,
                         build_image_mesh, enumerate_facets, save_off,
                         save_vtk, uniform_refine)
from conftest import make_triangle, make_square_pair


def brute_force_conformity(mesh):
    """Independent facet/vertex incidence audit.

    Rebuilds edge incidence from scratch and checks that every edge is
    shared by one or two cells whose vertex sets contain both endpoints.
    """
    incident = {}
    for k, (a, b, c) in enumerate(mesh.cells):
        for e in ((a, b), (b, c), (c, a)):
            key = tuple(sorted(map(int, e)))
            incident.setdefault(key, []).append(k)
    for (a, b), cells in incident.items():
        assert 1 <= len(cells) <= 2
        for k in cells:
            assert {a, b} <= set(int(v) for v in mesh.cells[k])
    # no vertex may sit in the interior of another cell's edge
    for (a, b), cells in incident.items():
        midpoint = 0.5 * (mesh.vertices[a] + mesh.vertices[b])
        dists = np.linalg.norm(mesh.vertices - midpoint, axis=1)
        hits = np.nonzero(dists < 1e-12)[0]
        assert len(hits) == 0, "hanging vertex on edge (%d, %d)" % (a, b)
    return incident


def test_build_2x2():
    mesh = build_image_mesh(2, 2)
    assert mesh.num_vertices == 4
    assert mesh.num_cells == 2
    assert np.all(mesh.signed_areas() > 0)


def test_build_3x3():
    mesh = build_image_mesh(3, 3)
    assert mesh.num_vertices == 9
    assert mesh.num_cells == 8
    xs = mesh.vertices[:, 0]
    assert xs.min() == 1.0 and xs.max() == 3.0


def test_build_coarse_grid_counts_584x388():
    # 584 x 388 image at scale 1/2^(5/2), vertex counts rounded down
    scale = 2.0 ** 2.5
    nx, ny = int(584 / scale), int(388 / scale)
    assert (nx, ny) == (103, 68)
    mesh = build_grid_mesh(nx, ny, (1.0, 584.0), (1.0, 388.0))
    assert mesh.num_vertices == nx * ny
    assert mesh.num_cells == 2 * (nx - 1) * (ny - 1)


def test_build_rejects_degenerate():
    with pytest.raises(MeshError):
        build_image_mesh(1, 5)


def test_bisect_single_triangle():
    mesh = make_triangle()
    fine = bisect(mesh, [0])
    assert fine.num_cells == 2
    assert fine.num_vertices == 4
    assert np.all(fine.signed_areas() > 0)
    brute_force_conformity(fine)


def test_bisect_empty_marked_returns_equal_mesh():
    mesh = build_image_mesh(3, 3)
    same = bisect(mesh, [])
    assert np.array_equal(same.vertices, mesh.vertices)
    assert np.array_equal(same.cells, mesh.cells)


def test_bisect_out_of_range_raises():
    mesh = build_image_mesh(3, 3)
    with pytest.raises(MeshError):
        bisect(mesh, [99])


def test_bisect_interior_cell_conforming():
    mesh = build_image_mesh(3, 3)
    fine = bisect(mesh, [3])
    brute_force_conformity(fine)
    assert np.all(fine.signed_areas() > 0)
    # the marked cell is gone; ancestry points into the old mesh
    assert np.all(fine.cell_ancestor < mesh.num_cells)
    assert 3 not in set(
        fine.cell_ancestor[fine.generation == 0].tolist())


def test_bisect_random_sequences_stay_conforming(rng):
    mesh = build_image_mesh(4, 3)
    for _ in range(5):
        marked = rng.choice(mesh.num_cells,
                            size=max(1, mesh.num_cells // 3),
                            replace=False)
        mesh = bisect(mesh, marked)
        brute_force_conformity(mesh)
        assert np.all(mesh.signed_areas() > 0)


def test_nesting_in_ancestor(rng):
    mesh = build_image_mesh(4, 4)
    fine = bisect(mesh, rng.choice(mesh.num_cells, size=6, replace=False))
    fine2 = bisect(fine, rng.choice(fine.num_cells, size=8, replace=False))
    for name, coarse, refined in (("1", mesh, fine), ("2", fine, fine2)):
        for k in range(refined.num_cells):
            anc = refined.cell_ancestor[k]
            pts = np.vstack([refined.vertices[refined.cells[k]],
                             refined.barycenters()[k][None, :]])
            lam = coarse.barycentric_coordinates(
                np.full(len(pts), anc), pts)
            assert lam.min() >= -1e-12, "cell not nested in ancestor"


def test_shape_regularity_under_uniform_bisection():
    mesh = build_grid_mesh(4, 3, (1.0, 7.0), (1.0, 4.0))
    initial_angle = mesh.min_angle()
    refined = mesh
    for _ in range(10):
        refined = uniform_refine(refined)
    assert refined.min_angle() >= initial_angle / 2.0 - 1e-12


def test_uniform_refine_halves_cells():
    mesh = build_image_mesh(3, 3)
    fine = uniform_refine(mesh)
    assert fine.num_cells == 2 * mesh.num_cells
    brute_force_conformity(fine)


def test_facets_single_triangle():
    facets = enumerate_facets(make_triangle())
    assert len(facets) == 3
    assert not facets.is_interior.any()


def test_facets_square_pair():
    facets = enumerate_facets(make_square_pair())
    assert len(facets) == 5
    assert int(facets.is_interior.sum()) == 1


def test_facets_unit_normals_and_orientation():
    mesh = build_image_mesh(3, 3)
    facets = mesh.facets
    assert np.allclose(np.linalg.norm(facets.normals, axis=1), 1.0,
                       atol=1e-14)
    assert np.all(facets.vertices[:, 0] < facets.vertices[:, 1])
    # edge i of each cell is opposite local vertex i
    for k in range(mesh.num_cells):
        for i in range(3):
            f = facets.cell_facets[k, i]
            edge = set(facets.vertices[f].tolist())
            cell = mesh.cells[k]
            assert edge == {cell[(i + 1) % 3], cell[(i + 2) % 3]}


def test_euler_relation_after_refinement(rng):
    mesh = build_image_mesh(3, 3)
    for _ in range(3):
        mesh = bisect(mesh, rng.choice(mesh.num_cells, size=4,
                                       replace=False))
    nf = len(enumerate_facets(mesh))
    assert mesh.num_vertices - nf + mesh.num_cells == 1


def test_exports_are_deterministic(tmp_path):
    mesh = bisect(build_image_mesh(3, 3), [0, 5])
    off1 = tmp_path / "a.off"
    off2 = tmp_path / "b.off"
    save_off(mesh, off1)
    save_off(mesh, off2)
    assert off1.read_bytes() == off2.read_bytes()
    data = np.arange(mesh.num_cells, dtype=float)
    vtk1 = tmp_path / "a.vtk"
    save_vtk(mesh, vtk1, cell_data=data)
    text = vtk1.read_text()
    assert "UNSTRUCTURED_GRID" in text
    assert "CELL_DATA %d" % mesh.num_cells in text
    assert "POINTS %d double" % mesh.num_vertices in text


def test_off_contents(tmp_path):
    mesh = make_triangle()
    path = tmp_path / "tri.off"
    save_off(mesh, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "OFF"
    assert lines[1].split() == ["3", "1", "0"]
    assert lines[-1] == "3 0 1 2"


def test_generation_tracking():
    mesh = build_image_mesh(2, 2)
    fine = uniform_refine(uniform_refine(mesh))
    assert fine.generation.max() == 2
    assert np.all(fine.generation >= 1)
