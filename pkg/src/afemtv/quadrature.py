"""Cell quadrature rules in barycentric coordinates.

Two families are used:

* :func:`lattice_rule` -- the equal-weight averaging rule on the Lagrange
  lattice of a given degree.  Image interpolation uses degree
  ``ceil(diam(K))`` so the number of sample points scales with the number
  of pixels a cell covers.
* :func:`midpoint_rule` -- a composite edge-midpoint rule on a uniformly
  subdivided cell.  It is exact for quadratics at every subdivision level
  while still sampling large cells at roughly pixel density; the model
  assembly uses it so that all energy/operator integrals share one
  consistent rule.

Both return points summing against equal weights; physical weights are
``area / npoints``.
"""

import numpy as np

_lattice_cache = {}
_midpoint_cache = {}


def lattice_rule(degree):
    """Barycentric points of the degree-``degree`` Lagrange lattice."""
    degree = int(degree)
    if degree < 1:
        raise ValueError("lattice degree must be >= 1")
    if degree not in _lattice_cache:
        pts = []
        for i in range(degree + 1):
            for j in range(degree + 1 - i):
                k = degree - i - j
                pts.append((i / degree, j / degree, k / degree))
        _lattice_cache[degree] = np.array(pts, dtype=float)
    return _lattice_cache[degree]


def midpoint_rule(level):
    """Composite edge-midpoint rule on a 4^level uniform subdivision.

    Exact for polynomials up to degree 2 on straight triangles.
    """
    level = int(level)
    if level < 0:
        raise ValueError("subdivision level must be >= 0")
    if level not in _midpoint_cache:
        n = 2 ** level
        pts = []
        for j in range(n):
            for i in range(n - j):
                # upward subtriangle with lattice corners
                corners = [(i, j), (i + 1, j), (i, j + 1)]
                pts.extend(_edge_midpoints(corners, n))
                if i + j <= n - 2:
                    corners = [(i + 1, j), (i + 1, j + 1), (i, j + 1)]
                    pts.extend(_edge_midpoints(corners, n))
        _midpoint_cache[level] = np.array(pts, dtype=float)
    return _midpoint_cache[level]


def _edge_midpoints(corners, n):
    out = []
    for a in range(3):
        (i1, j1), (i2, j2) = corners[a], corners[(a + 1) % 3]
        x = (i1 + i2) / (2.0 * n)
        y = (j1 + j2) / (2.0 * n)
        out.append((1.0 - x - y, x, y))
    return out


def lattice_degrees(mesh):
    """Lattice degree per cell: ceil of the cell diameter, at least 1."""
    return np.maximum(1, np.ceil(mesh.cell_diameters)).astype(int)


def midpoint_levels(mesh, target=1.5):
    """Subdivision level per cell so subcells are about ``target`` wide."""
    d = mesh.cell_diameters / float(target)
    return np.maximum(0, np.ceil(np.log2(np.maximum(d, 1.0)))).astype(int)


def group_by_value(values):
    """Group cell indices by an integer label, ascending label order."""
    values = np.asarray(values)
    out = []
    for val in np.unique(values):
        out.append((int(val), np.nonzero(values == val)[0]))
    return out


def physical_points(mesh, cell_ids, bary):
    """Map barycentric rule points to physical coordinates, (nc, nq, 2)."""
    corners = mesh.vertices[mesh.cells[cell_ids]]        # (nc, 3, 2)
    return np.einsum("qk,ckx->cqx", bary, corners)


class CellQuadrature:
    """Per-cell quadrature for a whole mesh, grouped by rule size.

    Iterating yields ``(cell_ids, bary, points, weights)`` per group where
    ``weights`` has shape (ncells_in_group, 1) and equals area/npoints.
    """

    def __init__(self, mesh, kind="midpoint", target=1.5):
        self.mesh = mesh
        self.kind = kind
        if kind == "midpoint":
            labels = midpoint_levels(mesh, target)
            rule = midpoint_rule
        elif kind == "lattice":
            labels = lattice_degrees(mesh)
            rule = lattice_rule
        else:
            raise ValueError("unknown quadrature kind %r" % kind)
        self.labels = labels
        self._groups = []
        for val, ids in group_by_value(labels):
            bary = rule(val)
            self._groups.append((ids, bary))

    def __iter__(self):
        for ids, bary in self._groups:
            pts = physical_points(self.mesh, ids, bary)
            w = (self.mesh.cell_areas[ids] / bary.shape[0])[:, None]
            yield ids, bary, pts, w

    def points_per_cell(self):
        counts = np.empty(self.mesh.num_cells, dtype=int)
        for ids, bary in self._groups:
            counts[ids] = bary.shape[0]
        return counts
