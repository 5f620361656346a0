"""Conforming 2-D triangulations with newest-vertex bisection.

Meshes are immutable after construction: :func:`bisect` returns a new mesh
and records ancestry so nodal/cellwise data can be transferred exactly.
Vertices live in pixel units; image-aligned meshes put nodes at the integer
pixel-center coordinates of ``[1, n1] x [1, n2]``.

Conventions
-----------
* Cells are vertex triples with positive signed area.
* ``refedge[k]`` is the local index of the vertex *opposite* the refinement
  edge of cell ``k``, i.e. the edge connecting local vertices
  ``(refedge+1) % 3`` and ``(refedge+2) % 3``.  After a bisection the
  midpoint is the newest vertex of both children and their refinement edge
  is the one opposite it.
* Facets are oriented by ascending endpoint index; the unit normal is the
  tangent rotated by -90 degrees, which makes jump terms reproducible.
"""

import numpy as np

COORD_TOL = 1e-10  # absolute tolerance for coordinate comparisons, pixels


class MeshError(Exception):
    """Raised for invalid mesh input or non-terminating refinement closure."""


class FacetData:
    """Oriented facet (edge) table of a triangulation.

    Attributes
    ----------
    vertices : (nf, 2) int array
        Endpoint vertex indices, ascending per facet.
    cells : (nf, 2) int array
        Adjacent cell indices, ascending; second entry is -1 on the boundary.
    normals : (nf, 2) float array
        Unit normals, tangent rotated by -90 degrees.
    lengths : (nf,) float array
        Facet diameters h_F.
    cell_facets : (nc, 3) int array
        Facet id opposite each local vertex of each cell.
    """

    def __init__(self, vertices, cells, normals, lengths, cell_facets):
        self.vertices = vertices
        self.cells = cells
        self.normals = normals
        self.lengths = lengths
        self.cell_facets = cell_facets

    def __len__(self):
        return self.vertices.shape[0]

    @property
    def is_interior(self):
        return self.cells[:, 1] >= 0


class Mesh:
    """Conforming simplicial triangulation of a planar domain.

    Parameters
    ----------
    vertices : (nv, 2) array_like
        Vertex coordinates in pixel units.
    cells : (nc, 3) array_like
        Vertex index triples, positively oriented.
    refedge : (nc,) array_like, optional
        Refinement-edge markers in {0, 1, 2}.  Defaults to the longest edge
        of each cell, which keeps newest-vertex closure terminating on the
        image-aligned grids built here.
    generation : (nc,) array_like, optional
        Bisection depth per cell, 0 for initial cells.
    """

    def __init__(self, vertices, cells, refedge=None, generation=None,
                 cell_ancestor=None, new_vertex_edges=None,
                 parent_vertex_count=None, check=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must be an (nv, 2) array")
        if self.cells.ndim != 2 or self.cells.shape[1] != 3:
            raise MeshError("cells must be an (nc, 3) array")
        if refedge is None:
            refedge = self._longest_edge_markers()
        self.refedge = np.ascontiguousarray(refedge, dtype=np.int64)
        if generation is None:
            generation = np.zeros(self.num_cells, dtype=np.int64)
        self.generation = np.ascontiguousarray(generation, dtype=np.int64)
        # Ancestry filled in by bisect(); None on directly built meshes.
        self.cell_ancestor = cell_ancestor
        self.new_vertex_edges = new_vertex_edges
        self.parent_vertex_count = parent_vertex_count
        self._cache = {}
        if check:
            self._validate()

    # -- basic queries ----------------------------------------------------

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_cells(self):
        return self.cells.shape[0]

    def __repr__(self):
        return "Mesh(%d vertices, %d cells)" % (self.num_vertices,
                                                self.num_cells)

    def _longest_edge_markers(self):
        p = self.vertices[self.cells]                      # (nc, 3, 2)
        e = p[:, [2, 0, 1], :] - p[:, [1, 2, 0], :]        # edge opposite i
        lengths = np.linalg.norm(e, axis=2)
        return np.argmax(lengths, axis=1).astype(np.int64)

    def _validate(self):
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex coordinates")
        if self.num_cells and (self.cells.min() < 0
                               or self.cells.max() >= self.num_vertices):
            raise MeshError("cell vertex index out of range")
        c = self.cells
        if np.any((c[:, 0] == c[:, 1]) | (c[:, 1] == c[:, 2])
                  | (c[:, 0] == c[:, 2])):
            raise MeshError("degenerate cell with repeated vertices")
        if np.any(self.signed_areas() <= 0.0):
            raise MeshError("cell with non-positive signed area")
        if np.any((self.refedge < 0) | (self.refedge > 2)):
            raise MeshError("refinement-edge marker outside {0,1,2}")

    def signed_areas(self):
        p = self.vertices[self.cells]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def cell_areas(self):
        if "areas" not in self._cache:
            self._cache["areas"] = self.signed_areas()
        return self._cache["areas"]

    @property
    def cell_diameters(self):
        if "diams" not in self._cache:
            p = self.vertices[self.cells]
            e = p[:, [2, 0, 1], :] - p[:, [1, 2, 0], :]
            self._cache["diams"] = np.linalg.norm(e, axis=2).max(axis=1)
        return self._cache["diams"]

    @property
    def basis_gradients(self):
        """Gradients of the barycentric (P1) basis, shape (nc, 3, 2)."""
        if "grads" not in self._cache:
            p = self.vertices[self.cells]
            e = p[:, [1, 2, 0], :] - p[:, [2, 0, 1], :]    # p_{i+1} - p_{i+2}
            rot = np.empty_like(e)
            rot[..., 0] = e[..., 1]
            rot[..., 1] = -e[..., 0]
            self._cache["grads"] = rot / (2.0 * self.cell_areas)[:, None, None]
        return self._cache["grads"]

    @property
    def facets(self):
        if "facets" not in self._cache:
            self._cache["facets"] = enumerate_facets(self)
        return self._cache["facets"]

    def barycenters(self):
        return self.vertices[self.cells].mean(axis=1)

    def min_angle(self):
        """Smallest interior angle over all cells, radians."""
        p = self.vertices[self.cells]
        angles = []
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            cosang = (a * b).sum(axis=1) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            angles.append(np.arccos(np.clip(cosang, -1.0, 1.0)))
        return float(np.min(angles))

    def barycentric_coordinates(self, cell_ids, points):
        """Barycentric coordinates of ``points`` w.r.t. the given cells."""
        p = self.vertices[self.cells[cell_ids]]
        v0 = p[:, 1] - p[:, 0]
        v1 = p[:, 2] - p[:, 0]
        r = points - p[:, 0]
        det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
        l1 = (r[:, 0] * v1[:, 1] - r[:, 1] * v1[:, 0]) / det
        l2 = (v0[:, 0] * r[:, 1] - v0[:, 1] * r[:, 0]) / det
        return np.stack([1.0 - l1 - l2, l1, l2], axis=1)


def build_grid_mesh(nx, ny, xrange=None, yrange=None):
    """Uniform criss-cross triangulation with ``nx * ny`` grid vertices.

    Each grid square is split into two triangles along a diagonal whose
    direction alternates checkerboard-fashion; the diagonal is the longest
    edge and becomes the refinement edge, a labelling compatible with
    newest-vertex bisection.

    Parameters
    ----------
    nx, ny : int
        Vertex counts per dimension, at least 2.
    xrange, yrange : (float, float), optional
        Coordinate spans; default ``(1, nx)`` and ``(1, ny)`` which yields
        integer (pixel-center) coordinates.
    """
    if nx < 2 or ny < 2:
        raise MeshError("grid mesh needs at least 2 vertices per dimension")
    if xrange is None:
        xrange = (1.0, float(nx))
    if yrange is None:
        yrange = (1.0, float(ny))
    xs = np.linspace(xrange[0], xrange[1], nx)
    ys = np.linspace(yrange[0], yrange[1], ny)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.stack([X.ravel(order="F"), Y.ravel(order="F")], axis=1)

    def vid(i, j):
        return j * nx + i

    cells = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = vid(i, j)
            b = vid(i + 1, j)
            c = vid(i + 1, j + 1)
            d = vid(i, j + 1)
            if (i + j) % 2 == 0:
                cells.append((a, b, c))
                cells.append((a, c, d))
            else:
                cells.append((a, b, d))
                cells.append((b, c, d))
    return Mesh(vertices, np.array(cells, dtype=np.int64))


def build_image_mesh(n1, n2):
    """Image-aligned mesh with nodes at all integer points of [1,n1]x[1,n2]."""
    if n1 < 2 or n2 < 2:
        raise MeshError("image mesh needs image dimensions >= 2")
    return build_grid_mesh(int(n1), int(n2))


def enumerate_facets(mesh):
    """Enumerate every geometric edge once, with fixed orientation.

    Facets are sorted lexicographically by their ascending endpoint pair so
    repeated enumeration is deterministic.
    """
    edge_map = {}
    for k in range(mesh.num_cells):
        v = mesh.cells[k]
        for i in range(3):
            a, b = v[(i + 1) % 3], v[(i + 2) % 3]
            key = (a, b) if a < b else (b, a)
            edge_map.setdefault(key, []).append(k)
    keys = sorted(edge_map.keys())
    nf = len(keys)
    fverts = np.array(keys, dtype=np.int64).reshape(nf, 2)
    fcells = np.full((nf, 2), -1, dtype=np.int64)
    for f, key in enumerate(keys):
        adj = sorted(edge_map[key])
        if len(adj) > 2:
            raise MeshError("edge shared by more than two cells")
        fcells[f, :len(adj)] = adj
    tang = mesh.vertices[fverts[:, 1]] - mesh.vertices[fverts[:, 0]]
    lengths = np.linalg.norm(tang, axis=1)
    normals = np.stack([tang[:, 1], -tang[:, 0]], axis=1) / lengths[:, None]
    findex = {key: f for f, key in enumerate(keys)}
    cell_facets = np.empty((mesh.num_cells, 3), dtype=np.int64)
    for k in range(mesh.num_cells):
        v = mesh.cells[k]
        for i in range(3):
            a, b = v[(i + 1) % 3], v[(i + 2) % 3]
            cell_facets[k, i] = findex[(a, b) if a < b else (b, a)]
    return FacetData(fverts, fcells, normals, lengths, cell_facets)


def bisect(mesh, marked):
    """Bisect the marked cells by newest-vertex bisection.

    Recursive compatibility closure keeps the mesh conforming: a cell is
    only split together with its refinement-edge neighbour, which is split
    through its own refinement edge first if the two disagree.

    Returns a new mesh whose ``cell_ancestor`` maps each cell to the cell of
    ``mesh`` it descends from (identity for untouched cells) and whose
    ``new_vertex_edges`` lists, in creation order, the endpoint pair each
    new vertex is the midpoint of.
    """
    marked = np.unique(np.asarray(list(marked), dtype=np.int64))
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.num_cells):
        raise MeshError("marked cell index out of range")

    cells = [tuple(row) for row in mesh.cells]
    refedge = list(mesh.refedge)
    gen = list(mesh.generation)
    root = list(range(mesh.num_cells))
    alive = [True] * mesh.num_cells
    coords = [tuple(v) for v in mesh.vertices]
    new_vertex_edges = []

    edge_map = {}

    def edge_key(a, b):
        return (a, b) if a < b else (b, a)

    def register(c):
        v = cells[c]
        for i in range(3):
            edge_map.setdefault(edge_key(v[(i + 1) % 3], v[(i + 2) % 3]),
                                []).append(c)

    def unregister(c):
        v = cells[c]
        for i in range(3):
            edge_map[edge_key(v[(i + 1) % 3], v[(i + 2) % 3])].remove(c)

    for c in range(mesh.num_cells):
        register(c)

    def refinement_edge(c):
        v = cells[c]
        k = refedge[c]
        return edge_key(v[(k + 1) % 3], v[(k + 2) % 3])

    def neighbor_across(e, c):
        for x in edge_map[e]:
            if x != c:
                return x
        return None

    split_budget = 64 * (mesh.num_cells + marked.size) + 4096
    splits = 0

    def split_one(c, mid):
        # Children ordered so the refinement edge sits opposite the newest
        # vertex (local index 2).
        nonlocal splits
        splits += 1
        if splits > split_budget:
            raise MeshError("bisection closure does not terminate; "
                            "incompatible refinement-edge labelling")
        v = cells[c]
        k = refedge[c]
        v1, v2, v3 = v[(k + 1) % 3], v[(k + 2) % 3], v[k]
        unregister(c)
        alive[c] = False
        for child in ((v3, v1, mid), (v2, v3, mid)):
            cells.append(child)
            refedge.append(2)
            gen.append(gen[c] + 1)
            root.append(root[c])
            alive.append(True)
            register(len(cells) - 1)

    def bisect_cell(c0):
        stack = [c0]
        while stack:
            c = stack[-1]
            if not alive[c]:
                stack.pop()
                continue
            e = refinement_edge(c)
            n = neighbor_across(e, c)
            if n is not None and refinement_edge(n) != e:
                if len(stack) > split_budget:
                    raise MeshError("bisection closure does not terminate")
                stack.append(n)
                continue
            a, b = e
            mid = len(coords)
            coords.append(((coords[a][0] + coords[b][0]) / 2.0,
                           (coords[a][1] + coords[b][1]) / 2.0))
            new_vertex_edges.append((a, b))
            split_one(c, mid)
            if n is not None:
                split_one(n, mid)
            stack.pop()

    for c in marked:
        if alive[c]:
            bisect_cell(int(c))

    keep = [c for c in range(len(cells)) if alive[c]]
    out = Mesh(np.array(coords, dtype=float),
               np.array([cells[c] for c in keep], dtype=np.int64),
               refedge=np.array([refedge[c] for c in keep], dtype=np.int64),
               generation=np.array([gen[c] for c in keep], dtype=np.int64),
               cell_ancestor=np.array([root[c] for c in keep],
                                      dtype=np.int64),
               new_vertex_edges=np.array(new_vertex_edges,
                                         dtype=np.int64).reshape(-1, 2),
               parent_vertex_count=mesh.num_vertices,
               check=False)
    return out


def uniform_refine(mesh):
    """One uniform bisection sweep: every cell marked once."""
    return bisect(mesh, np.arange(mesh.num_cells))


def save_off(mesh, path):
    """Write the mesh as ASCII OFF with deterministic numbering."""
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write("%d %d 0\n" % (mesh.num_vertices, mesh.num_cells))
        for x, y in mesh.vertices:
            fh.write("%.17g %.17g 0\n" % (x, y))
        for a, b, c in mesh.cells:
            fh.write("3 %d %d %d\n" % (a, b, c))


def save_vtk(mesh, path, cell_data=None, data_name="indicator"):
    """Write the mesh as a legacy-VTK unstructured grid.

    Parameters
    ----------
    cell_data : (nc,) array_like, optional
        Scalar attached per cell (e.g. an error indicator).
    """
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nafemtv mesh\nASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write("POINTS %d double\n" % mesh.num_vertices)
        for x, y in mesh.vertices:
            fh.write("%.17g %.17g 0\n" % (x, y))
        fh.write("CELLS %d %d\n" % (mesh.num_cells, 4 * mesh.num_cells))
        for a, b, c in mesh.cells:
            fh.write("3 %d %d %d\n" % (a, b, c))
        fh.write("CELL_TYPES %d\n" % mesh.num_cells)
        fh.write("5\n" * mesh.num_cells)
        if cell_data is not None:
            cell_data = np.asarray(cell_data, dtype=float)
            fh.write("CELL_DATA %d\n" % mesh.num_cells)
            fh.write("SCALARS %s double 1\nLOOKUP_TABLE default\n"
                     % data_name)
            for v in cell_data:
                fh.write("%.17g\n" % v)
