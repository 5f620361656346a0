"""P1, P0 and discontinuous-P1 finite element functions on a mesh.

Provides evaluation, cellwise gradients, prolongation to bisected meshes,
the four image-to-mesh interpolation schemes (``nodal``, ``l2_lagrange``,
``qi_lagrange``, ``l2_pixel``) and resampling back to the pixel grid.

The image model behind all schemes is the bilinear interpolant of the
nodal pixel data, extended by its boundary values outside the pixel range.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import quadrature as quad
from .mesh import Mesh  # noqa: F401  (re-exported for convenience)

INTERP_METHODS = ("nodal", "l2_lagrange", "qi_lagrange", "l2_pixel")

L2_PIXEL_EPS = 1e-6      # vertex anchoring weight in the l2_pixel objective
CG_RTOL = 1e-10          # relative residual for SPD interpolation systems
BARY_TOL = 1e-10         # point-in-cell tolerance, pixel units


class FeScalar:
    """Continuous piecewise-linear scalar function (one value per vertex)."""

    def __init__(self, mesh, values):
        self.mesh = mesh
        self.values = np.ascontiguousarray(values, dtype=float)
        if self.values.shape != (mesh.num_vertices,):
            raise ValueError("nodal value count does not match vertex count")

    def cell_values(self, cell_ids):
        return self.values[self.mesh.cells[cell_ids]]

    def at(self, cell_ids, bary):
        """Values at barycentric points of the given cells, (nc, nq)."""
        return np.einsum("qk,ck->cq", bary, self.cell_values(cell_ids))

    def copy(self):
        return FeScalar(self.mesh, self.values.copy())


class FeVector:
    """Continuous piecewise-linear function with m components per vertex."""

    def __init__(self, mesh, values):
        self.mesh = mesh
        values = np.ascontiguousarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != mesh.num_vertices:
            raise ValueError("nodal value count does not match vertex count")
        self.values = values

    @property
    def m(self):
        return self.values.shape[1]

    @classmethod
    def zeros(cls, mesh, m):
        return cls(mesh, np.zeros((mesh.num_vertices, m)))

    def cell_values(self, cell_ids):
        return self.values[self.mesh.cells[cell_ids]]       # (nc, 3, m)

    def at(self, cell_ids, bary):
        return np.einsum("qk,ckm->cqm", bary, self.cell_values(cell_ids))

    def component(self, j):
        return FeScalar(self.mesh, self.values[:, j].copy())

    def copy(self):
        return FeVector(self.mesh, self.values.copy())


class FeCellMatrix:
    """Cellwise-constant d x m matrix field (the P0 part of the dual)."""

    def __init__(self, mesh, values):
        self.mesh = mesh
        self.values = np.ascontiguousarray(values, dtype=float)
        if self.values.shape[0] != mesh.num_cells or self.values.ndim != 3:
            raise ValueError("expected one d x m matrix per cell")

    @property
    def m(self):
        return self.values.shape[2]

    @classmethod
    def zeros(cls, mesh, m, d=2):
        return cls(mesh, np.zeros((mesh.num_cells, d, m)))

    def copy(self):
        return FeCellMatrix(self.mesh, self.values.copy())


class DgScalar:
    """Discontinuous piecewise-linear scalar: 3 nodal values per cell."""

    def __init__(self, mesh, values):
        self.mesh = mesh
        self.values = np.ascontiguousarray(values, dtype=float)
        if self.values.shape != (mesh.num_cells, 3):
            raise ValueError("expected 3 values per cell")

    def at(self, cell_ids, bary):
        return np.einsum("qk,ck->cq", bary, self.values[cell_ids])

    def vertex_averages(self):
        """Arithmetic mean of the cell-local values meeting at each vertex."""
        sums = np.zeros(self.mesh.num_vertices)
        counts = np.zeros(self.mesh.num_vertices)
        cells = self.mesh.cells
        np.add.at(sums, cells.ravel(), self.values.ravel())
        np.add.at(counts, cells.ravel(), 1.0)
        return sums / np.maximum(counts, 1.0)

    @classmethod
    def from_fe(cls, f):
        return cls(f.mesh, f.values[f.mesh.cells].astype(float))

    def copy(self):
        return DgScalar(self.mesh, self.values.copy())


def gradient(f):
    """Cellwise-constant gradient of a P1 function as an FeCellMatrix.

    The (d, m) layout follows the component numbering (i, j) -> (j-1)d + i,
    i.e. column-major flattening.
    """
    mesh = f.mesh
    grads = mesh.basis_gradients                            # (nc, 3, 2)
    if isinstance(f, FeScalar):
        vals = f.values[mesh.cells][..., None]              # (nc, 3, 1)
    else:
        vals = f.cell_values(np.arange(mesh.num_cells))     # (nc, 3, m)
    out = np.einsum("ckd,ckm->cdm", grads, vals)
    return FeCellMatrix(mesh, out)


class CellLocator:
    """Uniform background grid over cell bounding boxes for point location."""

    def __init__(self, mesh):
        self.mesh = mesh
        lo = mesh.vertices.min(axis=0)
        hi = mesh.vertices.max(axis=0)
        span = np.maximum(hi - lo, 1e-12)
        n_target = max(1, int(np.sqrt(mesh.num_cells)))
        self.lo = lo
        self.h = span / n_target
        self.n = np.array([n_target, n_target])
        self.buckets = {}
        pts = mesh.vertices[mesh.cells]
        bmin = self._index(pts.min(axis=1))
        bmax = self._index(pts.max(axis=1))
        for k in range(mesh.num_cells):
            for ix in range(bmin[k, 0], bmax[k, 0] + 1):
                for iy in range(bmin[k, 1], bmax[k, 1] + 1):
                    self.buckets.setdefault((ix, iy), []).append(k)

    def _index(self, pts):
        idx = np.floor((pts - self.lo) / self.h).astype(int)
        return np.clip(idx, 0, self.n - 1)

    def locate(self, point):
        """Cell containing ``point`` (tolerance BARY_TOL), or -1."""
        point = np.asarray(point, dtype=float)
        key = tuple(self._index(point[None, :])[0])
        best, best_val = -1, -np.inf
        for k in self.buckets.get(key, ()):
            lam = self.mesh.barycentric_coordinates(
                np.array([k]), point[None, :])[0]
            margin = lam.min()
            if margin > best_val:
                best, best_val = k, margin
            if margin >= -BARY_TOL:
                return k
        if best_val >= -1e-8:   # ease roundoff at bucket borders
            return best
        return -1


def _get_locator(mesh):
    if "locator" not in mesh._cache:
        mesh._cache["locator"] = CellLocator(mesh)
    return mesh._cache["locator"]


def evaluate(f, points):
    """Evaluate a P1 function at one point or an (n, 2) array of points.

    Raises ValueError for points outside the mesh domain.
    """
    points = np.asarray(points, dtype=float)
    single = points.ndim == 1
    pts = points[None, :] if single else points
    loc = _get_locator(f.mesh)
    cells = np.empty(len(pts), dtype=int)
    for i, p in enumerate(pts):
        k = loc.locate(p)
        if k < 0:
            raise ValueError("point %s outside mesh domain" % (p,))
        cells[i] = k
    lam = f.mesh.barycentric_coordinates(cells, pts)
    if isinstance(f, FeScalar):
        vals = np.einsum("ck,ck->c", lam, f.values[f.mesh.cells[cells]])
    else:
        vals = np.einsum("ck,ckm->cm", lam, f.values[f.mesh.cells[cells]])
    return vals[0] if single else vals


def prolongate(f, fine_mesh):
    """Transfer a function to a mesh produced from ``f.mesh`` by bisection.

    P1 nesting makes this exact: new vertices take the mean of the bisected
    edge's endpoint values, P0 cells inherit their ancestor value and DG
    cells restrict the ancestor's linear polynomial.
    """
    if fine_mesh.parent_vertex_count is None:
        raise ValueError("fine mesh lacks bisection ancestry")
    if fine_mesh.parent_vertex_count != f.mesh.num_vertices:
        raise ValueError("fine mesh was not produced from this function's "
                         "mesh")
    if isinstance(f, (FeScalar, FeVector)):
        old = f.values if f.values.ndim == 2 else f.values[:, None]
        nv_new = fine_mesh.num_vertices
        vals = np.zeros((nv_new, old.shape[1]))
        vals[:old.shape[0]] = old
        base = old.shape[0]
        for i, (a, b) in enumerate(fine_mesh.new_vertex_edges):
            vals[base + i] = 0.5 * (vals[a] + vals[b])
        if isinstance(f, FeScalar):
            return FeScalar(fine_mesh, vals[:, 0])
        return FeVector(fine_mesh, vals)
    if isinstance(f, FeCellMatrix):
        return FeCellMatrix(fine_mesh, f.values[fine_mesh.cell_ancestor])
    if isinstance(f, DgScalar):
        anc = fine_mesh.cell_ancestor
        pts = fine_mesh.vertices[fine_mesh.cells].reshape(-1, 2)
        anc_rep = np.repeat(anc, 3)
        lam = f.mesh.barycentric_coordinates(anc_rep, pts)
        vals = np.einsum("ck,ck->c", lam, f.values[anc_rep])
        return DgScalar(fine_mesh, vals.reshape(-1, 3))
    raise TypeError("cannot prolongate %r" % type(f).__name__)


# -- image model ---------------------------------------------------------

def bilinear_sample(img, points):
    """Bilinear interpolation of pixel data with constant extension.

    ``img`` is an (n1, n2) array with pixel centers at integer coordinates
    (1..n1, 1..n2); axis 0 runs along x.
    """
    n1, n2 = img.shape
    pts = np.asarray(points, dtype=float)
    x = np.clip(pts[..., 0], 1.0, float(n1))
    y = np.clip(pts[..., 1], 1.0, float(n2))
    i0 = np.minimum(np.floor(x).astype(int), n1 - 1) if n1 > 1 \
        else np.ones_like(x, dtype=int)
    j0 = np.minimum(np.floor(y).astype(int), n2 - 1) if n2 > 1 \
        else np.ones_like(y, dtype=int)
    tx = x - i0
    ty = y - j0
    i0 -= 1
    j0 -= 1
    i1 = np.minimum(i0 + 1, n1 - 1)
    j1 = np.minimum(j0 + 1, n2 - 1)
    return ((1 - tx) * (1 - ty) * img[i0, j0]
            + tx * (1 - ty) * img[i1, j0]
            + (1 - tx) * ty * img[i0, j1]
            + tx * ty * img[i1, j1])


def _cg_spd(A, b, rtol=CG_RTOL, x0=None):
    """Conjugate gradient for SPD systems with a Jacobi preconditioner."""
    if b.size == 0:
        return b.copy()
    diag = A.diagonal()
    diag = np.where(diag > 0, diag, 1.0)
    M = spla.LinearOperator(A.shape, matvec=lambda v: v / diag)
    try:
        x, info = spla.cg(A, b, x0=x0, rtol=rtol, atol=0.0,
                          maxiter=20 * A.shape[0], M=M)
    except TypeError:   # scipy < 1.12 uses `tol`
        x, info = spla.cg(A, b, x0=x0, tol=rtol, atol=0.0,
                          maxiter=20 * A.shape[0], M=M)
    if info != 0:
        raise RuntimeError("conjugate gradient did not converge (info=%d)"
                           % info)
    return x


def assemble_p1_mass(mesh, cq):
    """P1 mass matrix under the given cell quadrature."""
    nv = mesh.num_vertices
    rows, cols, vals = [], [], []
    for ids, bary, _pts, w in cq:
        local = np.einsum("qi,qj->ij", bary, bary)          # (3, 3)
        data = w[:, 0, None, None] * local[None, :, :]      # (nc, 3, 3)
        conn = mesh.cells[ids]
        rows.append(np.repeat(conn, 3, axis=1).ravel())
        cols.append(np.tile(conn, (1, 3)).ravel())
        vals.append(data.ravel())
    M = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(nv, nv))
    return M.tocsr()


def interpolate_image(img, mesh, method="nodal"):
    """Interpolate an image onto the P1 space of the mesh.

    Methods
    -------
    nodal
        Vertex sampling of the bilinear image interpolant.
    l2_lagrange
        L2 projection; mass matrix and right-hand side use the averaging
        Lagrange-lattice quadrature of degree ceil(diam).
    qi_lagrange
        L1-stable quasi-interpolation: per-cell moments against
        rho_i = 12 lambda_i - 3 give local degrees of freedom whose
        vertexwise arithmetic mean defines the function.
    l2_pixel
        Least squares against the image at the integer pixel coordinates
        covered by the mesh, regularized by a small vertex anchoring term
        so vertices without pixel support stay determined.
    """
    img = np.asarray(img, dtype=float)
    if method == "nodal":
        return FeScalar(mesh, bilinear_sample(img, mesh.vertices))
    if method == "l2_lagrange":
        cq = quad.CellQuadrature(mesh, kind="lattice")
        M = assemble_p1_mass(mesh, cq)
        b = np.zeros(mesh.num_vertices)
        for ids, bary, pts, w in cq:
            g = bilinear_sample(img, pts)                   # (nc, nq)
            loc = np.einsum("cq,qi->ci", g, bary) * w
            np.add.at(b, mesh.cells[ids].ravel(), loc.ravel())
        return FeScalar(mesh, _cg_spd(M, b))
    if method == "qi_lagrange":
        # The moment integrands are quadratic for affine data, so the
        # midpoint rule reproduces affine images exactly.
        cq = quad.CellQuadrature(mesh, kind="midpoint", target=1.0)
        sums = np.zeros(mesh.num_vertices)
        counts = np.zeros(mesh.num_vertices)
        for ids, bary, pts, _w in cq:
            g = bilinear_sample(img, pts)
            rho = 12.0 * bary - 3.0                         # (nq, 3)
            sigma = np.einsum("cq,qi->ci", g, rho) / bary.shape[0]
            np.add.at(sums, mesh.cells[ids].ravel(), sigma.ravel())
            np.add.at(counts, mesh.cells[ids].ravel(), 1.0)
        return FeScalar(mesh, sums / np.maximum(counts, 1.0))
    if method == "l2_pixel":
        n1, n2 = img.shape
        pix, cells, lam = pixel_assignment(mesh, n1, n2)
        nv = mesh.num_vertices
        rows = np.repeat(np.arange(len(pix)), 3)
        cols = mesh.cells[cells].ravel()
        A = sp.coo_matrix((lam.ravel(), (rows, cols)),
                          shape=(len(pix), nv)).tocsr()
        y = img.ravel()[pix]
        gv = bilinear_sample(img, mesh.vertices)
        N = (A.T @ A) + 2.0 * L2_PIXEL_EPS * sp.identity(nv, format="csr")
        b = A.T @ y + 2.0 * L2_PIXEL_EPS * gv
        return FeScalar(mesh, _cg_spd(N.tocsr(), b, x0=gv))
    raise ValueError("unknown interpolation method %r" % method)


def pixel_assignment(mesh, n1, n2, tol=BARY_TOL):
    """Assign integer pixel coordinates inside the mesh to containing cells.

    Returns (pixel linear ids, cell ids, barycentric weights); each covered
    pixel appears exactly once.
    """
    cell_of = np.full(n1 * n2, -1, dtype=np.int64)
    corners = mesh.vertices[mesh.cells]
    for k in range(mesh.num_cells):
        p = corners[k]
        ix0 = max(1, int(np.ceil(p[:, 0].min() - tol)))
        ix1 = min(n1, int(np.floor(p[:, 0].max() + tol)))
        iy0 = max(1, int(np.ceil(p[:, 1].min() - tol)))
        iy1 = min(n2, int(np.floor(p[:, 1].max() + tol)))
        if ix1 < ix0 or iy1 < iy0:
            continue
        xs = np.arange(ix0, ix1 + 1)
        ys = np.arange(iy0, iy1 + 1)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=1).astype(float)
        lam = mesh.barycentric_coordinates(
            np.full(len(pts), k, dtype=int), pts)
        inside = lam.min(axis=1) >= -tol
        lin = (X.ravel() - 1) * n2 + (Y.ravel() - 1)
        cell_of[lin[inside]] = k
    covered = np.nonzero(cell_of >= 0)[0]
    cells = cell_of[covered]
    pts = np.stack([covered // n2 + 1, covered % n2 + 1], axis=1).astype(float)
    lam = mesh.barycentric_coordinates(cells, pts)
    return covered, cells, lam


def resample_to_image(f, n1, n2, clamp=False):
    """Sample a P1 scalar at the integer pixel grid of an n1 x n2 image.

    Values are returned unclamped unless ``clamp`` is set (image export).
    """
    pix, cells, lam = pixel_assignment(f.mesh, n1, n2)
    if len(pix) != n1 * n2:
        missing = np.setdiff1d(np.arange(n1 * n2), pix)
        raise ValueError("mesh domain does not cover the pixel grid "
                         "(%d uncovered pixels)" % len(missing))
    vals = np.einsum("ck,ck->c", lam, f.values[f.mesh.cells[cells]])
    out = np.empty(n1 * n2)
    out[pix] = vals
    out = out.reshape(n1, n2)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out


def sample_vector_at_pixels(f, n1, n2):
    """Sample an m-component P1 function at the pixel grid, (n1, n2, m)."""
    pix, cells, lam = pixel_assignment(f.mesh, n1, n2)
    if len(pix) != n1 * n2:
        raise ValueError("mesh domain does not cover the pixel grid")
    vals = np.einsum("ck,ckm->cm", lam, f.values[f.mesh.cells[cells]])
    out = np.empty((n1 * n2, f.m))
    out[pix] = vals
    return out.reshape(n1, n2, f.m)
