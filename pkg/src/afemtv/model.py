"""The L1-L2-TV model: energies, operators, optimality residuals.

The model minimizes, over m-component P1 fields u,

    alpha1 * int huber_g1(|Tu - g|) + alpha2/2 ||Tu - g||^2
    + beta/2 ||Su||^2 + lam * int huber_g2(|grad u|_F),

with S either the identity or the gradient and T a pointwise linear
operator mapping m-vectors to scalars.  A minimizer is characterized
jointly with a dual pair p = (p1, p2) by

    0 = Lambda* p - alpha2 T* g + B u,
    0 = p1 max(gamma1, |Tu - g|) - alpha1 (Tu - g),   |p1| <= alpha1,
    0 = p2 max(gamma2, |grad u|_F) - lam grad u,      |p2|_F <= lam,

where B = alpha2 T*T + beta S*S and Lambda = (T, grad).  The pointwise
equations are enforced at vertices (p1) and per cell (p2), because
|Tu - g| need not be cellwise linear even when Tu - g is.

All integrals share the mesh's composite midpoint quadrature (exact for
quadratics, subdivided to roughly pixel density on large cells), which
makes the discrete duality-gap identity hold to linear-algebra accuracy.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import quadrature as quadmod
from .fe_space import (DgScalar, FeCellMatrix, FeScalar, _cg_spd,
                       gradient, prolongate)

FEAS_TOL = 1e-8    # slack accepted on the dual bound constraints


def huber(x, gamma):
    """Huber function: x^2/(2 gamma) for |x| <= gamma, |x| - gamma/2 beyond.

    gamma = 0 degenerates to the absolute value.
    """
    x = np.asarray(x, dtype=float)
    if gamma == 0.0:
        return np.abs(x)
    ax = np.abs(x)
    return np.where(ax <= gamma, x * x / (2.0 * gamma), ax - gamma / 2.0)


def huber_prime(x, gamma):
    """Derivative of :func:`huber`; sign(x) when gamma = 0 (so 0 at 0)."""
    x = np.asarray(x, dtype=float)
    if gamma == 0.0:
        return np.sign(x)
    return np.where(np.abs(x) <= gamma, x / gamma, np.sign(x))


@dataclass
class ModelParams:
    """Weights and Huber parameters of the model.

    ``setting_s`` selects the smoothing operator: "id" for S = I (L2 term)
    or "grad" for S = grad (H1 seminorm term).
    """
    alpha1: float = 0.0
    alpha2: float = 1.0
    beta: float = 0.0
    lam: float = 0.0
    gamma1: float = 0.0
    gamma2: float = 0.0
    setting_s: str = "id"

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "beta", "lam", "gamma1", "gamma2"):
            if getattr(self, name) < 0:
                raise ValueError("%s must be nonnegative" % name)
        if self.setting_s not in ("id", "grad"):
            raise ValueError("setting_s must be 'id' or 'grad'")

    @classmethod
    def from_dict(cls, d):
        keys = {"alpha1": "alpha1", "alpha2": "alpha2", "beta": "beta",
                "lambda": "lam", "gamma1": "gamma1", "gamma2": "gamma2",
                "setting_s": "setting_s"}
        lowered = {str(k).lower(): v for k, v in d.items()}
        kwargs = {}
        for key, attr in keys.items():
            if key in lowered:
                val = lowered[key]
                kwargs[attr] = str(val) if attr == "setting_s" else float(val)
        return cls(**kwargs)

    @classmethod
    def from_config(cls, path):
        """Read from a key-value text file (`key = value`, # comments)."""
        return cls.from_dict(read_config(path))


def read_config(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError("malformed config line: %r" % line)
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


# -- pointwise operators T -------------------------------------------------

class IdentityOp:
    """T = identity on scalar fields (m = 1)."""
    m = 1

    def coeff(self, mesh, cell_ids, bary, pts):
        return np.ones(pts.shape[:2] + (1,))

    def vertex_coeff(self, mesh):
        return np.ones((mesh.num_vertices, 1))

    def refine(self, fine_mesh):
        return self


class MaskedIdentity:
    """T u = u outside the inpainting domain, 0 inside (m = 1).

    ``keep`` is a boolean (n1, n2) pixel raster; points are looked up at
    their nearest pixel, so the operator is defined on any mesh over the
    image domain.
    """
    m = 1

    def __init__(self, keep):
        self.keep = np.asarray(keep, dtype=bool)

    def _lookup(self, pts):
        n1, n2 = self.keep.shape
        i = np.clip(np.rint(pts[..., 0]).astype(int), 1, n1) - 1
        j = np.clip(np.rint(pts[..., 1]).astype(int), 1, n2) - 1
        return self.keep[i, j].astype(float)

    def coeff(self, mesh, cell_ids, bary, pts):
        return self._lookup(pts)[..., None]

    def vertex_coeff(self, mesh):
        return self._lookup(mesh.vertices)[:, None]

    def refine(self, fine_mesh):
        return self


class PointwiseVector:
    """T u = w . u with a cellwise-linear (DG1) weight pair (m = 2).

    Used for optical flow where w is the gradient of the warped frame; at
    vertices the discontinuous weights enter through their adjacent-cell
    arithmetic mean.
    """
    m = 2

    def __init__(self, w1, w2):
        if not isinstance(w1, DgScalar) or not isinstance(w2, DgScalar):
            raise TypeError("PointwiseVector expects a DgScalar pair")
        self.w = (w1, w2)

    def coeff(self, mesh, cell_ids, bary, pts):
        return np.stack([w.at(cell_ids, bary) for w in self.w], axis=-1)

    def vertex_coeff(self, mesh):
        return np.stack([w.vertex_averages() for w in self.w], axis=-1)

    def refine(self, fine_mesh):
        return PointwiseVector(prolongate(self.w[0], fine_mesh),
                               prolongate(self.w[1], fine_mesh))


@dataclass
class DualPair:
    """Dual variable p = (p1, p2): P1 scalar plus P0 d x m matrix field."""
    p1: FeScalar
    p2: FeCellMatrix

    @classmethod
    def zeros(cls, mesh, m, d=2):
        return cls(FeScalar(mesh, np.zeros(mesh.num_vertices)),
                   FeCellMatrix.zeros(mesh, m, d))

    def copy(self):
        return DualPair(self.p1.copy(), self.p2.copy())


def dual_feasible(p, params, tol=FEAS_TOL):
    v1 = np.abs(p.p1.values).max(initial=0.0) - params.alpha1
    v2 = np.linalg.norm(p.p2.values, axis=(1, 2)).max(initial=0.0) - params.lam
    return v1 <= tol * max(1.0, params.alpha1) and \
        v2 <= tol * max(1.0, params.lam)


# -- quadrature + assembly -------------------------------------------------

def model_quadrature(mesh):
    """Composite midpoint quadrature shared by all model integrals."""
    if "model_quad" not in mesh._cache:
        mesh._cache["model_quad"] = quadmod.CellQuadrature(
            mesh, kind="midpoint", target=1.5)
    return mesh._cache["model_quad"]


def flatten_dofs(values):
    """(nv, m) nodal array -> component-major coefficient vector."""
    return values.reshape(-1, order="F")


def unflatten_dofs(vec, nv, m):
    return vec.reshape(nv, m, order="F")


class GridOperatorB:
    """Sparse operator of the bilinear form a_B over the P1 nodal basis."""

    def __init__(self, matrix, mesh, m):
        self.matrix = matrix.tocsr()
        self.mesh = mesh
        self.m = m
        self._shift_warned = False

    @property
    def shape(self):
        return self.matrix.shape

    def apply(self, vec):
        return self.matrix @ vec

    def solve(self, rhs, rtol=1e-10, x0=None):
        """CG solve (B is symmetric positive definite under (As1)).

        Falls back to a tiny diagonal shift when the unshifted solve
        breaks down, which happens when (As1) fails (e.g. alpha2 = 0 with
        S = grad); the outcome is then reported, not fatal.
        """
        try:
            return _cg_spd(self.matrix, rhs, rtol=rtol, x0=x0)
        except RuntimeError:
            if not self._shift_warned:
                warnings.warn("B solve needed a diagonal shift; the "
                              "bilinear form may not be coercive")
                self._shift_warned = True
            scale = np.abs(self.matrix.diagonal()).mean()
            shifted = self.matrix + (1e-10 * scale) * sp.identity(
                self.matrix.shape[0], format="csr")
            return _cg_spd(shifted, rhs, rtol=rtol, x0=x0)

    def min_ritz_value(self):
        """Smallest-eigenvalue probe for the coercivity audit (As1)."""
        n = self.shape[0]
        if n <= 200:
            return float(np.linalg.eigvalsh(self.matrix.toarray())[0])
        try:
            vals = spla.eigsh(self.matrix, k=1, which="SA", tol=1e-6,
                              maxiter=500, return_eigenvectors=False)
            return float(vals[0])
        except Exception:
            rng = np.random.default_rng(0)
            X = rng.standard_normal((n, 1))
            try:
                vals, _ = spla.lobpcg(self.matrix, X, largest=False,
                                      maxiter=200, tol=1e-6)
                return float(vals[0])
            except Exception:
                return float("nan")

    def coercivity_audit(self, tol=1e-12):
        """Return (min Ritz value, coercive flag); warns when it fails."""
        lam_min = self.min_ritz_value()
        scale = np.abs(self.matrix.diagonal()).max(initial=1.0)
        ok = bool(lam_min == lam_min and lam_min > tol * scale)
        if not ok:
            warnings.warn("coercivity audit failed (min Ritz %.3e): the "
                          "model solution may not be unique" % lam_min)
        return lam_min, ok


def assemble_B(mesh, params, T, audit=False):
    """Assemble B = alpha2 T*T + beta S*S over the nodal basis.

    Entries are alpha2 <T phi_i, T phi_j> + beta <S phi_i, S phi_j> under
    the model quadrature; the result is symmetric by construction.
    """
    m = T.m
    nv = mesh.num_vertices
    cq = model_quadrature(mesh)
    rows, cols, vals = [], [], []

    def scatter(block_a, block_b, conn, data):
        rows.append((np.repeat(conn, 3, axis=1) + block_a * nv).ravel())
        cols.append((np.tile(conn, (1, 3)) + block_b * nv).ravel())
        vals.append(data.ravel())

    if params.alpha2 > 0:
        for ids, bary, pts, w in cq:
            C = T.coeff(mesh, ids, bary, pts)               # (nc, nq, m)
            conn = mesh.cells[ids]
            for a in range(m):
                for b in range(a, m):
                    data = params.alpha2 * np.einsum(
                        "cq,cq,qi,qj->cij", C[..., a] * w, C[..., b],
                        bary, bary)
                    scatter(a, b, conn, data)
                    if b != a:
                        scatter(b, a, conn,
                                np.transpose(data, (0, 2, 1)))
    if params.beta > 0:
        if params.setting_s == "id":
            for ids, bary, _pts, w in cq:
                local = np.einsum("qi,qj->ij", bary, bary)
                data = params.beta * w[:, 0, None, None] * local[None]
                conn = mesh.cells[ids]
                for a in range(m):
                    scatter(a, a, conn, data)
        else:
            grads = mesh.basis_gradients
            data = params.beta * np.einsum(
                "c,cid,cjd->cij", mesh.cell_areas, grads, grads)
            conn = mesh.cells
            for a in range(m):
                scatter(a, a, conn, data)
    if rows:
        mat = sp.coo_matrix((np.concatenate(vals),
                             (np.concatenate(rows), np.concatenate(cols))),
                            shape=(m * nv, m * nv))
    else:
        mat = sp.coo_matrix((m * nv, m * nv))
    B = GridOperatorB(mat, mesh, m)
    if audit:
        B.coercivity_audit()
    return B


def t_adjoint_data_vector(mesh, params, T, g):
    """Coefficient vector of alpha2 T* g, shape (nv, m)."""
    m = T.m
    out = np.zeros((mesh.num_vertices, m))
    if params.alpha2 == 0:
        return out
    cq = model_quadrature(mesh)
    for ids, bary, pts, w in cq:
        C = T.coeff(mesh, ids, bary, pts)
        gq = g.at(ids, bary)
        loc = params.alpha2 * np.einsum("cq,cqm,qi->cim", gq * w, C, bary)
        np.add.at(out, mesh.cells[ids].ravel(),
                  loc.reshape(-1, m))
    return out


def lambda_adjoint(mesh, T, p):
    """Coefficient vector of Lambda* p = T* p1 + grad* p2, shape (nv, m)."""
    m = T.m
    out = np.zeros((mesh.num_vertices, m))
    cq = model_quadrature(mesh)
    for ids, bary, pts, w in cq:
        C = T.coeff(mesh, ids, bary, pts)
        p1q = p.p1.at(ids, bary)
        loc = np.einsum("cq,cqm,qi->cim", p1q * w, C, bary)
        np.add.at(out, mesh.cells[ids].ravel(), loc.reshape(-1, m))
    grads = mesh.basis_gradients
    loc = np.einsum("c,ckd,cdm->ckm", mesh.cell_areas, grads, p.p2.values)
    np.add.at(out, mesh.cells.ravel(), loc.reshape(-1, m))
    return out


def dual_functional(mesh, params, T, g, p):
    """Lambda* p - alpha2 T* g as an (nv, m) coefficient array."""
    return lambda_adjoint(mesh, T, p) - t_adjoint_data_vector(
        mesh, params, T, g)


# -- energies ---------------------------------------------------------------

def energy_primal(u, g, params, T):
    """Quadrature evaluation of the primal energy at u."""
    mesh = u.mesh
    cq = model_quadrature(mesh)
    val = 0.0
    need_data = params.alpha1 > 0 or params.alpha2 > 0
    need_l2 = params.beta > 0 and params.setting_s == "id"
    if need_data or need_l2:
        for ids, bary, pts, w in cq:
            uq = u.at(ids, bary)                            # (nc, nq, m)
            if need_data:
                C = T.coeff(mesh, ids, bary, pts)
                s = np.einsum("cqm,cqm->cq", C, uq) - g.at(ids, bary)
                if params.alpha1 > 0:
                    val += params.alpha1 * np.sum(
                        w * huber(np.abs(s), params.gamma1))
                if params.alpha2 > 0:
                    val += 0.5 * params.alpha2 * np.sum(w * s * s)
            if need_l2:
                val += 0.5 * params.beta * np.sum(
                    w * np.einsum("cqm,cqm->cq", uq, uq))
    grad_u = gradient(u).values
    areas = mesh.cell_areas
    if params.beta > 0 and params.setting_s == "grad":
        val += 0.5 * params.beta * np.sum(
            areas * np.einsum("cdm,cdm->c", grad_u, grad_u))
    if params.lam > 0:
        q = np.linalg.norm(grad_u, axis=(1, 2))
        val += params.lam * np.sum(areas * huber(q, params.gamma2))
    return float(val)


def energy_dual(p, g, params, T, B):
    """The negated predual objective -D(p); +inf for infeasible p.

    Evaluates 1/2 ||Lambda* p - alpha2 T* g||_{B^-1}^2 - alpha2/2 ||g||^2
    + <g, p1> + gamma1/(2 alpha1) ||p1||^2 + gamma2/(2 lam) ||p2||^2, the
    quadratic dual terms being dropped when alpha1 = 0 or lam = 0.
    """
    if not dual_feasible(p, params):
        return float("inf")
    mesh = p.p1.mesh
    xi = flatten_dofs(dual_functional(mesh, params, T, g, p))
    z = B.solve(xi)
    val = 0.5 * float(xi @ z)
    cq = model_quadrature(mesh)
    for ids, bary, _pts, w in cq:
        gq = g.at(ids, bary)
        p1q = p.p1.at(ids, bary)
        if params.alpha2 > 0:
            val -= 0.5 * params.alpha2 * np.sum(w * gq * gq)
        val += np.sum(w * gq * p1q)
        if params.alpha1 > 0:
            val += params.gamma1 / (2.0 * params.alpha1) * np.sum(
                w * p1q * p1q)
    if params.lam > 0:
        val += params.gamma2 / (2.0 * params.lam) * np.sum(
            mesh.cell_areas * np.einsum(
                "cdm,cdm->c", p.p2.values, p.p2.values))
    return float(val)


def duality_gap(u, p, g, params, T, B):
    """E(u) + D(p); nonnegative for feasible p, zero at optimality."""
    return energy_primal(u, g, params, T) + energy_dual(p, g, params, T, B)


def vertex_values(g):
    """Vertex trace of the data: nodal for P1, adjacent-cell mean for DG1."""
    if isinstance(g, FeScalar):
        return g.values
    if isinstance(g, DgScalar):
        return g.vertex_averages()
    raise TypeError("data must be FeScalar or DgScalar")


class ResidualTriple:
    """Residual norms of the discrete optimality system plus feasibility.

    r1: Euclidean norm of the nodal coefficients of
        Lambda* p - alpha2 T* g + B u.
    r2: vertexwise max of |p1 max(gamma1, |Tu-g|) - alpha1 (Tu-g)|.
    r3: cellwise max of |p2 max(gamma2, |grad u|_F) - lam grad u|_F.
    feas1, feas2: amount by which |p1| <= alpha1 and |p2|_F <= lam are
        violated (<= 0 when satisfied).
    """

    def __init__(self, r1, r2, r3, feas1, feas2):
        self.r1 = r1
        self.r2 = r2
        self.r3 = r3
        self.feas1 = feas1
        self.feas2 = feas2

    def max(self):
        return max(self.r1, self.r2, self.r3)

    def __repr__(self):
        return ("ResidualTriple(r1=%.3e, r2=%.3e, r3=%.3e, feas=(%.1e, %.1e))"
                % (self.r1, self.r2, self.r3, self.feas1, self.feas2))


def pointwise_residuals(u, p, g, params, T):
    """Vertexwise p1-equation and cellwise p2-equation residual fields."""
    mesh = u.mesh
    cv = T.vertex_coeff(mesh)                               # (nv, m)
    s = np.einsum("vm,vm->v", cv, u.values) - vertex_values(g)
    f2 = p.p1.values * np.maximum(params.gamma1, np.abs(s)) \
        - params.alpha1 * s
    grad_u = gradient(u).values
    q = np.linalg.norm(grad_u, axis=(1, 2))
    f3 = p.p2.values * np.maximum(params.gamma2, q)[:, None, None] \
        - params.lam * grad_u
    return f2, f3


def optimality_residual(u, p, g, params, T, B):
    """Residual triple of the discrete optimality system at (u, p)."""
    mesh = u.mesh
    xi = flatten_dofs(dual_functional(mesh, params, T, g, p))
    r1 = float(np.linalg.norm(xi + B.apply(flatten_dofs(u.values))))
    f2, f3 = pointwise_residuals(u, p, g, params, T)
    r2 = float(np.abs(f2).max(initial=0.0))
    r3 = float(np.linalg.norm(f3, axis=(1, 2)).max(initial=0.0))
    feas1 = float(np.abs(p.p1.values).max(initial=0.0) - params.alpha1)
    feas2 = float(np.linalg.norm(p.p2.values, axis=(1, 2)).max(initial=0.0)
                  - params.lam)
    return ResidualTriple(r1, r2, r3, feas1, feas2)
