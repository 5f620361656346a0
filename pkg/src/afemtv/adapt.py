"""A-posteriori error indicators, Doerfler marking and the AFEM loop.

Two indicator families drive refinement:

* residual based -- for S = grad the cell term is
  h_K^2 ||alpha2 T*(Tu - g) + T* p1||^2 (the Laplacian and divergence
  terms vanish for P1/P0) and the facet term is
  h_F ||[n^T (beta grad u + p2)]||^2; for S = I the cell term carries
  beta u instead and the facet term is h_F^{-1} ||[n^T p2]||^2.  Boundary
  facets use only the existing-cell trace, and each facet term is added to
  both adjacent cells.
* primal-dual based -- the duality-gap density evaluated after one uniform
  bisection sweep (on the same mesh the gap of a solved pair vanishes);
  fine-cell values aggregate back to the coarse cells, so the indicator
  total reproduces the global gap on the refined mesh exactly.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .fe_space import FeVector, gradient, prolongate
from .mesh import bisect, uniform_refine
from .model import (DualPair, assemble_B, dual_functional, flatten_dofs,
                    huber, model_quadrature, unflatten_dofs)
from .solver import solve


@dataclass
class IndicatorField:
    """Nonnegative per-cell indicator values eta_K."""
    values: np.ndarray
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if np.any(~np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("indicator values must be finite and >= 0")

    def total(self):
        """sqrt of the summed squared indicators."""
        return float(np.sqrt(np.sum(self.values ** 2)))


def residual_indicator(u, p, g, params, T):
    """Residual-based local error indicator for the solved pair (u, p)."""
    mesh = u.mesh
    cq = model_quadrature(mesh)
    cell_term = np.zeros(mesh.num_cells)
    for ids, bary, pts, w in cq:
        C = T.coeff(mesh, ids, bary, pts)                   # (nc, nq, m)
        uq = u.at(ids, bary)
        s = np.einsum("cqm,cqm->cq", C, uq) - g.at(ids, bary)
        p1q = p.p1.at(ids, bary)
        rho = (params.alpha2 * s + p1q)[..., None] * C
        if params.setting_s == "id":
            rho = rho + params.beta * uq
        cell_term[ids] = np.sum(
            w * np.einsum("cqm,cqm->cq", rho, rho), axis=1)
    if params.setting_s == "grad":
        cell_term *= mesh.cell_diameters ** 2

    facets = mesh.facets
    grad_u = gradient(u).values
    zeta = p.p2.values if params.setting_s == "id" \
        else params.beta * grad_u + p.p2.values
    c1 = facets.cells[:, 0]
    c2 = facets.cells[:, 1]
    jump = zeta[c1].copy()
    interior = c2 >= 0
    jump[interior] -= zeta[c2[interior]]
    nval = np.einsum("fd,fdm->fm", facets.normals, jump)
    nval2 = np.einsum("fm,fm->f", nval, nval)
    if params.setting_s == "grad":
        facet_term = facets.lengths ** 2 * nval2
    else:
        facet_term = nval2     # h_F^{-1} * |val|^2 * |F|
    eta2 = cell_term.copy()
    for i in range(3):
        eta2 += facet_term[facets.cell_facets[:, i]]
    return IndicatorField(np.sqrt(np.maximum(eta2, 0.0)), "residual")


def primal_dual_indicator(u, p, g, params, T, return_details=False):
    """Duality-gap density on a uniformly refined mesh, per coarse cell.

    The density per fine cell integrates the Fenchel gaps of the data and
    TV terms plus half the B-weighted squared distance between u and the
    dual reconstruction -B^{-1}(Lambda* p - alpha2 T* g); summed over the
    children of a coarse cell it yields eta_K^2.
    """
    mesh = u.mesh
    fine = uniform_refine(mesh)
    uf = prolongate(u, fine)
    pf = DualPair(prolongate(p.p1, fine), prolongate(p.p2, fine))
    gf = prolongate(g, fine)
    Tf = T.refine(fine)
    Bf = assemble_B(fine, params, Tf)
    xi = flatten_dofs(dual_functional(fine, params, Tf, gf, pf))
    wrec = FeVector(fine, unflatten_dofs(-Bf.solve(xi),
                                         fine.num_vertices, Tf.m))

    density = np.zeros(fine.num_cells)
    cq = model_quadrature(fine)
    for ids, bary, pts, w in cq:
        C = Tf.coeff(fine, ids, bary, pts)
        uq = uf.at(ids, bary)
        s = np.einsum("cqm,cqm->cq", C, uq) - gf.at(ids, bary)
        p1q = pf.p1.at(ids, bary)
        term = -s * p1q
        if params.alpha1 > 0:
            term = term + params.alpha1 * huber(np.abs(s), params.gamma1) \
                + params.gamma1 / (2.0 * params.alpha1) * p1q * p1q
        dq = uq - wrec.at(ids, bary)
        sd = np.einsum("cqm,cqm->cq", C, dq)
        term = term + 0.5 * params.alpha2 * sd * sd
        if params.beta > 0 and params.setting_s == "id":
            term = term + 0.5 * params.beta * np.einsum(
                "cqm,cqm->cq", dq, dq)
        density[ids] += np.sum(w * term, axis=1)

    areas = fine.cell_areas
    grad_uf = gradient(uf).values
    q = np.linalg.norm(grad_uf, axis=(1, 2))
    tv = -np.einsum("cdm,cdm->c", grad_uf, pf.p2.values)
    if params.lam > 0:
        tv = tv + params.lam * huber(q, params.gamma2) \
            + params.gamma2 / (2.0 * params.lam) * np.einsum(
                "cdm,cdm->c", pf.p2.values, pf.p2.values)
    density += areas * tv
    if params.beta > 0 and params.setting_s == "grad":
        grad_d = gradient(wrec).values - grad_uf
        density += 0.5 * params.beta * areas * np.einsum(
            "cdm,cdm->c", grad_d, grad_d)

    eta2 = np.zeros(mesh.num_cells)
    np.add.at(eta2, fine.cell_ancestor, density)
    eta = IndicatorField(np.sqrt(np.maximum(eta2, 0.0)), "primal_dual")
    if return_details:
        return eta, {"fine_mesh": fine, "fine_B": Bf,
                     "gap_total": float(density.sum())}
    return eta


INDICATORS = {"residual": residual_indicator,
              "primal_dual": primal_dual_indicator}


def dorfler_mark(eta, theta_mark):
    """Greedy Doerfler marking: minimal prefix of descending eta_K whose
    sum reaches theta_mark times the total; ties break by cell index."""
    if not 0.0 <= theta_mark <= 1.0:
        raise ValueError("theta_mark must lie in [0, 1]")
    vals = eta.values
    total = float(vals.sum())
    if theta_mark == 0.0 or total <= 0.0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(vals)), -vals))
    csum = np.cumsum(vals[order])
    target = theta_mark * total - 1e-12 * max(1.0, total)
    k = int(np.searchsorted(csum, target))
    k = min(k, len(vals) - 1)
    marked = order[:k + 1]
    marked = marked[vals[marked] > 0.0]
    return np.sort(marked)


@dataclass
class AfemResult:
    mesh: object
    u: object
    p: object
    g: object
    T: object
    indicator: object
    trace: list = field(default_factory=list)
    reports: list = field(default_factory=list)


def afem_loop(initial_mesh, params, data_projector, t_factory, n_refine,
              indicator="residual", theta_mark=0.5, forced_marks=None,
              tol=1e-4, solver_max_iter=100, stop=None, on_iteration=None,
              track_indicator=True):
    """Solve-estimate-mark-refine loop.

    Parameters
    ----------
    data_projector : callable(mesh) -> data function
        Recomputed on every refined mesh.
    t_factory : callable(mesh) -> operator T
    n_refine : number of refinements (the loop solves n_refine + 1 times).
    forced_marks : callable(mesh) -> cell indices, optional
        Extra cells marked after Doerfler marking (e.g. the inpainting
        domain).
    stop : callable(iteration, mesh, u, eta) -> bool, optional
        Early termination hook checked after each solve.
    track_indicator : compute the indicator on the final mesh too, so every
        trace row carries an estimator total.

    Returns an :class:`AfemResult`; the trace rows carry (iteration,
    cells, eta_total, energy, solver_iterations, seconds).
    """
    indicate = INDICATORS[indicator]
    mesh = initial_mesh
    u_warm = None
    p_warm = None
    trace = []
    reports = []
    u = p = g = T = eta = None
    for it in range(n_refine + 1):
        t_start = time.perf_counter()
        g = data_projector(mesh)
        T = t_factory(mesh)
        B = assemble_B(mesh, params, T)
        u, p, rep = solve(mesh, params, T, g, u0=u_warm, p0=p_warm,
                          tol=tol, max_iter=solver_max_iter, B=B)
        reports.append(rep)
        last = it == n_refine or (stop is not None
                                  and stop(it, mesh, u, None))
        eta = None
        if not last or track_indicator:
            eta = indicate(u, p, g, params, T)
        seconds = time.perf_counter() - t_start
        trace.append({"iteration": it, "cells": mesh.num_cells,
                      "eta_total": eta.total() if eta is not None
                      else float("nan"),
                      "energy": rep.energy,
                      "solver_iterations": rep.iterations,
                      "seconds": seconds})
        if on_iteration is not None:
            on_iteration(it, mesh, u, p, eta)
        if last:
            break
        marked = dorfler_mark(eta, theta_mark)
        if forced_marks is not None:
            forced = np.asarray(forced_marks(mesh), dtype=np.int64)
            marked = np.union1d(marked, forced)
        fine = bisect(mesh, marked)
        u_warm = prolongate(u, fine)
        p_warm = DualPair(prolongate(p.p1, fine), prolongate(p.p2, fine))
        mesh = fine
    return AfemResult(mesh, u, p, g, T, eta, trace, reports)


def trace_to_csv(trace, path, columns=None):
    if columns is None:
        columns = list(trace[0].keys()) if trace else []
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in trace:
            fh.write(",".join(_fmt(row.get(c)) for c in columns) + "\n")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)
