"""Independent oracles used by the test suite.

These re-derive reference values through routes that do not touch the
solver or indicator implementations: a first-order minimizer of the
discrete energy, an analytic energy gradient assembled from quadrature
sums, and recursive physical-triangle subdivision for dense quadrature.
"""

import numpy as np

from afemtv.model import huber_prime, model_quadrature


def energy_gradient(uvals, mesh, params, T, g):
    """Analytic gradient of the quadrature-discretized primal energy."""
    m = uvals.shape[1]
    grad = np.zeros_like(uvals)
    for ids, bary, pts, w in model_quadrature(mesh):
        C = T.coeff(mesh, ids, bary, pts)                  # (nc, nq, m)
        uq = np.einsum("qk,ckm->cqm", bary, uvals[mesh.cells[ids]])
        s = np.einsum("cqm,cqm->cq", C, uq) - g.at(ids, bary)
        coef = params.alpha2 * s
        if params.alpha1 > 0:
            coef = coef + params.alpha1 * huber_prime(s, params.gamma1)
        loc = np.einsum("cq,cqm,qi->cim", coef * w, C, bary)
        if params.beta > 0 and params.setting_s == "id":
            loc = loc + params.beta * np.einsum(
                "cqm,qi,cq->cim", uq, bary, w * np.ones_like(s))
        np.add.at(grad, mesh.cells[ids].ravel(), loc.reshape(-1, m))
    grads = mesh.basis_gradients
    areas = mesh.cell_areas
    gu = np.einsum("ckd,ckm->cdm", grads, uvals[mesh.cells])
    q = np.linalg.norm(gu, axis=(1, 2))
    if params.lam > 0:
        gamma = params.gamma2
        if gamma > 0:
            factor = np.where(q > 1e-300, huber_prime(q, gamma)
                              / np.maximum(q, 1e-300), 1.0 / gamma)
        else:
            factor = np.where(q > 1e-300, 1.0 / np.maximum(q, 1e-300), 0.0)
        coefs = params.lam * areas * factor
        loc = np.einsum("c,ckd,cdm->ckm", coefs, grads, gu)
        np.add.at(grad, mesh.cells.ravel(), loc.reshape(-1, m))
    if params.beta > 0 and params.setting_s == "grad":
        loc = np.einsum("c,ckd,cdm->ckm", params.beta * areas, grads, gu)
        np.add.at(grad, mesh.cells.ravel(), loc.reshape(-1, m))
    return grad


def minimize_energy(mesh, params, T, g, m, tol_energy=1e-12,
                    max_iter=200000):
    """First-order (gradient descent / Barzilai-Borwein) minimizer of the
    smooth Huberized energy, run to energy stationarity."""
    from afemtv.fe_space import FeVector
    from afemtv.model import energy_primal

    uvals = np.zeros((mesh.num_vertices, m))
    energy = energy_primal(FeVector(mesh, uvals), g, params, T)
    grad = energy_gradient(uvals, mesh, params, T, g)
    step = 1.0 / max(np.linalg.norm(grad), 1e-8)
    prev_u = None
    prev_grad = None
    stagnant = 0
    for _ in range(max_iter):
        if prev_u is not None:
            du = (uvals - prev_u).ravel()
            dg = (grad - prev_grad).ravel()
            denom = float(du @ dg)
            if denom > 1e-300:
                step = float(du @ du) / denom
        trial_step = step
        gnorm2 = float(np.sum(grad * grad))
        accepted = False
        for _bt in range(60):
            cand = uvals - trial_step * grad
            e_cand = energy_primal(FeVector(mesh, cand), g, params, T)
            if e_cand <= energy - 1e-4 * trial_step * gnorm2:
                accepted = True
                break
            trial_step *= 0.5
        if not accepted:
            break
        prev_u, prev_grad = uvals, grad
        uvals = cand
        new_grad = energy_gradient(uvals, mesh, params, T, g)
        if abs(energy - e_cand) <= tol_energy * (1.0 + abs(e_cand)):
            stagnant += 1
            if stagnant >= 5:
                energy = e_cand
                grad = new_grad
                break
        else:
            stagnant = 0
        energy = e_cand
        grad = new_grad
    return uvals, energy


def subdivide_triangle(tri, level):
    """Recursive uniform 4-way subdivision of a physical triangle."""
    if level == 0:
        return [tri]
    a, b, c = tri
    ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
    out = []
    for sub in ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)):
        out.extend(subdivide_triangle(np.array(sub), level - 1))
    return out


def cell_midpoint_points(mesh, k):
    """Dense re-enumeration of the model quadrature of one cell:
    (points, weight) with equal weights."""
    diam = mesh.cell_diameters[k]
    level = max(0, int(np.ceil(np.log2(max(diam / 1.5, 1.0)))))
    corners = mesh.vertices[mesh.cells[k]]
    pts = []
    for tri in subdivide_triangle(corners.copy(), level):
        v0, v1, v2 = tri
        pts.extend([(v0 + v1) / 2, (v1 + v2) / 2, (v2 + v0) / 2])
    weight = mesh.cell_areas[k] / len(pts)
    return np.array(pts), weight
