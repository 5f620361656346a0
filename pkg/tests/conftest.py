import numpy as np
import pytest

from afemtv.fe_space import DgScalar, FeScalar
from afemtv.mesh import Mesh, build_grid_mesh
from afemtv.model import (IdentityOp, MaskedIdentity, ModelParams,
                          PointwiseVector)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def make_triangle(coords=((0.0, 0.0), (1.0, 0.0), (0.0, 1.0))):
    return Mesh(np.array(coords, dtype=float), np.array([[0, 1, 2]]))


def make_square_pair():
    """Unit square split along the diagonal into two triangles."""
    return build_grid_mesh(2, 2, (0.0, 1.0), (0.0, 1.0))


def smooth_image(n1, n2=None, seed=0):
    """Generated test image: band-limited waves plus a few blobs."""
    n2 = n1 if n2 is None else n2
    g = np.random.default_rng(seed)
    X, Y = np.meshgrid(np.arange(1, n1 + 1), np.arange(1, n2 + 1),
                       indexing="ij")
    img = 0.5 + 0.22 * np.sin(2 * np.pi * X / (0.43 * n1)) \
        * np.cos(2 * np.pi * Y / (0.31 * n2))
    for _ in range(3):
        cx, cy = g.uniform(0.2, 0.8, 2) * (n1, n2)
        r = g.uniform(0.05, 0.15) * n1
        img = img + g.uniform(-0.25, 0.25) * np.exp(
            -((X - cx) ** 2 + (Y - cy) ** 2) / (2 * r * r))
    return np.clip(img, 0.0, 1.0)


def random_p1(mesh, seed=0, lo=0.0, hi=1.0):
    g = np.random.default_rng(seed)
    return FeScalar(mesh, g.uniform(lo, hi, mesh.num_vertices))


def random_instance(regime, seed, nx=6, ny=6):
    """Small solver instance (mesh, params, T, g) of a named regime."""
    g = np.random.default_rng(seed)
    mesh = build_grid_mesh(nx, ny, (1.0, float(2 * nx)), (1.0, float(2 * ny)))
    data = FeScalar(mesh, g.uniform(0.0, 1.0, mesh.num_vertices))
    if regime == "quadratic":
        params = ModelParams(alpha1=0, alpha2=1.0, beta=0, lam=0)
        T = IdentityOp()
    elif regime == "l2tv":
        params = ModelParams(alpha1=0, alpha2=1.0, beta=1e-4,
                             lam=g.uniform(0.05, 0.3), gamma2=1e-2,
                             setting_s="id")
        T = IdentityOp()
    elif regime == "l2tv_grad":
        params = ModelParams(alpha1=0, alpha2=1.0, beta=1e-4,
                             lam=g.uniform(0.05, 0.3), gamma2=1e-2,
                             setting_s="grad")
        T = IdentityOp()
    elif regime == "l1tv":
        params = ModelParams(alpha1=g.uniform(0.2, 1.0), alpha2=1.0,
                             beta=1e-4, lam=g.uniform(0.05, 0.3),
                             gamma1=1e-3, gamma2=1e-2, setting_s="id")
        T = IdentityOp()
    elif regime == "l1tv_smooth":
        # gamma1 above the data range keeps the Huber data term in its
        # quadratic branch, where the vertex-enforced optimality system is
        # the exact first-order system of the quadrature energy.
        params = ModelParams(alpha1=g.uniform(0.3, 1.0), alpha2=1.0,
                             beta=1e-4, lam=g.uniform(0.05, 0.2),
                             gamma1=3.0, gamma2=5e-2, setting_s="id")
        T = IdentityOp()
    elif regime == "masked":
        params = ModelParams(alpha1=0, alpha2=10.0, beta=1e-4,
                             lam=g.uniform(0.05, 0.3), gamma2=1e-2,
                             setting_s="id")
        # integer-spaced vertices keep quadrature points dyadic, so the
        # nearest-pixel mask lookup is reproducible bit for bit
        n1, n2 = 2 * nx - 1, 2 * ny - 1
        mesh = build_grid_mesh(nx, ny, (1.0, float(n1)), (1.0, float(n2)))
        data = FeScalar(mesh, g.uniform(0.0, 1.0, mesh.num_vertices))
        keep = np.ones((n1, n2), dtype=bool)
        keep[n1 // 3: n1 // 2, :] = False
        T = MaskedIdentity(keep)
    elif regime == "flowlike":
        params = ModelParams(alpha1=5.0, alpha2=0.0, beta=1e-5, lam=0.5,
                             gamma1=1e-3, gamma2=1e-3, setting_s="grad")
        w1 = DgScalar(mesh, np.repeat(
            g.uniform(-0.5, 0.5, (mesh.num_cells, 1)), 3, axis=1))
        w2 = DgScalar(mesh, np.repeat(
            g.uniform(-0.5, 0.5, (mesh.num_cells, 1)), 3, axis=1))
        T = PointwiseVector(w1, w2)
        data = FeScalar(mesh, g.uniform(-0.2, 0.2, mesh.num_vertices))
    else:
        raise ValueError(regime)
    return mesh, params, T, data
