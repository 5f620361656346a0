"""Image and flow quality metrics: PSNR, SSIM, endpoint/angular errors."""

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
FLOW_INVALID = 1e9     # ground-truth values above this mark unknown flow


def psnr(u, v):
    """Peak signal-to-noise ratio of two [0,1] images, -10 log10(MSE)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((u - v) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _windowed_mean(img, window):
    sw = np.lib.stride_tricks.sliding_window_view(
        img, window.shape)
    return np.einsum("ijkl,kl->ij", sw, window)


def ssim(u, v):
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Local statistics are taken over fully interior windows and the map is
    averaged globally; constants C1 = 0.01^2, C2 = 0.03^2 for unit dynamic
    range.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError("image shapes differ")
    if min(u.shape) < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    w = _gaussian_window()
    mu1 = _windowed_mean(u, w)
    mu2 = _windowed_mean(v, w)
    s11 = _windowed_mean(u * u, w) - mu1 ** 2
    s22 = _windowed_mean(v * v, w) - mu2 ** 2
    s12 = _windowed_mean(u * v, w) - mu1 * mu2
    num = (2 * mu1 * mu2 + SSIM_C1) * (2 * s12 + SSIM_C2)
    den = (mu1 ** 2 + mu2 ** 2 + SSIM_C1) * (s11 + s22 + SSIM_C2)
    return float(np.mean(num / den))


def flow_errors(u_est, u_gt, valid=None):
    """Endpoint and angular error statistics over valid pixels.

    The angular error is the angle between the homogeneous extensions
    (u, v, 1) of estimate and ground truth; pixels with ground-truth
    magnitudes above FLOW_INVALID (or excluded by ``valid``) are ignored.

    Returns a dict with ee_mean, ee_std, ae_mean, ae_std (population
    standard deviations).
    """
    u_est = np.asarray(u_est, dtype=float)
    u_gt = np.asarray(u_gt, dtype=float)
    if u_est.shape != u_gt.shape or u_est.shape[-1] != 2:
        raise ValueError("flow fields must share an (n1, n2, 2) shape")
    ok = np.all(np.abs(u_gt) < FLOW_INVALID, axis=-1)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    if not np.any(ok):
        raise ValueError("no valid pixels for flow-error statistics")
    e = u_est[ok]
    g = u_gt[ok]
    diff = e - g
    ee = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    num = 1.0 + np.einsum("ij,ij->i", e, g)
    den = np.sqrt(1.0 + np.einsum("ij,ij->i", e, e)) \
        * np.sqrt(1.0 + np.einsum("ij,ij->i", g, g))
    ae = np.arccos(np.clip(num / den, -1.0, 1.0))
    return {"ee_mean": float(ee.mean()), "ee_std": float(ee.std()),
            "ae_mean": float(ae.mean()), "ae_std": float(ae.std())}


def _color_wheel():
    transitions = [(15, (1, 0, 0), (1, 1, 0)),   # RY
                   (6, (1, 1, 0), (0, 1, 0)),    # YG
                   (4, (0, 1, 0), (0, 1, 1)),    # GC
                   (11, (0, 1, 1), (0, 0, 1)),   # CB
                   (13, (0, 0, 1), (1, 0, 1)),   # BM
                   (6, (1, 0, 1), (1, 0, 0))]    # MR
    rows = []
    for n, c0, c1 in transitions:
        t = np.arange(n)[:, None] / n
        rows.append((1 - t) * np.array(c0) + t * np.array(c1))
    return np.vstack(rows)


_WHEEL = _color_wheel()


def flow_to_color(flow, max_norm):
    """Middlebury color-wheel rendering of a flow field.

    Zero flow maps to white; magnitudes are normalized by ``max_norm`` and
    clipped, so flow of that norm is fully saturated.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    flow = np.asarray(flow, dtype=float)
    u = flow[..., 0]
    v = flow[..., 1]
    rad = np.clip(np.hypot(u, v) / max_norm, 0.0, 1.0)
    ncols = _WHEEL.shape[0]
    angle = np.arctan2(-v, -u) / np.pi            # in [-1, 1]
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int) % ncols
    k1 = (k0 + 1) % ncols
    f = (fk - np.floor(fk))[..., None]
    col = (1 - f) * _WHEEL[k0] + f * _WHEEL[k1]
    return 1.0 - rad[..., None] * (1.0 - col)
