"""Training loss for the splat map: blended L1/structural color term,
depth L1, per-pixel normal alignment, and accumulation suppression on
masked-out pixels.  Also exposes the windowed structural-similarity map
(with an analytic input gradient) reused by the metrics and the dynamic
eraser.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
_L1_BLEND = 0.8          # color term = 0.8 * L1 + 0.2 * (1 - SSIM)
_SSIM_BLEND = 0.2


@dataclass
class LossWeights:
    rgb: float = 1.0
    depth: float = 0.5
    norm: float = 0.1
    acc: float = 0.1

    def __post_init__(self):
        if min(self.rgb, self.depth, self.norm, self.acc) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossResult:
    total: float
    rgb: float
    depth: float
    norm: float
    acc: float
    rgb_map: np.ndarray          # (H,W) per-pixel color loss (0 on masked-out)
    grads: tuple                 # (dC, dD, dN, dA) w.r.t. render outputs
    empty_mask: bool = False     # no valid pixel; loss forced to zero


def _gauss_kernel(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (ax / sigma) ** 2)
    k /= k.sum()
    return k


_K1D = _gauss_kernel()


def _win(img):
    """Windowed mean with reflected borders; channels filtered separately."""
    if img.ndim == 2:
        return cv2.sepFilter2D(img, -1, _K1D, _K1D, borderType=cv2.BORDER_REFLECT)
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[..., c] = cv2.sepFilter2D(img[..., c], -1, _K1D, _K1D,
                                      borderType=cv2.BORDER_REFLECT)
    return out


def ssim_map(x, y, with_grad_terms=False):
    """Per-pixel structural similarity (11x11 gaussian window).

    x, y: (H,W) or (H,W,C) float images in [0,1]; multichannel maps are
    averaged over channels.  With with_grad_terms, returns (map, terms)
    where terms allow ssim_backward to form d(sum m*SSIM)/dx.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mx = _win(x)
    my = _win(y)
    mxy = _win(x * y)
    mxx = _win(x * x)
    myy = _win(y * y)
    sxy = mxy - mx * my
    sx = mxx - mx * mx
    sy = myy - my * my
    A1 = 2 * mx * my + _SSIM_C1
    A2 = 2 * sxy + _SSIM_C2
    B1 = mx * mx + my * my + _SSIM_C1
    B2 = sx + sy + _SSIM_C2
    S = (A1 * A2) / (B1 * B2)
    smap = S.mean(axis=2) if S.ndim == 3 else S
    if not with_grad_terms:
        return smap
    return smap, (mx, my, A1, A2, B1, B2, S, y)


def ssim_backward_with_x(x, terms, weight_map):
    """d/dx of sum_p weight_map(p) * SSIM(p) (channel-averaged)."""
    mx, my, A1, A2, B1, B2, S, y = terms
    D = B1 * B2
    if S.ndim == 3:
        m = weight_map[..., None] / S.shape[2]
    else:
        m = weight_map
    c2 = A1 / D
    c1 = A2 / D
    c3 = -S / B1
    c4 = -S / B2
    phi_mu = 2 * my * c1 - 2 * my * c2 + 2 * mx * c3 - 2 * mx * c4
    phi_xx = c4
    phi_xy = 2 * c2
    g = _win(m * phi_mu) + 2 * x * _win(m * phi_xx) + y * _win(m * phi_xy)
    return g


def normals_from_depth(depth, camera, valid=None):
    """Unit normals from a depth image by central differences.

    Returns (normals (H,W,3) camera frame oriented along the viewing ray,
    valid mask).  Border pixels and pixels next to invalid depth are
    marked invalid.
    """
    H, W = depth.shape
    iy, ix = np.mgrid[0:H, 0:W].astype(np.float64)
    X = np.stack([(ix - camera.cx) / camera.fx * depth,
                  (iy - camera.cy) / camera.fy * depth,
                  depth], axis=2)
    dx = np.zeros_like(X)
    dy = np.zeros_like(X)
    dx[:, 1:-1] = (X[:, 2:] - X[:, :-2]) * 0.5
    dy[1:-1, :] = (X[2:, :] - X[:-2, :]) * 0.5
    n = np.cross(dx.reshape(-1, 3), dy.reshape(-1, 3)).reshape(H, W, 3)
    norm = np.linalg.norm(n, axis=2)
    ok = norm > 1e-12
    n[ok] /= norm[ok][:, None]
    # orient along the ray (positive direction aligned with the ray)
    ray = np.stack([(ix - camera.cx) / camera.fx,
                    (iy - camera.cy) / camera.fy,
                    np.ones_like(depth)], axis=2)
    flip = (n * ray).sum(axis=2) < 0
    n[flip] *= -1.0
    good = ok & (depth > 0)
    if valid is not None:
        v = valid & (depth > 0)
        # neighbors must also be valid for the finite differences
        nb = v.copy()
        nb[:, 1:-1] &= v[:, 2:] & v[:, :-2]
        nb[1:-1, :] &= v[2:, :] & v[:-2, :]
        good &= nb
    good[0, :] = good[-1, :] = False
    good[:, 0] = good[:, -1] = False
    return n, good


def compute_loss(render, keyframe, weights, valid_mask=None):
    """Weighted loss of a render against a keyframe.

    render: RenderOutput; keyframe needs .image (H,W,3), .depth (H,W, 0
    where unknown), .depth_valid, .valid, .dynamic; valid_mask overrides
    the keyframe's (valid & ~dynamic).  Returns a LossResult whose grads
    feed the rasterizer backward.  Masked-out pixels (the complement of
    the valid mask) receive accumulation pressure toward zero.
    """
    H, W = render.accum.shape
    img = keyframe.image
    if valid_mask is None:
        valid_mask = keyframe.valid & ~keyframe.dynamic
    valid = valid_mask.astype(bool)
    n_valid = int(valid.sum())
    dC = np.zeros((H, W, 3))
    dD = np.zeros((H, W))
    dN = np.zeros((H, W, 3))
    dA = np.zeros((H, W))
    if n_valid == 0:
        return LossResult(0.0, 0.0, 0.0, 0.0, 0.0, np.zeros((H, W)),
                          (dC, dD, dN, dA), empty_mask=True)

    lam = weights
    # color: blended absolute difference and structural dissimilarity
    diff = render.color - img
    absdiff = np.abs(diff).mean(axis=2)
    smap, sterms = ssim_map(render.color, img, with_grad_terms=True)
    rgb_map = np.where(valid, _L1_BLEND * absdiff + _SSIM_BLEND * (1.0 - smap), 0.0)
    L_rgb = float(rgb_map.sum() / n_valid)
    # dL_rgb/dC
    wv = valid / n_valid
    dC += (_L1_BLEND / 3.0) * np.sign(diff) * wv[..., None]
    dC -= _SSIM_BLEND * ssim_backward_with_x(render.color, sterms, wv)
    dC *= lam.rgb

    # depth: L1 where the keyframe depth is valid
    dvalid = valid & keyframe.depth_valid & (keyframe.depth > 0)
    n_d = int(dvalid.sum())
    if n_d > 0:
        ddiff = render.depth - keyframe.depth
        L_d = float(np.abs(ddiff[dvalid]).sum() / n_d)
        dD += lam.depth * np.sign(ddiff) * dvalid / n_d
    else:
        L_d = 0.0

    # normal: per-pixel sum_i w_i (1 - n_i . nhat) = A - N . nhat
    tnorm, tnvalid = keyframe.normal, keyframe.normal_valid
    nvalid = valid & tnvalid
    n_n = int(nvalid.sum())
    if n_n > 0:
        dot = (render.normal * tnorm).sum(axis=2)
        L_n = float(((render.accum - dot) * nvalid).sum() / n_n)
        dN -= lam.norm * tnorm * (nvalid / n_n)[..., None]
        dA += lam.norm * nvalid / n_n
    else:
        L_n = 0.0

    # accumulation: drive A -> 0 on masked-out pixels
    mask_out = ~valid
    n_m = int(mask_out.sum())
    if n_m > 0:
        L_a = float(render.accum[mask_out].sum() / n_m)
        dA += lam.acc * mask_out / n_m
    else:
        L_a = 0.0

    total = lam.rgb * L_rgb + lam.depth * L_d + lam.norm * L_n + lam.acc * L_a
    return LossResult(total, L_rgb, L_d, L_n, L_a, rgb_map, (dC, dD, dN, dA))
