"""Differentiable tile rasterizer for oriented-disk splats.

Forward pass composites color / center-depth / ray-aligned-normal /
accumulation front to back per 16x16 tile, checkpointing the compositing
state (transmittance + partial sums) every 32 splats per pixel.  The full
backward walks every pixel; the sampled backward restores the checkpoints
and walks splats in groups of 32 over only the highest-loss pixels of each
tile, so its work scales with the sampled pixel count.

Splat weight along a ray: the ray is intersected exactly with the disk
plane; in disk-local unit coordinates p the weight is

    f = alpha * exp(-0.5 |p|^2)

windowed to exactly zero outside the 3-sigma extent (|p|^2 >= 9).  The
window is C^2 (quintic taper on |p|^2 in (7, 9)) so that every gradient is
finite-difference checkable; below |p|^2 = 7 the weight is exactly the
bare exponential.

All kernels write per-tile-owned slots only, and reductions run in fixed
order, so outputs are bitwise reproducible regardless of thread schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from ..geometry import SE3, PinholeCamera, quat_to_matrix

TILE = 16
GROUP = 32
_RHO2_CUT = 9.0          # hard zero beyond 3 sigma
_RHO2_TAPER = 7.0        # bare exponential below this
_F_MAX = 1.0 - 1e-6      # compositing clamp keeps transmittance positive
_DENOM_EPS = 1e-12


class StaleContextError(RuntimeError):
    """Backward called without the forward buffers it needs."""


@dataclass
class RasterConfig:
    tile: int = TILE
    znear: float = 0.01
    deterministic: bool = True   # fixed reduction order (always honored)


@dataclass
class RenderOutput:
    color: np.ndarray            # (H,W,3)
    depth: np.ndarray            # (H,W)
    normal: np.ndarray           # (H,W,3) camera frame, ray-aligned
    accum: np.ndarray            # (H,W) in [0,1]


@dataclass
class RenderContext:
    """Forward results plus every buffer the backward passes need."""
    out: RenderOutput
    camera: PinholeCamera
    pose: SE3                    # camera-to-world
    n_gaussians: int
    # per-gaussian camera-frame quantities
    mu_c: np.ndarray
    tu_c: np.ndarray
    tv_c: np.ndarray
    tn_c: np.ndarray
    inv_s: np.ndarray
    alpha: np.ndarray
    color: np.ndarray
    # world-frame quantities for the parameter chain
    mu_w: np.ndarray
    axes_w: np.ndarray           # (N,3,3) columns tu,tv,tn
    quat: np.ndarray
    scale: np.ndarray
    R_cw: np.ndarray
    # tile binning
    tile_ptr: np.ndarray
    tile_gauss: np.ndarray
    ntx: int
    nty: int
    # checkpoints
    ckpt_ptr: np.ndarray
    ckpt: np.ndarray | None
    config: RasterConfig = field(default_factory=RasterConfig)


@dataclass
class GaussianGrads:
    mu: np.ndarray               # (N,3)
    quat: np.ndarray             # (N,4) tangent to the unit sphere
    scale: np.ndarray            # (N,2)
    alpha: np.ndarray            # (N,)
    color: np.ndarray            # (N,3)
    pose: np.ndarray | None = None   # (6,) left perturbation of camera-to-world


# ---------------------------------------------------------------------------
# scalar reference weight (public op; also the oracle the kernels must match)
# ---------------------------------------------------------------------------

def _taper(rho2):
    if rho2 <= _RHO2_TAPER:
        return 1.0
    if rho2 >= _RHO2_CUT:
        return 0.0
    t = (_RHO2_CUT - rho2) / (_RHO2_CUT - _RHO2_TAPER)
    return t * t * t * (10.0 + t * (-15.0 + 6.0 * t))


def splat_weight(gaussian, pixel, camera, pose):
    """Weight of one splat along the ray of a (float) pixel coordinate.

    `gaussian` is a Gaussian2D (or anything with mu/quat/scale/alpha);
    `pose` is the camera-to-world SE3.  Returns f in [0, alpha]; 0 when
    the ray misses the disk's 3-sigma extent or the disk is behind the
    camera.
    """
    R_cw = pose.R.T
    t_wc = pose.t
    mu_c = R_cw @ (np.asarray(gaussian.mu, dtype=np.float64) - t_wc)
    if mu_c[2] <= 0:
        return 0.0
    Rl = quat_to_matrix(gaussian.quat)
    tu = R_cw @ Rl[:, 0]
    tv = R_cw @ Rl[:, 1]
    tn = R_cw @ Rl[:, 2]
    d = np.array([(pixel[0] - camera.cx) / camera.fx,
                  (pixel[1] - camera.cy) / camera.fy, 1.0])
    denom = tn @ d
    if abs(denom) < _DENOM_EPS:
        return 0.0
    ts = (tn @ mu_c) / denom
    if ts <= 0:
        return 0.0
    delta = ts * d - mu_c
    u = (delta @ tu) / gaussian.scale[0]
    v = (delta @ tv) / gaussian.scale[1]
    rho2 = u * u + v * v
    if rho2 >= _RHO2_CUT:
        return 0.0
    return float(gaussian.alpha) * math.exp(-0.5 * rho2) * _taper(rho2)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _pair_weight(dx, dy, mux, muy, muz, tux, tuy, tuz, tvx, tvy, tvz,
                 tnx, tny, tnz, isu, isv, alpha):
    """Weight of one (pixel-ray, splat) pair plus intermediates.

    Returns (f, u, v, ts, denom, gexp, taper, dtaper) with f = 0 for
    misses; gexp = exp(-rho2/2), taper and its derivative w.r.t. rho2.
    """
    denom = tnx * dx + tny * dy + tnz
    if denom < _DENOM_EPS and denom > -_DENOM_EPS:
        return 0.0, 0.0, 0.0, 0.0, denom, 0.0, 0.0, 0.0
    ts = (tnx * mux + tny * muy + tnz * muz) / denom
    if ts <= 0.0:
        return 0.0, 0.0, 0.0, ts, denom, 0.0, 0.0, 0.0
    ex = ts * dx - mux
    ey = ts * dy - muy
    ez = ts - muz
    u = (ex * tux + ey * tuy + ez * tuz) * isu
    v = (ex * tvx + ey * tvy + ez * tvz) * isv
    rho2 = u * u + v * v
    if rho2 >= _RHO2_CUT:
        return 0.0, u, v, ts, denom, 0.0, 0.0, 0.0
    gexp = math.exp(-0.5 * rho2)
    if rho2 <= _RHO2_TAPER:
        return alpha * gexp, u, v, ts, denom, gexp, 1.0, 0.0
    t = (_RHO2_CUT - rho2) * 0.5
    tap = t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
    dtap = -0.5 * (t * t * (30.0 + t * (-60.0 + 30.0 * t)))
    return alpha * gexp * tap, u, v, ts, denom, gexp, tap, dtap


@njit(cache=True, parallel=True)
def _forward_kernel(W, H, fx, fy, cx, cy,
                    tile_ptr, tile_gauss, ntx, nty,
                    mu_c, tu_c, tv_c, tn_c, inv_s, alpha, color,
                    out_C, out_D, out_N, out_A,
                    ckpt_ptr, ckpt, store_ckpt):
    n_tiles = ntx * nty
    for t in prange(n_tiles):
        ty = t // ntx
        tx = t - ty * ntx
        x0 = tx * TILE
        y0 = ty * TILE
        x1 = min(x0 + TILE, W)
        y1 = min(y0 + TILE, H)
        lo = tile_ptr[t]
        hi = tile_ptr[t + 1]
        if hi == lo:
            continue
        cbase = ckpt_ptr[t]
        for iy in range(y0, y1):
            dy = (iy - cy) / fy
            for ix in range(x0, x1):
                dx = (ix - cx) / fx
                li = (iy - y0) * TILE + (ix - x0)
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dsum = 0.0
                n0 = 0.0
                n1 = 0.0
                n2 = 0.0
                asum = 0.0
                for k in range(lo, hi):
                    kk = k - lo
                    if store_ckpt and kk % GROUP == 0:
                        ci = cbase + (kk // GROUP) * (TILE * TILE) + li
                        ckpt[ci, 0] = T
                        ckpt[ci, 1] = c0
                        ckpt[ci, 2] = c1
                        ckpt[ci, 3] = c2
                        ckpt[ci, 4] = dsum
                        ckpt[ci, 5] = n0
                        ckpt[ci, 6] = n1
                        ckpt[ci, 7] = n2
                        ckpt[ci, 8] = asum
                    g = tile_gauss[k]
                    f, u, v, ts, denom, gexp, tap, dtap = _pair_weight(
                        dx, dy, mu_c[g, 0], mu_c[g, 1], mu_c[g, 2],
                        tu_c[g, 0], tu_c[g, 1], tu_c[g, 2],
                        tv_c[g, 0], tv_c[g, 1], tv_c[g, 2],
                        tn_c[g, 0], tn_c[g, 1], tn_c[g, 2],
                        inv_s[g, 0], inv_s[g, 1], alpha[g])
                    if f <= 0.0:
                        continue
                    if f > _F_MAX:
                        f = _F_MAX
                    w = f * T
                    c0 += w * color[g, 0]
                    c1 += w * color[g, 1]
                    c2 += w * color[g, 2]
                    dsum += w * mu_c[g, 2]
                    sgn = 1.0 if denom >= 0.0 else -1.0
                    n0 += w * sgn * tn_c[g, 0]
                    n1 += w * sgn * tn_c[g, 1]
                    n2 += w * sgn * tn_c[g, 2]
                    asum += w
                    T *= (1.0 - f)
                out_C[iy, ix, 0] = c0
                out_C[iy, ix, 1] = c1
                out_C[iy, ix, 2] = c2
                out_D[iy, ix] = dsum
                out_N[iy, ix, 0] = n0
                out_N[iy, ix, 1] = n1
                out_N[iy, ix, 2] = n2
                out_A[iy, ix] = asum


@njit(cache=True)
def _pair_backward(dx, dy, g, mu_c, tu_c, tv_c, tn_c, inv_s, alpha, color,
                   T, p0, p1, p2, p3, p4, p5, p6, p7,
                   tC0, tC1, tC2, tD, tN0, tN1, tN2, tA,
                   gC0, gC1, gC2, gD, gN0, gN1, gN2, gA,
                   acc, slot):
    """One (pixel, splat) backward step.

    p0..p7: running prefix sums (C3, D, N3, A); t*: per-pixel totals;
    g*: per-pixel loss gradients.  Accumulates 17 gradient components
    into acc[slot] and returns updated (T, p0..p7).
    """
    f, u, v, ts, denom, gexp, tap, dtap = _pair_weight(
        dx, dy, mu_c[g, 0], mu_c[g, 1], mu_c[g, 2],
        tu_c[g, 0], tu_c[g, 1], tu_c[g, 2],
        tv_c[g, 0], tv_c[g, 1], tv_c[g, 2],
        tn_c[g, 0], tn_c[g, 1], tn_c[g, 2],
        inv_s[g, 0], inv_s[g, 1], alpha[g])
    if f <= 0.0:
        return T, p0, p1, p2, p3, p4, p5, p6, p7
    clamped = f > _F_MAX
    if clamped:
        f = _F_MAX
    w = f * T
    sgn = 1.0 if denom >= 0.0 else -1.0
    zc = mu_c[g, 2]
    q0 = color[g, 0]
    q1 = color[g, 1]
    q2 = color[g, 2]
    q4 = sgn * tn_c[g, 0]
    q5 = sgn * tn_c[g, 1]
    q6 = sgn * tn_c[g, 2]
    # direct (through-w) channel gradients
    acc[slot, 0] += w * gC0
    acc[slot, 1] += w * gC1
    acc[slot, 2] += w * gC2
    # depth channel reaches mu_c z; normal channel reaches tn_c
    acc[slot, 7] += w * gD          # -> g_mu_c z  (index 5..7 = mu_c)
    acc[slot, 14] += w * sgn * gN0  # -> g_tn_c    (index 14..16)
    acc[slot, 15] += w * sgn * gN1
    acc[slot, 16] += w * sgn * gN2
    # prefix update (includes this splat)
    p0 += w * q0
    p1 += w * q1
    p2 += w * q2
    p3 += w * zc
    p4 += w * q4
    p5 += w * q5
    p6 += w * q6
    p7 += w
    if not clamped:
        one_mf = 1.0 - f
        inv_omf = 1.0 / one_mf
        dLdf = (gC0 * (T * q0 - (tC0 - p0) * inv_omf)
                + gC1 * (T * q1 - (tC1 - p1) * inv_omf)
                + gC2 * (T * q2 - (tC2 - p2) * inv_omf)
                + gD * (T * zc - (tD - p3) * inv_omf)
                + gN0 * (T * q4 - (tN0 - p4) * inv_omf)
                + gN1 * (T * q5 - (tN1 - p5) * inv_omf)
                + gN2 * (T * q6 - (tN2 - p6) * inv_omf)
                + gA * (T - (tA - p7) * inv_omf))
        acc[slot, 3] += dLdf * gexp * tap                       # d/dalpha
        dLdrho2 = dLdf * alpha[g] * gexp * (-0.5 * tap + dtap)
        isu = inv_s[g, 0]
        isv = inv_s[g, 1]
        # d rho2 / d delta
        gd0 = 2.0 * (u * isu * tu_c[g, 0] + v * isv * tv_c[g, 0])
        gd1 = 2.0 * (u * isu * tu_c[g, 1] + v * isv * tv_c[g, 1])
        gd2 = 2.0 * (u * isu * tu_c[g, 2] + v * isv * tv_c[g, 2])
        gdd = gd0 * dx + gd1 * dy + gd2     # (d rho2/d delta) . d
        inv_den = 1.0 / denom
        ex = ts * dx - mu_c[g, 0]
        ey = ts * dy - mu_c[g, 1]
        ez = ts - mu_c[g, 2]
        # mu_c: delta = ts(mu)*d - mu;  dts/dmu = tn/denom
        cmu = dLdrho2 * gdd * inv_den
        acc[slot, 5] += cmu * tn_c[g, 0] - dLdrho2 * gd0
        acc[slot, 6] += cmu * tn_c[g, 1] - dLdrho2 * gd1
        acc[slot, 7] += cmu * tn_c[g, 2] - dLdrho2 * gd2
        # tn (geometry): dts/dtn = -delta/denom
        ctn = -dLdrho2 * gdd * inv_den
        acc[slot, 14] += ctn * ex
        acc[slot, 15] += ctn * ey
        acc[slot, 16] += ctn * ez
        # tu, tv
        cu = dLdrho2 * 2.0 * u * isu
        cv = dLdrho2 * 2.0 * v * isv
        acc[slot, 8] += cu * ex
        acc[slot, 9] += cu * ey
        acc[slot, 10] += cu * ez
        acc[slot, 11] += cv * ex
        acc[slot, 12] += cv * ey
        acc[slot, 13] += cv * ez
        # scales: d rho2/d s_u = -2 u^2 / s_u
        acc[slot, 4] += dLdrho2 * (-2.0 * u * u * isu)
        acc[slot, 17] += dLdrho2 * (-2.0 * v * v * isv)
    T *= (1.0 - f)
    return T, p0, p1, p2, p3, p4, p5, p6, p7


@njit(cache=True, parallel=True)
def _backward_full_kernel(W, H, fx, fy, cx, cy,
                          tile_ptr, tile_gauss, ntx, nty,
                          mu_c, tu_c, tv_c, tn_c, inv_s, alpha, color,
                          tot_C, tot_D, tot_N, tot_A,
                          gr_C, gr_D, gr_N, gr_A, acc):
    n_tiles = ntx * nty
    for t in prange(n_tiles):
        ty = t // ntx
        tx = t - ty * ntx
        x0 = tx * TILE
        y0 = ty * TILE
        x1 = min(x0 + TILE, W)
        y1 = min(y0 + TILE, H)
        lo = tile_ptr[t]
        hi = tile_ptr[t + 1]
        if hi == lo:
            continue
        for iy in range(y0, y1):
            dyr = (iy - cy) / fy
            for ix in range(x0, x1):
                dxr = (ix - cx) / fx
                gC0 = gr_C[iy, ix, 0]
                gC1 = gr_C[iy, ix, 1]
                gC2 = gr_C[iy, ix, 2]
                gD = gr_D[iy, ix]
                gN0 = gr_N[iy, ix, 0]
                gN1 = gr_N[iy, ix, 1]
                gN2 = gr_N[iy, ix, 2]
                gA = gr_A[iy, ix]
                if (gC0 == 0.0 and gC1 == 0.0 and gC2 == 0.0 and gD == 0.0
                        and gN0 == 0.0 and gN1 == 0.0 and gN2 == 0.0 and gA == 0.0):
                    continue
                T = 1.0
                p0 = 0.0
                p1 = 0.0
                p2 = 0.0
                p3 = 0.0
                p4 = 0.0
                p5 = 0.0
                p6 = 0.0
                p7 = 0.0
                for k in range(lo, hi):
                    T, p0, p1, p2, p3, p4, p5, p6, p7 = _pair_backward(
                        dxr, dyr, tile_gauss[k], mu_c, tu_c, tv_c, tn_c,
                        inv_s, alpha, color,
                        T, p0, p1, p2, p3, p4, p5, p6, p7,
                        tot_C[iy, ix, 0], tot_C[iy, ix, 1], tot_C[iy, ix, 2],
                        tot_D[iy, ix],
                        tot_N[iy, ix, 0], tot_N[iy, ix, 1], tot_N[iy, ix, 2],
                        tot_A[iy, ix],
                        gC0, gC1, gC2, gD, gN0, gN1, gN2, gA,
                        acc, k)


@njit(cache=True, parallel=True)
def _backward_sampled_kernel(W, H, fx, fy, cx, cy,
                             tile_ptr, tile_gauss, ntx, nty,
                             mu_c, tu_c, tv_c, tn_c, inv_s, alpha, color,
                             tot_C, tot_D, tot_N, tot_A,
                             gr_C, gr_D, gr_N, gr_A,
                             samp_ptr, samp_pix, ckpt_ptr, ckpt, acc):
    n_tiles = ntx * nty
    for t in prange(n_tiles):
        ty = t // ntx
        tx = t - ty * ntx
        x0 = tx * TILE
        y0 = ty * TILE
        lo = tile_ptr[t]
        hi = tile_ptr[t + 1]
        if hi == lo:
            continue
        slo = samp_ptr[t]
        shi = samp_ptr[t + 1]
        if shi == slo:
            continue
        cbase = ckpt_ptr[t]
        n_g = hi - lo
        n_groups = (n_g + GROUP - 1) // GROUP
        for grp in range(n_groups):
            k0 = grp * GROUP
            k1 = min(k0 + GROUP, n_g)
            for s in range(slo, shi):
                sp = samp_pix[s]
                iy = sp // W
                ix = sp - iy * W
                gC0 = gr_C[iy, ix, 0]
                gC1 = gr_C[iy, ix, 1]
                gC2 = gr_C[iy, ix, 2]
                gD = gr_D[iy, ix]
                gN0 = gr_N[iy, ix, 0]
                gN1 = gr_N[iy, ix, 1]
                gN2 = gr_N[iy, ix, 2]
                gA = gr_A[iy, ix]
                if (gC0 == 0.0 and gC1 == 0.0 and gC2 == 0.0 and gD == 0.0
                        and gN0 == 0.0 and gN1 == 0.0 and gN2 == 0.0 and gA == 0.0):
                    continue
                li = (iy - y0) * TILE + (ix - x0)
                ci = cbase + grp * (TILE * TILE) + li
                T = ckpt[ci, 0]
                p0 = ckpt[ci, 1]
                p1 = ckpt[ci, 2]
                p2 = ckpt[ci, 3]
                p3 = ckpt[ci, 4]
                p4 = ckpt[ci, 5]
                p5 = ckpt[ci, 6]
                p6 = ckpt[ci, 7]
                p7 = ckpt[ci, 8]
                dyr = (iy - cy) / fy
                dxr = (ix - cx) / fx
                for k in range(k0, k1):
                    T, p0, p1, p2, p3, p4, p5, p6, p7 = _pair_backward(
                        dxr, dyr, tile_gauss[lo + k], mu_c, tu_c, tv_c, tn_c,
                        inv_s, alpha, color,
                        T, p0, p1, p2, p3, p4, p5, p6, p7,
                        tot_C[iy, ix, 0], tot_C[iy, ix, 1], tot_C[iy, ix, 2],
                        tot_D[iy, ix],
                        tot_N[iy, ix, 0], tot_N[iy, ix, 1], tot_N[iy, ix, 2],
                        tot_A[iy, ix],
                        gC0, gC1, gC2, gD, gN0, gN1, gN2, gA,
                        acc, lo + k)


@njit(cache=True, parallel=True)
def _stats_kernel(W, H, fx, fy, cx, cy,
                  tile_ptr, tile_gauss, ntx, nty,
                  mu_c, tu_c, tv_c, tn_c, inv_s, alpha, color,
                  m1, m2, stats):
    """Per (tile, slot): sum of compositing weights, sum w*m1, sum w*m2."""
    n_tiles = ntx * nty
    for t in prange(n_tiles):
        ty = t // ntx
        tx = t - ty * ntx
        x0 = tx * TILE
        y0 = ty * TILE
        x1 = min(x0 + TILE, W)
        y1 = min(y0 + TILE, H)
        lo = tile_ptr[t]
        hi = tile_ptr[t + 1]
        if hi == lo:
            continue
        for iy in range(y0, y1):
            dyr = (iy - cy) / fy
            for ix in range(x0, x1):
                dxr = (ix - cx) / fx
                w1 = m1[iy, ix]
                w2 = m2[iy, ix]
                T = 1.0
                for k in range(lo, hi):
                    g = tile_gauss[k]
                    f, u, v, ts, denom, gexp, tap, dtap = _pair_weight(
                        dxr, dyr, mu_c[g, 0], mu_c[g, 1], mu_c[g, 2],
                        tu_c[g, 0], tu_c[g, 1], tu_c[g, 2],
                        tv_c[g, 0], tv_c[g, 1], tv_c[g, 2],
                        tn_c[g, 0], tn_c[g, 1], tn_c[g, 2],
                        inv_s[g, 0], inv_s[g, 1], alpha[g])
                    if f <= 0.0:
                        continue
                    if f > _F_MAX:
                        f = _F_MAX
                    w = f * T
                    stats[k, 0] += w
                    stats[k, 1] += w * w1
                    stats[k, 2] += w * w2
                    T *= (1.0 - f)


# ---------------------------------------------------------------------------
# host-side orchestration
# ---------------------------------------------------------------------------

def _prepare(store, camera, pose, config):
    """Camera-frame quantities + conservative tile binning (depth sorted)."""
    n = len(store)
    R_wc = pose.R
    R_cw = R_wc.T
    mu_w = store.mu
    mu_c = (mu_w - pose.t) @ R_cw.T

    q = store.quat
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / np.maximum(norms, 1e-30)
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    axes = np.empty((n, 3, 3))
    axes[:, 0, 0] = 1 - 2 * (y * y + z * z)
    axes[:, 1, 0] = 2 * (x * y + w * z)
    axes[:, 2, 0] = 2 * (x * z - w * y)
    axes[:, 0, 1] = 2 * (x * y - w * z)
    axes[:, 1, 1] = 1 - 2 * (x * x + z * z)
    axes[:, 2, 1] = 2 * (y * z + w * x)
    axes[:, 0, 2] = 2 * (x * z + w * y)
    axes[:, 1, 2] = 2 * (y * z - w * x)
    axes[:, 2, 2] = 1 - 2 * (x * x + y * y)

    tu_c = axes[:, :, 0] @ R_cw.T
    tv_c = axes[:, :, 1] @ R_cw.T
    tn_c = axes[:, :, 2] @ R_cw.T

    zc = mu_c[:, 2]
    vis = zc > config.znear

    s3 = 3.0 * store.scale.max(axis=1)
    # conservative pixel-extent bound via interval arithmetic on x/z, y/z
    zlo = np.maximum(zc - s3, 0.25 * config.znear)
    zhi = zc + s3
    u0 = camera.fx * mu_c[:, 0] / np.where(vis, zc, 1.0) + camera.cx
    v0 = camera.fy * mu_c[:, 1] / np.where(vis, zc, 1.0) + camera.cy
    rad_u = np.zeros(n)
    rad_v = np.zeros(n)
    for xs in (mu_c[:, 0] - s3, mu_c[:, 0] + s3):
        for zs in (zlo, zhi):
            rad_u = np.maximum(rad_u, np.abs(camera.fx * xs / zs + camera.cx - u0))
    for ys in (mu_c[:, 1] - s3, mu_c[:, 1] + s3):
        for zs in (zlo, zhi):
            rad_v = np.maximum(rad_v, np.abs(camera.fy * ys / zs + camera.cy - v0))
    rad_u += 1.0
    rad_v += 1.0

    ntx = (camera.width + TILE - 1) // TILE
    nty = (camera.height + TILE - 1) // TILE
    tx0 = np.clip(np.floor((u0 - rad_u) / TILE), 0, ntx - 1).astype(np.int64)
    tx1 = np.clip(np.floor((u0 + rad_u) / TILE), 0, ntx - 1).astype(np.int64)
    ty0 = np.clip(np.floor((v0 - rad_v) / TILE), 0, nty - 1).astype(np.int64)
    ty1 = np.clip(np.floor((v0 + rad_v) / TILE), 0, nty - 1).astype(np.int64)
    off_img = (u0 + rad_u < 0) | (u0 - rad_u > camera.width - 1) | \
              (v0 + rad_v < 0) | (v0 - rad_v > camera.height - 1)
    vis = vis & ~off_img

    idx = np.nonzero(vis)[0]
    if len(idx) == 0:
        tile_ptr = np.zeros(ntx * nty + 1, dtype=np.int64)
        tile_gauss = np.zeros(0, dtype=np.int64)
    else:
        wspan = tx1[idx] - tx0[idx] + 1
        hspan = ty1[idx] - ty0[idx] + 1
        counts = wspan * hspan
        total = int(counts.sum())
        pair_gid = np.repeat(idx, counts)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        within = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
        wrep = np.repeat(wspan, counts)
        dxs = within % wrep
        dys = within // wrep
        pair_tile = ((np.repeat(ty0[idx], counts) + dys) * ntx
                     + np.repeat(tx0[idx], counts) + dxs)
        order = np.lexsort((pair_gid, zc[pair_gid], pair_tile))
        pair_tile = pair_tile[order]
        tile_gauss = pair_gid[order]
        tile_ptr = np.zeros(ntx * nty + 1, dtype=np.int64)
        np.add.at(tile_ptr, pair_tile + 1, 1)
        np.cumsum(tile_ptr, out=tile_ptr)

    inv_s = 1.0 / np.maximum(store.scale, 1e-30)
    return dict(mu_c=np.ascontiguousarray(mu_c), tu_c=np.ascontiguousarray(tu_c),
                tv_c=np.ascontiguousarray(tv_c), tn_c=np.ascontiguousarray(tn_c),
                inv_s=np.ascontiguousarray(inv_s),
                alpha=np.ascontiguousarray(np.clip(store.alpha, 0.0, 1.0)),
                color=np.ascontiguousarray(store.color),
                mu_w=mu_w, axes_w=axes, quat=qn, scale=store.scale.copy(),
                R_cw=R_cw, tile_ptr=tile_ptr, tile_gauss=tile_gauss,
                ntx=ntx, nty=nty)


def rasterize_forward(store, camera, pose, config=None, store_checkpoints=True):
    """Render a store snapshot; returns a RenderContext whose .out carries
    color/depth/normal/accumulation images."""
    config = config or RasterConfig()
    pre = _prepare(store, camera, pose, config)
    H, W = camera.height, camera.width
    out = RenderOutput(np.zeros((H, W, 3)), np.zeros((H, W)),
                       np.zeros((H, W, 3)), np.zeros((H, W)))
    ntx, nty = pre["ntx"], pre["nty"]
    tile_ptr = pre["tile_ptr"]
    n_tiles = ntx * nty
    lens = tile_ptr[1:] - tile_ptr[:-1]
    n_groups = (lens + GROUP - 1) // GROUP
    ckpt_ptr = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(n_groups * (TILE * TILE), out=ckpt_ptr[1:])
    if store_checkpoints:
        ckpt = np.zeros((int(ckpt_ptr[-1]), 9))
    else:
        ckpt = np.zeros((1, 9))
    _forward_kernel(W, H, camera.fx, camera.fy, camera.cx, camera.cy,
                    tile_ptr, pre["tile_gauss"], ntx, nty,
                    pre["mu_c"], pre["tu_c"], pre["tv_c"], pre["tn_c"],
                    pre["inv_s"], pre["alpha"], pre["color"],
                    out.color, out.depth, out.normal, out.accum,
                    ckpt_ptr, ckpt, store_checkpoints)
    return RenderContext(out=out, camera=camera, pose=pose, n_gaussians=len(store),
                         ckpt_ptr=ckpt_ptr, ckpt=ckpt if store_checkpoints else None,
                         config=config, **pre)


def _reduce_grads(ctx, acc, want_pose):
    """Fixed-order reduction of per-slot gradients + chain to parameters."""
    n = ctx.n_gaussians
    ids = ctx.tile_gauss
    per = np.zeros((n, 18))
    for j in range(18):
        per[:, j] = np.bincount(ids, weights=acc[:, j], minlength=n)
    g_color = per[:, 0:3]
    g_alpha = per[:, 3]
    g_su = per[:, 4]
    g_sv = per[:, 17]
    g_mu_c = per[:, 5:8]
    g_tu_c = per[:, 8:11]
    g_tv_c = per[:, 11:14]
    g_tn_c = per[:, 14:17]

    R_cw = ctx.R_cw
    g_mu = g_mu_c @ R_cw
    g_tu_w = g_tu_c @ R_cw
    g_tv_w = g_tv_c @ R_cw
    g_tn_w = g_tn_c @ R_cw

    # chain world-frame axis gradients to the (normalized) quaternion
    qn = ctx.quat
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    # dR/dq for R(q) with unit q; axes are columns of R
    zero = np.zeros_like(w)
    dR = np.empty((4, 3, 3, len(w)))
    dR[0] = np.array([[zero, -2 * z, 2 * y], [2 * z, zero, -2 * x], [-2 * y, 2 * x, zero]])
    dR[1] = np.array([[zero, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]])
    dR[2] = np.array([[-4 * y, 2 * x, 2 * w], [2 * x, zero, 2 * z], [-2 * w, 2 * z, -4 * y]])
    dR[3] = np.array([[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, zero]])
    g_R = np.stack([g_tu_w, g_tv_w, g_tn_w], axis=2)   # (N,3,3) columns
    g_q_raw = np.einsum("qrcn,nrc->nq", dR, g_R)
    # project out the norm direction (renderer normalizes the quaternion)
    g_quat = g_q_raw - (np.einsum("nq,nq->n", g_q_raw, qn))[:, None] * qn

    pose_grad = None
    if want_pose:
        # left perturbation exp(eta) * pose with tangent eta = (w, v):
        # dX_c = -R_cw (w x X_w + v), so dL/dw = -sum X_w x g_w per chain.
        gw = g_mu  # camera-frame grads already mapped to world frame above
        g_rot = -np.cross(ctx.mu_w, gw).sum(axis=0)
        g_rot -= np.cross(ctx.axes_w[:, :, 0], g_tu_w).sum(axis=0)
        g_rot -= np.cross(ctx.axes_w[:, :, 1], g_tv_w).sum(axis=0)
        g_rot -= np.cross(ctx.axes_w[:, :, 2], g_tn_w).sum(axis=0)
        g_trans = -gw.sum(axis=0)
        pose_grad = np.concatenate([g_rot, g_trans])

    return GaussianGrads(mu=g_mu, quat=g_quat, scale=np.stack([g_su, g_sv], axis=1),
                         alpha=g_alpha, color=g_color, pose=pose_grad)


def rasterize_backward_full(ctx, loss_grads, want_pose=False):
    """Exact gradients of a scalar loss through the compositing.

    loss_grads: (dC (H,W,3), dD (H,W), dN (H,W,3), dA (H,W)).
    """
    if ctx is None or ctx.tile_ptr is None:
        raise StaleContextError("forward context missing")
    dC, dD, dN, dA = loss_grads
    cam = ctx.camera
    acc = np.zeros((len(ctx.tile_gauss), 18))
    _backward_full_kernel(cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy,
                          ctx.tile_ptr, ctx.tile_gauss, ctx.ntx, ctx.nty,
                          ctx.mu_c, ctx.tu_c, ctx.tv_c, ctx.tn_c,
                          ctx.inv_s, ctx.alpha, ctx.color,
                          ctx.out.color, ctx.out.depth, ctx.out.normal, ctx.out.accum,
                          np.ascontiguousarray(dC), np.ascontiguousarray(dD),
                          np.ascontiguousarray(dN), np.ascontiguousarray(dA), acc)
    return _reduce_grads(ctx, acc, want_pose)


def select_sample_pixels(ctx, loss_map, sample_rate):
    """Top ceil(256*r) pixels per tile by per-pixel loss, ties by index."""
    if not (0.0 < sample_rate <= 1.0):
        raise ValueError(f"sample_rate {sample_rate} outside (0, 1]")
    cam = ctx.camera
    W, H = cam.width, cam.height
    ntx, nty = ctx.ntx, ctx.nty
    m_full = int(math.ceil(TILE * TILE * sample_rate))
    ptr = np.zeros(ntx * nty + 1, dtype=np.int64)
    chunks = []
    for t in range(ntx * nty):
        if ctx.tile_ptr[t + 1] == ctx.tile_ptr[t]:
            ptr[t + 1] = ptr[t]
            continue
        ty, tx = divmod(t, ntx)
        x0, y0 = tx * TILE, ty * TILE
        x1, y1 = min(x0 + TILE, W), min(y0 + TILE, H)
        sub = loss_map[y0:y1, x0:x1]
        iy, ix = np.mgrid[y0:y1, x0:x1]
        lin = (iy * W + ix).ravel()
        vals = sub.ravel()
        m = min(m_full, vals.size)
        order = np.lexsort((lin, -vals))[:m]
        sel = np.sort(lin[order])
        chunks.append(sel)
        ptr[t + 1] = ptr[t] + len(sel)
    pix = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    return ptr, pix


def rasterize_backward_sampled(ctx, loss_grads, loss_map, sample_rate=0.5,
                               want_pose=False):
    """Backward over only the highest-loss pixels of each tile.

    Work is organized splat-parallel in groups of 32 with compositing
    state restored from the forward checkpoints; per-work-item iteration
    count is proportional to the sampled pixel count.
    """
    if ctx.ckpt is None:
        raise StaleContextError("forward was run without checkpoints")
    samp_ptr, samp_pix = select_sample_pixels(ctx, loss_map, sample_rate)
    dC, dD, dN, dA = loss_grads
    cam = ctx.camera
    acc = np.zeros((len(ctx.tile_gauss), 18))
    _backward_sampled_kernel(cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy,
                             ctx.tile_ptr, ctx.tile_gauss, ctx.ntx, ctx.nty,
                             ctx.mu_c, ctx.tu_c, ctx.tv_c, ctx.tn_c,
                             ctx.inv_s, ctx.alpha, ctx.color,
                             ctx.out.color, ctx.out.depth, ctx.out.normal,
                             ctx.out.accum,
                             np.ascontiguousarray(dC), np.ascontiguousarray(dD),
                             np.ascontiguousarray(dN), np.ascontiguousarray(dA),
                             samp_ptr, samp_pix, ctx.ckpt_ptr, ctx.ckpt, acc)
    return _reduce_grads(ctx, acc, want_pose)


def per_gaussian_stats(ctx, map1=None, map2=None):
    """Per-splat (sum w, sum w*map1, sum w*map2) over all touched pixels."""
    cam = ctx.camera
    H, W = cam.height, cam.width
    m1 = np.zeros((H, W)) if map1 is None else np.ascontiguousarray(map1, dtype=np.float64)
    m2 = np.zeros((H, W)) if map2 is None else np.ascontiguousarray(map2, dtype=np.float64)
    stats = np.zeros((len(ctx.tile_gauss), 3))
    _stats_kernel(W, H, cam.fx, cam.fy, cam.cx, cam.cy,
                  ctx.tile_ptr, ctx.tile_gauss, ctx.ntx, ctx.nty,
                  ctx.mu_c, ctx.tu_c, ctx.tv_c, ctx.tn_c,
                  ctx.inv_s, ctx.alpha, ctx.color, m1, m2, stats)
    n = ctx.n_gaussians
    out = np.zeros((n, 3))
    for j in range(3):
        out[:, j] = np.bincount(ctx.tile_gauss, weights=stats[:, j], minlength=n)
    return out
