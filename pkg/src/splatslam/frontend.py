"""Dense bundle adjustment front end.

Poses and per-pixel inverse depths (at 1/8 resolution) are optimized
jointly from dense pixel correspondences by Gauss-Newton: the depth block
is eliminated by a Schur complement, the reduced pose system is solved
with the first pose gauge-fixed, and the depth update is back-substituted.
Per-pixel inverse-depth variance comes from the marginal covariance in its
Cholesky-factored form.

Correspondences come from pluggable providers: a synthetic oracle (exact
flow from known geometry plus configurable noise) or a classical
normalized-cross-correlation block matcher.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np
import scipy.linalg

from .geometry import SE3, PinholeCamera

DOWNSAMPLE = 8


class DbaNumericsError(RuntimeError):
    """Reduced system stayed indefinite after damping retries."""


@dataclass
class CorrespondenceField:
    """Corrected correspondence u* and confidence weights at 1/8 resolution.

    flow_uv[y, x] is the (u, v) position in the target frame (low-res
    pixel units) that source low-res pixel (x, y) maps to; weight is the
    per-pixel confidence used as the diagonal residual weight."""
    src: int
    dst: int
    flow_uv: np.ndarray          # (h, w, 2)
    weight: np.ndarray           # (h, w) >= 0


# ---------------------------------------------------------------------------
# correspondence providers
# ---------------------------------------------------------------------------

class BlockMatchProvider:
    """Classical NCC block matcher at 1/8 resolution.

    Confidence is the match score clamped at 0 (plus a quadratic-fit
    subpixel refinement along x and y).  Textureless regions yield ~zero
    weights.
    """

    def __init__(self, images, patch=7, search=6, min_std=5e-3):
        self._gray = [img.mean(axis=2) if img.ndim == 3 else img for img in images]
        self.patch = patch
        self.search = search
        self.min_std = min_std

    def _lowres(self, idx):
        g = self._gray[idx]
        h, w = g.shape[0] // DOWNSAMPLE, g.shape[1] // DOWNSAMPLE
        return cv2.resize(g, (w, h), interpolation=cv2.INTER_AREA)

    def provide(self, i, j):
        a = self._lowres(i)
        b = self._lowres(j)
        h, w = a.shape
        half = self.patch // 2
        pad = half + self.search
        a_p = np.pad(a, half, mode="reflect")
        b_p = np.pad(b, pad, mode="reflect")
        iy, ix = np.mgrid[0:h, 0:w]
        best = np.full((h, w), -np.inf)
        best_dx = np.zeros((h, w))
        best_dy = np.zeros((h, w))
        # precompute source patches via stride tricks
        from numpy.lib.stride_tricks import sliding_window_view
        A = sliding_window_view(a_p, (self.patch, self.patch))  # (h, w, p, p)
        A = A.reshape(h, w, -1)
        A_mean = A.mean(axis=2, keepdims=True)
        A0 = A - A_mean
        A_std = np.sqrt((A0 ** 2).sum(axis=2))
        scores = {}
        Bfull = sliding_window_view(b_p, (self.patch, self.patch))
        for dy in range(-self.search, self.search + 1):
            for dx in range(-self.search, self.search + 1):
                Bw = Bfull[self.search + dy:self.search + dy + h,
                           self.search + dx:self.search + dx + w].reshape(h, w, -1)
                B0 = Bw - Bw.mean(axis=2, keepdims=True)
                B_std = np.sqrt((B0 ** 2).sum(axis=2))
                denom = np.maximum(A_std * B_std, 1e-12)
                ncc = (A0 * B0).sum(axis=2) / denom
                scores[(dy, dx)] = ncc
                better = ncc > best
                best = np.where(better, ncc, best)
                best_dy = np.where(better, dy, best_dy)
                best_dx = np.where(better, dx, best_dx)
        # subpixel: quadratic fit around the peak where neighbors exist
        sub_dx = np.zeros((h, w))
        sub_dy = np.zeros((h, w))
        for axis, sub in ((1, sub_dx), (0, sub_dy)):
            lo = np.full((h, w), np.nan)
            hi = np.full((h, w), np.nan)
            for (dy, dx), ncc in scores.items():
                off = (dy, dx)
                sel_m = (best_dy == dy + (1 if axis == 0 else 0)) & \
                        (best_dx == dx + (1 if axis == 1 else 0))
                lo[sel_m] = ncc[sel_m]
                sel_p = (best_dy == dy - (1 if axis == 0 else 0)) & \
                        (best_dx == dx - (1 if axis == 1 else 0))
                hi[sel_p] = ncc[sel_p]
            ok = np.isfinite(lo) & np.isfinite(hi)
            denom = lo - 2 * best + hi
            good = ok & (np.abs(denom) > 1e-9)
            sub[good] = (0.5 * (lo - hi) / denom)[good]
            np.clip(sub, -0.5, 0.5, out=sub)
        flow = np.stack([ix + best_dx + sub_dx, iy + best_dy + sub_dy],
                        axis=2).astype(np.float64)
        weight = np.clip(best, 0.0, None)
        weight = np.where(A_std / self.patch > self.min_std, weight, 0.0)
        # saturate borders where the search window was reflected padding
        m = self.search
        weight[:m] = weight[-m:] = 0.0
        weight[:, :m] = weight[:, -m:] = 0.0
        return CorrespondenceField(i, j, flow, weight ** 2)


def provide_correspondences(provider, i, j):
    """Thin dispatch: providers expose provide(i, j) -> CorrespondenceField."""
    return provider.provide(i, j)


# ---------------------------------------------------------------------------
# DBA system
# ---------------------------------------------------------------------------

@dataclass
class DbaSystem:
    n_frames: int
    hw: tuple                    # low-res (h, w)
    B: np.ndarray                # (6N, 6N) pose blocks
    E: np.ndarray                # (6N, N*h*w) pose-depth coupling
    C: np.ndarray                # (N*h*w,) positive diagonal (damped)
    v: np.ndarray                # (6N,)
    z: np.ndarray                # (N*h*w,)
    edges: list = field(default_factory=list)
    cost: float = 0.0
    dropped_edges: list = field(default_factory=list)


def build_dba_system(poses_w2c, inv_depths, fields, camera_lr,
                     huber_px=2.0, c_damping=1e-4, dynamic_masks=None):
    """Gauss-Newton linearization of the weighted reprojection cost.

    poses_w2c: list of SE3 mapping world -> camera; inv_depths: list of
    (h,w) positive arrays; fields: list of CorrespondenceField whose
    src/dst index into the lists.  Analytic Jacobians are taken w.r.t.
    left perturbations of the world-to-camera poses and w.r.t. inverse
    depth.  dynamic_masks (optional, low-res bool per frame) zero the
    weights of masked source pixels.
    """
    N = len(poses_w2c)
    h, w = inv_depths[0].shape
    hw = h * w
    fx, fy, cx, cy = camera_lr.fx, camera_lr.fy, camera_lr.cx, camera_lr.cy
    B = np.zeros((6 * N, 6 * N))
    E = np.zeros((6 * N, N * hw))
    C = np.zeros(N * hw)
    v = np.zeros(6 * N)
    z = np.zeros(N * hw)
    iy, ix = np.mgrid[0:h, 0:w]
    rays = np.stack([(ix - cx) / fx, (iy - cy) / fy, np.ones((h, w))],
                    axis=2).reshape(-1, 3)
    cost = 0.0
    edges = []
    dropped = []
    for fld in fields:
        i, j = fld.src, fld.dst
        wgt = fld.weight.reshape(-1).copy()
        if dynamic_masks is not None and dynamic_masks[i] is not None:
            wgt = np.where(dynamic_masks[i].reshape(-1), 0.0, wgt)
        if wgt.sum() <= 1e-12:
            dropped.append((i, j))
            continue
        edges.append((i, j))
        d = inv_depths[i].reshape(-1)
        Xi = rays / d[:, None]
        T_ij = poses_w2c[j] * poses_w2c[i].inverse()
        R_ij = T_ij.R
        Xj = Xi @ R_ij.T + T_ij.t
        zj = Xj[:, 2]
        front = zj > 1e-6
        zs = np.where(front, zj, 1.0)
        uj = fx * Xj[:, 0] / zs + cx
        vj = fy * Xj[:, 1] / zs + cy
        res = fld.flow_uv.reshape(-1, 2) - np.stack([uj, vj], axis=1)
        wgt = np.where(front, wgt, 0.0)
        rnorm = np.linalg.norm(res, axis=1)
        hub = np.where(rnorm > huber_px, huber_px / np.maximum(rnorm, 1e-12), 1.0)
        wgt = wgt * hub
        cost += float((wgt * (res ** 2).sum(axis=1)).sum())

        # dPi/dXj
        Jp = np.zeros((hw, 2, 3))
        Jp[:, 0, 0] = fx / zs
        Jp[:, 0, 2] = -fx * Xj[:, 0] / zs ** 2
        Jp[:, 1, 1] = fy / zs
        Jp[:, 1, 2] = -fy * Xj[:, 1] / zs ** 2
        # dXj/d(xi_j): [-skew(Xj), I]
        SXj = np.zeros((hw, 3, 3))
        SXj[:, 0, 1] = -Xj[:, 2]
        SXj[:, 0, 2] = Xj[:, 1]
        SXj[:, 1, 0] = Xj[:, 2]
        SXj[:, 1, 2] = -Xj[:, 0]
        SXj[:, 2, 0] = -Xj[:, 1]
        SXj[:, 2, 1] = Xj[:, 0]
        SXi = np.zeros((hw, 3, 3))
        SXi[:, 0, 1] = -Xi[:, 2]
        SXi[:, 0, 2] = Xi[:, 1]
        SXi[:, 1, 0] = Xi[:, 2]
        SXi[:, 1, 2] = -Xi[:, 0]
        SXi[:, 2, 0] = -Xi[:, 1]
        SXi[:, 2, 1] = Xi[:, 0]
        Jxi_j = np.concatenate([-SXj, np.broadcast_to(np.eye(3), (hw, 3, 3))], axis=2)
        Jxi_i = -np.einsum("ab,nbc->nac", R_ij,
                           np.concatenate([-SXi, np.broadcast_to(np.eye(3), (hw, 3, 3))],
                                          axis=2))
        Jd = (-(Xj - T_ij.t) / d[:, None])[:, :, None]
        # residual jacobians (res = u* - Pi): J = -Jp @ (...)
        Ji = -np.einsum("nab,nbc->nac", Jp, Jxi_i)     # (hw, 2, 6)
        Jj = -np.einsum("nab,nbc->nac", Jp, Jxi_j)
        Jdd = -np.einsum("nab,nbc->nac", Jp, Jd)[:, :, 0]  # (hw, 2)

        wJi = wgt[:, None, None] * Ji
        wJj = wgt[:, None, None] * Jj
        si, sj = 6 * i, 6 * j
        B[si:si + 6, si:si + 6] += np.einsum("nab,nac->bc", wJi, Ji)
        B[sj:sj + 6, sj:sj + 6] += np.einsum("nab,nac->bc", wJj, Jj)
        Bij = np.einsum("nab,nac->bc", wJi, Jj)
        B[si:si + 6, sj:sj + 6] += Bij
        B[sj:sj + 6, si:si + 6] += Bij.T
        # depth couplings: depth variables of the source frame i
        cols = slice(i * hw, (i + 1) * hw)
        E[si:si + 6, cols] += np.einsum("nab,na->bn", wJi, Jdd)
        E[sj:sj + 6, cols] += np.einsum("nab,na->bn", wJj, Jdd)
        C[cols.start:cols.stop] += (wgt * (Jdd ** 2).sum(axis=1))
        v[si:si + 6] += -np.einsum("nab,na->b", wJi, res)
        v[sj:sj + 6] += -np.einsum("nab,na->b", wJj, res)
        z[cols.start:cols.stop] += -(wgt * (Jdd * res).sum(axis=1))
    C = C + c_damping
    return DbaSystem(N, (h, w), B, E, C, v, z, edges, 0.5 * cost, dropped)


def _gauged(system, lam):
    """Damped, gauge-fixed reduced pose system (first pose dropped)."""
    Bd = system.B + lam * np.eye(6 * system.n_frames)
    Cd = system.C + lam
    EinvC = system.E / Cd[None, :]
    reduced = Bd - EinvC @ system.E.T
    rhs = system.v - EinvC @ system.z
    return reduced[6:, 6:], rhs[6:], Cd, EinvC


def schur_pose_solve(system, lam=0.0, max_retries=6):
    """Pose updates from the depth-eliminated system; first pose fixed.

    Returns (dxi (N,6), lam_used).  Indefiniteness triggers damping
    increases (x10); DbaNumericsError after max_retries."""
    lam_try = lam
    for _ in range(max_retries):
        red, rhs, _, _ = _gauged(system, lam_try)
        try:
            L = np.linalg.cholesky(red + 1e-12 * np.eye(red.shape[0]))
            sol = scipy.linalg.cho_solve((L, True), rhs)
            if not np.all(np.isfinite(sol)):
                raise np.linalg.LinAlgError
            dxi = np.zeros((system.n_frames, 6))
            dxi[1:] = sol.reshape(-1, 6)
            return dxi, lam_try
        except np.linalg.LinAlgError:
            lam_try = max(lam_try * 10.0, 1e-8 if lam_try == 0 else lam_try * 10.0)
    raise DbaNumericsError("reduced pose system indefinite after damping retries")


def depth_update(system, dxi, lam=0.0, floor=1e-4):
    """Back-substituted inverse-depth update; same damping as the solve."""
    Cd = system.C + lam
    dd = (system.z - system.E.T @ dxi.reshape(-1)) / Cd
    return dd


def apply_depth_update(inv_depths, dd, floor=1e-4):
    """Adds the update and clamps inverse depths positive.

    Returns (new list, clamped_any flag)."""
    h, w = inv_depths[0].shape
    hw = h * w
    out = []
    clamped = False
    for i, d in enumerate(inv_depths):
        nd = d.reshape(-1) + dd[i * hw:(i + 1) * hw]
        if (nd < floor).any():
            clamped = True
        out.append(np.maximum(nd, floor).reshape(h, w))
    return out, clamped


def depth_uncertainty(system, lam=0.0, max_retries=6):
    """Per-pixel marginal variance of inverse depth.

    Sigma = C^-1 + (L^-1 E C^-1)^T (L^-1 E C^-1) with L the Cholesky
    factor of the gauge-fixed reduced pose Hessian."""
    lam_try = lam
    for _ in range(max_retries):
        red, _, Cd, _ = _gauged(system, lam_try)
        try:
            L = np.linalg.cholesky(red + 1e-12 * np.eye(red.shape[0]))
        except np.linalg.LinAlgError:
            lam_try = max(lam_try * 10.0, 1e-8 if lam_try == 0 else lam_try * 10.0)
            continue
        EC = (system.E / Cd[None, :])[6:, :]
        M = scipy.linalg.solve_triangular(L, EC, lower=True)
        var = 1.0 / Cd + (M ** 2).sum(axis=0)
        h, w = system.hw
        return var.reshape(system.n_frames, h, w)
    raise DbaNumericsError("reduced pose system indefinite in uncertainty")


def upsample_depth(inv_depth_lr, full_shape, valid_lr=None):
    """Bilinear upsampling of inverse depth, then inversion.

    Returns (depth (H,W) meters, valid mask)."""
    H, W = full_shape
    d = cv2.resize(inv_depth_lr.astype(np.float64), (W, H),
                   interpolation=cv2.INTER_LINEAR)
    valid = d > 1e-12
    if valid_lr is not None:
        vm = cv2.resize(valid_lr.astype(np.float64), (W, H),
                        interpolation=cv2.INTER_LINEAR)
        valid &= vm > 0.999
    depth = np.zeros((H, W))
    depth[valid] = 1.0 / d[valid]
    return depth, valid


def mean_confident_flow(field, weight_floor=0.05):
    """Mean flow magnitude over confident pixels (low-res px)."""
    h, w = field.weight.shape
    iy, ix = np.mgrid[0:h, 0:w]
    base = np.stack([ix, iy], axis=2).astype(np.float64)
    mag = np.linalg.norm(field.flow_uv - base, axis=2)
    conf = field.weight > weight_floor * max(field.weight.max(), 1e-12)
    if not conf.any():
        return 0.0
    return float(mag[conf].mean())


def select_keyframe(provider, prev_idx, cand_idx, flow_threshold=2.4):
    """True when the mean confident flow exceeds the threshold (low-res px)."""
    field = provide_correspondences(provider, prev_idx, cand_idx)
    return mean_confident_flow(field) > flow_threshold
