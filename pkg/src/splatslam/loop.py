"""Render-based loop detection and map correction.

Detection: candidate history frames near the current pose are keypoint-
matched; the relative pose is solved by PnP on depth rendered from the
map at the current pose; the candidate is accepted when re-rendering the
map at the corrected pose matches the live image (novel-view check).

Correction: every splat is paired with the keyframe where it contributes
most, a pose graph with sequential + loop edges is optimized, each splat
is rigidly moved by its anchor keyframe's pose delta (optionally with the
per-keyframe scale from the translation-norm ratio), and a short global
fine-tune follows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .geometry import (SE3, quat_multiply, so3_exp, skew,
                       matrix_to_quat, quat_to_matrix)
from .splat.rasterizer import rasterize_forward, per_gaussian_stats


class CandidateRejected(ValueError):
    """PnP could not produce a usable relative pose for this candidate."""


class DisconnectedGraph(ValueError):
    """Pose graph is not connected by its edges."""


@dataclass
class LoopCandidate:
    hist_index: int
    cur_index: int
    n_match: int
    pts_hist: np.ndarray      # (N,2) pixel coords in the historical frame
    pts_cur: np.ndarray       # (N,2) pixel coords in the current frame


@dataclass
class LoopConstraint:
    hist_index: int           # t_m
    cur_index: int            # t_n
    T_cur_to_hist: SE3        # maps current-frame coords into the hist frame
    loss: float


# ---------------------------------------------------------------------------
# matcher providers
# ---------------------------------------------------------------------------

class OrbMatcher:
    """Multi-scale corner detector + binary descriptors + ratio test."""

    def __init__(self, n_features=1200, ratio=0.8):
        self._orb = cv2.ORB_create(nfeatures=n_features)
        self._bf = cv2.BFMatcher(cv2.NORM_HAMMING)
        self.ratio = ratio
        self._cache = {}

    def add_frame(self, idx, image):
        g = (np.clip(image, 0, 1) * 255).astype(np.uint8)
        if g.ndim == 3:
            g = cv2.cvtColor(g, cv2.COLOR_RGB2GRAY)
        kp, desc = self._orb.detectAndCompute(g, None)
        self._cache[idx] = (np.array([p.pt for p in kp]) if kp else np.zeros((0, 2)),
                            desc)

    def match(self, idx_a, idx_b):
        pa, da = self._cache[idx_a]
        pb, db = self._cache[idx_b]
        if da is None or db is None or len(pa) < 2 or len(pb) < 2:
            return np.zeros((0, 2)), np.zeros((0, 2))
        knn = self._bf.knnMatch(da, db, k=2)
        ia, ib = [], []
        for pair in knn:
            if len(pair) < 2:
                continue
            m, n = pair
            if m.distance < self.ratio * n.distance:
                ia.append(m.queryIdx)
                ib.append(m.trainIdx)
        return pa[ia], pb[ib]


class OracleMatcher:
    """Exact matches from known geometry; for synthetic runs and tests.

    frames: {idx: (pose_c2w, depth (H,W))}; keypoints are sampled on a
    grid in the historical frame and projected into the current frame;
    matches must land inside both images with consistent depth."""

    def __init__(self, camera, grid=12, noise=0.0, seed=0):
        self.camera = camera
        self.grid = grid
        self.noise = noise
        self._frames = {}
        self._rng = np.random.default_rng(seed)

    def add_frame(self, idx, pose, depth):
        self._frames[idx] = (pose, depth)

    def match(self, idx_a, idx_b):
        cam = self.camera
        pose_a, depth_a = self._frames[idx_a]
        pose_b, depth_b = self._frames[idx_b]
        H, W = depth_a.shape
        ys = np.linspace(4, H - 5, self.grid)
        xs = np.linspace(4, W - 5, self.grid)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        uv_a = np.stack([gx.ravel(), gy.ravel()], axis=1)
        z = depth_a[gy.astype(int).ravel(), gx.astype(int).ravel()]
        ok = z > 1e-6
        uv_a = uv_a[ok]
        pts_c = cam.backproject_many(uv_a, 1.0 / z[ok])
        pts_w = pose_a.apply(pts_c)
        pts_b = pose_b.inverse().apply(pts_w)
        front = pts_b[:, 2] > 1e-6
        uv_b, zb, _ = cam.project_many(pts_b)
        inside = front & (uv_b[:, 0] >= 0) & (uv_b[:, 0] < W) & \
            (uv_b[:, 1] >= 0) & (uv_b[:, 1] < H)
        # occlusion check against frame-b depth
        ub = np.clip(uv_b[inside].round().astype(int), 0, [W - 1, H - 1])
        zb_map = depth_b[ub[:, 1], ub[:, 0]]
        vis = np.abs(zb_map - zb[inside]) < 0.05 * np.maximum(zb[inside], 0.5)
        pa = uv_a[inside][vis]
        pb = uv_b[inside][vis]
        if self.noise > 0:
            pb = pb + self._rng.normal(0, self.noise, pb.shape)
        return pa, pb


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------

def filter_candidates(cur_index, cur_pose, history, matcher, radius,
                      n_match_th=50, min_gap=10):
    """History frames within `radius` of the current pose and more than
    `min_gap` ids away, keypoint-matched and thresholded; returned sorted
    by descending match count."""
    out = []
    for idx, pose in history:
        if abs(cur_index - idx) <= min_gap:
            continue
        if np.linalg.norm(pose.t - cur_pose.t) > radius:
            continue
        pts_h, pts_c = matcher.match(idx, cur_index)
        if len(pts_h) > n_match_th:
            out.append(LoopCandidate(idx, cur_index, len(pts_h), pts_h, pts_c))
    out.sort(key=lambda c: -c.n_match)
    return out


def solve_pnp(candidate, rendered_depth, rendered_accum, camera,
              depth_cutoff=30.0, min_inliers=12, reproj_px=3.0):
    """Relative pose of the current frame w.r.t. the candidate frame.

    3D points come from the depth rendered at the current pose estimate
    (points beyond depth_cutoff or with weak coverage are dropped); 2D
    observations are the matched pixels in the historical image.  Returns
    (T_cur_to_hist, inlier_count).  Raises CandidateRejected."""
    uv_c = candidate.pts_cur
    uv_h = candidate.pts_hist
    H, W = rendered_depth.shape
    ix = np.clip(uv_c[:, 0].round().astype(int), 0, W - 1)
    iy = np.clip(uv_c[:, 1].round().astype(int), 0, H - 1)
    z = rendered_depth[iy, ix]
    cov = rendered_accum[iy, ix]
    ok = (z > 1e-3) & (z < depth_cutoff) & (cov > 0.5)
    if int(ok.sum()) < 6:
        raise CandidateRejected(
            f"only {int(ok.sum())} matches with usable rendered depth")
    pts3 = camera.backproject_many(uv_c[ok], 1.0 / z[ok])
    obj = pts3.astype(np.float64).reshape(-1, 1, 3)
    img = uv_h[ok].astype(np.float64).reshape(-1, 1, 2)
    okflag, rvec, tvec, inl = cv2.solvePnPRansac(
        obj, img, camera.K, None, iterationsCount=300,
        reprojectionError=reproj_px, flags=cv2.SOLVEPNP_EPNP)
    if not okflag or inl is None or len(inl) < min_inliers:
        raise CandidateRejected("PnP RANSAC found too few inliers")
    rvec, tvec = cv2.solvePnPRefineLM(obj[inl[:, 0]], img[inl[:, 0]],
                                      camera.K, None, rvec, tvec)
    R = so3_exp(rvec.ravel())
    T_rel = SE3.from_rotation_translation(R, tvec.ravel())
    return T_rel, int(len(inl))


def nvs_verify(map_store_snapshot, camera, pose_estimate, current_image,
               other_losses, loss_threshold=0.15):
    """Render the map at the estimated pose; accept when the L1 color
    loss beats the absolute threshold or a tenth of the median candidate
    loss.  Returns (accepted, loss)."""
    ctx = rasterize_forward(map_store_snapshot, camera, pose_estimate,
                            store_checkpoints=False)
    loss = float(np.abs(ctx.out.color - current_image).mean())
    others = [l for l in other_losses if np.isfinite(l)]
    med = np.median(others) if others else np.inf
    return (loss < loss_threshold) or (loss < med / 10.0), loss


# ---------------------------------------------------------------------------
# correction
# ---------------------------------------------------------------------------

def pair_gaussians_with_poses(store, keyframes, camera):
    """Anchor id per splat: forward-render every keyframe and take the
    argmax per-frame contribution.  Splats seen nowhere anchor to the
    keyframe whose pose is nearest; returns (anchors, n_unseen)."""
    n = len(store)
    best = np.zeros(n)
    anchors = np.full(n, -1, dtype=np.int64)
    for kf in keyframes:
        ctx = rasterize_forward(store, camera, kf.pose, store_checkpoints=False)
        contrib = per_gaussian_stats(ctx)[:, 0]
        better = contrib > best
        best[better] = contrib[better]
        anchors[better] = kf.index
    unseen = anchors < 0
    n_unseen = int(unseen.sum())
    if n_unseen:
        pos = np.stack([kf.pose.t for kf in keyframes])
        ids = np.array([kf.index for kf in keyframes])
        d = np.linalg.norm(store.mu[unseen][:, None, :] - pos[None, :, :], axis=2)
        anchors[unseen] = ids[np.argmin(d, axis=1)]
    return anchors, n_unseen


def _se3_ad(r):
    """se3 adjoint bracket matrix for tangent r = (w, v)."""
    A = np.zeros((6, 6))
    A[:3, :3] = skew(r[:3])
    A[3:, 3:] = skew(r[:3])
    A[3:, :3] = skew(r[3:])
    return A


def correct_pose_graph(poses, seq_edges, loop_constraints, loop_weight=10.0,
                       max_iterations=50, tol=1e-12):
    """Pose-graph optimization over SE3 with the first pose fixed.

    poses: {index: SE3 (camera-to-world)}; seq_edges: [(i, j, T_i_to_j)]
    relative measurements Z = T_i^-1 T_j from the odometry; sequential
    edges are weighted by inverse inter-frame distance, loop edges by
    loop_weight.  Returns (new_poses dict, scales dict, residual history).
    """
    ids = sorted(poses)
    if len(ids) == 1:
        return {ids[0]: poses[ids[0]]}, {ids[0]: 1.0}, [0.0]
    if not loop_constraints:
        raise ValueError("need at least one loop constraint")
    pos_of = {k: i for i, k in enumerate(ids)}
    edges = []
    for (i, j, Z) in seq_edges:
        w = 1.0 / max(np.linalg.norm(poses[j].t - poses[i].t), 1e-2)
        edges.append((pos_of[i], pos_of[j], Z, w))
    for c in loop_constraints:
        edges.append((pos_of[c.cur_index], pos_of[c.hist_index],
                      c.T_cur_to_hist, loop_weight))
    # connectivity check
    n = len(ids)
    seen = {0}
    frontier = [0]
    adj = [[] for _ in range(n)]
    for (i, j, _, _) in edges:
        adj[i].append(j)
        adj[j].append(i)
    while frontier:
        k = frontier.pop()
        for m in adj[k]:
            if m not in seen:
                seen.add(m)
                frontier.append(m)
    if len(seen) != n:
        raise DisconnectedGraph(f"{n - len(seen)} poses unreachable from the first")

    T = [poses[k] for k in ids]

    def residuals(Ts):
        rs = []
        for (i, j, Z, w) in edges:
            rs.append(np.sqrt(w) * (Z.inverse() * Ts[i].inverse() * Ts[j]).log())
        return np.concatenate(rs)

    history = [float((residuals(T) ** 2).sum())]
    lam = 1e-6
    for _ in range(max_iterations):
        Hm = np.zeros((6 * n, 6 * n))
        bv = np.zeros(6 * n)
        cost = 0.0
        for (i, j, Z, w) in edges:
            r = (Z.inverse() * T[i].inverse() * T[j]).log()
            cost += w * float(r @ r)
            Jr_inv = np.eye(6) + 0.5 * _se3_ad(r)
            Ad = T[j].inverse().adjoint()
            Jj = Jr_inv @ Ad
            Ji = -Jj
            for (a, Ja) in ((i, Ji), (j, Jj)):
                bv[6 * a:6 * a + 6] -= w * (Ja.T @ r)
                for (b2, Jb) in ((i, Ji), (j, Jj)):
                    Hm[6 * a:6 * a + 6, 6 * b2:6 * b2 + 6] += w * (Ja.T @ Jb)
        Hg = Hm[6:, 6:] + lam * np.eye(6 * (n - 1))
        try:
            dx = np.linalg.solve(Hg, bv[6:])
        except np.linalg.LinAlgError:
            lam *= 10
            continue
        trial = [T[0]] + [SE3.exp(dx[6 * k:6 * k + 6]) * T[k + 1]
                          for k in range(n - 1)]
        c_new = float((residuals(trial) ** 2).sum())
        if c_new <= history[-1] + 1e-15:
            T = trial
            history.append(c_new)
            lam = max(lam * 0.3, 1e-9)
            if history[-2] - history[-1] < tol * max(history[-2], 1.0):
                break
        else:
            lam *= 10
    new_poses = {k: T[pos_of[k]] for k in ids}
    scales = {}
    for k in ids:
        t_old = np.linalg.norm(poses[k].t)
        t_new = np.linalg.norm(new_poses[k].t)
        scales[k] = t_new / t_old if t_old > 1e-9 else 1.0
    return new_poses, scales, history


def correct_gaussians(store, old_poses, new_poses, scales=None,
                      apply_scale=True):
    """Rigidly move each splat by its anchor keyframe's pose delta.

    mu' = T'_k T_k^-1 mu, r' composed with the delta rotation; scales
    optionally multiplied by the per-keyframe scale so footprints track
    rescaled geometry.  Splats whose anchor has no pose are skipped;
    returns the number skipped."""
    skipped = 0
    for k in np.unique(store.anchor):
        idx = np.nonzero(store.anchor == k)[0]
        if k < 0 or k not in old_poses or k not in new_poses:
            skipped += len(idx)
            continue
        W = new_poses[k] * old_poses[k].inverse()
        store.mu[idx] = store.mu[idx] @ W.R.T + W.t
        for i in idx:
            store.quat[i] = quat_multiply(W.q, store.quat[i])
        if apply_scale and scales is not None:
            store.scale[idx] *= scales.get(k, 1.0)
    return skipped


def format_loop_event(constraint):
    """Text record: LOOP t_m t_n loss T(7 numbers: tx ty tz qx qy qz qw)."""
    T = constraint.T_cur_to_hist
    q = T.q
    return (f"LOOP {constraint.hist_index} {constraint.cur_index} "
            f"{constraint.loss:.6f} "
            f"{T.t[0]:.9f} {T.t[1]:.9f} {T.t[2]:.9f} "
            f"{q[1]:.9f} {q[2]:.9f} {q[3]:.9f} {q[0]:.9f}")
