"""Online mapping: map initialization from a keyframe bundle, add/delete
densification per keyframe, iterative training with the sampled backward
and sparse moment updates, and single-render multi-pose refinement.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .geometry import SE3, PinholeCamera, matrix_to_quat
from . import scores as scores_mod
from .scores import ManagerConfig, ScoreTable, accumulate_scores, status_control
from .splat import (GaussianStore, LossWeights, compute_loss, normals_from_depth,
                    rasterize_forward, rasterize_backward_sampled)
from .splat.gaussians import STATUS_UNSTABLE
from .splat.rasterizer import per_gaussian_stats


class EmptyWindowError(ValueError):
    """Training requested with no keyframes in the window."""


class EmptyFrameError(ValueError):
    """No valid pixel available to initialize from."""


# ---------------------------------------------------------------------------
# keyframe
# ---------------------------------------------------------------------------

@dataclass
class Keyframe:
    index: int
    timestamp: float
    image: np.ndarray                 # (H,W,3) in [0,1]
    pose: SE3                         # camera-to-world
    depth: np.ndarray                 # (H,W) meters, 0 where unknown
    depth_valid: np.ndarray           # (H,W) bool
    uncert: np.ndarray                # (H,W) inverse-depth variance
    valid: np.ndarray                 # (H,W) bool, geometric validity
    dynamic: np.ndarray               # (H,W) bool, dynamic-object mask
    inv_depth_lr: np.ndarray | None = None   # low-res inverse depth
    uncert_lr: np.ndarray | None = None
    camera: PinholeCamera | None = None
    normal: np.ndarray = field(default=None, repr=False)
    normal_valid: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        H, W = self.image.shape[:2]
        for name in ("depth", "depth_valid", "uncert", "valid", "dynamic"):
            arr = getattr(self, name)
            if arr.shape[:2] != (H, W):
                raise ValueError(f"{name} shape {arr.shape} != image {H, W}")
        if self.normal is None:
            if self.camera is None:
                raise ValueError("keyframe needs a camera to derive normals")
            self.normal, self.normal_valid = normals_from_depth(
                self.depth, self.camera, self.depth_valid)

    @property
    def train_mask(self):
        return self.valid & ~self.dynamic


# ---------------------------------------------------------------------------
# sparse adaptive-moment optimizer state
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moments per splat attribute, congruent with the store.

    Updates are sparse: rows outside the update mask keep their moments
    and parameters untouched (stable splats are masked out of training).
    """

    SHAPES = {"mu": 3, "quat": 4, "scale": 2, "alpha": 1, "color": 3}

    def __init__(self, n=0):
        self.m = {k: np.zeros((n, d)) for k, d in self.SHAPES.items()}
        self.v = {k: np.zeros((n, d)) for k, d in self.SHAPES.items()}
        self.t = np.zeros(n, dtype=np.int64)

    def __len__(self):
        return len(self.t)

    def append(self, other):
        for k in self.SHAPES:
            self.m[k] = np.concatenate([self.m[k], other.m[k]])
            self.v[k] = np.concatenate([self.v[k], other.v[k]])
        self.t = np.concatenate([self.t, other.t])

    def keep(self, mask):
        for k in self.SHAPES:
            self.m[k] = self.m[k][mask].copy()
            self.v[k] = self.v[k][mask].copy()
        self.t = self.t[mask].copy()

    def extract(self, mask):
        out = AdamState(0)
        for k in self.SHAPES:
            out.m[k] = self.m[k][mask].copy()
            out.v[k] = self.v[k][mask].copy()
        out.t = self.t[mask].copy()
        if mask.dtype == bool:
            self.keep(~mask)
        else:
            inv = np.ones(len(self), dtype=bool)
            inv[mask] = False
            self.keep(inv)
        return out

    def step(self, store, grads, mask, lrs, beta1=0.9, beta2=0.999, eps=1e-8):
        if not mask.any():
            return
        self.t[mask] += 1
        t = self.t[mask][:, None].astype(np.float64)
        g_by = {"mu": grads.mu, "quat": grads.quat, "scale": grads.scale,
                "alpha": grads.alpha[:, None], "color": grads.color}
        p_by = {"mu": store.mu, "quat": store.quat, "scale": store.scale,
                "alpha": store.alpha, "color": store.color}
        for k in self.SHAPES:
            g = g_by[k][mask]
            m = self.m[k][mask]
            v = self.v[k][mask]
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            self.m[k][mask] = m
            self.v[k][mask] = v
            mhat = m / (1 - beta1 ** t)
            vhat = v / (1 - beta2 ** t)
            step = lrs[k] * mhat / (np.sqrt(vhat) + eps)
            if k == "alpha":
                p_by[k][mask] -= step[:, 0]
            else:
                p_by[k][mask] -= step

    def state_dict(self):
        d = {f"m_{k}": self.m[k] for k in self.SHAPES}
        d.update({f"v_{k}": self.v[k] for k in self.SHAPES})
        d["t"] = self.t
        return d

    @classmethod
    def from_state_dict(cls, d):
        out = cls(0)
        for k in cls.SHAPES:
            out.m[k] = np.asarray(d[f"m_{k}"], dtype=np.float64).copy()
            out.v[k] = np.asarray(d[f"v_{k}"], dtype=np.float64).copy()
        out.t = np.asarray(d["t"], dtype=np.int64).copy()
        return out


# ---------------------------------------------------------------------------
# map store (hot tier + cold bulk store + optimizer state)
# ---------------------------------------------------------------------------

@dataclass
class MapConfig:
    k_init: int = 50000
    k_add: int = 20000
    accum_floor: float = 0.5          # pixels below this accumulation get splats
    delete_rgb: float = 0.2           # per-splat mean weighted color loss
    delete_depth: float = 0.5         # per-splat mean weighted depth error (m)
    delete_radius_px: float = 60.0    # projected-radius cap
    depth_max: float = 10.0           # init mask: excessive depth (m)
    uncert_quantile: float = 0.9      # init mask: top decile of uncertainty
    sample_rate: float = 0.5          # sampled-backward pixel rate
    iterations_per_keyframe: int = 100
    refine_iterations: int = 10
    lr_mu: float = 2e-3
    lr_quat: float = 2e-3
    lr_scale: float = 2e-3
    lr_alpha: float = 2e-2
    lr_color: float = 5e-3
    lr_pose_rot: float = 2e-3
    lr_pose_trans: float = 2e-3
    scale_px: float = 1.4             # init splat extent in sample-spacing units
    max_scale: float = 1.0            # clamp on splat extent (m)

    @property
    def lrs(self):
        return {"mu": self.lr_mu, "quat": self.lr_quat, "scale": self.lr_scale,
                "alpha": self.lr_alpha, "color": self.lr_color}


class MapStore:
    """Hot-tier splats + scores + optimizer moments, with a cold bulk store.

    One mapping thread mutates; `snapshot()` hands read-only copies of the
    hot tier to other threads.
    """

    def __init__(self):
        self.hot = GaussianStore(0)
        self.table = ScoreTable(0)
        self.adam = AdamState(0)
        self.cold = GaussianStore(0)
        self.cold_table = ScoreTable(0)
        self.cold_adam = AdamState(0)
        self.lock = threading.RLock()

    def __len__(self):
        return len(self.hot)

    @property
    def total(self):
        return len(self.hot) + len(self.cold)

    def check_congruent(self):
        assert len(self.hot) == len(self.table) == len(self.adam)
        assert len(self.cold) == len(self.cold_table) == len(self.cold_adam)

    def append_new(self, new_store):
        n = len(new_store)
        with self.lock:
            self.hot.append(new_store)
            self.table.append(ScoreTable(n))
            self.adam.append(AdamState(n))

    def prune_hot(self, mask):
        with self.lock:
            keep = ~mask
            self.hot.keep(keep)
            self.table.keep(keep)
            self.adam.keep(keep)
        return int(mask.sum())

    def tier_transfer(self, current_position, keyframe_positions, cfg):
        with self.lock:
            return scores_mod.tier_transfer(
                [self.hot, self.table, self.adam],
                [self.cold, self.cold_table, self.cold_adam],
                current_position, keyframe_positions, cfg)

    def snapshot(self, include_cold=False):
        with self.lock:
            if not include_cold:
                return self.hot.copy()
            merged = self.hot.copy()
            merged.append(self.cold)
            return merged

    def merged_view(self):
        """Hot + cold concatenated (copies), with parallel score tables."""
        with self.lock:
            store = self.hot.copy()
            store.append(self.cold)
            table = self.table.copy()
            table.append(self.cold_table)
            return store, table

    def state_dict(self):
        d = {}
        for prefix, obj in (("hot", self.hot), ("cold", self.cold)):
            for k, v in obj.state_dict().items():
                d[f"{prefix}_{k}"] = v
        for prefix, obj in (("table", self.table), ("cold_table", self.cold_table)):
            for k, v in obj.state_dict().items():
                d[f"{prefix}_{k}"] = v
        for prefix, obj in (("adam", self.adam), ("cold_adam", self.cold_adam)):
            for k, v in obj.state_dict().items():
                d[f"{prefix}_{k}"] = v
        return d

    @classmethod
    def from_state_dict(cls, d):
        out = cls()
        pick = lambda p: {k[len(p) + 1:]: v for k, v in d.items()
                          if k.startswith(p + "_")}
        out.hot = GaussianStore.from_state_dict(
            {k: d[f"hot_{k}"] for k in ("mu", "quat", "scale", "alpha", "color",
                                        "status", "anchor")})
        out.cold = GaussianStore.from_state_dict(
            {k: d[f"cold_{k}"] for k in ("mu", "quat", "scale", "alpha", "color",
                                         "status", "anchor")})
        out.table = ScoreTable.from_state_dict(pick("table"))
        out.cold_table = ScoreTable.from_state_dict(pick("cold_table"))
        out.adam = AdamState.from_state_dict(pick("adam"))
        out.cold_adam = AdamState.from_state_dict(pick("cold_adam"))
        return out


# ---------------------------------------------------------------------------
# splat creation from keyframe geometry
# ---------------------------------------------------------------------------

def _init_mask(kf, cfg):
    """Pixels safe to spawn splats from: valid depth, not dynamic, depth not
    excessive, uncertainty below the per-frame quantile."""
    ok = kf.depth_valid & kf.valid & ~kf.dynamic & (kf.depth > 0)
    ok &= kf.depth <= cfg.depth_max
    if ok.any():
        thr = np.quantile(kf.uncert[ok], cfg.uncert_quantile)
        ok &= kf.uncert <= thr
    return ok

def spawn_from_pixels(kf, camera, iy, ix, cfg, spacing_px):
    """Build splats at the given pixel coordinates of a keyframe."""
    z = kf.depth[iy, ix]
    uv = np.stack([ix.astype(np.float64), iy.astype(np.float64)], axis=1)
    pts_c = camera.backproject_many(uv, 1.0 / z)
    R_wc = kf.pose.R
    mu_w = pts_c @ R_wc.T + kf.pose.t

    # orientation: disk normal from the depth-derived normal where valid,
    # else face the camera along the ray
    n_img, nv = kf.normal, kf.normal_valid
    normals_c = n_img[iy, ix].copy()
    good = nv[iy, ix]
    rays = pts_c / np.linalg.norm(pts_c, axis=1, keepdims=True)
    normals_c[~good] = rays[~good]
    normals_w = normals_c @ R_wc.T
    quat = np.empty((len(iy), 4))
    for i in range(len(iy)):
        nw = normals_w[i]
        a = np.array([1.0, 0.0, 0.0]) if abs(nw[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        tu = np.cross(a, nw)
        tu /= np.linalg.norm(tu)
        tv = np.cross(nw, tu)
        quat[i] = matrix_to_quat(np.stack([tu, tv, nw], axis=1))

    s = np.clip(cfg.scale_px * spacing_px * z / camera.fx, 1e-4, cfg.max_scale)
    scale = np.stack([s, s], axis=1)
    alpha = np.full(len(iy), 0.5)
    color = kf.image[iy, ix].astype(np.float64)
    anchor = np.full(len(iy), kf.index, dtype=np.int64)
    status = np.full(len(iy), STATUS_UNSTABLE, dtype=np.uint8)
    return GaussianStore.from_arrays(mu_w, quat, scale, alpha, color, status, anchor)


def initialize_map(keyframes, camera, cfg, rng, k=None):
    """Sample k points over the first keyframe batch and spawn splats.

    Pixels with excessive depth or top-decile uncertainty are masked out;
    sampling is uniform over the remainder (with replacement plus a
    warning flag if fewer valid pixels than k exist).
    """
    k = cfg.k_init if k is None else k
    store = MapStore()
    counts = []
    masks = []
    for kf in keyframes:
        m = _init_mask(kf, cfg)
        masks.append(m)
        counts.append(int(m.sum()))
    total_valid = int(sum(counts))
    if total_valid == 0:
        raise EmptyFrameError("no valid pixels in the initial keyframe batch")
    replaced = total_valid < k
    per_kf = np.array(counts, dtype=np.float64)
    per_kf = np.maximum(np.round(per_kf / per_kf.sum() * k).astype(int), 0)
    for kf, m, n_kf in zip(keyframes, masks, per_kf):
        if n_kf == 0 or not m.any():
            continue
        iy, ix = np.nonzero(m)
        sel = rng.choice(len(iy), size=int(n_kf), replace=len(iy) < n_kf)
        spacing = np.sqrt(m.size / max(float(n_kf), 1.0))
        store.append_new(spawn_from_pixels(kf, camera, iy[sel], ix[sel], cfg, spacing))
    return store, replaced


def densify_on_keyframe(map_store, kf, camera, cfg):
    """Delete conflicting splats and add splats where coverage is low.

    Returns (deleted_count, added_count)."""
    hot = map_store.hot
    deleted = 0
    if len(hot):
        ctx = rasterize_forward(hot, camera, kf.pose, store_checkpoints=False)
        tm = kf.train_mask
        rgb_err = np.where(tm, np.abs(ctx.out.color - kf.image).mean(axis=2), 0.0)
        dv = tm & kf.depth_valid & (kf.depth > 0)
        depth_err = np.where(dv, np.abs(ctx.out.depth - kf.depth), 0.0)
        stats = per_gaussian_stats(ctx, rgb_err, depth_err)
        wsum = stats[:, 0]
        touched = wsum > 1e-6
        mean_rgb = np.where(touched, stats[:, 1] / np.maximum(wsum, 1e-12), 0.0)
        mean_depth = np.where(touched, stats[:, 2] / np.maximum(wsum, 1e-12), 0.0)
        zc = ctx.mu_c[:, 2]
        in_frustum = zc > 0
        uvz = ctx.mu_c.copy()
        with np.errstate(divide="ignore", invalid="ignore"):
            u = camera.fx * uvz[:, 0] / zc + camera.cx
            v = camera.fy * uvz[:, 1] / zc + camera.cy
        in_frustum &= (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
        radius_px = 3.0 * hot.scale.max(axis=1) * max(camera.fx, camera.fy) / np.maximum(zc, 1e-6)
        kill = in_frustum & (
            (touched & ((mean_rgb > cfg.delete_rgb) | (mean_depth > cfg.delete_depth)))
            | (radius_px > cfg.delete_radius_px))
        deleted = map_store.prune_hot(kill)

    # re-render accumulation, then fill low-coverage regions
    if len(map_store.hot):
        ctx2 = rasterize_forward(map_store.hot, camera, kf.pose, store_checkpoints=False)
        accum = ctx2.out.accum
    else:
        accum = np.zeros_like(kf.depth)
    spawnable = _init_mask(kf, cfg)
    low = (accum < cfg.accum_floor) & spawnable
    n_low = int(low.sum())
    total_px = low.size
    n_add = int(round(cfg.k_add * ((accum < cfg.accum_floor).sum() / total_px)))
    n_add = min(n_add, n_low)
    added = 0
    if n_add > 0:
        iy, ix = np.nonzero(low)
        rng = np.random.default_rng(kf.index * 7919 + 13)
        sel = rng.choice(len(iy), size=n_add, replace=False)
        spacing = np.sqrt(total_px / max(float(cfg.k_add), 1.0))
        map_store.append_new(spawn_from_pixels(kf, camera, iy[sel], ix[sel], cfg, spacing))
        added = n_add
    return deleted, added


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_iteration(map_store, window, camera, weights, cfg, rng):
    """One mapping iteration on a uniformly drawn window frame.

    Renders, evaluates the loss with validity/dynamic masks, runs the
    sampled backward, applies the sparse moment update to unstable splats
    only, clamps attributes and folds the render into the score table.
    Returns the LossResult.
    """
    if not window:
        raise EmptyWindowError("keyframe window is empty")
    kf = window[int(rng.integers(len(window)))]
    ctx = rasterize_forward(map_store.hot, camera, kf.pose)
    res = compute_loss(ctx.out, kf, weights)
    if len(map_store.hot) and not res.empty_mask:
        grads = rasterize_backward_sampled(ctx, res.grads, res.rgb_map,
                                           cfg.sample_rate)
        update_mask = map_store.hot.status == STATUS_UNSTABLE
        map_store.adam.step(map_store.hot, grads, update_mask, cfg.lrs)
        map_store.hot.clamp_attributes()
    accumulate_scores(ctx, res.rgb_map, kf.index, map_store.table, map_store.hot)
    return res


# ---------------------------------------------------------------------------
# single-to-multi pose refinement
# ---------------------------------------------------------------------------

def refine_poses(map_store, window, render_kf, camera, cfg, iterations=None,
                 mode="multi", weights=None):
    """Optimize window keyframe poses from one frame's rendering loss.

    A per-keyframe correction (world-frame transform, identity at start)
    moves splats anchored to that keyframe; the render frame's correction
    also moves its camera, so its own content is self-consistent.  The
    color loss of the single render is minimized w.r.t. all corrections;
    corrected poses are returned as {keyframe_index: SE3} (new poses) and
    anchored splat centers are committed to the map.

    mode: "multi" (all visible keyframes), "current" (camera of the render
    frame only, splats fixed), "none" (no-op).
    """
    if mode == "none":
        return {}
    iterations = cfg.refine_iterations if iterations is None else iterations
    weights = weights or LossWeights(rgb=1.0, depth=0.0, norm=0.0, acc=0.0)
    hot = map_store.hot
    if len(hot) == 0:
        return {}
    kf_by_index = {kf.index: kf for kf in window}
    if render_kf.index not in kf_by_index:
        kf_by_index[render_kf.index] = render_kf
    indices = sorted(kf_by_index)
    anchored = {k: np.nonzero(hot.anchor == k)[0] for k in indices}
    if mode == "current":
        active = [render_kf.index]
    else:
        active = [k for k in indices
                  if len(anchored[k]) > 0 or k == render_kf.index]
    corr = {k: SE3.identity() for k in active}
    adam_m = {k: np.zeros(6) for k in active}
    adam_v = {k: np.zeros(6) for k in active}
    lr = np.concatenate([np.full(3, cfg.lr_pose_rot), np.full(3, cfg.lr_pose_trans)])
    base_mu = hot.mu.copy()

    for it in range(1, iterations + 1):
        eff = hot
        if mode == "multi":
            eff = hot.copy()
            for k in active:
                idx = anchored[k]
                if len(idx) == 0:
                    continue
                W = corr[k]
                eff.mu[idx] = base_mu[idx] @ W.R.T + W.t
        render_pose = corr.get(render_kf.index, SE3.identity()) * render_kf.pose
        ctx = rasterize_forward(eff, camera, render_pose)
        res = compute_loss(ctx.out, render_kf, weights)
        if res.empty_mask:
            break
        grads = rasterize_backward_sampled(ctx, res.grads, res.rgb_map,
                                           cfg.sample_rate, want_pose=True)
        for k in active:
            g = np.zeros(6)
            if mode == "multi":
                idx = anchored[k]
                if len(idx):
                    mu_eff = eff.mu[idx]
                    gm = grads.mu[idx]
                    g[:3] += np.cross(mu_eff, gm).sum(axis=0)
                    g[3:] += gm.sum(axis=0)
            if k == render_kf.index:
                g += grads.pose
            adam_m[k] = 0.9 * adam_m[k] + 0.1 * g
            adam_v[k] = 0.999 * adam_v[k] + 0.001 * g * g
            mhat = adam_m[k] / (1 - 0.9 ** it)
            vhat = adam_v[k] / (1 - 0.999 ** it)
            step = lr * mhat / (np.sqrt(vhat) + 1e-8)
            corr[k] = SE3.exp(-step) * corr[k]

    # commit: corrected poses and anchored centers
    new_poses = {}
    for k in active:
        W = corr[k]
        new_poses[k] = W * kf_by_index[k].pose
        if mode == "multi":
            idx = anchored[k]
            if len(idx):
                hot.mu[idx] = base_mu[idx] @ W.R.T + W.t
    return new_poses
