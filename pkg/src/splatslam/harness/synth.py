"""Synthetic scenes: textured planes ray-cast analytically, smooth
trajectories with exact derivatives (so inertial samples follow by
differentiation), an exact-correspondence provider, and a dataset writer.

Textures are sums of sinusoids evaluated at the hit point, so images,
depths and flows are mutually consistent at machine precision and at any
resolution.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import cv2
import numpy as np
import yaml

from ..geometry import (SE3, PinholeCamera, matrix_to_quat, so3_exp,
                        so3_left_jacobian, write_trajectory)
from ..vi_graph import ImuSample
from ..frontend import CorrespondenceField, DOWNSAMPLE


@dataclass
class SceneConfig:
    width: int = 128
    height: int = 96
    focal: float = 110.0
    n_frames: int = 60
    fps: float = 10.0
    seed: int = 0
    extent: float = 4.0              # room half-size (m)
    trajectory: str = "sway"         # sway | loop
    traj_scale: float = 0.8          # motion amplitude (m)
    angle_scale: float = 0.15        # orientation amplitude (rad)
    imu_rate: float = 200.0
    imu_acc_noise: float = 0.0
    imu_gyr_noise: float = 0.0
    imu_acc_bias: tuple = (0.0, 0.0, 0.0)
    imu_gyr_bias: tuple = (0.0, 0.0, 0.0)
    moving_object: bool = False
    object_size: float = 0.8
    object_speed: float = 0.35       # m/s lateral drift
    n_texture_waves: int = 10
    gravity: tuple = (0.0, 0.0, -9.81)

    @property
    def camera(self):
        return PinholeCamera(self.focal, self.focal,
                             (self.width - 1) / 2.0, (self.height - 1) / 2.0,
                             self.width, self.height)


class _Texture:
    def __init__(self, rng, n_waves, base):
        self.base = base
        self.a = rng.uniform(0.04, 0.12, (3, n_waves))
        self.fu = rng.uniform(0.8, 7.0, n_waves)
        self.fv = rng.uniform(0.8, 7.0, n_waves)
        self.ph = rng.uniform(0, 2 * np.pi, (3, n_waves))

    def __call__(self, u, v):
        arg = self.fu[None, :] * u[:, None] + self.fv[None, :] * v[:, None]
        out = np.empty((len(u), 3))
        for c in range(3):
            out[:, c] = self.base[c] + (self.a[c] * np.sin(arg + self.ph[c])).sum(axis=1)
        return np.clip(out, 0.0, 1.0)


@dataclass
class _Plane:
    p0: np.ndarray
    au: np.ndarray     # unit axis, extent eu
    av: np.ndarray
    eu: float
    ev: float
    tex: _Texture

    @property
    def normal(self):
        n = np.cross(self.au, self.av)
        return n / np.linalg.norm(n)


class _Path:
    """Twice-differentiable camera path; world z is up."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        k = cfg.trajectory
        A = cfg.traj_scale
        if k == "sway":
            self.pA = np.array([A, 0.6 * A, 0.25 * A])
            self.pW = np.array([0.55, 0.8, 0.7])
            self.pP = np.array([0.0, 1.1, 2.3])
            self.base = np.array([0.0, 0.0, 0.0])
        elif k == "loop":
            self.loop_radius = cfg.extent * 0.45
            self.loop_omega = 2 * np.pi / (cfg.n_frames / cfg.fps)
        else:
            raise ValueError(f"unknown trajectory kind {k!r}")
        self.aA = cfg.angle_scale * np.array([0.5, 1.0, 0.4])
        self.aW = np.array([0.5, 0.35, 0.65])

    def pos(self, t):
        if self.cfg.trajectory == "sway":
            return self.base + self.pA * np.sin(self.pW * t + self.pP)
        w = self.loop_omega
        r = self.loop_radius
        return np.array([r * np.cos(w * t) - r, r * np.sin(w * t), 0.0])

    def vel(self, t):
        if self.cfg.trajectory == "sway":
            return self.pA * self.pW * np.cos(self.pW * t + self.pP)
        w = self.loop_omega
        r = self.loop_radius
        return np.array([-r * w * np.sin(w * t), r * w * np.cos(w * t), 0.0])

    def acc(self, t):
        if self.cfg.trajectory == "sway":
            return -self.pA * self.pW ** 2 * np.sin(self.pW * t + self.pP)
        w = self.loop_omega
        r = self.loop_radius
        return np.array([-r * w * w * np.cos(w * t), -r * w * w * np.sin(w * t), 0.0])

    def _phi(self, t):
        if self.cfg.trajectory == "sway":
            return self.aA * np.sin(self.aW * t)
        return np.array([0.0, 0.0, self.loop_omega * t])

    def _phidot(self, t):
        if self.cfg.trajectory == "sway":
            return self.aA * self.aW * np.cos(self.aW * t)
        return np.array([0.0, 0.0, self.loop_omega])

    def rotation(self, t):
        """Camera-to-world rotation: camera z looks along world +x at
        phi = 0 (x_cam -> -y_w, y_cam -> -z_w), then Exp(phi) in world."""
        R0 = np.array([[0.0, 0.0, 1.0],
                       [-1.0, 0.0, 0.0],
                       [0.0, -1.0, 0.0]])
        return so3_exp(self._phi(t)) @ R0

    def pose(self, t):
        return SE3.from_rotation_translation(self.rotation(t), self.pos(t))

    def omega_body(self, t):
        # R(t) = Exp(phi) R0: omega_world = Jl(phi) phidot; body = R^T w_w
        ww = so3_left_jacobian(self._phi(t)) @ self._phidot(t)
        return self.rotation(t).T @ ww


class SyntheticScene:
    """Textured room + camera path + optional moving square."""

    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        e = cfg.extent
        mk = lambda base: _Texture(rng, cfg.n_texture_waves, np.asarray(base))
        z0, z1 = -1.2, 1.8
        self.planes = [
            # back wall (x = e), facing -x
            _Plane(np.array([e, -e, z0]), np.array([0, 1.0, 0]),
                   np.array([0, 0, 1.0]), 2 * e, z1 - z0, mk([0.55, 0.45, 0.40])),
            # left wall (y = -e)
            _Plane(np.array([-0.5 * e, -e, z0]), np.array([1.0, 0, 0]),
                   np.array([0, 0, 1.0]), 1.5 * e, z1 - z0, mk([0.40, 0.50, 0.58])),
            # right wall (y = +e)
            _Plane(np.array([-0.5 * e, e, z0]), np.array([1.0, 0, 0]),
                   np.array([0, 0, 1.0]), 1.5 * e, z1 - z0, mk([0.47, 0.55, 0.42])),
            # floor (z = z0)
            _Plane(np.array([-0.5 * e, -e, z0]), np.array([1.0, 0, 0]),
                   np.array([0, 1.0, 0]), 1.5 * e, 2 * e, mk([0.52, 0.48, 0.45])),
            # ceiling (z = z1)
            _Plane(np.array([-0.5 * e, -e, z1]), np.array([1.0, 0, 0]),
                   np.array([0, 1.0, 0]), 1.5 * e, 2 * e, mk([0.50, 0.50, 0.52])),
        ]
        self.path = _Path(cfg, rng)
        self.obj_tex = mk([0.75, 0.25, 0.2])
        self._obj_rng = rng

    # --- moving object -----------------------------------------------------
    def object_pose(self, t):
        """World pose of the moving square's local frame at time t."""
        cfg = self.cfg
        p = np.array([0.55 * cfg.extent,
                      -0.45 * cfg.extent + cfg.object_speed * t,
                      -0.1])
        return SE3.from_rotation_translation(np.eye(3), p)

    def _object_plane(self, t):
        s = self.cfg.object_size
        T = self.object_pose(t)
        p0 = T.apply(np.array([0.0, -s / 2, -s / 2]))
        return _Plane(p0, T.R @ np.array([0, 1.0, 0]), T.R @ np.array([0, 0, 1.0]),
                      s, s, self.obj_tex)

    # --- raycast -----------------------------------------------------------
    def times(self):
        return np.arange(self.cfg.n_frames) / self.cfg.fps

    def raycast(self, pose, t, camera=None, grid=None):
        """Returns dict with depth (H,W), color (H,W,3), points_w, obj_id
        (-1 static plane index ... n-1, or OBJ for the mover)."""
        cam = camera or self.cfg.camera
        if grid is None:
            iy, ix = np.mgrid[0:cam.height, 0:cam.width]
            uv = np.stack([ix.ravel(), iy.ravel()], axis=1).astype(np.float64)
        else:
            uv = grid
        d_cam = np.stack([(uv[:, 0] - cam.cx) / cam.fx,
                          (uv[:, 1] - cam.cy) / cam.fy,
                          np.ones(len(uv))], axis=1)
        R = pose.R
        o = pose.t
        d_w = d_cam @ R.T
        planes = list(self.planes)
        obj_idx = None
        if self.cfg.moving_object:
            obj_idx = len(planes)
            planes.append(self._object_plane(t))
        n_ray = len(uv)
        best_t = np.full(n_ray, np.inf)
        hit_id = np.full(n_ray, -1, dtype=np.int64)
        color = np.zeros((n_ray, 3))
        for pi, pl in enumerate(planes):
            n = pl.normal
            denom = d_w @ n
            num = (pl.p0 - o) @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                th = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
            pt = o[None, :] + th[:, None] * d_w
            lu = (pt - pl.p0) @ pl.au
            lv = (pt - pl.p0) @ pl.av
            ok = (th > 1e-6) & np.isfinite(th) & \
                 (lu >= 0) & (lu <= pl.eu) & (lv >= 0) & (lv <= pl.ev)
            closer = ok & (th < best_t)
            if closer.any():
                best_t = np.where(closer, th, best_t)
                hit_id = np.where(closer, pi, hit_id)
                color[closer] = pl.tex(lu[closer], lv[closer])
        depth = best_t * d_cam[:, 2]  # z-depth (d_cam z == 1)
        depth[~np.isfinite(depth)] = 0.0
        pts_w = o[None, :] + best_t[:, None] * d_w
        H, W = (cam.height, cam.width) if grid is None else (None, None)
        out = {"depth": depth, "color": color, "points_w": pts_w,
               "hit_id": hit_id, "obj_id": obj_idx}
        if grid is None:
            out["depth"] = depth.reshape(H, W)
            out["color"] = color.reshape(H, W, 3)
            out["hit_id"] = hit_id.reshape(H, W)
        return out

    def render(self, t=None, pose=None, camera=None):
        pose = pose if pose is not None else self.path.pose(t)
        rc = self.raycast(pose, t if t is not None else 0.0, camera)
        return rc["color"], rc["depth"]

    def object_mask(self, t, camera=None):
        pose = self.path.pose(t)
        rc = self.raycast(pose, t, camera)
        return rc["hit_id"] == rc["obj_id"] if rc["obj_id"] is not None \
            else np.zeros_like(rc["depth"], dtype=bool)

    # --- imu ---------------------------------------------------------------
    def imu_samples(self, t0=None, t1=None, rng=None):
        cfg = self.cfg
        g = np.asarray(cfg.gravity)
        t0 = 0.0 if t0 is None else t0
        t1 = (cfg.n_frames - 1) / cfg.fps if t1 is None else t1
        ts = np.arange(t0, t1 + 0.5 / cfg.imu_rate, 1.0 / cfg.imu_rate)
        rng = rng or np.random.default_rng(cfg.seed + 991)
        ba = np.asarray(cfg.imu_acc_bias)
        bg = np.asarray(cfg.imu_gyr_bias)
        out = []
        for t in ts:
            Rwb = self.path.rotation(t)   # body == camera here
            a_b = Rwb.T @ (self.path.acc(t) - g) + ba
            w_b = self.path.omega_body(t) + bg
            if cfg.imu_acc_noise > 0:
                a_b = a_b + rng.normal(0, cfg.imu_acc_noise, 3)
            if cfg.imu_gyr_noise > 0:
                w_b = w_b + rng.normal(0, cfg.imu_gyr_noise, 3)
            out.append(ImuSample(float(t), a_b, w_b))
        return out


class OracleFlowProvider:
    """Exact correspondences from scene geometry, including the moving
    object's own motion, with optional pixel noise and binary confidence."""

    def __init__(self, scene, noise_px=0.0, seed=0, camera=None):
        self.scene = scene
        self.noise = noise_px
        self.rng = np.random.default_rng(seed + 17)
        cam = camera or scene.cfg.camera
        self.cam_lr = cam.scaled(1.0 / DOWNSAMPLE)
        self.cam = cam
        h, w = self.cam_lr.height, self.cam_lr.width
        iy, ix = np.mgrid[0:h, 0:w]
        # low-res pixel centers expressed in full-res coordinates
        self.grid_full = np.stack([(ix.ravel() + 0.5) * DOWNSAMPLE - 0.5,
                                   (iy.ravel() + 0.5) * DOWNSAMPLE - 0.5], axis=1)
        self.hw = (h, w)

    def times(self):
        return self.scene.times()

    def pose_of(self, idx):
        return self.scene.path.pose(self.times()[idx])

    def provide(self, i, j):
        t = self.times()
        pose_i = self.scene.path.pose(t[i])
        pose_j = self.scene.path.pose(t[j])
        rc = self.scene.raycast(pose_i, t[i], grid=self.grid_full)
        pts = rc["points_w"].copy()
        hit = rc["hit_id"]
        valid = hit >= 0
        if rc["obj_id"] is not None:
            mv = hit == rc["obj_id"]
            if mv.any():
                rel = self.scene.object_pose(t[j]) * self.scene.object_pose(t[i]).inverse()
                pts[mv] = rel.apply(pts[mv])
        pc = pose_j.inverse().apply(pts)
        front = pc[:, 2] > 1e-6
        uv, _, _ = self.cam.project_many(pc)
        inside = front & (uv[:, 0] >= 0) & (uv[:, 0] <= self.cam.width - 1) & \
            (uv[:, 1] >= 0) & (uv[:, 1] <= self.cam.height - 1)
        ok = valid & inside
        # convert to low-res pixel units
        uv_lr = (uv + 0.5) / DOWNSAMPLE - 0.5
        if self.noise > 0:
            uv_lr = uv_lr + self.rng.normal(0, self.noise, uv_lr.shape)
        h, w = self.hw
        flow = uv_lr.reshape(h, w, 2)
        weight = ok.astype(np.float64).reshape(h, w)
        return CorrespondenceField(i, j, flow, weight)


def synthesize(cfg, out_dir, seed=None, write_flow=True):
    """Generate a dataset on disk; deterministic given the seed.

    Layout: images/ depth/ masks/ flow/ imu.csv groundtruth.txt
    manifest.yaml."""
    if seed is not None:
        cfg.seed = seed
    scene = SyntheticScene(cfg)
    cam = cfg.camera
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("images", "depth", "masks") + (("flow",) if write_flow else ()):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    times = scene.times()
    poses = [scene.path.pose(t) for t in times]
    provider = OracleFlowProvider(scene, noise_px=0.0, seed=cfg.seed)
    mask_rng = np.random.default_rng(cfg.seed + 31)
    for k, t in enumerate(times):
        color, depth = scene.render(t)
        cv2.imwrite(os.path.join(out_dir, f"images/{k:06d}.png"),
                    cv2.cvtColor((np.clip(color, 0, 1) * 255).astype(np.uint8),
                                 cv2.COLOR_RGB2BGR))
        cv2.imwrite(os.path.join(out_dir, f"depth/{k:06d}.png"),
                    np.clip(depth * 1000.0, 0, 65535).astype(np.uint16))
        seg_id = 0
        if cfg.moving_object:
            m = scene.object_mask(t)
            if m.any():
                cv2.imwrite(os.path.join(out_dir, f"masks/{k:06d}_{seg_id}.png"),
                            (m * 255).astype(np.uint8))
                seg_id += 1
        # two static distractor segments per frame
        for _ in range(2):
            cx = mask_rng.integers(10, cfg.width - 10)
            cy = mask_rng.integers(10, cfg.height - 10)
            r = int(mask_rng.integers(6, 14))
            yy, xx = np.mgrid[0:cfg.height, 0:cfg.width]
            m = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
            cv2.imwrite(os.path.join(out_dir, f"masks/{k:06d}_{seg_id}.png"),
                        (m * 255).astype(np.uint8))
            seg_id += 1
        if write_flow and k + 1 < len(times):
            fld = provider.provide(k, k + 1)
            np.savez(os.path.join(out_dir, f"flow/{k:06d}.npz"),
                     flow=fld.flow_uv, weight=fld.weight)
    samples = scene.imu_samples()
    with open(os.path.join(out_dir, "imu.csv"), "w") as f:
        for s in samples:
            f.write(f"{s.t:.9f},{s.acc[0]:.9f},{s.acc[1]:.9f},{s.acc[2]:.9f},"
                    f"{s.gyr[0]:.9f},{s.gyr[1]:.9f},{s.gyr[2]:.9f}\n")
    write_trajectory(os.path.join(out_dir, "groundtruth.txt"), times, poses)
    manifest = {
        "camera": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                   "width": cam.width, "height": cam.height},
        "images": "images",
        "depth": "depth",
        "masks": "masks",
        "imu": "imu.csv",
        "groundtruth": "groundtruth.txt",
        "timestamps": [float(t) for t in times],
        "gravity": list(cfg.gravity),
    }
    with open(os.path.join(out_dir, "manifest.yaml"), "w") as f:
        yaml.safe_dump(manifest, f, sort_keys=False)
    return out_dir
