"""Trajectory and image-quality metrics: absolute trajectory error after
closed-form alignment, segment-based relative pose error, and masked
PSNR / structural similarity."""

from __future__ import annotations

import numpy as np

from ..geometry import SE3, sim3_align
from ..splat.losses import ssim_map

PSNR_CAP = 99.0


class AssociationError(ValueError):
    pass


def associate_timestamps(t_a, t_b, max_dt=0.02):
    """Nearest-neighbor association within max_dt; returns index pairs."""
    t_a = np.asarray(t_a)
    t_b = np.asarray(t_b)
    pairs = []
    used = set()
    for i, ta in enumerate(t_a):
        j = int(np.argmin(np.abs(t_b - ta)))
        if abs(t_b[j] - ta) <= max_dt and j not in used:
            pairs.append((i, j))
            used.add(j)
    return pairs


def evaluate_ate(est_times, est_poses, gt_times, gt_poses, alignment="sim3",
                 max_dt=0.02):
    """RMSE of aligned position residuals (meters).

    alignment: "se3" (rigid) or "sim3" (similarity, removes monocular
    scale)."""
    pairs = associate_timestamps(est_times, gt_times, max_dt)
    if len(pairs) < 3:
        raise AssociationError(f"only {len(pairs)} associated poses")
    P_est = np.stack([est_poses[i].t for i, _ in pairs])
    P_gt = np.stack([gt_poses[j].t for _, j in pairs])
    S = sim3_align(P_est, P_gt, with_scale=(alignment == "sim3"))
    resid = S.apply(P_est) - P_gt
    return float(np.sqrt((resid ** 2).sum(axis=1).mean()))


def _path_lengths(positions):
    d = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(d)])


def evaluate_rpe(est_times, est_poses, gt_times, gt_poses,
                 segments=(100, 200, 300, 400, 500, 600, 700, 800),
                 max_dt=0.02):
    """Segment-averaged relative errors: (t_rel %, r_rel deg/100m, flag).

    For each start pose and segment length, the relative transform over
    the segment is compared between estimate and ground truth; translation
    error is a percentage of segment length, rotation error is normalized
    per 100 m.  Trajectories shorter than the smallest segment fall back
    to fractions of the total length and set the flag."""
    pairs = associate_timestamps(est_times, gt_times, max_dt)
    if len(pairs) < 3:
        raise AssociationError(f"only {len(pairs)} associated poses")
    E = [est_poses[i] for i, _ in pairs]
    G = [gt_poses[j] for _, j in pairs]
    P_gt = np.stack([g.t for g in G])
    dist = _path_lengths(P_gt)
    total = dist[-1]
    short = total < segments[0]
    if short:
        segs = [f * total for f in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)]
    else:
        segs = [s for s in segments if s <= total]
    t_errs = []
    r_errs = []
    for s in segs:
        if s <= 0:
            continue
        for i0 in range(len(E)):
            target = dist[i0] + s
            i1 = int(np.searchsorted(dist, target))
            if i1 >= len(E):
                break
            d_gt = G[i0].inverse() * G[i1]
            d_est = E[i0].inverse() * E[i1]
            err = d_est.inverse() * d_gt
            t_errs.append(np.linalg.norm(err.t) / s * 100.0)
            ang = np.degrees(np.linalg.norm((err).log()[:3]))
            r_errs.append(ang / s * 100.0)
    if not t_errs:
        raise AssociationError("no valid segments for relative error")
    return float(np.mean(t_errs)), float(np.mean(r_errs)), bool(short)


def evaluate_image(rendered, target, mask=None):
    """Masked (PSNR dB capped at 99, SSIM). Empty mask is an error."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError("image shapes differ")
    if mask is None:
        mask = np.ones(rendered.shape[:2], dtype=bool)
    mask = mask.astype(bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    diff = (rendered - target)[mask]
    mse = float((diff ** 2).mean())
    psnr = PSNR_CAP if mse <= 1e-20 else min(PSNR_CAP, float(10 * np.log10(1.0 / mse)))
    smap = ssim_map(rendered, target)
    ssim = float(smap[mask].mean())
    return psnr, ssim
