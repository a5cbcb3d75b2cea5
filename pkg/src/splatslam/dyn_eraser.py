"""Heuristic dynamic-object masking.

Before a keyframe adds splats, the map is rendered at its pose; the
per-pixel product of structural dissimilarity, absolute color error and
inverse-depth uncertainty concentrates on moving content.  Semantic masks
(from files, or a built-in connected-component fallback) whose pixels
exceed the 90th percentile of that product often enough, and whose mean
loss is high, are classified dynamic; their union suppresses splat
creation and is excluded from photometric losses (and optionally from the
front-end weights).
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import cv2
import numpy as np

from .splat.losses import ssim_map
from .splat.rasterizer import rasterize_forward


@dataclass
class RerenderLoss:
    loss_map: np.ndarray      # (H,W) nonnegative product map
    pct90: float


def compute_rerender_loss(render_color, image, uncert):
    """L_re = (1 - SSIM) * |gray diff| * uncertainty, per pixel."""
    g_r = render_color.mean(axis=2)
    g_i = image.mean(axis=2)
    ssim = ssim_map(g_r, g_i)
    l1 = np.abs(g_r - g_i)
    loss = (1.0 - ssim) * l1 * np.maximum(uncert, 0.0)
    return RerenderLoss(loss, float(np.percentile(loss, 90.0)))


def rerender_loss(store, camera, keyframe):
    """Render the map at the keyframe pose (call before densification)
    and build the product loss map."""
    ctx = rasterize_forward(store, camera, keyframe.pose, store_checkpoints=False)
    return compute_rerender_loss(ctx.out.color, keyframe.image, keyframe.uncert)


def classify_dynamic(masks, rer, gamma=0.2, l_re_threshold=0.05):
    """Union of masks classified dynamic by the fraction/mean predicate.

    A mask is dynamic iff the fraction of its pixels with loss above the
    90th percentile exceeds gamma AND its mean loss exceeds the absolute
    threshold.  Returns (m_dyn union, per-mask bool list)."""
    lm = rer.loss_map
    flags = []
    H, W = lm.shape
    m_dyn = np.zeros((H, W), dtype=bool)
    for m in masks:
        m = m.astype(bool)
        n = int(m.sum())
        if n == 0:
            flags.append(False)
            continue
        frac = float((lm[m] > rer.pct90).sum()) / n
        mean = float(lm[m].mean())
        dyn = (frac > gamma) and (mean > l_re_threshold)
        flags.append(dyn)
        if dyn:
            m_dyn |= m
    return m_dyn, flags


def load_mask_files(mask_dir, frame_index):
    """Masks for one frame: 8-bit PNGs named <frame>_<k>.png, nonzero =
    member."""
    masks = []
    if not mask_dir or not os.path.isdir(mask_dir):
        return masks
    pat = re.compile(rf"^{frame_index:06d}_(\d+)\.png$")
    names = sorted(n for n in os.listdir(mask_dir) if pat.match(n))
    for n in names:
        img = cv2.imread(os.path.join(mask_dir, n), cv2.IMREAD_GRAYSCALE)
        if img is not None:
            masks.append(img > 0)
    return masks


def builtin_segments(rer, min_area=25):
    """Fallback segmenter: connected components of the top-decile loss."""
    hi = (rer.loss_map > rer.pct90).astype(np.uint8)
    n, labels = cv2.connectedComponents(hi, connectivity=8)
    masks = []
    for k in range(1, n):
        m = labels == k
        if int(m.sum()) >= min_area:
            masks.append(m)
    return masks
