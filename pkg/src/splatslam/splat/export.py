"""PNG export of render outputs: color 8-bit, depth 16-bit millimeters,
normals 8-bit mapped from [-1,1], accumulation 8-bit."""

from __future__ import annotations

import os

import cv2
import numpy as np


def export_render_pngs(render, out_dir, stem):
    os.makedirs(out_dir, exist_ok=True)
    c8 = np.clip(render.color * 255.0, 0, 255).astype(np.uint8)
    cv2.imwrite(os.path.join(out_dir, f"{stem}_color.png"),
                cv2.cvtColor(c8, cv2.COLOR_RGB2BGR))
    d16 = np.clip(render.depth * 1000.0, 0, 65535).astype(np.uint16)
    cv2.imwrite(os.path.join(out_dir, f"{stem}_depth.png"), d16)
    n8 = np.clip((render.normal * 0.5 + 0.5) * 255.0, 0, 255).astype(np.uint8)
    cv2.imwrite(os.path.join(out_dir, f"{stem}_normal.png"),
                cv2.cvtColor(n8, cv2.COLOR_RGB2BGR))
    a8 = np.clip(render.accum * 255.0, 0, 255).astype(np.uint8)
    cv2.imwrite(os.path.join(out_dir, f"{stem}_accum.png"), a8)
