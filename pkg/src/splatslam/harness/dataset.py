"""Dataset manifest: image/depth/mask directories, IMU stream, ground
truth and intrinsics, with existence validation and lazy loading."""

from __future__ import annotations

import os

import cv2
import numpy as np
import yaml

from ..geometry import PinholeCamera, read_trajectory
from ..vi_graph import ImuSample


class DatasetManifest:
    def __init__(self, root):
        self.root = root
        path = os.path.join(root, "manifest.yaml")
        with open(path) as f:
            m = yaml.safe_load(f)
        c = m["camera"]
        self.camera = PinholeCamera(c["fx"], c["fy"], c["cx"], c["cy"],
                                    c["width"], c["height"])
        self.timestamps = np.asarray(m["timestamps"], dtype=np.float64)
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        self.image_dir = os.path.join(root, m["images"])
        self.depth_dir = os.path.join(root, m["depth"]) if m.get("depth") else None
        self.mask_dir = os.path.join(root, m["masks"]) if m.get("masks") else None
        self.imu_path = os.path.join(root, m["imu"]) if m.get("imu") else None
        self.gt_path = (os.path.join(root, m["groundtruth"])
                        if m.get("groundtruth") else None)
        self.gravity = np.asarray(m.get("gravity", [0.0, 0.0, -9.81]))
        for k in range(len(self.timestamps)):
            p = os.path.join(self.image_dir, f"{k:06d}.png")
            if not os.path.exists(p):
                raise FileNotFoundError(p)

    def __len__(self):
        return len(self.timestamps)

    def image(self, k):
        p = os.path.join(self.image_dir, f"{k:06d}.png")
        img = cv2.imread(p, cv2.IMREAD_COLOR)
        return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0

    def depth(self, k):
        if self.depth_dir is None:
            return None
        p = os.path.join(self.depth_dir, f"{k:06d}.png")
        if not os.path.exists(p):
            return None
        return cv2.imread(p, cv2.IMREAD_UNCHANGED).astype(np.float64) / 1000.0

    def imu(self):
        if self.imu_path is None:
            return []
        out = []
        with open(self.imu_path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                vals = [float(x) for x in line.split(",")]
                out.append(ImuSample(vals[0], np.array(vals[1:4]),
                                     np.array(vals[4:7])))
        return out

    def groundtruth(self):
        if self.gt_path is None:
            return None, None
        return read_trajectory(self.gt_path)
