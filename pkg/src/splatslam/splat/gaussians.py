"""Oriented-disk splat primitives stored as arrays of attributes.

Each splat is an elliptical disk in 3D: center mu (world, m), a rotation
whose first two axes span the disk and whose third axis is the normal,
two principal extents (m), an opacity in [0,1] and an RGB color in [0,1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import quat_normalize

STATUS_UNSTABLE = 0
STATUS_STABLE = 1


@dataclass
class Gaussian2D:
    """One splat; convenience view used at construction and in tests."""
    mu: np.ndarray                      # (3,) world meters
    quat: np.ndarray                    # (w,x,y,z), disk axes = columns of R
    scale: np.ndarray                   # (2,) positive extents, meters
    alpha: float                        # opacity in [0,1]
    color: np.ndarray                   # (3,) rgb in [0,1]
    status: int = STATUS_UNSTABLE

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.quat = quat_normalize(self.quat)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")


class GaussianStore:
    """Array-of-attributes store for a set of splats.

    Attributes are plain float64 arrays, congruent along axis 0. `status`
    and `anchor` (keyframe id a splat is paired with, -1 when unset) ride
    along so that checkpointing and loop correction see one object.
    """

    ATTRS = ("mu", "quat", "scale", "alpha", "color")

    def __init__(self, n=0):
        self.mu = np.zeros((n, 3))
        self.quat = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
        self.scale = np.ones((n, 2))
        self.alpha = np.ones(n) * 0.5
        self.color = np.zeros((n, 3))
        self.status = np.zeros(n, dtype=np.uint8)
        self.anchor = np.full(n, -1, dtype=np.int64)

    def __len__(self):
        return self.mu.shape[0]

    @classmethod
    def from_gaussians(cls, gaussians):
        store = cls(len(gaussians))
        for i, g in enumerate(gaussians):
            store.mu[i] = g.mu
            store.quat[i] = g.quat
            store.scale[i] = g.scale
            store.alpha[i] = g.alpha
            store.color[i] = g.color
            store.status[i] = g.status
        return store

    @classmethod
    def from_arrays(cls, mu, quat, scale, alpha, color, status=None, anchor=None):
        store = cls(0)
        store.mu = np.ascontiguousarray(mu, dtype=np.float64)
        store.quat = np.ascontiguousarray(quat, dtype=np.float64)
        store.scale = np.ascontiguousarray(scale, dtype=np.float64)
        store.alpha = np.ascontiguousarray(alpha, dtype=np.float64)
        store.color = np.ascontiguousarray(color, dtype=np.float64)
        n = len(store.mu)
        store.status = (np.ascontiguousarray(status, dtype=np.uint8)
                        if status is not None else np.zeros(n, dtype=np.uint8))
        store.anchor = (np.ascontiguousarray(anchor, dtype=np.int64)
                        if anchor is not None else np.full(n, -1, dtype=np.int64))
        return store

    def append(self, other):
        """Concatenate another store (or from_arrays result) onto this one."""
        self.mu = np.concatenate([self.mu, other.mu])
        self.quat = np.concatenate([self.quat, other.quat])
        self.scale = np.concatenate([self.scale, other.scale])
        self.alpha = np.concatenate([self.alpha, other.alpha])
        self.color = np.concatenate([self.color, other.color])
        self.status = np.concatenate([self.status, other.status])
        self.anchor = np.concatenate([self.anchor, other.anchor])

    def keep(self, mask):
        """In-place selection by boolean mask (or integer index array)."""
        self.mu = np.ascontiguousarray(self.mu[mask])
        self.quat = np.ascontiguousarray(self.quat[mask])
        self.scale = np.ascontiguousarray(self.scale[mask])
        self.alpha = np.ascontiguousarray(self.alpha[mask])
        self.color = np.ascontiguousarray(self.color[mask])
        self.status = np.ascontiguousarray(self.status[mask])
        self.anchor = np.ascontiguousarray(self.anchor[mask])

    def extract(self, mask):
        """New store with the selected splats; this store keeps the rest."""
        out = self.copy()
        out.keep(mask)
        if mask.dtype == bool:
            self.keep(~mask)
        else:
            inv = np.ones(len(self), dtype=bool)
            inv[mask] = False
            self.keep(inv)
        return out

    def copy(self):
        out = GaussianStore(0)
        out.mu = self.mu.copy()
        out.quat = self.quat.copy()
        out.scale = self.scale.copy()
        out.alpha = self.alpha.copy()
        out.color = self.color.copy()
        out.status = self.status.copy()
        out.anchor = self.anchor.copy()
        return out

    def clamp_attributes(self):
        """Enforce alpha in [0,1], scales > 0; call after optimizer steps."""
        np.clip(self.alpha, 0.0, 1.0, out=self.alpha)
        np.clip(self.scale, 1e-6, None, out=self.scale)
        norms = np.linalg.norm(self.quat, axis=1, keepdims=True)
        np.divide(self.quat, np.maximum(norms, 1e-30), out=self.quat)

    def state_dict(self):
        return {"mu": self.mu, "quat": self.quat, "scale": self.scale,
                "alpha": self.alpha, "color": self.color,
                "status": self.status, "anchor": self.anchor}

    @classmethod
    def from_state_dict(cls, d):
        return cls.from_arrays(d["mu"], d["quat"], d["scale"], d["alpha"],
                               d["color"], d["status"], d["anchor"])
