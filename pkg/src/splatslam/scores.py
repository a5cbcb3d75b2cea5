"""Per-splat contribution/error scoring and the map manager built on it.

Every render pass accumulates, per splat, the total compositing weight it
contributed (contribution score S_C) and the weight-weighted per-pixel
color loss; the error score S_E keeps the maximum per-frame value.  The
frame where a splat contributes most becomes its anchor id, used for
tiering, pose refinement and loop correction.

Management runs on three clocks: status control flips splats between the
actively-optimized unstable state and the frozen stable state; storage
control prunes unstable splats that never earned contribution; tier
transfer moves splats whose anchor keyframe is far from the current pose
into a cold bulk store (and back), so rendering and training touch only
the hot tier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .splat.gaussians import STATUS_STABLE, STATUS_UNSTABLE
from .splat.rasterizer import per_gaussian_stats


@dataclass
class ManagerConfig:
    dn_status: int = 400         # iterations between status-control passes
    dn_storage: int = 200        # iterations between storage-control passes
    dk_keyframes: int = 8        # keyframes between tier transfers
    sc_status: float = 1e-4
    se_status: float = 0.5
    sc_storage: float = 0.5
    tau: float = 15.0            # anchor-pose distance for the hot tier (m)

    def __post_init__(self):
        vals = (self.dn_status, self.dn_storage, self.dk_keyframes,
                self.sc_status, self.se_status, self.sc_storage, self.tau)
        if min(vals) <= 0:
            raise ValueError("manager parameters must be positive")


class ScoreTable:
    """Parallel score arrays for a GaussianStore.

    S_C and S_E live here; the splat's status and anchor id live on the
    store itself (they are part of the serialized map).  best_contrib
    remembers the largest single-frame contribution seen, which defines
    the anchor.
    """

    def __init__(self, n=0):
        self.s_c = np.zeros(n)
        self.s_e = np.zeros(n)
        self.best_contrib = np.zeros(n)

    def __len__(self):
        return len(self.s_c)

    def append(self, other):
        self.s_c = np.concatenate([self.s_c, other.s_c])
        self.s_e = np.concatenate([self.s_e, other.s_e])
        self.best_contrib = np.concatenate([self.best_contrib, other.best_contrib])

    def keep(self, mask):
        self.s_c = self.s_c[mask].copy()
        self.s_e = self.s_e[mask].copy()
        self.best_contrib = self.best_contrib[mask].copy()

    def extract(self, mask):
        out = ScoreTable(0)
        out.s_c = self.s_c[mask].copy()
        out.s_e = self.s_e[mask].copy()
        out.best_contrib = self.best_contrib[mask].copy()
        if mask.dtype == bool:
            self.keep(~mask)
        else:
            inv = np.ones(len(self), dtype=bool)
            inv[mask] = False
            self.keep(inv)
        return out

    def copy(self):
        out = ScoreTable(0)
        out.s_c = self.s_c.copy()
        out.s_e = self.s_e.copy()
        out.best_contrib = self.best_contrib.copy()
        return out

    def reset_scores(self):
        """Start a fresh measurement window (scores, not anchors)."""
        self.s_c[:] = 0.0
        self.s_e[:] = 0.0

    def state_dict(self):
        return {"s_c": self.s_c, "s_e": self.s_e, "best_contrib": self.best_contrib}

    @classmethod
    def from_state_dict(cls, d):
        out = cls(0)
        out.s_c = np.asarray(d["s_c"], dtype=np.float64).copy()
        out.s_e = np.asarray(d["s_e"], dtype=np.float64).copy()
        out.best_contrib = np.asarray(d["best_contrib"], dtype=np.float64).copy()
        return out


def accumulate_scores(ctx, rgb_loss_map, frame_index, table, store):
    """Fold one rendered frame into the score table.

    S_C grows by each splat's summed compositing weight over the pixels
    it touched; the frame's weight-weighted color loss updates S_E as a
    running maximum; the anchor follows the contribution argmax.
    """
    stats = per_gaussian_stats(ctx, rgb_loss_map)
    contrib = stats[:, 0]
    werr = stats[:, 1]
    table.s_c += contrib
    np.maximum(table.s_e, werr, out=table.s_e)
    better = contrib > table.best_contrib
    table.best_contrib[better] = contrib[better]
    store.anchor[better] = frame_index
    return contrib


def status_control(store, table, cfg):
    """Stable/unstable transitions per the score thresholds.

    Unstable splats that earned S_C below sc_status are frozen stable;
    stable splats whose S_E exceeded se_status rejoin optimization as
    unstable with both scores reset.  Returns (n_stabilized, n_activated).
    """
    to_stable = (store.status == STATUS_UNSTABLE) & (table.s_c < cfg.sc_status)
    to_unstable = (store.status == STATUS_STABLE) & (table.s_e > cfg.se_status)
    store.status[to_stable] = STATUS_STABLE
    store.status[to_unstable] = STATUS_UNSTABLE
    table.s_c[to_unstable] = 0.0
    table.s_e[to_unstable] = 0.0
    return int(to_stable.sum()), int(to_unstable.sum())


def storage_prune_mask(store, table, cfg):
    """Splats to prune: unstable AND contribution below sc_storage.
    Stable splats are never pruned here."""
    return (store.status == STATUS_UNSTABLE) & (table.s_c < cfg.sc_storage)


def tier_split_mask(store, current_position, keyframe_positions, cfg):
    """True where a splat belongs in the COLD tier: its anchor keyframe
    lies farther than tau from the current position.  Unanchored splats
    stay hot."""
    n = len(store)
    cold = np.zeros(n, dtype=bool)
    anchored = store.anchor >= 0
    if anchored.any():
        kf_pos = np.asarray(keyframe_positions, dtype=np.float64)
        idx = store.anchor[anchored]
        d = np.linalg.norm(kf_pos[idx] - np.asarray(current_position), axis=1)
        cold[anchored] = d > cfg.tau
    return cold


def tier_transfer(hot_containers, cold_containers, current_position,
                  keyframe_positions, cfg):
    """Move splats between the hot and cold tiers by anchor distance.

    hot_containers / cold_containers: parallel lists whose first element
    is the GaussianStore and whose remaining elements (score table,
    optimizer state, ...) support keep/extract/append congruently.
    Returns (n_to_cold, n_to_hot).  Attribute arrays are moved by copy,
    so a round trip is bit exact.
    """
    hot_store = hot_containers[0]
    cold_store = cold_containers[0]
    cold_mask = tier_split_mask(hot_store, current_position, keyframe_positions, cfg)
    n_to_cold = int(cold_mask.sum())
    if n_to_cold:
        for hot_c, cold_c in zip(hot_containers, cold_containers):
            cold_c.append(hot_c.extract(cold_mask))
    hot_mask = ~tier_split_mask(cold_store, current_position, keyframe_positions, cfg)
    n_to_hot = int(hot_mask.sum())
    if n_to_hot:
        for hot_c, cold_c in zip(hot_containers, cold_containers):
            hot_c.append(cold_c.extract(hot_mask))
    return n_to_cold, n_to_hot
