"""Run configuration: one nested key-value document carrying every tuned
constant, with scene-type profiles (indoor/outdoor) and strict validation
(unknown keys are errors).
"""

from __future__ import annotations

import copy

import yaml

DEFAULTS = {
    "seed": 0,
    "scene_type": "indoor",          # indoor | outdoor
    "frontend": {
        "provider": "oracle",         # oracle | blockmatch
        "flow_threshold": 2.4,        # keyframe gate, low-res pixels
        "window": 8,                  # local keyframe list length
        "dba_iterations": 4,
        "edges_per_frame": 3,         # temporal neighbors in the frame graph
        "huber_px": 2.0,
        "lm_init": 1.0e-4,
        "c_damping": 1.0e-4,
        "depth_init": 1.0,            # initial inverse depth
        "oracle_noise_px": 0.0,
        "exclude_dynamic": True,
    },
    "imu": {
        "use": True,
        "gravity": [0.0, 0.0, -9.81],
        "acc_n": 2.0e-2,
        "gyr_n": 2.0e-3,
        "acc_w": 5.0e-4,
        "gyr_w": 5.0e-5,
        "t_cb": [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],   # tx ty tz qx qy qz qw
        "prior_vel": 1.0e-2,
        "prior_bias": 1.0e2,
    },
    "map": {
        "k_init": 50000,
        "k_add": 20000,
        "iterations_per_keyframe": 100,
        "refine_iterations": 10,
        "refine_mode": "multi",       # multi | current | none
        "sample_rate": 0.5,
        "accum_floor": 0.5,
        "delete_rgb": 0.2,
        "delete_depth": 0.5,
        "delete_radius_px": 60.0,
        "depth_max": 10.0,
        "uncert_quantile": 0.9,
        "scale_px": 1.4,
        "max_scale": 1.0,
        "lr_mu": 2.0e-3,
        "lr_quat": 2.0e-3,
        "lr_scale": 2.0e-3,
        "lr_alpha": 2.0e-2,
        "lr_color": 5.0e-3,
        "lr_pose_rot": 2.0e-3,
        "lr_pose_trans": 2.0e-3,
    },
    "loss": {
        "rgb": 1.0,
        "depth": 0.5,
        "norm": 0.1,
        "acc": 0.1,
    },
    "scores": {
        "dn_status": 400,
        "dn_storage": 200,
        "dk_keyframes": 8,
        "sc_status": 1.0e-4,
        "se_status": 0.5,
        "sc_storage": 0.5,
        "tau": 15.0,
        "reset_each_status_period": True,
    },
    "loop": {
        "use": True,
        "radius": 15.0,
        "n_match_threshold": 50,
        "min_gap": 10,
        "loss_threshold": 0.15,
        "depth_cutoff": 30.0,
        "edge_weight": 10.0,
        "apply_scale_to_splats": True,
        "matcher": "orb",             # orb | oracle
        "finetune_iterations": 100,
        "detect_every": 1,
    },
    "dyn": {
        "use": True,
        "gamma": 0.2,
        "l_re_threshold": 0.05,
        "use_file_masks": True,
        "builtin_segmenter": False,
    },
    "run": {
        "deterministic": False,
        "checkpoint_every": 0,        # keyframes; 0 disables
    },
}

# values a scene-type profile overrides unless the user set them explicitly
_PROFILES = {
    "indoor": {"map.depth_max": 10.0, "map.iterations_per_keyframe": 80,
               "scores.tau": 15.0, "loop.radius": 15.0},
    "outdoor": {"map.depth_max": 100.0, "map.iterations_per_keyframe": 100,
                "scores.tau": 50.0, "loop.radius": 50.0,
                "map.lr_mu": 5.0e-4},
}


class ConfigError(ValueError):
    pass


class Config(dict):
    """Nested dict with attribute access (read-only style)."""

    def __getattr__(self, k):
        try:
            v = self[k]
        except KeyError as e:
            raise AttributeError(k) from e
        return Config(v) if isinstance(v, dict) else v


def _merge(base, override, path=""):
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key: {path + k}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{path + k} must be a mapping")
            _merge(base[k], v, path + k + ".")
        else:
            base[k] = type(base[k])(v) if base[k] is not None and v is not None else v


def load_config(source=None, overrides=None):
    """Build a validated Config from a YAML path / dict, applying the
    scene-type profile first, then explicit user values on top."""
    user = {}
    if isinstance(source, str):
        with open(source) as f:
            user = yaml.safe_load(f) or {}
    elif isinstance(source, dict):
        user = copy.deepcopy(source)
    if overrides:
        def deep_update(dst, src):
            for k, v in src.items():
                if isinstance(v, dict) and isinstance(dst.get(k), dict):
                    deep_update(dst[k], v)
                else:
                    dst[k] = v
        deep_update(user, overrides)

    cfg = copy.deepcopy(DEFAULTS)
    scene_type = user.get("scene_type", cfg["scene_type"])
    if scene_type not in _PROFILES:
        raise ConfigError(f"scene_type must be one of {sorted(_PROFILES)}")
    profile = _PROFILES[scene_type]

    def user_has(dotted):
        node = user
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                return False
            node = node[part]
        return True

    for dotted, v in profile.items():
        if not user_has(dotted):
            sect, key = dotted.split(".")
            cfg[sect][key] = v
    _merge(cfg, user)
    return Config(cfg)


def save_config(cfg, path):
    with open(path, "w") as f:
        yaml.safe_dump(dict(cfg), f, sort_keys=False)
