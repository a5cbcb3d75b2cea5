"""Binary PLY serialization of the splat map.

Little-endian, one vertex per splat with position, quaternion (w >= 0 on
disk), two extents, opacity, float RGB, status byte and anchor id.
"""

from __future__ import annotations

import numpy as np

from .splat.gaussians import GaussianStore

_PROPS = [("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
          ("qw", "<f8"), ("qx", "<f8"), ("qy", "<f8"), ("qz", "<f8"),
          ("s0", "<f8"), ("s1", "<f8"),
          ("opacity", "<f8"),
          ("red", "<f8"), ("green", "<f8"), ("blue", "<f8"),
          ("status", "u1"), ("anchor", "<i4")]

_PLY_TYPES = {"<f8": "double", "u1": "uchar", "<i4": "int"}


def save_map_ply(path, store):
    n = len(store)
    arr = np.zeros(n, dtype=_PROPS)
    arr["x"], arr["y"], arr["z"] = store.mu.T
    q = store.quat.copy()
    flip = q[:, 0] < 0
    q[flip] *= -1.0
    arr["qw"], arr["qx"], arr["qy"], arr["qz"] = q.T
    arr["s0"], arr["s1"] = store.scale.T
    arr["opacity"] = store.alpha
    arr["red"], arr["green"], arr["blue"] = np.clip(store.color, 0.0, 1.0).T
    arr["status"] = store.status
    arr["anchor"] = store.anchor.astype(np.int32)
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n}"]
    header += [f"property {_PLY_TYPES[d]} {name}" for name, d in _PROPS]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(arr.tobytes())


def load_map_ply(path):
    with open(path, "rb") as f:
        header = []
        while True:
            line = f.readline().decode("ascii").strip()
            header.append(line)
            if line == "end_header":
                break
        n = 0
        props = []
        for line in header:
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("property"):
                _, typ, name = line.split()
                rev = {v: k for k, v in _PLY_TYPES.items()}
                props.append((name, rev[typ]))
        arr = np.frombuffer(f.read(), dtype=props, count=n)
    mu = np.stack([arr["x"], arr["y"], arr["z"]], axis=1)
    quat = np.stack([arr["qw"], arr["qx"], arr["qy"], arr["qz"]], axis=1)
    scale = np.stack([arr["s0"], arr["s1"]], axis=1)
    color = np.stack([arr["red"], arr["green"], arr["blue"]], axis=1)
    return GaussianStore.from_arrays(mu, quat, scale, np.array(arr["opacity"]),
                                     color, np.array(arr["status"]),
                                     np.array(arr["anchor"], dtype=np.int64))
