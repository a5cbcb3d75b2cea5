"""Rotations, rigid/similarity transforms and pinhole projection.

Conventions used across the package:
  * Quaternions are (w, x, y, z), kept unit-norm; canonicalized to w >= 0
    on serialization.
  * se3 tangent vectors are (wx, wy, wz, vx, vy, vz): rotation first,
    translation last, so exp((0,0,0,t)) is a pure translation by t.
  * Pose perturbations are LEFT-multiplicative everywhere:
    T <- exp(xi) * T.
  * T_a_b maps coordinates in frame b... we avoid that ambiguity by naming:
    an SE3 `T` maps points via T.apply(x) = R x + t.  A camera pose
    (camera-to-world) is stored as the SE3 that maps camera coordinates to
    world coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class BehindCameraError(ValueError):
    """Point has non-positive depth in the camera frame."""


class InvalidDepthError(ValueError):
    """Inverse depth must be strictly positive."""


class DegenerateGeometryError(ValueError):
    """Input geometry is rank deficient (collinear/identical points)."""


_EPS = 1e-12


# ---------------------------------------------------------------------------
# quaternion / SO(3)
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < _EPS:
        raise ValueError("zero quaternion")
    return q / n


def quat_canonical(q):
    """Pick the double-cover representative with w >= 0."""
    q = quat_normalize(q)
    return -q if q[0] < 0 else q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m):
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    return quat_normalize(q)


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w):
    """Rotation matrix. Series expansion below 1e-8 rad."""
    w = np.asarray(w, dtype=np.float64)
    th = np.linalg.norm(w)
    K = skew(w)
    if th < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    return np.eye(3) + (math.sin(th) / th) * K + ((1 - math.cos(th)) / th ** 2) * (K @ K)


def so3_log(R):
    """Rotation vector of R; angle in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos_th = max(-1.0, min(1.0, 0.5 * (np.trace(R) - 1.0)))
    th = math.acos(cos_th)
    if th < 1e-8:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if math.pi - th < 1e-6:
        # near pi: use the dominant diagonal entry
        A = 0.5 * (R + np.eye(3))  # = axis axis^T near pi
        i = int(np.argmax(np.diag(A)))
        axis = A[:, i] / math.sqrt(max(A[i, i], _EPS))
        axis = axis / np.linalg.norm(axis)
        # fix sign using the skew part
        s = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(axis, s) < 0:
            axis = -axis
        return th * axis
    return th / (2.0 * math.sin(th)) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])


def so3_left_jacobian(w):
    w = np.asarray(w, dtype=np.float64)
    th = np.linalg.norm(w)
    K = skew(w)
    if th < 1e-7:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    th2 = th * th
    return (np.eye(3)
            + ((1 - math.cos(th)) / th2) * K
            + ((th - math.sin(th)) / (th2 * th)) * (K @ K))


def so3_left_jacobian_inv(w):
    w = np.asarray(w, dtype=np.float64)
    th = np.linalg.norm(w)
    K = skew(w)
    if th < 1e-7:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    half = 0.5 * th
    cot = half / math.tan(half)
    return np.eye(3) - 0.5 * K + ((1 - cot) / (th * th)) * (K @ K)


# ---------------------------------------------------------------------------
# SE(3) / Sim(3)
# ---------------------------------------------------------------------------

class SE3:
    """Rigid transform: apply(x) = R x + t. Immutable value type."""

    __slots__ = ("q", "t")

    def __init__(self, q=None, t=None):
        self.q = quat_normalize(q) if q is not None else np.array([1.0, 0.0, 0.0, 0.0])
        self.t = np.asarray(t, dtype=np.float64).copy() if t is not None else np.zeros(3)
        self.q.setflags(write=False)
        self.t.setflags(write=False)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rotation_translation(cls, R, t):
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(matrix_to_quat(m[:3, :3]), m[:3, 3])

    @property
    def R(self):
        return quat_to_matrix(self.q)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def __mul__(self, other):
        if not isinstance(other, SE3):
            return NotImplemented
        return SE3(quat_multiply(self.q, other.q),
                   quat_to_matrix(self.q) @ other.t + self.t)

    def inverse(self):
        qi = quat_conjugate(self.q)
        return SE3(qi, -(quat_to_matrix(qi) @ self.t))

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x @ self.R.T + self.t if x.ndim == 2 else self.R @ x + self.t

    def rotate(self, v):
        v = np.asarray(v, dtype=np.float64)
        return v @ self.R.T if v.ndim == 2 else self.R @ v

    @classmethod
    def exp(cls, xi):
        """xi = (w, v): R = Exp(w), t = J_l(w) v."""
        xi = np.asarray(xi, dtype=np.float64)
        w, v = xi[:3], xi[3:]
        return cls(matrix_to_quat(so3_exp(w)), so3_left_jacobian(w) @ v)

    def log(self):
        w = so3_log(self.R)
        v = so3_left_jacobian_inv(w) @ self.t
        return np.concatenate([w, v])

    def adjoint(self):
        """Ad such that exp(Ad xi) T = T exp(xi), tangent order (w, v)."""
        R = self.R
        A = np.zeros((6, 6))
        A[:3, :3] = R
        A[3:, 3:] = R
        A[3:, :3] = skew(self.t) @ R
        return A

    def __repr__(self):
        return f"SE3(q={np.round(self.q, 6)}, t={np.round(self.t, 6)})"


class Sim3:
    """Similarity transform: apply(x) = s R x + t."""

    __slots__ = ("s", "q", "t")

    def __init__(self, s=1.0, q=None, t=None):
        if s <= 0:
            raise ValueError("Sim3 scale must be positive")
        self.s = float(s)
        self.q = quat_normalize(q) if q is not None else np.array([1.0, 0.0, 0.0, 0.0])
        self.t = np.asarray(t, dtype=np.float64).copy() if t is not None else np.zeros(3)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_se3(cls, T, s=1.0):
        return cls(s, T.q, T.t)

    @property
    def R(self):
        return quat_to_matrix(self.q)

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            return self.s * (x @ self.R.T) + self.t
        return self.s * (self.R @ x) + self.t

    def inverse(self):
        qi = quat_conjugate(self.q)
        Ri = quat_to_matrix(qi)
        return Sim3(1.0 / self.s, qi, -(Ri @ self.t) / self.s)

    def se3(self):
        return SE3(self.q, self.t)

    def __repr__(self):
        return f"Sim3(s={self.s:.6g}, q={np.round(self.q, 6)}, t={np.round(self.t, 6)})"


# ---------------------------------------------------------------------------
# pinhole camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, factor):
        """Camera for an image downscaled by `factor` (e.g. 1/8 resolution)."""
        return PinholeCamera(self.fx * factor, self.fy * factor,
                             (self.cx + 0.5) * factor - 0.5,
                             (self.cy + 0.5) * factor - 0.5,
                             int(round(self.width * factor)),
                             int(round(self.height * factor)))

    def project(self, point):
        """Camera-frame point -> (pixel (2,), depth). Raises behind camera."""
        x, y, z = np.asarray(point, dtype=np.float64)
        if z <= 0:
            raise BehindCameraError(f"point depth {z} <= 0")
        return np.array([self.fx * x / z + self.cx, self.fy * y / z + self.cy]), z

    def project_many(self, points):
        """(N,3) camera-frame points -> (uv (N,2), z (N,), valid mask)."""
        pts = np.asarray(points, dtype=np.float64)
        z = pts[:, 2]
        valid = z > 0
        zsafe = np.where(valid, z, 1.0)
        uv = np.stack([self.fx * pts[:, 0] / zsafe + self.cx,
                       self.fy * pts[:, 1] / zsafe + self.cy], axis=1)
        return uv, z, valid

    def backproject(self, pixel, inv_depth):
        """Pixel + inverse depth -> camera-frame point."""
        inv_depth = float(inv_depth)
        if inv_depth <= 0:
            raise InvalidDepthError(f"inverse depth {inv_depth} <= 0")
        u, v = pixel
        return np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]) / inv_depth

    def backproject_many(self, uv, inv_depth):
        uv = np.asarray(uv, dtype=np.float64)
        d = np.asarray(inv_depth, dtype=np.float64)
        rays = np.stack([(uv[:, 0] - self.cx) / self.fx,
                         (uv[:, 1] - self.cy) / self.fy,
                         np.ones(len(uv))], axis=1)
        return rays / d[:, None]

    def project_jacobian(self, point_cam):
        """d(pixel)/d(camera-frame point), 2x3."""
        x, y, z = point_cam
        return np.array([[self.fx / z, 0.0, -self.fx * x / z ** 2],
                         [0.0, self.fy / z, -self.fy * y / z ** 2]])


def project_world(camera, T_w2c, point_w, jacobians=False):
    """Project a world point through a world-to-camera transform.

    Returns (uv, z) and, with jacobians=True, additionally
    (J_point (2x3) wrt the world point, J_pose (2x6) wrt a left
    perturbation of T_w2c).
    """
    Xc = T_w2c.apply(point_w)
    uv, z = camera.project(Xc)
    if not jacobians:
        return uv, z
    Jp = camera.project_jacobian(Xc)
    # left perturbation exp(xi) T: dXc = (w x Xc) + v  with xi=(w, v)
    Jpose = np.zeros((2, 6))
    Jpose[:, :3] = Jp @ (-skew(Xc))
    Jpose[:, 3:] = Jp
    J_point = Jp @ T_w2c.R
    return uv, z, J_point, Jpose


# ---------------------------------------------------------------------------
# trajectory alignment (closed-form similarity)
# ---------------------------------------------------------------------------

def sim3_align(src, dst, with_scale=True):
    """Least-squares similarity S with dst ~= S.apply(src).

    src/dst: (N,3) positions, N >= 3, non-collinear. with_scale=False fixes
    scale at 1 (rigid alignment).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("trajectories must be matching (N,3) arrays")
    n = src.shape[0]
    if n < 3:
        raise DegenerateGeometryError("need at least 3 positions")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    if D[1] < 1e-12 * max(D[0], 1e-300) or D[0] < 1e-15:
        raise DegenerateGeometryError("positions are collinear or identical")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = (xs ** 2).sum() / n
        s = float(np.trace(np.diag(D) @ S) / var_s)
    else:
        s = 1.0
    t = mu_d - s * (R @ mu_s)
    return Sim3(s, matrix_to_quat(R), t)


# ---------------------------------------------------------------------------
# trajectory file format: "timestamp tx ty tz qx qy qz qw"
# ---------------------------------------------------------------------------

def write_trajectory(path, timestamps, poses):
    """One line per pose; quaternion serialized x y z w with w >= 0."""
    with open(path, "w") as f:
        for ts, T in zip(timestamps, poses):
            q = quat_canonical(T.q)
            t = T.t
            f.write(f"{ts:.9f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                    f"{q[1]:.9f} {q[2]:.9f} {q[3]:.9f} {q[0]:.9f}\n")


def read_trajectory(path):
    """Returns (timestamps (N,), [SE3])."""
    times, poses = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.split()]
            if len(vals) != 8:
                raise ValueError(f"bad trajectory line: {line!r}")
            ts, tx, ty, tz, qx, qy, qz, qw = vals
            times.append(ts)
            poses.append(SE3(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz])))
    return np.array(times), poses
