"""IMU preintegration between keyframes and the visual-inertial factor
graph that fuses the dense-BA pose information with inertial constraints.

Preintegration follows the midpoint scheme: relative position/velocity/
rotation terms (alpha, beta, gamma) are integrated in the first body
frame, with first-order bias Jacobians and a propagated 15x15 covariance
(state order: d_alpha, d_beta, d_theta, d_ba, d_bg).

The graph optimizes body states (pose, velocity, biases) under the IMU
residuals and a quadratic visual factor expressed over stacked
world-to-camera pose tangents relative to the dense-BA linearization.
All pose perturbations are left-multiplicative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .geometry import (SE3, matrix_to_quat, quat_multiply, quat_normalize,
                       quat_to_matrix, skew, so3_exp, so3_left_jacobian,
                       so3_left_jacobian_inv, so3_log)

GRAVITY = np.array([0.0, 0.0, -9.81])


class GraphDiverged(RuntimeError):
    """Cost rose on five consecutive damped steps; best state kept."""


@dataclass
class ImuNoise:
    acc_n: float = 2e-2       # accel white noise density
    gyr_n: float = 2e-3       # gyro white noise density
    acc_w: float = 5e-4       # accel bias random walk
    gyr_w: float = 5e-5       # gyro bias random walk


@dataclass
class ImuSample:
    t: float
    acc: np.ndarray
    gyr: np.ndarray


@dataclass
class ImuState:
    pose: SE3                 # body-to-world
    vel: np.ndarray
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self):
        return ImuState(SE3(self.pose.q, self.pose.t), self.vel.copy(),
                        self.ba.copy(), self.bg.copy())


@dataclass
class PreintegratedImu:
    dt: float
    alpha: np.ndarray         # (3,) relative position term (first body frame)
    beta: np.ndarray          # (3,) relative velocity term
    gamma: np.ndarray         # (4,) relative rotation quaternion
    cov: np.ndarray           # (15,15)
    J_alpha_ba: np.ndarray
    J_alpha_bg: np.ndarray
    J_beta_ba: np.ndarray
    J_beta_bg: np.ndarray
    J_gamma_bg: np.ndarray
    ba_lin: np.ndarray        # bias linearization point
    bg_lin: np.ndarray
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    infinite_variance: bool = False

    def corrected(self, ba, bg):
        """First-order bias-corrected (alpha, beta, Gamma rotation matrix)."""
        dba = ba - self.ba_lin
        dbg = bg - self.bg_lin
        a = self.alpha + self.J_alpha_ba @ dba + self.J_alpha_bg @ dbg
        b = self.beta + self.J_beta_ba @ dba + self.J_beta_bg @ dbg
        G = quat_to_matrix(self.gamma) @ so3_exp(self.J_gamma_bg @ dbg)
        return a, b, G


def preintegrate(samples, t0, t1, ba, bg, noise=None, gravity=None):
    """Midpoint preintegration of the samples spanning [t0, t1].

    Samples must bracket the interval (interpolation pads the ends).  An
    empty interval yields identity terms flagged infinite_variance."""
    noise = noise or ImuNoise()
    gravity = GRAVITY.copy() if gravity is None else np.asarray(gravity, dtype=np.float64)
    ba = np.asarray(ba, dtype=np.float64)
    bg = np.asarray(bg, dtype=np.float64)
    inside = [s for s in samples if t0 <= s.t <= t1]
    if len(inside) == 0:
        return PreintegratedImu(t1 - t0, np.zeros(3), np.zeros(3),
                                np.array([1.0, 0, 0, 0]), np.eye(15) * 1e12,
                                np.zeros((3, 3)), np.zeros((3, 3)),
                                np.zeros((3, 3)), np.zeros((3, 3)),
                                np.zeros((3, 3)), ba, bg, gravity,
                                infinite_variance=True)
    ts = [t0] + [s.t for s in inside if t0 < s.t < t1] + [t1]

    def _meas_at(t):
        # linear interpolation of the measurement stream at time t
        pts = samples
        if t <= pts[0].t:
            return pts[0].acc, pts[0].gyr
        if t >= pts[-1].t:
            return pts[-1].acc, pts[-1].gyr
        for a, b in zip(pts[:-1], pts[1:]):
            if a.t <= t <= b.t:
                if b.t == a.t:
                    return a.acc, a.gyr
                u = (t - a.t) / (b.t - a.t)
                return (1 - u) * a.acc + u * b.acc, (1 - u) * a.gyr + u * b.gyr
        return pts[-1].acc, pts[-1].gyr

    alpha = np.zeros(3)
    beta = np.zeros(3)
    gamma = np.array([1.0, 0.0, 0.0, 0.0])
    P = np.zeros((15, 15))
    J_a_ba = np.zeros((3, 3))
    J_a_bg = np.zeros((3, 3))
    J_b_ba = np.zeros((3, 3))
    J_b_bg = np.zeros((3, 3))
    J_q = np.zeros((3, 3))

    for ta, tb in zip(ts[:-1], ts[1:]):
        dt = tb - ta
        if dt <= 0:
            continue
        acc0, gyr0 = _meas_at(ta)
        acc1, gyr1 = _meas_at(tb)
        a0 = acc0 - ba
        a1 = acc1 - ba
        w_mid = 0.5 * (gyr0 + gyr1) - bg
        R0 = quat_to_matrix(gamma)
        dq = _small_quat(w_mid * dt)
        gamma_new = quat_normalize(quat_multiply(gamma, dq))
        R1 = quat_to_matrix(gamma_new)
        a_mid = 0.5 * (R0 @ a0 + R1 @ a1)

        # bias jacobians (first order)
        Jq_new = so3_exp(-w_mid * dt) @ J_q - np.eye(3) * dt
        da_mid_dbg = -0.5 * (R1 @ skew(a1)) @ Jq_new - 0.5 * (R0 @ skew(a0)) @ J_q
        da_mid_dba = -0.5 * (R0 + R1)
        J_a_ba = J_a_ba + J_b_ba * dt + 0.5 * da_mid_dba * dt * dt
        J_a_bg = J_a_bg + J_b_bg * dt + 0.5 * da_mid_dbg * dt * dt
        J_b_ba = J_b_ba + da_mid_dba * dt
        J_b_bg = J_b_bg + da_mid_dbg * dt

        # covariance propagation (state: da, db, dth, dba, dbg)
        dth_a = -0.5 * (R0 @ skew(a0) + R1 @ skew(a1))
        F = np.eye(15)
        F[0:3, 3:6] = np.eye(3) * dt
        F[0:3, 6:9] = 0.5 * dth_a * dt * dt
        F[0:3, 9:12] = -0.25 * (R0 + R1) * dt * dt
        F[0:3, 12:15] = 0.25 * (R1 @ skew(a1)) * dt * dt * dt
        F[3:6, 6:9] = dth_a * dt
        F[3:6, 9:12] = -0.5 * (R0 + R1) * dt
        F[3:6, 12:15] = 0.5 * (R1 @ skew(a1)) * dt * dt
        F[6:9, 6:9] = so3_exp(-w_mid * dt)
        F[6:9, 12:15] = -np.eye(3) * dt
        G = np.zeros((15, 12))
        G[0:3, 0:3] = 0.25 * R0 * dt * dt
        G[0:3, 6:9] = 0.25 * R1 * dt * dt
        G[0:3, 3:6] = G[0:3, 9:12] = -0.125 * (R1 @ skew(a1)) * dt * dt * dt
        G[3:6, 0:3] = 0.5 * R0 * dt
        G[3:6, 6:9] = 0.5 * R1 * dt
        G[3:6, 3:6] = G[3:6, 9:12] = -0.25 * (R1 @ skew(a1)) * dt * dt
        G[6:9, 3:6] = G[6:9, 9:12] = 0.5 * np.eye(3) * dt
        Q = np.zeros((12, 12))
        Q[0:3, 0:3] = Q[6:9, 6:9] = np.eye(3) * noise.acc_n ** 2 / dt
        Q[3:6, 3:6] = Q[9:12, 9:12] = np.eye(3) * noise.gyr_n ** 2 / dt
        P = F @ P @ F.T + G @ Q @ G.T
        P[9:12, 9:12] += np.eye(3) * noise.acc_w ** 2 * dt
        P[12:15, 12:15] += np.eye(3) * noise.gyr_w ** 2 * dt

        alpha = alpha + beta * dt + 0.5 * a_mid * dt * dt
        beta = beta + a_mid * dt
        gamma = gamma_new
        J_q = Jq_new

    P = 0.5 * (P + P.T) + np.eye(15) * 1e-14
    return PreintegratedImu(t1 - t0, alpha, beta, gamma, P,
                            J_a_ba, J_a_bg, J_b_ba, J_b_bg, J_q, ba, bg, gravity)


def _small_quat(w):
    th = np.linalg.norm(w)
    if th < 1e-12:
        return quat_normalize(np.array([1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]]))
    axis = w / th
    return np.array([np.cos(0.5 * th), *(np.sin(0.5 * th) * axis)])


# ---------------------------------------------------------------------------
# residual + jacobians
# ---------------------------------------------------------------------------

def imu_residual(x_k, x_k1, pre, jacobians=False):
    """Eq.-style 15-vector residual (position, velocity, rotation-log,
    accel-bias, gyro-bias blocks) with first-order bias correction.

    With jacobians=True also returns (J_k, J_k1), each 15x15 over the
    state tangent (pose left-perturbation (w, v), velocity, ba, bg)."""
    dt = pre.dt
    # physical gravity (pointing down); the printed residual's g^w is its
    # negation, so the world-motion terms subtract it here
    g = pre.gravity
    Rk = x_k.pose.R
    Rk1 = x_k1.pose.R
    pk = x_k.pose.t
    pk1 = x_k1.pose.t
    a_c, b_c, Gamma = pre.corrected(x_k.ba, x_k.bg)
    w_vec = pk1 - pk - 0.5 * g * dt * dt - x_k.vel * dt
    u_vec = x_k1.vel - g * dt - x_k.vel
    r_a = Rk.T @ w_vec - a_c
    r_b = Rk.T @ u_vec - b_c
    M = Rk.T @ Rk1 @ Gamma.T
    r_g = so3_log(M)
    r = np.concatenate([r_a, r_b, r_g, x_k1.ba - x_k.ba, x_k1.bg - x_k.bg])
    if not jacobians:
        return r
    Jl_inv = so3_left_jacobian_inv(r_g)
    Jr_inv = so3_left_jacobian_inv(-r_g)
    Jk = np.zeros((15, 15))
    Jk1 = np.zeros((15, 15))
    # r_a rows (0:3): state order [theta(0:3), rho(3:6), v(6:9), ba(9:12), bg(12:15)]
    Jk[0:3, 0:3] = Rk.T @ skew(w_vec + pk)
    Jk[0:3, 3:6] = -Rk.T
    Jk[0:3, 6:9] = -Rk.T * dt
    Jk[0:3, 9:12] = -pre.J_alpha_ba
    Jk[0:3, 12:15] = -pre.J_alpha_bg
    Jk1[0:3, 0:3] = -Rk.T @ skew(pk1)
    Jk1[0:3, 3:6] = Rk.T
    # r_b rows (3:6)
    Jk[3:6, 0:3] = Rk.T @ skew(u_vec)
    Jk[3:6, 6:9] = -Rk.T
    Jk[3:6, 9:12] = -pre.J_beta_ba
    Jk[3:6, 12:15] = -pre.J_beta_bg
    Jk1[3:6, 6:9] = Rk.T
    # r_g rows (6:9)
    Jk[6:9, 0:3] = -Jl_inv @ Rk.T
    Jk1[6:9, 0:3] = Jl_inv @ Rk.T
    dbg = x_k.bg - pre.bg_lin
    Jr_corr = so3_left_jacobian(-(pre.J_gamma_bg @ dbg))  # right jacobian of Exp
    GammaHat_corr = quat_to_matrix(pre.gamma) @ so3_exp(pre.J_gamma_bg @ dbg)
    Jk[6:9, 12:15] = -Jr_inv @ GammaHat_corr @ Jr_corr @ pre.J_gamma_bg
    # bias rows
    Jk[9:12, 9:12] = -np.eye(3)
    Jk[12:15, 12:15] = -np.eye(3)
    Jk1[9:12, 9:12] = np.eye(3)
    Jk1[12:15, 12:15] = np.eye(3)
    return r, Jk, Jk1


# ---------------------------------------------------------------------------
# visual factor
# ---------------------------------------------------------------------------

@dataclass
class VisualFactor:
    """Quadratic pose-information factor from the dense BA.

    H/v are expressed over stacked left tangents of the world-to-camera
    poses relative to base_poses_w2c (the DBA linearization); state_ids
    maps each stacked block to a graph state; T_cb is the camera-to-body
    extrinsic."""
    H: np.ndarray
    v: np.ndarray
    base_poses_w2c: list
    state_ids: list
    T_cb: SE3 = field(default_factory=SE3.identity)

    def camera_tangents(self, states):
        xs = []
        for sid, base in zip(self.state_ids, self.base_poses_w2c):
            T_wc = (states[sid].pose * self.T_cb).inverse()
            xs.append((T_wc * base.inverse()).log())
        return np.concatenate(xs)


def visual_factor_energy(X_c, H_c, v_c):
    """E = 0.5 X^T H X - X^T v and its gradient H X - v."""
    X_c = np.asarray(X_c, dtype=np.float64)
    return (0.5 * X_c @ H_c @ X_c - X_c @ v_c, H_c @ X_c - v_c)


# ---------------------------------------------------------------------------
# graph optimization
# ---------------------------------------------------------------------------

@dataclass
class GraphConfig:
    max_iterations: int = 20
    tol: float = 1e-6
    lm_init: float = 1e-6
    prior_vel: float = 1e-2      # information weight on initial velocity
    prior_bias: float = 1e2      # weak prior keeping biases bounded
    bias_cap: float = 1.0


def _total_cost(states, factors, preints):
    c = 0.0
    for vf in factors:
        X = vf.camera_tangents(states)
        e, _ = visual_factor_energy(X, vf.H, vf.v)
        c += e
    for (i, j, pre, Winfo) in preints:
        r = imu_residual(states[i], states[j], pre)
        c += 0.5 * r @ Winfo @ r
    return c


def optimize_vi_graph(states, visual_factors, preints, config=None):
    """Damped Gauss-Newton over all states.

    states: list[ImuState]; visual_factors: list[VisualFactor]; preints:
    list[(i, j, PreintegratedImu)] between consecutive states.  The first
    pose is gauge-fixed.  Returns (states, info dict).  Raises
    GraphDiverged when the cost rises five consecutive damped steps."""
    cfg = config or GraphConfig()
    states = [s.copy() for s in states]
    n = len(states)
    D = 15 * n
    pre_w = []
    for (i, j, pre) in preints:
        info = np.linalg.inv(pre.cov)
        info = 0.5 * (info + info.T)
        pre_w.append((i, j, pre, info))

    lam = cfg.lm_init
    best = _total_cost(states, visual_factors, pre_w)
    rises = 0
    it_done = 0
    for it in range(cfg.max_iterations):
        H = np.zeros((D, D))
        b = np.zeros(D)
        for vf in visual_factors:
            X = vf.camera_tangents(states)
            _, gX = visual_factor_energy(X, vf.H, vf.v)
            # chain: left-perturb body pose k -> X block via -Ad(T_w^c)
            Ads = []
            for sid in vf.state_ids:
                T_wc = (states[sid].pose * vf.T_cb).inverse()
                Ads.append(-T_wc.adjoint())
            for a, sid_a in enumerate(vf.state_ids):
                sa = 15 * sid_a
                b[sa:sa + 6] -= Ads[a].T @ gX[6 * a:6 * a + 6]
                for c2, sid_c in enumerate(vf.state_ids):
                    sc = 15 * sid_c
                    Hb = Ads[a].T @ vf.H[6 * a:6 * a + 6, 6 * c2:6 * c2 + 6] @ Ads[c2]
                    H[sa:sa + 6, sc:sc + 6] += Hb
        for (i, j, pre, Winfo) in pre_w:
            r, Jk, Jk1 = imu_residual(states[i], states[j], pre, jacobians=True)
            si, sj = 15 * i, 15 * j
            H[si:si + 15, si:si + 15] += Jk.T @ Winfo @ Jk
            H[sj:sj + 15, sj:sj + 15] += Jk1.T @ Winfo @ Jk1
            Hij = Jk.T @ Winfo @ Jk1
            H[si:si + 15, sj:sj + 15] += Hij
            H[sj:sj + 15, si:si + 15] += Hij.T
            b[si:si + 15] -= Jk.T @ Winfo @ r
            b[sj:sj + 15] -= Jk1.T @ Winfo @ r
        # priors: velocities and biases (keeps the system PD); first pose gauge
        for k in range(n):
            s = 15 * k
            H[s + 6:s + 9, s + 6:s + 9] += np.eye(3) * cfg.prior_vel
            H[s + 9:s + 15, s + 9:s + 15] += np.eye(6) * (1.0 / cfg.prior_bias ** 2)
        fixed = np.arange(6)
        Hg = np.delete(np.delete(H, fixed, 0), fixed, 1)
        bg_ = np.delete(b, fixed)

        accepted = False
        for _ in range(8):
            try:
                dx = scipy.linalg.solve(Hg + lam * np.eye(D - 6), bg_,
                                        assume_a="pos")
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            full = np.zeros(D)
            full[6:] = dx
            trial = []
            for k, s in enumerate(states):
                d = full[15 * k:15 * (k + 1)]
                ns = s.copy()
                ns.pose = SE3.exp(d[:6]) * s.pose
                ns.vel = s.vel + d[6:9]
                ns.ba = np.clip(s.ba + d[9:12], -cfg.bias_cap, cfg.bias_cap)
                ns.bg = np.clip(s.bg + d[12:15], -cfg.bias_cap, cfg.bias_cap)
                trial.append(ns)
            c_new = _total_cost(trial, visual_factors, pre_w)
            if c_new <= best + 1e-12:
                states = trial
                best = c_new
                lam = max(lam * 0.3, 1e-9)
                accepted = True
                rises = 0
                break
            lam *= 10
            rises += 1
            if rises >= 5:
                raise GraphDiverged("cost rose on 5 consecutive damped steps")
        it_done = it + 1
        if not accepted or np.linalg.norm(full[6:]) < cfg.tol:
            break
    return states, {"cost": best, "iterations": it_done}
