import numpy as np
from splatslam.geometry import SE3, PinholeCamera
from splatslam.frontend import (CorrespondenceField, build_dba_system,
                                schur_pose_solve, depth_update, depth_uncertainty)

rng = np.random.default_rng(7)
cam = PinholeCamera(20.0, 20.0, 1.5, 1.5, 4, 4)  # low-res toy camera


def toy_instance(rng, n_frames=3, zero_residual=False):
    poses = [SE3.exp(np.concatenate([rng.normal(0, 0.05, 3), rng.normal(0, 0.3, 3)]))
             for _ in range(n_frames)]
    invd = [rng.uniform(0.3, 1.2, (4, 4)) for _ in range(n_frames)]
    fields = []
    iy, ix = np.mgrid[0:4, 0:4]
    for i in range(n_frames):
        for j in range(n_frames):
            if i == j:
                continue
            rays = np.stack([(ix - cam.cx) / cam.fx, (iy - cam.cy) / cam.fy,
                             np.ones((4, 4))], axis=2).reshape(-1, 3)
            Xi = rays / invd[i].reshape(-1)[:, None]
            Tij = poses[j] * poses[i].inverse()
            Xj = Xi @ Tij.R.T + Tij.t
            uj = cam.fx * Xj[:, 0] / Xj[:, 2] + cam.cx
            vj = cam.fy * Xj[:, 1] / Xj[:, 2] + cam.cy
            proj = np.stack([uj, vj], axis=1).reshape(4, 4, 2)
            if zero_residual:
                flow = proj
            else:
                flow = proj + rng.normal(0, 0.5, (4, 4, 2))
            wgt = rng.uniform(0.2, 1.0, (4, 4))
            fields.append(CorrespondenceField(i, j, flow, wgt))
    return poses, invd, fields


def cost_fn(poses, invd, fields):
    sys_ = build_dba_system(poses, invd, fields, cam, huber_px=1e9, c_damping=0.0)
    return sys_.cost

# --- 1. gradient check: v == -grad cost ---
poses, invd, fields = toy_instance(rng)
sys_ = build_dba_system(poses, invd, fields, cam, huber_px=1e9, c_damping=0.0)
h = 1e-6
worst = 0
for fi in range(3):
    for k in range(6):
        e = np.zeros(6); e[k] = h
        pp = list(poses); pp[fi] = SE3.exp(e) * poses[fi]
        pm = list(poses); pm[fi] = SE3.exp(-e) * poses[fi]
        fd = (cost_fn(pp, invd, fields) - cost_fn(pm, invd, fields)) / (2 * h)
        an = -sys_.v[6 * fi + k]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-9))
print("pose gradient worst rel:", worst)
worst = 0
for fi in range(3):
    for p in range(16):
        dd = invd[fi].copy().reshape(-1)
        ip = [x.copy() for x in invd]; ip[fi] = (dd + h * (np.arange(16) == p)).reshape(4, 4)
        im = [x.copy() for x in invd]; im[fi] = (dd - h * (np.arange(16) == p)).reshape(4, 4)
        fd = (cost_fn(poses, ip, fields) - cost_fn(poses, im, fields)) / (2 * h)
        an = -sys_.z[16 * fi + p]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-9))
print("depth gradient worst rel:", worst)

# --- 2. Hessian check at zero residual (GN == true Hessian) ---
poses, invd, fields = toy_instance(rng, zero_residual=True)
sys0 = build_dba_system(poses, invd, fields, cam, huber_px=1e9, c_damping=0.0)
nP, nD = 18, 48
Hfull = np.zeros((nP + nD, nP + nD))
Hfull[:nP, :nP] = sys0.B
Hfull[:nP, nP:] = sys0.E
Hfull[nP:, :nP] = sys0.E.T
Hfull[nP:, nP:] = np.diag(sys0.C)

def grad_at(poses_, invd_):
    s = build_dba_system(poses_, invd_, fields, cam, huber_px=1e9, c_damping=0.0)
    return np.concatenate([-s.v, -s.z])

Hfd = np.zeros_like(Hfull)
h2 = 1e-6
for k in range(nP + nD):
    if k < nP:
        fi, kk = divmod(k, 6)
        e = np.zeros(6); e[kk] = h2
        pp = list(poses); pp[fi] = SE3.exp(e) * poses[fi]
        pm = list(poses); pm[fi] = SE3.exp(-e) * poses[fi]
        Hfd[:, k] = (grad_at(pp, invd) - grad_at(pm, invd)) / (2 * h2)
    else:
        fi, p = divmod(k - nP, 16)
        ip = [x.copy() for x in invd]; ip[fi].reshape(-1)[p] += h2
        im = [x.copy() for x in invd]; im[fi].reshape(-1)[p] -= h2
        Hfd[:, k] = (grad_at(ip, invd if False else invd) - grad_at(im, invd)) / (2 * h2) if False else (grad_at(poses, ip) - grad_at(poses, im)) / (2 * h2)
print("hessian max abs diff:", np.abs(Hfull - Hfd).max(), " scale:", np.abs(Hfull).max())

# --- 3. schur vs dense joint solve ---
for trial in range(20):
    poses, invd, fields = toy_instance(rng)
    lam = 1e-4
    sys_ = build_dba_system(poses, invd, fields, cam, huber_px=1e9, c_damping=0.0)
    dxi, lam_used = schur_pose_solve(sys_, lam)
    dd = depth_update(sys_, dxi, lam_used)
    # dense: drop first pose (gauge), damped
    nP = 6 * sys_.n_frames; nD = sys_.C.size
    H = np.zeros((nP + nD, nP + nD))
    H[:nP, :nP] = sys_.B + lam_used * np.eye(nP)
    H[:nP, nP:] = sys_.E
    H[nP:, :nP] = sys_.E.T
    H[nP:, nP:] = np.diag(sys_.C + lam_used)
    b = np.concatenate([sys_.v, sys_.z])
    keep = np.r_[np.arange(6, nP), np.arange(nP, nP + nD)]
    sol = np.linalg.solve(H[np.ix_(keep, keep)], b[keep])
    dxi_dense = sol[:nP - 6]
    dd_dense = sol[nP - 6:]
    e1 = np.abs(dxi[1:].reshape(-1) - dxi_dense).max()
    e2 = np.abs(dd - dd_dense).max()
    # uncertainty vs dense covariance depth diagonal
    var = depth_uncertainty(sys_, lam_used).reshape(-1)
    cov = np.linalg.inv(H[np.ix_(keep, keep)])
    var_dense = np.diag(cov)[nP - 6:]
    e3 = np.abs(var - var_dense).max()
    if trial < 3 or max(e1, e2, e3) > 1e-8:
        print(f"trial {trial}: schur dxi err {e1:.2e}, dd err {e2:.2e}, uncert err {e3:.2e}")
print("done")
