import time
import numpy as np
from splatslam.geometry import SE3, PinholeCamera, quat_normalize, quat_to_matrix
from splatslam.splat import (GaussianStore, Gaussian2D, splat_weight,
                             rasterize_forward, rasterize_backward_full,
                             rasterize_backward_sampled)

rng = np.random.default_rng(3)


def random_store(n, rng):
    mu = np.stack([rng.uniform(-1.5, 1.5, n), rng.uniform(-1.5, 1.5, n),
                   rng.uniform(1.5, 5.0, n)], axis=1)
    quat = rng.normal(size=(n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    scale = rng.uniform(0.08, 0.35, size=(n, 2))
    alpha = rng.uniform(0.2, 0.85, n)
    color = rng.uniform(0.05, 0.95, size=(n, 3))
    return GaussianStore.from_arrays(mu, quat, scale, alpha, color)


cam = PinholeCamera(80.0, 80.0, 31.5, 31.5, 64, 64)
pose = SE3()  # camera at origin looking +z
store = random_store(40, rng)

t0 = time.time()
ctx = rasterize_forward(store, cam, pose)
print("forward+jit:", time.time() - t0)

# scalar reference compositing on a few pixels
def ref_pixel(ix, iy):
    gs = [Gaussian2D(store.mu[i], store.quat[i], store.scale[i], store.alpha[i], store.color[i])
          for i in range(len(store))]
    order = np.argsort([ (pose.inverse().apply(g.mu))[2] for g in gs], kind="stable")
    T = 1.0; C = np.zeros(3); D = 0.0; A = 0.0
    for i in order:
        g = gs[i]
        f = splat_weight(g, (ix, iy), cam, pose)
        if f <= 0: continue
        f = min(f, 1 - 1e-6)
        w = f * T
        C += w * np.asarray(g.color); D += w * (pose.inverse().apply(g.mu))[2]; A += w
        T *= 1 - f
    return C, D, A

err = 0.0
for (ix, iy) in [(10, 10), (32, 32), (50, 20), (5, 60), (63, 0)]:
    C, D, A = ref_pixel(ix, iy)
    err = max(err, np.abs(C - ctx.out.color[iy, ix]).max(),
              abs(D - ctx.out.depth[iy, ix]), abs(A - ctx.out.accum[iy, ix]))
print("scalar-oracle max err:", err)

# FD check with a linear functional
WC = rng.normal(size=(64, 64, 3)); WD = rng.normal(size=(64, 64))
WN = rng.normal(size=(64, 64, 3)); WA = rng.normal(size=(64, 64))

def scalar_loss(st):
    c = rasterize_forward(st, cam, pose, store_checkpoints=False)
    return float((WC * c.out.color).sum() + (WD * c.out.depth).sum()
                 + (WN * c.out.normal).sum() + (WA * c.out.accum).sum())

g = rasterize_backward_full(ctx, (WC, WD, WN, WA), want_pose=True)
h = 1e-5
bad = 0; checked = 0; worst = 0.0; worst_what = None
for i in range(len(store)):
    for (arr, garr, name) in ((store.mu, g.mu, "mu"), (store.quat, g.quat, "quat"),
                              (store.scale, g.scale, "scale"),
                              (store.alpha[:, None], g.alpha[:, None], "alpha"),
                              (store.color, g.color, "color")):
        for j in range(arr.shape[1]):
            old = arr[i, j]
            arr[i, j] = old + h; lp = scalar_loss(store)
            arr[i, j] = old - h; lm = scalar_loss(store)
            arr[i, j] = old
            fd = (lp - lm) / (2 * h)
            an = garr[i, j]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-7)
            checked += 1
            if rel > worst:
                worst = rel; worst_what = (name, i, j, fd, an)
            if rel > 1e-4:
                bad += 1
print("FD params checked:", checked, "bad:", bad, "worst:", worst, worst_what)

# pose gradient FD
def loss_at_pose(T):
    c = rasterize_forward(store, cam, T, store_checkpoints=False)
    return float((WC * c.out.color).sum() + (WD * c.out.depth).sum()
                 + (WN * c.out.normal).sum() + (WA * c.out.accum).sum())

fdp = np.zeros(6)
for j in range(6):
    e = np.zeros(6); e[j] = h
    fdp[j] = (loss_at_pose(SE3.exp(e) * pose) - loss_at_pose(SE3.exp(-e) * pose)) / (2 * h)
relp = np.abs(fdp - g.pose) / np.maximum(np.abs(fdp), 1e-7)
print("pose grad rel err:", relp.max(), fdp, g.pose)

# sampled r=1 vs full
lm = rng.uniform(size=(64, 64))
gs = rasterize_backward_sampled(ctx, (WC, WD, WN, WA), lm, 1.0)
print("sampled r=1 max diff:",
      max(np.abs(gs.mu - g.mu).max(), np.abs(gs.quat - g.quat).max(),
          np.abs(gs.scale - g.scale).max(), np.abs(gs.alpha - g.alpha).max(),
          np.abs(gs.color - g.color).max()))
