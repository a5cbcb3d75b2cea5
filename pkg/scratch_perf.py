import time
import numpy as np
from splatslam.geometry import SE3, PinholeCamera
from splatslam.splat import (GaussianStore, rasterize_forward,
                             rasterize_backward_full, rasterize_backward_sampled)

rng = np.random.default_rng(0)
n = 120_000
# box of splats in front of the camera, moderate overlap
mu = np.stack([rng.uniform(-8, 8, n), rng.uniform(-6, 6, n), rng.uniform(2, 14, n)], axis=1)
quat = rng.normal(size=(n, 4)); quat /= np.linalg.norm(quat, axis=1, keepdims=True)
scale = rng.uniform(0.02, 0.08, size=(n, 2))
alpha = rng.uniform(0.3, 0.9, n)
color = rng.uniform(0, 1, size=(n, 3))
store = GaussianStore.from_arrays(mu, quat, scale, alpha, color)
cam = PinholeCamera(400.0, 400.0, 319.5, 239.5, 640, 480)
pose = SE3()

t0 = time.time(); ctx = rasterize_forward(store, cam, pose); t_fwd1 = time.time() - t0
t0 = time.time(); ctx = rasterize_forward(store, cam, pose); t_fwd = time.time() - t0
print(f"pairs={len(ctx.tile_gauss)}, ckpt={0 if ctx.ckpt is None else ctx.ckpt.nbytes/1e6:.0f}MB")
print(f"forward: {t_fwd:.3f}s (first {t_fwd1:.3f}s)  mean overlap={ctx.out.accum.mean():.2f}")

WC = rng.normal(size=(480, 640, 3)); WD = rng.normal(size=(480, 640))
WN = rng.normal(size=(480, 640, 3)); WA = rng.normal(size=(480, 640))
lm = rng.uniform(size=(480, 640))

g = rasterize_backward_full(ctx, (WC, WD, WN, WA))
t0 = time.time(); g = rasterize_backward_full(ctx, (WC, WD, WN, WA)); t_full = time.time() - t0
gs = rasterize_backward_sampled(ctx, (WC, WD, WN, WA), lm, 0.5)
t0 = time.time(); gs = rasterize_backward_sampled(ctx, (WC, WD, WN, WA), lm, 0.5); t_samp = time.time() - t0
print(f"backward full: {t_full:.3f}s  sampled r=0.5: {t_samp:.3f}s  ratio={t_samp/t_full:.3f}")

gs1 = rasterize_backward_sampled(ctx, (WC, WD, WN, WA), lm, 1.0)
print("r=1 max diff:", np.abs(gs1.mu - g.mu).max())
