import time

import numpy as np

from mindreg.bspline import BSplineField, StageStack, bspline_to_dense, control_grid_shape
from mindreg.grids import GridGeometry, MaskVolume, ScalarVolume
from mindreg.losses import LossWeights, PairObjective, loss_gradient, loss_value
from mindreg.mind import mind_transform

shape = (16, 16, 16)
geom = GridGeometry(shape, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
nc = control_grid_shape(shape, 4)
n_coeff = int(np.prod(nc)) * 3
print(f"control grid {nc} -> {n_coeff} coefficients")

rng = np.random.default_rng(0)


def smooth_image(r):
    raw = r.standard_normal(shape)
    from scipy.ndimage import gaussian_filter

    img = gaussian_filter(raw, 1.5)
    img = (img - img.min()) / (img.max() - img.min())
    return ScalarVolume(geom, img)


fixed = smooth_image(rng)
moving = smooth_image(rng)
mask = MaskVolume(geom, np.ones(shape, dtype=bool))

ff = mind_transform(fixed).data
mf = mind_transform(moving).data
print(f"mind feature shape {ff.shape}")

stage = BSplineField(geom, 4, np.zeros(nc + (3,)))
stack = StageStack((stage,))
raw = rng.uniform(-2.0, 2.0, size=nc + (3,))

# frozen tail for the cycle term
tail = []
for _ in range(2):
    c = rng.uniform(-0.3, 0.3, size=nc + (3,))
    tail.append(bspline_to_dense(BSplineField(geom, 4, c)))

weights = LossWeights(similarity=1.0, diffusion=1.0, ndv=1000.0, group_consistency=1.0)
obj = PairObjective(geom, ff, mf, mask, weights=weights, cycle_tail=tuple(tail))

t0 = time.perf_counter()
rep = loss_value(obj, stack, 0, raw)
t1 = time.perf_counter()
print(f"first loss_value {t1 - t0 :.3f}s total {rep.total:.6f} terms {sorted(rep.terms)}")

t0 = time.perf_counter()
for _ in range(10):
    loss_value(obj, stack, 0, raw)
t1 = time.perf_counter()
per = (t1 - t0) / 10
print(f"loss_value {per * 1000:.1f} ms -> sweep {2 * n_coeff * per:.1f}s/seed, 10 seeds {20 * n_coeff * per:.0f}s")

t0 = time.perf_counter()
g = loss_gradient(obj, stack, 0, raw)
t1 = time.perf_counter()
print(f"loss_gradient {t1 - t0:.3f}s |g| range [{np.abs(g).min():.2e}, {np.abs(g).max():.2e}]")

# raw-intensity variant for comparison
obj1 = PairObjective(geom, fixed.data[..., None], moving.data[..., None], mask, weights=weights, cycle_tail=tuple(tail))
t0 = time.perf_counter()
for _ in range(10):
    loss_value(obj1, stack, 0, raw)
t1 = time.perf_counter()
per1 = (t1 - t0) / 10
print(f"raw-feature loss_value {per1 * 1000:.1f} ms -> 10-seed sweep {20 * n_coeff * per1:.0f}s")

# spot FD check on a handful of coefficients before committing to the full sweep
h = 1e-4
flat = raw.reshape(-1)
idx = rng.choice(flat.size, size=12, replace=False)
worst = 0.0
for k in idx:
    p = flat.copy()
    p[k] += h
    fp = loss_value(obj, stack, 0, p.reshape(raw.shape)).total
    p[k] -= 2 * h
    fm = loss_value(obj, stack, 0, p.reshape(raw.shape)).total
    fd = (fp - fm) / (2 * h)
    a = g.reshape(-1)[k]
    err = abs(a - fd)
    rel = err / max(abs(a), abs(fd), 1e-30)
    worst = max(worst, min(rel, err * 1e8))
    print(f"  coeff {k}: analytic {a: .6e} fd {fd: .6e} abs {err:.2e} rel {rel:.2e}")
print(f"worst effective {worst:.3e}")
