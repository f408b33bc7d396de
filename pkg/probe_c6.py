import time

import numpy as np

from mindreg.engine import RegistrationConfig, register_pair
from mindreg.metrics import dice, tre
from mindreg.synth import PhantomSpec, make_case
from mindreg.metrics import warp_labels

spec = PhantomSpec(seed=0)
case = make_case(spec)
zero = np.zeros(case.fixed.geometry.shape + (3,))
from mindreg.grids import VectorField

zf = VectorField(case.fixed.geometry, zero)
tre0, _ = tre(case.landmarks_fixed, case.landmarks_moving, zf)
_, dice0 = dice(case.labels_fixed, case.labels_moving)
print(f"initial tre {tre0:.3f} dice {dice0:.3f}", flush=True)

t0 = time.perf_counter()
res = register_pair(case.fixed, case.moving, RegistrationConfig())
t1 = time.perf_counter()
tre1, _ = tre(case.landmarks_fixed, case.landmarks_moving, res.forward_total)
warped = warp_labels(case.labels_moving, res.forward_total)
_, dice1 = dice(case.labels_fixed, warped)
print(f"default 48^3 register: {t1 - t0:.1f}s tre {tre0:.3f}->{tre1:.3f} dice {dice0:.3f}->{dice1:.3f}", flush=True)
