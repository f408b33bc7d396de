import time

import numpy as np

from mindreg.engine import RegistrationConfig, register_pair
from mindreg.losses import LossWeights
from mindreg.metrics import dice, tre, warp_labels
from mindreg.synth import PhantomSpec, make_case

case = make_case(PhantomSpec(seed=0))

variants = {
    "A_iter150": RegistrationConfig(iterations_per_level=150, final_phase_iterations=40),
    "B_diff03": RegistrationConfig(weights=LossWeights(diffusion=0.3, ndv=1000.0, group_consistency=1.0)),
    "C_lr015": RegistrationConfig(learning_rate=0.15),
    "D_it150_diff03": RegistrationConfig(
        iterations_per_level=150,
        final_phase_iterations=40,
        weights=LossWeights(diffusion=0.3, ndv=1000.0, group_consistency=1.0),
    ),
}

for name, cfg in variants.items():
    t0 = time.perf_counter()
    res = register_pair(case.fixed, case.moving, cfg)
    el = time.perf_counter() - t0
    t1, _ = tre(case.landmarks_fixed, case.landmarks_moving, res.forward_total)
    _, d1 = dice(case.labels_fixed, warp_labels(case.labels_moving, res.forward_total))
    print(f"{name}: {el:.0f}s tre {t1:.3f} dice {d1:.3f}", flush=True)
