"""Closed-form facts about one sampler step.

With synthetic unit-variance noise predictions, a ddim step keeps the
interpolation variance (t - dt)^2 while an em step adds a little more.  The
ddim noise coefficient is close to its Taylor expansion, with an error of
fourth order in sigma.
"""

import numpy as np

from stepgrpo.harness.checks import em_one_step_variance
from stepgrpo.sde import coefficient_gap, ddim_step
from stepgrpo.seeding import stream

rng = stream(0, "demo")
t, dt = 0.7, 0.1
s = t - dt
for frac in (0.25, 0.5, 0.75):
    sig = frac * s
    x1hat, eps = rng.standard_normal((2, 100_000))
    var = ddim_step(np.zeros_like(x1hat), x1hat, t, dt, sig, eps).var()
    print(f"sigma {sig:.3f}: ddim variance {var:.4f} vs (t-dt)^2 {s * s:.4f}; "
          f"em variance {em_one_step_variance(t, dt, sig):.4f}")

for sig in (0.02, 0.05, 0.1, 0.2):
    ddim, exact, taylor = coefficient_gap(0.5, 0.1, sig)
    print(f"sigma {sig:.2f}: ddim {ddim:.7f}, taylor {taylor:.7f}, gap {taylor - ddim:.2e}, "
          f"sigma^4/(8 s^3) {sig ** 4 / (8 * 0.4 ** 3):.2e}")
