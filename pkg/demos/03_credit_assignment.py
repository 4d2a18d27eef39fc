"""From stepwise rewards to advantages, for every credit method.

A hand-written 3 x 4 reward matrix (3 trajectories, 3 transitions) is turned
into advantages.  Uniform credit gives each trajectory one number; the
stepwise methods score transitions individually.
"""

import numpy as np

from stepgrpo.credit import METHODS, advantages, gains

rewards = np.array([
    [0.10, 0.40, 0.30, 0.90],
    [0.20, 0.20, 0.60, 0.50],
    [0.15, 0.05, 0.10, 0.20],
])
np.set_printoptions(precision=3, suppress=True)
print("gains:\n", gains(rewards))
for method in METHODS:
    adv, _ = advantages(method, rewards)
    print(f"{method}:\n{adv}")
