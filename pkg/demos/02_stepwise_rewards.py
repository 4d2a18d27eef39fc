"""Stepwise rewards along a trajectory, and the gains they telescope into.

Each state x_t of a 10-step em rollout is denoised with 5 Euler substeps and
scored.  The resulting curve r_t is usually not monotone: some transitions
raise the reward and some lower it.  Gains g = r_next - r sum exactly to the
final minus the initial reward.
"""

import numpy as np

from stepgrpo.grpo import TrainConfig, rollout_group
from stepgrpo.harness.runs import profile_gains
from stepgrpo.seeding import stream

from _shared import quick_reference

exp, net = quick_reference()
cfg = TrainConfig(N=4, T=10, substeps=5)
group = rollout_group(net, 0, stream(1, "demo").standard_normal(2), cfg, exp.reward,
                      [stream(1, "demo", i) for i in range(4)])
np.set_printoptions(precision=3, suppress=True)
for i, tr in enumerate(group.trajectories):
    print(f"trajectory {i}: r_t = {tr.rewards}")
    print(f"              g   = {tr.gains}  (sum {tr.gains.sum():+.3f} = r_0 - r_T {tr.rewards[-1] - tr.rewards[0]:+.3f})")

rows = profile_gains(exp, net.params, n_prompts=32)
print("mean |gain| per transition (t_from -> t_to):")
for k, t_from, t_to, mag, count in rows:
    print(f"  {t_from:.1f} -> {t_to:.1f}: {mag:.4f}")
