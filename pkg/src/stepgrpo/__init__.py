"""Stepwise credit assignment for GRPO fine-tuning of flow-matching samplers.

Modules, bottom up:

* ``diffnet``   small MLP velocity net with a reverse-mode tape, AdamW, checkpoints
* ``flowcore``  rectified-flow interpolation, Tweedie estimates, ODE sampling, pretraining
* ``sde``       Euler–Maruyama and DDIM-style stochastic steppers, log-probs, KL, rollouts
* ``rewardlab`` toy rewards and stepwise rewards from multi-step denoising
* ``credit``    gains and their normalisations into advantages
* ``grpo``      clipped surrogate, KL anchor, training loop
* ``harness``   JSON configs, CLI, metrics CSVs, invariant checks
"""

__version__ = "0.1.0"
