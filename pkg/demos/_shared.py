"""Helpers shared by the demo scripts: a quickly pretrained reference policy."""

from dataclasses import replace

from stepgrpo.harness import config
from stepgrpo.harness.runs import run_pretrain


def quick_reference(iterations=3000):
    """Reference task with a shorter pretraining run (a few seconds on one core)."""
    exp = config.reference()
    exp = replace(exp, pretrain=replace(exp.pretrain, iterations=iterations))
    res = run_pretrain(exp)
    print(f"pretrained {iterations} iterations, held-out fm_loss {res.heldout_loss:.3f}")
    return exp, res.net
