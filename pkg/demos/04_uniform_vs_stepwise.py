"""Paired GRPO runs: uniform trajectory credit against stepwise joint credit.

Both methods start from the same reference net and see the same context and
initial noise at every iteration, so differences come from the credit rule.
Runs 120 iterations on three seeds and reports iterations to a trailing-10
mean reward of 0.8.
"""

from dataclasses import replace

from stepgrpo.harness.runs import compare_summary, run_training

from _shared import quick_reference

exp, net = quick_reference()
train = replace(exp.train, iterations=120)
results = {}
for method in ("stepwise-joint", "uniform"):
    cfg = replace(train, method=method)
    results[method] = [run_training(exp, net.params, s, cfg) for s in (0, 1, 2)]
    for r in results[method]:
        print(f"{method:>15} seed {r.seed}: reward {r.initial_reward:.3f} -> {r.final_reward:.3f}, "
              f"iterations to 0.8: {r.reached(0.8)}")
report = compare_summary(results, 0.8, exp.band)
for name, entry in report["median_iterations_ordering"].items():
    print(f"median iterations {name}: {entry['holds']}")
