"""Pretraining and training runs, metrics rows and paired comparisons.

Metrics files are RFC-4180 CSV with a fixed header.  Floats are written with
``repr`` so a re-read gives back the exact value.  Wall-clock time is the one
nondeterministic quantity; it goes to the JSON summaries, and into the CSV
``wall_ms`` column only when explicitly requested.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..diffnet import OptState, VelocityNet, forward, init_params, save_checkpoint
from ..flowcore import pretrain
from ..grpo import TrainState, draw_group_inputs, rollout_group, train_iteration
from ..sde import NoiseSchedule
from ..seeding import stream

WINDOW = 10

METRICS_COLUMNS = ("run_id", "seed", "iteration", "wall_ms", "mean_final_reward", "mean_kl", "clip_frac",
                   "objective")
PRETRAIN_COLUMNS = ("iteration", "train_loss", "heldout_loss", "heldout_threshold", "below_threshold")
PROFILE_COLUMNS = ("transition", "t_from", "t_to", "mean_abs_gain", "count")


def metrics_header(steps):
    return list(METRICS_COLUMNS) + [f"gain_{k}" for k in range(steps)]


def fmt(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) if not isinstance(v, str) else v for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(csv_text(header, rows))


def read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainOutcome:
    net: VelocityNet
    losses: list
    heldout_loss: float
    threshold: float

    @property
    def passed(self):
        return self.heldout_loss < self.threshold

    def rows(self):
        out = [[i, loss, None, None, None] for i, loss in enumerate(self.losses)]
        out.append([len(self.losses), None, self.heldout_loss, self.threshold, self.passed])
        return out


def run_pretrain(exp):
    """Fit the reference policy; init and batches use separate named streams."""
    pre = exp.pretrain
    net = VelocityNet(exp.net, init_params(exp.net, stream(pre.seed, "init")))
    opt = OptState.zeros(len(net.params), lr=pre.lr)
    res = pretrain(net, exp.distribution, pre.iterations, stream(pre.seed, "pretrain"),
                   batch_size=pre.batch_size, opt=opt, heldout_size=pre.heldout_size,
                   final_lr_frac=pre.final_lr_frac)
    return PretrainOutcome(res.net, res.losses, res.heldout_loss, pre.heldout_threshold)


# ---------------------------------------------------------------------------
# training


def iterations_to_threshold(rewards, threshold, window=WINDOW):
    """First iteration whose trailing ``window`` mean reaches ``threshold``, else None."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < window:
        return None
    # sum then divide, so a window summing to exactly k·threshold is not lost to rounding
    smooth = np.lib.stride_tricks.sliding_window_view(r, window).sum(axis=1) / window
    hits = np.nonzero(smooth >= threshold)[0]
    return int(hits[0] + window - 1) if hits.size else None


@dataclass
class RunResult:
    run_id: str
    seed: int
    state: TrainState
    history: list

    @property
    def rewards(self):
        return np.array([m.mean_final_reward for m in self.history])

    @property
    def initial_reward(self):
        return float(self.rewards[:WINDOW].mean())

    @property
    def final_reward(self):
        return float(self.rewards[-WINDOW:].mean())

    @property
    def wall_ms(self):
        return [m.wall_ms for m in self.history]

    def reached(self, threshold):
        return iterations_to_threshold(self.rewards, threshold)

    def rows(self, wall_clock="off"):
        out, total = [], 0.0
        for m in self.history:
            total += m.wall_ms
            wall = {"off": None, "per-iteration": m.wall_ms, "cumulative": total}[wall_clock]
            out.append([self.run_id, self.seed, m.iteration, wall, m.mean_final_reward, m.mean_kl,
                        m.clip_frac, m.objective] + list(m.gain_profile))
        return out

    def summary(self, threshold):
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "iterations": len(self.history),
            "iterations_to_threshold": self.reached(threshold),
            "initial_reward": self.initial_reward,
            "final_reward": self.final_reward,
            "total_wall_ms": float(np.sum(self.wall_ms)),
        }


def run_training(exp, theta_ref, seed, train=None, run_id=None):
    cfg = replace(train or exp.train, seed=int(seed))
    state = TrainState.start(exp.net, theta_ref, cfg)
    history = []
    for _ in range(cfg.iterations):
        state, m = train_iteration(state, cfg, exp.reward, exp.n_contexts)
        history.append(m)
    return RunResult(run_id or f"{cfg.method}-s{seed}", int(seed), state, history)


def save_run_checkpoints(directory, exp, result):
    directory = Path(directory)
    triple = result.state.triple
    for role, params in (("policy", triple.theta), ("old", triple.theta_old), ("reference", triple.theta_ref)):
        save_checkpoint(directory / f"{role}.ckpt", exp.net, params, role=role)


def median_or_none(values):
    """Median where ``None`` (never reached) sorts above every number."""
    keyed = sorted(values, key=lambda v: (v is None, v if v is not None else 0))
    n = len(keyed)
    if n == 0:
        return None
    lo, hi = keyed[(n - 1) // 2], keyed[n // 2]
    if lo is None or hi is None:
        return None
    return (lo + hi) / 2


# ---------------------------------------------------------------------------
# comparisons


def parse_variant(text, base):
    """``method@key=value@schedule.kind=ddim`` → (label, TrainConfig)."""
    parts = text.split("@")
    method, overrides = parts[0], parts[1:]
    cfg = replace(base, method=method)
    sched = {k: getattr(cfg.schedule, k) for k in ("kind", "a", "eta", "ddim_form")}
    plain = {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if key.startswith("schedule."):
            sched[key.split(".", 1)[1]] = value
        else:
            plain[key] = value
    cfg = replace(cfg, schedule=NoiseSchedule(**sched), **plain)
    return text, cfg


def compare_summary(results_by_label, threshold, band):
    """Paired statistics over methods that ran on the same seeds."""
    methods = {}
    for label, runs in results_by_label.items():
        reached = [r.reached(threshold) for r in runs]
        methods[label] = {
            "seeds": [r.seed for r in runs],
            "iterations_to_threshold": reached,
            "median_iterations_to_threshold": median_or_none(reached),
            "final_reward": [r.final_reward for r in runs],
            "median_final_reward": float(np.median([r.final_reward for r in runs])),
            "initial_reward": [r.initial_reward for r in runs],
            "total_wall_ms": float(sum(np.sum(r.wall_ms) for r in runs)),
        }
    finals = [m["median_final_reward"] for m in methods.values()]
    labels = list(methods)
    first = labels[0]
    orderings = {}
    for other in labels[1:]:
        a = methods[first]["median_iterations_to_threshold"]
        b = methods[other]["median_iterations_to_threshold"]
        if a is None and b is None:
            orderings[f"{first} <= {other}"] = {"holds": None, "regression": False}
            continue
        ok = a is not None and (b is None or a <= b)
        orderings[f"{first} <= {other}"] = {"holds": ok, "regression": not ok}
    return {
        "threshold": threshold,
        "methods": methods,
        "median_iterations_ordering": orderings,
        "final_reward_spread": float(max(finals) - min(finals)),
        "final_reward_band": band,
        "within_band": bool(max(finals) - min(finals) <= band),
    }


# ---------------------------------------------------------------------------
# gain profiles


def profile_gains(exp, theta, n_prompts, seed=0):
    """Mean ``|g_t|`` per transition over ``n_prompts`` groups rolled out with ``theta``."""
    cfg = exp.train

    def velocity(x, t, c):
        return forward(exp.net, theta, x, t, c)

    total = np.zeros(cfg.T)
    count = 0
    for k in range(n_prompts):
        c, x_T = draw_group_inputs(seed, k, exp.n_contexts, exp.distribution.dim)
        rngs = [stream(seed, "traj", k, i) for i in range(cfg.N)]
        group = rollout_group(velocity, c, x_T, cfg, exp.reward, rngs)
        total += np.abs(group.stack("gains")).sum(axis=0)
        count += len(group)
    grid = cfg.grid
    return [[k, grid.times[k], grid.times[k + 1], total[k] / count, count] for k in range(cfg.T)]

