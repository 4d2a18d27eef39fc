import hashlib
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from stepgrpo.harness import checks, cli, runs
from stepgrpo.harness.config import ConfigError, ExperimentConfig, from_dict, load, reference_dict
from stepgrpo.seeding import stream

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMOKE = CONFIGS / "smoke.json"


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def smoke_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert cli.main(["pretrain", "--config", str(SMOKE), "--out", str(out)]) == 0
    return out / "reference.ckpt"


def write_cfg(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


# ---------------------------------------------------------------------------
# config


def test_reference_config_round_trips():
    exp = from_dict(reference_dict())
    assert isinstance(exp, ExperimentConfig) and exp.n_contexts == 2
    again = from_dict(exp.to_dict())
    assert again.to_dict() == exp.to_dict()
    assert load(CONFIGS / "reference.json").to_dict() == exp.to_dict()


@pytest.mark.parametrize("mutate,field", [
    (lambda d: d["task"]["distribution"].pop("means"), "task.distribution.means"),
    (lambda d: d["task"].pop("reward"), "task.reward"),
    (lambda d: d["task"]["reward"].pop("kind"), "task.reward.kind"),
    (lambda d: d["train"].update(N=1), "train"),
    (lambda d: d["train"].update(gamma=0.9), "train.gamma"),
    (lambda d: d["train"].update(schedule={"kind": "cosine"}), "train.schedule"),
    (lambda d: d.update(seeds=[]), "seeds"),
    (lambda d: d.update(seeds=[1, 1]), "seeds"),
    (lambda d: d.update(threshold="high"), "threshold"),
    (lambda d: d["task"]["reward"].update(targets=[[1, 1]]), "task.reward.targets"),
    (lambda d: d.update(extra=1), "extra"),
])
def test_config_errors_name_the_field(mutate, field):
    doc = reference_dict()
    mutate(doc)
    with pytest.raises(ConfigError) as info:
        from_dict(doc)
    assert info.value.path == field
    assert str(info.value).startswith(field)


def test_json_syntax_error_reports_line_and_column(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "task": {\n    "distribution": [1, 2,]\n  }\n}\n')
    with pytest.raises(ConfigError) as info:
        load(bad)
    assert ":3:" in str(info.value)


def test_cli_config_error_exits_2(tmp_path, capsys):
    doc = reference_dict()
    del doc["task"]["distribution"]["means"]
    code = cli.main(["pretrain", "--config", str(write_cfg(tmp_path, doc)), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG
    assert "task.distribution.means" in capsys.readouterr().err


def test_cli_missing_checkpoint_exits_3(tmp_path, capsys):
    code = cli.main(["train", "--config", str(SMOKE), "--ckpt", str(tmp_path / "none.ckpt"),
                     "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_MISSING
    assert "none.ckpt" in capsys.readouterr().err
    code = cli.main(["profile-gains", "--config", str(SMOKE), "--ckpt", str(tmp_path / "none.ckpt"),
                     "--out", str(tmp_path / "p.csv")])
    assert code == cli.EXIT_MISSING


def test_cli_checkpoint_for_other_net_is_config_error(tmp_path, smoke_ckpt):
    doc = json.loads(SMOKE.read_text())
    doc["net"] = {"hidden_widths": [8]}
    code = cli.main(["train", "--config", str(write_cfg(tmp_path, doc)), "--ckpt", str(smoke_ckpt),
                     "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG


def test_invalid_thread_env_is_config_error(monkeypatch, capsys):
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    assert cli.main(["verify", "--filter", "normalization"]) == cli.EXIT_CONFIG
    assert cli.THREADS_ENV in capsys.readouterr().err
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    assert cli.main(["verify", "--filter", "normalization"]) == cli.EXIT_OK


# ---------------------------------------------------------------------------
# pretrain


def test_pretrain_is_deterministic(tmp_path, smoke_ckpt):
    out = tmp_path / "again"
    assert cli.main(["pretrain", "--config", str(SMOKE), "--out", str(out)]) == 0
    assert sha(out / "reference.ckpt") == sha(smoke_ckpt)
    first = smoke_ckpt.parent / "pretrain_metrics.csv"
    assert (out / "pretrain_metrics.csv").read_bytes() == first.read_bytes()
    header, rows = runs.read_csv(first)
    assert header == list(runs.PRETRAIN_COLUMNS)
    assert len(rows) == 301
    last = rows[-1]
    assert last[0] == "300" and last[1] == "" and last[4] == "true"
    assert float(last[2]) < float(last[3])
    summary = json.loads((out / "pretrain_summary.json").read_text())
    assert summary["below_threshold"] is True and summary["iterations"] == 300


def test_pretrain_below_threshold_failure_exits_1(tmp_path):
    doc = json.loads(SMOKE.read_text())
    doc["pretrain"].update(iterations=2, heldout_threshold=1e-6)
    code = cli.main(["pretrain", "--config", str(write_cfg(tmp_path, doc)), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CHECK
    assert (tmp_path / "o" / "pretrain_metrics.csv").is_file()


# ---------------------------------------------------------------------------
# train / profile / compare


def test_train_outputs_are_byte_identical(tmp_path, smoke_ckpt):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert cli.main(["train", "--config", str(SMOKE), "--ckpt", str(smoke_ckpt), "--out", str(out)]) == 0
    for seed in (0, 1):
        a = outs[0] / f"seed_{seed}" / "metrics.csv"
        assert a.read_bytes() == (outs[1] / f"seed_{seed}" / "metrics.csv").read_bytes()
        assert b"\r\n" in a.read_bytes()
        for role in ("policy", "old", "reference"):
            assert (outs[0] / f"seed_{seed}" / f"{role}.ckpt").is_file()
        header, rows = runs.read_csv(a)
        assert header == runs.metrics_header(10)
        assert [int(r[2]) for r in rows] == list(range(12))
        assert all(r[3] == "" for r in rows)
    summary = json.loads((outs[0] / "summary.json").read_text())
    assert [r["seed"] for r in summary["runs"]] == [0, 1]
    assert all("iterations_to_threshold" in r for r in summary["runs"])


def test_cumulative_wall_clock_is_monotone(tmp_path, smoke_ckpt):
    out = tmp_path / "w"
    assert cli.main(["train", "--config", str(SMOKE), "--ckpt", str(smoke_ckpt), "--out", str(out),
                     "--wall-clock", "cumulative"]) == 0
    _, rows = runs.read_csv(out / "seed_0" / "metrics.csv")
    wall = [float(r[3]) for r in rows]
    assert all(b >= a for a, b in zip(wall, wall[1:])) and wall[0] > 0


def test_profile_gains_is_byte_identical(tmp_path, smoke_ckpt):
    paths = [tmp_path / "p1.csv", tmp_path / "p2.csv"]
    for p in paths:
        assert cli.main(["profile-gains", "--config", str(SMOKE), "--ckpt", str(smoke_ckpt), "--n", "6",
                         "--out", str(p)]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    header, rows = runs.read_csv(paths[0])
    assert header == list(runs.PROFILE_COLUMNS) and len(rows) == 10
    assert all(int(r[4]) == 24 for r in rows)
    assert all(float(r[3]) >= 0 for r in rows)


def test_compare_is_paired_and_deterministic(tmp_path, smoke_ckpt, capsys):
    args = ["compare", "--config", str(SMOKE), "--methods", "stepwise-joint,uniform,stepwise-joint@substeps=2",
            "--ckpt", str(smoke_ckpt)]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    for label in ("stepwise-joint", "uniform", "stepwise-joint@substeps=2"):
        a = (tmp_path / "a" / label / "metrics.csv").read_bytes()
        assert a == (tmp_path / "b" / label / "metrics.csv").read_bytes()
    report = json.loads((tmp_path / "a" / "comparison.json").read_text())
    assert set(report["median_iterations_ordering"]) == {"stepwise-joint <= uniform",
                                                         "stepwise-joint <= stepwise-joint@substeps=2"}
    assert report["methods"]["uniform"]["seeds"] == [0, 1]
    assert "median iterations-to-threshold" in capsys.readouterr().out
    # iteration 0 sees the same policy and the same noise under every method
    _, ja = runs.read_csv(tmp_path / "a" / "stepwise-joint" / "metrics.csv")
    _, un = runs.read_csv(tmp_path / "a" / "uniform" / "metrics.csv")
    assert ja[0][4] == un[0][4]


def test_compare_needs_two_distinct_methods(tmp_path):
    base = ["compare", "--config", str(SMOKE), "--out", str(tmp_path)]
    assert cli.main(base + ["--methods", "uniform"]) == cli.EXIT_CONFIG
    assert cli.main(base + ["--methods", "uniform,uniform"]) == cli.EXIT_CONFIG
    assert cli.main(base + ["--methods", "uniform,bogus"]) == cli.EXIT_CONFIG


def test_compare_without_checkpoint_pretrains(tmp_path, smoke_ckpt):
    doc = json.loads(SMOKE.read_text())
    doc["train"]["iterations"] = 2
    doc["seeds"] = [0]
    cfg = write_cfg(tmp_path, doc)
    assert cli.main(["compare", "--config", str(cfg), "--methods", "uniform,stepwise-perstep",
                     "--out", str(tmp_path / "o")]) == 0
    assert sha(tmp_path / "o" / "reference.ckpt") == sha(smoke_ckpt)


# ---------------------------------------------------------------------------
# verify


def test_verify_filter_and_fault_injection(capsys):
    assert cli.main(["verify", "--filter", "telescoping"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "PASS telescoping" in out and "1/1 checks passed" in out
    assert cli.main(["verify", "--filter", "gradient-fm", "--inject-fault", "gradient"]) == cli.EXIT_CHECK
    out = capsys.readouterr().out
    assert "FAIL gradient-fm" in out and "failed: gradient-fm" in out
    assert cli.main(["verify", "--filter", "no-such-check"]) == cli.EXIT_CONFIG


def test_check_registry_covers_the_suite():
    names = set(checks.CHECKS)
    for expected in ("gradient-fm", "gradient-uniform", "gradient-stepwise", "gradient-pdistill", "telescoping",
                     "sigma-zero", "variance", "taylor", "on-policy", "normalization", "marginal-em",
                     "marginal-ddim"):
        assert expected in names


# ---------------------------------------------------------------------------
# bookkeeping helpers


def test_iterations_to_threshold():
    assert runs.iterations_to_threshold([0.9] * 12, 0.8) == 9
    assert runs.iterations_to_threshold([0.0] * 5 + [1.0] * 10, 0.8) == 12
    assert runs.iterations_to_threshold([0.5] * 30, 0.8) is None
    assert runs.iterations_to_threshold([0.9] * 5, 0.8) is None


def test_median_or_none():
    assert runs.median_or_none([3, 1, 2]) == 2
    assert runs.median_or_none([4, 1, None]) == 4
    assert runs.median_or_none([1, None, None]) is None
    assert runs.median_or_none([2, 4]) == 3
    assert runs.median_or_none([]) is None


def test_parse_variant(ref_exp):
    label, cfg = runs.parse_variant("stepwise-gae@gae_gamma=0.5@schedule.kind=\"ddim\"@stepper=ddim", ref_exp.train)
    assert cfg.method == "stepwise-gae" and cfg.gae_gamma == 0.5
    assert cfg.schedule.kind == "ddim" and cfg.stepper == "ddim"
    assert label.startswith("stepwise-gae@")
    with pytest.raises(ValueError):
        runs.parse_variant("uniform@substeps", ref_exp.train)


def test_csv_round_trip(tmp_path):
    vals = [0.1, 1 / 3, -2.5e-300, 12345.678901234567]
    rows = [["r", 1, i, None, v, True, False, np.float64(v)] for i, v in enumerate(vals)]
    path = tmp_path / "x.csv"
    runs.write_csv(path, ["a", "b", "c", "d", "e", "f", "g", "h"], rows)
    header, back = runs.read_csv(path)
    assert header == ["a", "b", "c", "d", "e", "f", "g", "h"]
    for row, v in zip(back, vals):
        assert float(row[4]) == v and float(row[7]) == v
        assert row[3] == "" and row[5] == "true" and row[6] == "false"


def test_compare_summary_flags_regressions():
    class Fake:
        def __init__(self, seed, rewards):
            self.seed, self.rewards_ = seed, np.asarray(rewards, dtype=float)
            self.final_reward = float(self.rewards_[-10:].mean())
            self.initial_reward = float(self.rewards_[:10].mean())
            self.wall_ms = [1.0]

        def reached(self, threshold):
            return runs.iterations_to_threshold(self.rewards_, threshold)

    fast = [Fake(s, [1.0] * 20) for s in range(3)]
    slow = [Fake(s, [0.0] * 10 + [1.0] * 10) for s in range(3)]
    never = [Fake(s, [0.0] * 20) for s in range(3)]
    rep = runs.compare_summary({"a": fast, "b": slow}, 0.8, 0.05)
    assert rep["median_iterations_ordering"]["a <= b"] == {"holds": True, "regression": False}
    rep = runs.compare_summary({"b": slow, "a": fast}, 0.8, 0.05)
    assert rep["median_iterations_ordering"]["b <= a"] == {"holds": False, "regression": True}
    rep = runs.compare_summary({"n": never, "m": never}, 0.8, 0.05)
    assert rep["median_iterations_ordering"]["n <= m"] == {"holds": None, "regression": False}
    assert rep["within_band"] is True


def test_seed_streams_are_independent_of_draw_order():
    a = stream(5, "traj", 3, 1).standard_normal(4)
    stream(5, "traj", 3, 0).standard_normal(100)
    assert np.array_equal(a, stream(5, "traj", 3, 1).standard_normal(4))
    assert not np.array_equal(a, stream(5, "traj", 3, 2).standard_normal(4))
    with pytest.raises(ValueError):
        stream(0, -1)


def test_run_training_matches_cli_rows(ref_exp, ref_net):
    train = replace(ref_exp.train, iterations=3, N=4)
    res = runs.run_training(ref_exp, ref_net.params, 2, train)
    rows = res.rows()
    assert len(rows) == 3 and rows[0][0] == "stepwise-joint-s2" and rows[0][3] is None
    assert res.summary(0.8)["iterations"] == 3
