import csv
import json

import numpy as np
import pytest
from scipy import stats

from metapipe.core import ConstantPolicy, FunctionPolicy
from metapipe.harness import (
    ConfigError,
    ExperimentConfig,
    RunMetrics,
    SeedResult,
    action_count_report,
    aggregate,
    emit_curves,
    evaluate_baseline,
    grid_points,
    grid_search,
    load_config,
    default_grid,
    percent_improvement,
    run_experiment,
    run_seed,
)
from metapipe.harness.cli import main
from metapipe.harness.runner import seed_streams
from metapipe.perception import PerceptionEnv
from metapipe.synthetic import SyntheticEnv, brute_force_best_constant


def small_cfg(**over):
    doc = {
        "environment": {"kind": "synthetic", "n": 3},
        "learner": {"kind": "per_module_cb", "learning_rate": 0.005, "minibatch": 10},
        "episodes": 300,
        "eval": {"interval": 100},
        "seeds": [0, 1],
        "baseline": {"samples_per_action": 200, "monte_carlo_episodes": 5000},
    }
    doc.update(over)
    return ExperimentConfig.from_dict(doc)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- config --------------------------------------------------------------


def test_default_grid_sizes():
    assert len(grid_points(default_grid("global_cb"))) == 400
    assert len(grid_points(default_grid("per_module_cb"))) == 400


@pytest.mark.parametrize(
    "doc, match",
    [
        ({"episodes": 0}, "episodes"),
        ({"learner": {"learning_rate": 0.3}}, "outside the declared grid"),
        ({"learner": {"kind": "oracle"}}, "learner.kind"),
        ({"environment": {"kind": "mars"}}, "environment.kind"),
        ({"environment": {"kind": "synthetic", "n": 0}}, "invalid environment"),
        ({"eval": {"protocol": "vibes"}}, "protocol"),
        ({"seeds": []}, "seed"),
        ({"colour": "blue"}, "unknown config keys"),
        ({"learner": {"temperature": 3}}, "temperature"),
    ],
)
def test_config_rejects(doc, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_dict(doc)


def test_config_off_grid_override():
    cfg = ExperimentConfig.from_dict({"learner": {"learning_rate": 0.3}, "allow_off_grid": True})
    assert cfg.learner.learning_rate == 0.3


def test_config_round_trip_and_overrides():
    cfg = small_cfg()
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    cfg2 = cfg.with_overrides(seeds=[7], episodes=50, eval_interval=25, learning_rate=0.001, lam=None)
    assert cfg2.seeds == [7] and cfg2.episodes == 50 and cfg2.eval.interval == 25
    assert cfg2.learner.learning_rate == 0.001


def test_load_config_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("environment: {kind: perception, variant: pure_latency, t0: 1.7}\nlearner: {kind: global_cb, lam: 5}\n")
    cfg = load_config(p)
    env = cfg.make_env()
    assert isinstance(env, PerceptionEnv) and env.cfg.loss.t0 == 1.7
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    p.write_text("- just a list\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_seed_streams_independent():
    e1, l1 = seed_streams(3)
    e2, l2 = seed_streams(3)
    assert e1.random() == e2.random() and l1.random() == l2.random()
    e, l_ = seed_streams(3)
    assert e.random() != l_.random()


# -- running -------------------------------------------------------------


def test_run_seed_running_average_matches_raw_losses():
    res = run_seed(small_cfg(), 0)
    assert res.episodes == [100, 200, 300]
    raw = res.episode_losses
    assert len(raw) == 300
    for ep, v in zip(res.episodes, res.values):
        assert v == pytest.approx(raw[:ep].mean(), rel=1e-12)
    assert res.cumulative_loss == pytest.approx(raw.mean(), rel=1e-12)


def test_run_seed_heldout_protocol():
    cfg = small_cfg(eval={"protocol": "heldout", "interval": 150}, episodes=300)
    res = run_seed(cfg, 0)
    assert res.episodes == [150, 300] and len(res.final_heldout) == 2000
    assert res.values[-1] == pytest.approx(np.mean(res.final_heldout))


def test_single_minibatch_smoke(tmp_path):
    cfg = small_cfg(episodes=10, seeds=[0])
    m = run_experiment(cfg, tmp_path)
    rows = read_csv(tmp_path / "curves.csv")
    assert len(rows) == 1 and rows[0]["episodes"] == "10"
    assert rows[0]["stderr"] == "0.0"
    assert list(rows[0]) == ["episodes", "mean_loss", "stderr", "baseline_loss"]
    assert (tmp_path / "learner_seed0.snap").exists()
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["cumulative_loss"] == m.cumulative_loss


def test_nonfinite_loss_aborts_seed(monkeypatch):
    cfg = small_cfg(seeds=[0])

    def bad_loss(self, state):
        return np.full(state.batch_size, np.nan)

    monkeypatch.setattr(SyntheticEnv, "loss", bad_loss)
    res = run_seed(cfg, 0)
    assert not res.ok and "NonFiniteLoss" in res.aborted


def test_failed_episode_batch_is_skipped(monkeypatch):
    cfg = small_cfg(seeds=[0], episodes=50)
    original = SyntheticEnv.step
    calls = {"n": 0}

    def flaky(self, state, module_id, actions, rng):
        calls["n"] += 1
        if calls["n"] == 4:
            raise RuntimeError("transient module failure")
        return original(self, state, module_id, actions, rng)

    monkeypatch.setattr(SyntheticEnv, "step", flaky)
    res = run_seed(cfg, 0)
    assert res.ok and res.skipped_batches == 1 and res.episodes_run == 40


def test_aggregate_stderr():
    a = SeedResult(0, [10, 20], [1.0, 0.5], 0.7, 20)
    b = SeedResult(1, [10, 20], [0.0, 0.5], 0.3, 20)
    m = aggregate([a, b], 0.75)
    assert m.mean_loss == [0.5, 0.5]
    assert m.stderr[0] == pytest.approx(0.5) and m.stderr[1] == 0.0
    assert m.cumulative_loss == pytest.approx(0.5)


def test_emit_curves(tmp_path):
    m = RunMetrics([1, 2, 3], [0.375, 0.5, 0.75], [0.0, 0.1, 0.2], 0.75, [], env_kind="perception")
    emit_curves(m, tmp_path / "c.csv")
    rows = read_csv(tmp_path / "c.csv")
    assert len(rows) == 3
    assert float(rows[0]["percent_improvement"]) == 50.0
    for r in rows:
        assert float(r["percent_improvement"]) == pytest.approx(
            percent_improvement(float(r["baseline_loss"]), float(r["mean_loss"]))
        )
    with pytest.raises(ValueError):
        emit_curves(RunMetrics([], [], [], 1.0, []), tmp_path / "x.csv")
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        emit_curves(m, blocker / "c.csv")


def test_determinism_byte_identical(tmp_path):
    cfg = small_cfg()
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name in ("curves.csv", "per_seed.csv", "summary.json", "learner_seed1.snap"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_parallel_seeds_match_serial():
    cfg = small_cfg()
    a = run_experiment(cfg, jobs=1)
    b = run_experiment(cfg, jobs=2)
    assert a.mean_loss == b.mean_loss


# -- baseline ------------------------------------------------------------


@pytest.mark.parametrize("n", [4, 8])
def test_baseline_synthetic(n):
    cfg = small_cfg(environment={"kind": "synthetic", "n": n}, baseline={"monte_carlo_episodes": 100_000})
    b = evaluate_baseline(cfg)
    _, best = brute_force_best_constant(n)
    assert b.oracle == pytest.approx(best)
    assert abs(b.loss - b.oracle) <= 3 * b.stderr


def test_baseline_perception():
    cfg = small_cfg(environment={"kind": "perception"}, baseline={"samples_per_action": 100})
    b = evaluate_baseline(cfg)
    assert b.oracle is None and len(b.heldout) == 550
    assert b.stderr == pytest.approx(np.std(b.heldout, ddof=1) / np.sqrt(550))
    assert all(isinstance(a, int) for a in b.assignment)


# -- grid search ---------------------------------------------------------


def test_grid_singleton(tmp_path):
    cfg = small_cfg(episodes=50)
    res = grid_search(cfg, {"learning_rate": [0.001]}, out_dir=tmp_path)
    assert res.best == {"learning_rate": 0.001}
    assert json.loads((tmp_path / "grid_best.json").read_text()) == res.best
    assert len(read_csv(tmp_path / "grid_results.csv")) == 1


def test_grid_ranking_is_mean_of_seed_cumulative_losses():
    cfg = small_cfg(episodes=200)
    res = grid_search(cfg, {"learning_rate": [0.0001, 0.005]})
    for row in res.table:
        point = cfg.with_overrides(learning_rate=row["learning_rate"])
        recomputed = [run_seed(point, s).episode_losses.mean() for s in cfg.seeds]
        assert row["cumulative_loss"] == pytest.approx(np.mean(recomputed), rel=1e-12)
    assert res.best["learning_rate"] == min(res.table, key=lambda r: r["cumulative_loss"])["learning_rate"]


def test_grid_dominant_point_wins():
    # lr 0.0001 barely moves from the random init; 0.005 learns quickly
    cfg = small_cfg(environment={"kind": "synthetic", "n": 2}, episodes=3000)
    res = grid_search(cfg, {"learning_rate": [0.0001, 0.005]})
    slow, fast = res.table
    assert all(f < s for f, s in zip(fast["per_seed"], slow["per_seed"]))
    assert res.best == {"learning_rate": 0.005}


def test_grid_requires_points():
    with pytest.raises(ValueError):
        grid_search(small_cfg(), {})


# -- action counts -------------------------------------------------------


def test_action_counts_deterministic_policy():
    env = SyntheticEnv(3)
    counts = action_count_report(ConstantPolicy([1, 0, 1]), env)
    assert [np.count_nonzero(c) for c in counts] == [1, 1, 1]
    assert counts[0][1] == 2000


def test_action_counts_uniform_policy(rng):
    env = PerceptionEnv()

    def uniform(j, ctx):
        return rng.integers(0, 3, len(ctx)) if j == 2 else np.zeros(len(ctx), int)

    state = env.reset(3000, rng)
    counts = action_count_report(FunctionPolicy(uniform), env, state=state, rng=rng)
    assert counts[1].sum() == 3000
    assert stats.chisquare(counts[1]).pvalue > 0.001


# -- CLI -----------------------------------------------------------------


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(
        "environment: {kind: synthetic, n: 3}\n"
        "learner: {kind: per_module_cb, learning_rate: 0.005, minibatch: 10}\n"
        "episodes: 200\neval: {interval: 100}\nseeds: [0, 1]\n"
        "baseline: {samples_per_action: 100, monte_carlo_episodes: 2000}\n"
    )
    return p


def test_cli_run_and_report(cfg_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg_file), "--out-dir", str(out), "--seeds", "0,1", "--episodes", "100", "--eval-interval", "50"]) == 0
    rows = read_csv(out / "curves.csv")
    assert [r["episodes"] for r in rows] == ["50", "100"]
    assert main(["report", "--config", str(cfg_file), "--out-dir", str(out), "--seeds", "0"]) == 0
    counts = read_csv(out / "action_counts.csv")
    assert len(counts) == 6 and sum(int(r["count"]) for r in counts) == 3 * 2000


def test_cli_report_trains_when_no_snapshot(cfg_file, tmp_path):
    out = tmp_path / "fresh"
    assert main(["report", "--config", str(cfg_file), "--out-dir", str(out), "--seeds", "1", "--episodes", "50"]) == 0
    assert (out / "action_counts.csv").exists()


def test_cli_baseline_and_grid(cfg_file, tmp_path, capsys):
    out = tmp_path / "b"
    assert main(["baseline", "--config", str(cfg_file), "--out-dir", str(out)]) == 0
    doc = json.loads((out / "baseline.json").read_text())
    assert doc["oracle"] == pytest.approx(brute_force_best_constant(3)[1])
    text = cfg_file.read_text() + "grid: {learning_rate: [0.001, 0.005]}\n"
    cfg_file.write_text(text)
    assert main(["grid", "--config", str(cfg_file), "--out-dir", str(out), "--episodes", "50"]) == 0
    assert "best:" in capsys.readouterr().out


def test_cli_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("episodes: -1\n")
    assert main(["run", "--config", str(bad)]) == 2
    assert "invalid config" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "nope.yaml")]) == 2
    with pytest.raises(SystemExit):
        main(["run", "--config", str(bad), "--seeds", "a,b"])
    with pytest.raises(SystemExit):
        main(["fly", "--config", str(bad)])


def test_cli_bad_snapshot(cfg_file, tmp_path, capsys):
    out = tmp_path / "snap"
    out.mkdir()
    (out / "learner_seed0.snap").write_text("garbage\n")
    assert main(["report", "--config", str(cfg_file), "--out-dir", str(out), "--seeds", "0"]) == 1
    assert "bad snapshot" in capsys.readouterr().err
