"""Seeded experiment execution, baselines, grid search and CSV output."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..core import EpisodeError, NonFiniteLoss, run_batch
from ..learners import GlobalCB, Learner, PerModuleCB, hill_climb, learner_snapshot
from ..learners.hill_climb import EpochRecord
from ..perception import PerceptionEnv
from ..synthetic import SyntheticEnv, exact_expected_loss
from ..tinynn import NonFiniteGradient
from .config import ExperimentConfig

log = logging.getLogger(__name__)

PERCEPTION_HIDDEN = 256


def seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (environment, learner) generators for one run."""
    env_ss, learner_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(env_ss), np.random.default_rng(learner_ss)


def build_learner(cfg: ExperimentConfig, env, rng: np.random.Generator) -> Learner:
    lc = cfg.learner
    hidden = lc.hidden_dim
    if hidden is None and isinstance(env, PerceptionEnv):
        hidden = PERCEPTION_HIDDEN
    if lc.kind == "global_cb":
        return GlobalCB(
            env.spec, env.input_dim, rng,
            lam=lc.lam, learning_rate=lc.learning_rate, l2_weight_decay=lc.l2_weight_decay, hidden_dim=hidden,
        )
    dims = [env.context_dim(j) for j in range(1, env.spec.num_modules + 1)]
    return PerModuleCB(
        env.spec, dims, rng,
        learning_rate=lc.learning_rate, l2_weight_decay=lc.l2_weight_decay, ent_wt=lc.ent_wt,
        hidden_dims=hidden, use_critic=lc.use_critic, mode=lc.mode,
    )


def heldout_losses(env, policy, eval_seed: int, greedy: bool = True):
    """Per-example losses on the environment's fixed evaluation set.

    A fresh generator from ``eval_seed`` is used every call so all policies
    (and the baseline) face the same module noise.
    """
    rng = np.random.default_rng(eval_seed)
    state = env.heldout(rng)
    batch = run_batch(env, policy, 0, rng, state=state, greedy=greedy, policy_rng=np.random.default_rng(eval_seed + 1))
    return batch


@dataclass
class SeedResult:
    seed: int
    episodes: list[int]
    values: list[float]
    cumulative_loss: float
    episodes_run: int
    skipped_batches: int = 0
    aborted: str | None = None
    final_heldout: list[float] | None = None
    snapshot: str | None = None
    episode_losses: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.aborted is None


def run_seed(cfg: ExperimentConfig, seed: int, keep_snapshot: bool = False) -> SeedResult:
    env = cfg.make_env()
    env_rng, learner_rng = seed_streams(seed)
    learner = build_learner(cfg, env, learner_rng)
    T, mb, interval = int(cfg.episodes), cfg.learner.minibatch, cfg.eval.interval
    heldout = cfg.eval.protocol == "heldout"
    res = SeedResult(seed, [], [], math.nan, 0)
    total = 0.0
    done = 0
    next_eval = interval
    stream = []
    try:
        while done < T:
            b = min(mb, T - done)
            try:
                batch = run_batch(env, learner, b, env_rng, done, policy_rng=learner.rng)
            except NonFiniteLoss:
                raise
            except EpisodeError as exc:
                log.warning("seed %d: skipping episodes %d..%d: %s", seed, done, done + b - 1, exc)
                res.skipped_batches += 1
                done += b
                continue
            learner.update(batch)
            stream.append(batch.losses)
            total += math.fsum(batch.losses)
            done += b
            res.episodes_run += b
            if done >= next_eval or done == T:
                res.episodes.append(done)
                if heldout:
                    res.values.append(float(heldout_losses(env, learner, cfg.eval.seed).losses.mean()))
                else:
                    res.values.append(total / max(res.episodes_run, 1))
                while next_eval <= done:
                    next_eval += interval
    except (NonFiniteLoss, NonFiniteGradient) as exc:
        res.aborted = f"{type(exc).__name__}: {exc}"
        log.error("seed %d aborted after %d episodes: %s", seed, done, exc)
    res.cumulative_loss = total / max(res.episodes_run, 1)
    res.episode_losses = np.concatenate(stream) if stream else np.zeros(0)
    if res.ok and heldout:
        res.final_heldout = heldout_losses(env, learner, cfg.eval.seed).losses.tolist()
    if keep_snapshot and res.ok:
        res.snapshot = learner_snapshot(learner)
    return res


@dataclass
class BaselineResult:
    assignment: tuple[int, ...]
    loss: float
    stderr: float
    oracle: float | None
    converged_epochs: int
    trace: list[EpochRecord] = field(default_factory=list)
    heldout: list[float] | None = None


def evaluate_baseline(cfg: ExperimentConfig, env=None) -> BaselineResult:
    """Hill-climb a constant assignment, then estimate its expected loss."""
    from ..core import ConstantPolicy

    env = env or cfg.make_env()
    bc = cfg.baseline
    seed = bc.seed if bc.seed is not None else cfg.seeds[0]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA5E]))
    assignment, trace = hill_climb(env, bc.samples_per_action, bc.max_epochs, rng)
    assignment = tuple(int(a) for a in assignment)
    policy = ConstantPolicy(assignment)
    if isinstance(env, SyntheticEnv):
        losses = run_batch(env, policy, bc.monte_carlo_episodes, rng).losses
        oracle = exact_expected_loss(assignment, env.n)
        return BaselineResult(assignment, float(losses.mean()), _se(losses), oracle, len(trace), trace)
    losses = heldout_losses(env, policy, cfg.eval.seed).losses
    return BaselineResult(assignment, float(losses.mean()), _se(losses), None, len(trace), trace, losses.tolist())


def _se(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0


@dataclass
class RunMetrics:
    episodes: list[int]
    mean_loss: list[float]
    stderr: list[float]
    baseline_loss: float
    seeds: list[SeedResult]
    baseline: BaselineResult | None = None
    env_kind: str = "synthetic"

    @property
    def percent_improvement(self) -> list[float]:
        return [percent_improvement(self.baseline_loss, m) for m in self.mean_loss]

    @property
    def cumulative_loss(self) -> float:
        """Mean over seeds of each seed's average training-stream loss."""
        vals = [s.cumulative_loss for s in self.seeds if s.ok]
        return float(np.mean(vals)) if vals else math.inf


def percent_improvement(baseline: float, mean: float) -> float:
    return 100.0 * (baseline - mean) / baseline


def aggregate(seeds: Sequence[SeedResult], baseline_loss: float, env_kind: str = "synthetic", baseline=None) -> RunMetrics:
    ok = [s for s in seeds if s.ok]
    if not ok:
        return RunMetrics([], [], [], baseline_loss, list(seeds), baseline, env_kind)
    n_points = min(len(s.episodes) for s in ok)
    episodes = ok[0].episodes[:n_points]
    vals = np.array([s.values[:n_points] for s in ok])
    means = vals.mean(axis=0)
    if len(ok) >= 2:
        se = vals.std(axis=0, ddof=1) / math.sqrt(len(ok))
    else:
        se = np.zeros(n_points)
    return RunMetrics(episodes, means.tolist(), se.tolist(), baseline_loss, list(seeds), baseline, env_kind)


def _run_seed_job(args):
    cfg_doc, seed, keep = args
    return run_seed(ExperimentConfig.from_dict(cfg_doc), seed, keep)


def run_seeds(cfg: ExperimentConfig, keep_snapshots: bool = False, jobs: int = 1) -> list[SeedResult]:
    if jobs > 1 and len(cfg.seeds) > 1:
        work = [(cfg.to_dict(), s, keep_snapshots) for s in cfg.seeds]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_seed_job, work))
    return [run_seed(cfg, s, keep_snapshots) for s in cfg.seeds]


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    *,
    baseline: BaselineResult | None = None,
    jobs: int = 1,
    keep_snapshots: bool = False,
) -> RunMetrics:
    env = cfg.make_env()
    if baseline is None:
        baseline = evaluate_baseline(cfg, env)
    base_value = baseline.oracle if baseline.oracle is not None else baseline.loss
    seeds = run_seeds(cfg, keep_snapshots or out_dir is not None, jobs)
    metrics = aggregate(seeds, base_value, cfg.env_kind, baseline)
    if out_dir is not None:
        write_artifacts(cfg, metrics, Path(out_dir))
    return metrics


def emit_curves(metrics: RunMetrics, path: str | Path, include_improvement: bool | None = None) -> Path:
    if not metrics.episodes:
        raise ValueError("no evaluation points to write")
    if include_improvement is None:
        include_improvement = metrics.env_kind == "perception"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["episodes", "mean_loss", "stderr", "baseline_loss"]
    if include_improvement:
        header.append("percent_improvement")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, ep in enumerate(metrics.episodes):
            row = [ep, _num(metrics.mean_loss[i]), _num(metrics.stderr[i]), _num(metrics.baseline_loss)]
            if include_improvement:
                row.append(_num(percent_improvement(metrics.baseline_loss, metrics.mean_loss[i])))
            w.writerow(row)
    return path


def _num(x) -> str:
    return repr(float(x))


def write_artifacts(cfg: ExperimentConfig, metrics: RunMetrics, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if metrics.episodes:
        emit_curves(metrics, out_dir / "curves.csv")
    with (out_dir / "per_seed.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "episodes", "value"])
        for s in metrics.seeds:
            for ep, v in zip(s.episodes, s.values):
                w.writerow([s.seed, ep, _num(v)])
    b = metrics.baseline
    summary = {
        "name": cfg.name,
        "config": cfg.to_dict(),
        "baseline": None if b is None else {
            "assignment": list(b.assignment), "loss": b.loss, "stderr": b.stderr,
            "oracle": b.oracle, "epochs": b.converged_epochs,
        },
        "cumulative_loss": metrics.cumulative_loss,
        "seeds": [
            {
                "seed": s.seed, "cumulative_loss": s.cumulative_loss, "episodes_run": s.episodes_run,
                "skipped_batches": s.skipped_batches, "aborted": s.aborted,
            }
            for s in metrics.seeds
        ],
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for s in metrics.seeds:
        if s.snapshot is not None:
            (out_dir / f"learner_seed{s.seed}.snap").write_text(s.snapshot)


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

@dataclass
class GridResult:
    best: dict
    table: list[dict]


def grid_points(grid: dict[str, list]) -> list[dict]:
    keys = sorted(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def grid_search(
    cfg: ExperimentConfig,
    grid: dict[str, list] | None = None,
    out_dir: str | Path | None = None,
    jobs: int = 1,
) -> GridResult:
    """Run every grid point over all seeds; lowest cumulative stream loss wins.

    Ties keep the earlier point in ``grid_points`` order.
    """
    grid = grid if grid is not None else cfg.grid
    if not grid:
        raise ValueError("grid search needs a non-empty grid")
    table = []
    for point in grid_points(grid):
        point_cfg = cfg.with_overrides(**point)
        seeds = run_seeds(point_cfg, jobs=jobs)
        ok = [s.cumulative_loss for s in seeds if s.ok]
        row = dict(point)
        row["cumulative_loss"] = float(np.mean(ok)) if ok else math.inf
        row["stderr"] = _se(ok) if len(ok) > 1 else 0.0
        row["per_seed"] = [s.cumulative_loss for s in seeds]
        row["aborted"] = sum(not s.ok for s in seeds)
        table.append(row)
        log.info("grid point %s -> %.4f", point, row["cumulative_loss"])
    best = min(table, key=lambda r: r["cumulative_loss"])
    result = GridResult({k: best[k] for k in grid}, table)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        keys = sorted(grid)
        with (out / "grid_results.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys + ["cumulative_loss", "stderr", "aborted_seeds"])
            for r in table:
                w.writerow([r[k] for k in keys] + [_num(r["cumulative_loss"]), _num(r["stderr"]), r["aborted"]])
        (out / "grid_best.json").write_text(json.dumps(result.best, indent=2, sort_keys=True) + "\n")
    return result


# ---------------------------------------------------------------------------
# action histograms
# ---------------------------------------------------------------------------

def action_count_report(learner, env, state=None, rng=None, greedy: bool = True) -> list[np.ndarray]:
    """Per-module counts of the actions chosen over a held-out stream."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if state is None:
        state = env.heldout(rng)
    batch = run_batch(env, learner, 0, rng, state=state, greedy=greedy)
    return [
        np.bincount(batch.actions[:, j], minlength=k)
        for j, k in enumerate(env.spec.action_counts)
    ]
