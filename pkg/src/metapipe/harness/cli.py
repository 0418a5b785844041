"""Command line entry point: ``metapipe {run,grid,baseline,report}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from ..learners import SnapshotError, learner_restore
from .config import ConfigError, load_config
from .runner import action_count_report, evaluate_baseline, grid_search, run_experiment, run_seed

log = logging.getLogger("metapipe")


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seeds expects comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metapipe", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, help_ in [
        ("run", "train a learner over several seeds and write learning curves"),
        ("grid", "grid-search hyperparameters by cumulative stream loss"),
        ("baseline", "hill-climb the best constant assignment and evaluate it"),
        ("report", "per-module action histograms of trained learners"),
    ]:
        sp = sub.add_parser(verb, help=help_)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--seeds", type=_seeds, default=None)
        sp.add_argument("--out-dir", type=Path, default=Path("out"))
        sp.add_argument("--episodes", type=int, default=None)
        sp.add_argument("--eval-interval", type=int, default=None)
        sp.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(
            seeds=args.seeds, episodes=args.episodes, eval_interval=args.eval_interval
        )
    except ConfigError as exc:
        print(f"metapipe: invalid config: {exc}", file=sys.stderr)
        return 2
    out = args.out_dir
    try:
        if args.verb == "run":
            m = run_experiment(cfg, out, jobs=args.jobs)
            failed = [s.seed for s in m.seeds if not s.ok]
            print(f"cumulative loss {m.cumulative_loss:.6f}  baseline {m.baseline_loss:.6f}  -> {out / 'curves.csv'}")
            if failed:
                print(f"seeds aborted: {failed}", file=sys.stderr)
                return 1
        elif args.verb == "grid":
            res = grid_search(cfg, out_dir=out, jobs=args.jobs)
            print("best:", json.dumps(res.best, sort_keys=True))
        elif args.verb == "baseline":
            b = evaluate_baseline(cfg)
            doc = {"assignment": list(b.assignment), "loss": b.loss, "stderr": b.stderr, "oracle": b.oracle, "epochs": b.converged_epochs}
            out.mkdir(parents=True, exist_ok=True)
            (out / "baseline.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
            print(json.dumps(doc, sort_keys=True))
        elif args.verb == "report":
            _report(cfg, out)
    except OSError as exc:
        print(f"metapipe: {exc}", file=sys.stderr)
        return 1
    except SnapshotError as exc:
        print(f"metapipe: bad snapshot: {exc}", file=sys.stderr)
        return 1
    return 0


def _report(cfg, out: Path) -> None:
    env = cfg.make_env()
    rows = []
    for seed in cfg.seeds:
        snap = out / f"learner_seed{seed}.snap"
        if snap.exists():
            learner = learner_restore(snap.read_text())
        else:
            log.info("no snapshot for seed %d in %s; training one", seed, out)
            res = run_seed(cfg, seed, keep_snapshot=True)
            if not res.ok:
                raise OSError(f"seed {seed} aborted: {res.aborted}")
            learner = learner_restore(res.snapshot)
        for j, counts in enumerate(action_count_report(learner, env), start=1):
            for a, c in enumerate(counts):
                rows.append((seed, j, a, int(c)))
    out.mkdir(parents=True, exist_ok=True)
    with (out / "action_counts.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "module", "action", "count"])
        w.writerows(rows)
    for row in rows:
        print(*row)


if __name__ == "__main__":
    sys.exit(main())
