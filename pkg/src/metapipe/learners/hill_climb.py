"""Random coordinate descent over constant (input-independent) assignments."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..core import ConstantPolicy, Environment, run_batch

log = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    module_id: int
    action_losses: list[float]
    incumbent_action: int
    chosen_action: int

    @property
    def changed(self) -> bool:
        return self.chosen_action != self.incumbent_action

    @property
    def incumbent_loss(self) -> float:
        return self.action_losses[self.incumbent_action]

    @property
    def accepted_loss(self) -> float:
        return self.action_losses[self.chosen_action]


@dataclass
class HillClimbState:
    current_assignment: list[int]
    samples_per_action: int
    converged: bool = False
    epochs: int = 0
    unchanged_since_change: set = field(default_factory=set)
    trace: list[EpochRecord] = field(default_factory=list)


def evaluate_assignment(env: Environment, assignment, num_episodes: int, rng: np.random.Generator) -> float:
    """Empirical mean loss of a constant assignment over fresh episodes."""
    batch = run_batch(env, ConstantPolicy(assignment), num_episodes, rng)
    return float(batch.losses.mean())


def hill_climb(
    env: Environment,
    samples_per_action: int = 1000,
    max_epochs: int = 200,
    rng: np.random.Generator | None = None,
    initial=None,
) -> tuple[tuple[int, ...], list[EpochRecord]]:
    """Greedy coordinate search for a locally optimal constant assignment.

    Each epoch picks a module uniformly at random, scores all of its actions
    on ``samples_per_action`` fresh episodes apiece with every other module
    held fixed, and keeps the empirical best (the incumbent wins exact ties).
    Stops once every module has been examined since the last change, or
    after ``max_epochs``.
    """
    rng = np.random.default_rng() if rng is None else rng
    counts = env.spec.action_counts
    M = len(counts)
    if initial is None:
        initial = [int(rng.integers(0, k)) for k in counts]
    state = HillClimbState(list(initial), samples_per_action)

    while state.epochs < max_epochs:
        j = int(rng.integers(0, M))
        incumbent = state.current_assignment[j]
        losses = []
        for a in range(counts[j]):
            trial = list(state.current_assignment)
            trial[j] = a
            losses.append(evaluate_assignment(env, trial, samples_per_action, rng))
        best = incumbent
        for a, v in enumerate(losses):
            if v < losses[best]:
                best = a
        rec = EpochRecord(state.epochs, j + 1, losses, incumbent, best)
        state.trace.append(rec)
        state.epochs += 1
        if rec.changed:
            state.current_assignment[j] = best
            state.unchanged_since_change = {j}
            log.debug("epoch %d: module %d %d -> %d", rec.epoch, j + 1, incumbent, best)
        else:
            state.unchanged_since_change.add(j)
        if len(state.unchanged_since_change) == M and not rec.changed:
            state.converged = True
            break
    return tuple(state.current_assignment), state.trace
