"""Pipeline abstraction, episode execution and trajectory bookkeeping.

Environments are batched: every per-episode quantity carries a leading
batch axis so that a minibatch of independent episodes can be executed
with one call per module.  A single episode is a batch of size one.

Conventions shared by every environment and learner:

* modules are numbered ``1..M`` in topological order;
* the context handed to module ``j`` always starts with the pipeline's
  initial input (its first ``env.input_dim`` entries), followed by whatever
  the environment appends for that module;
* learners minimize loss.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

import numpy as np


class EpisodeError(RuntimeError):
    """An environment failed while executing an episode."""


class NonFiniteLoss(EpisodeError):
    """The terminal loss was NaN or infinite; callers treat this as fatal."""


@dataclass(frozen=True)
class ModuleSpec:
    id: int
    num_actions: int
    parents: tuple[int, ...] = ()

    @property
    def action_set(self) -> range:
        return range(self.num_actions)


@dataclass(frozen=True)
class PipelineSpec:
    modules: tuple[ModuleSpec, ...]
    loss_name: str = "loss"

    @classmethod
    def chain(cls, action_counts: Sequence[int], loss_name: str = "loss") -> "PipelineSpec":
        mods = tuple(
            ModuleSpec(j + 1, int(k), (j,) if j > 0 else ())
            for j, k in enumerate(action_counts)
        )
        return cls(mods, loss_name)

    @property
    def num_modules(self) -> int:
        return len(self.modules)

    @property
    def action_counts(self) -> tuple[int, ...]:
        return tuple(m.num_actions for m in self.modules)

    @property
    def num_joint_actions(self) -> int:
        return math.prod(self.action_counts)

    def to_dict(self) -> dict:
        return {
            "modules": [
                {"id": m.id, "num_actions": m.num_actions, "parents": list(m.parents)}
                for m in self.modules
            ],
            "loss_name": self.loss_name,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineSpec":
        try:
            mods = tuple(
                ModuleSpec(int(m["id"]), int(m["num_actions"]), tuple(int(p) for p in m.get("parents", ())))
                for m in doc["modules"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed pipeline spec document: {exc}") from exc
        return cls(mods, str(doc.get("loss_name", "loss")))

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "PipelineSpec":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_spec(spec: PipelineSpec) -> ValidationReport:
    report = ValidationReport()
    if not spec.modules:
        report.violations.append("pipeline has no modules")
    for pos, mod in enumerate(spec.modules, start=1):
        if mod.id != pos:
            report.violations.append(f"module at position {pos} has id {mod.id}; ids must be dense 1..M")
        if mod.num_actions < 1:
            report.violations.append(f"module {mod.id}: empty action set")
        for p in mod.parents:
            if p >= mod.id:
                report.violations.append(
                    f"module {mod.id}: parent index not less than own ({p} >= {mod.id})"
                )
            elif p < 1:
                report.violations.append(f"module {mod.id}: parent index {p} out of range")
    return report


@dataclass
class StepRecord:
    module_id: int
    context: np.ndarray
    action_index: int
    action_prob: float
    latency_contrib: float
    intermediate_output: Any = None


@dataclass
class Trajectory:
    episode_index: int
    steps: list[StepRecord]
    total_latency: float
    final_loss: float

    def flat_records(self) -> list[dict]:
        """One row per module, for debugging dumps."""
        return [
            {
                "episode": self.episode_index,
                "module": s.module_id,
                "action": s.action_index,
                "prob": s.action_prob,
                "latency": s.latency_contrib,
                "loss": self.final_loss,
            }
            for s in self.steps
        ]


@dataclass
class BatchTrajectory:
    """A minibatch of complete episodes in column form.

    ``contexts[j]`` is the ``(B, d_j)`` context matrix of module ``j + 1``;
    ``actions``, ``probs`` and ``latencies`` are ``(B, M)``.
    """

    episode_start: int
    contexts: list[np.ndarray]
    actions: np.ndarray
    probs: np.ndarray
    latencies: np.ndarray
    losses: np.ndarray
    outputs: list[Any] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.losses)

    @property
    def total_latency(self) -> np.ndarray:
        return self.latencies.sum(axis=1)

    def trajectories(self) -> list[Trajectory]:
        out = []
        M = self.actions.shape[1]
        for b in range(len(self)):
            steps = [
                StepRecord(
                    module_id=j + 1,
                    context=self.contexts[j][b].copy(),
                    action_index=int(self.actions[b, j]),
                    action_prob=float(self.probs[b, j]),
                    latency_contrib=float(self.latencies[b, j]),
                    intermediate_output=_index_output(self.outputs[j], b) if self.outputs else None,
                )
                for j in range(M)
            ]
            out.append(
                Trajectory(
                    episode_index=self.episode_start + b,
                    steps=steps,
                    total_latency=float(sum(s.latency_contrib for s in steps)),
                    final_loss=float(self.losses[b]),
                )
            )
        return out

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory]) -> "BatchTrajectory":
        if not trajs:
            raise ValueError("empty minibatch")
        M = len(trajs[0].steps)
        return cls(
            episode_start=trajs[0].episode_index,
            contexts=[np.stack([t.steps[j].context for t in trajs]) for j in range(M)],
            actions=np.array([[s.action_index for s in t.steps] for t in trajs], dtype=np.int64),
            probs=np.array([[s.action_prob for s in t.steps] for t in trajs], dtype=float),
            latencies=np.array([[s.latency_contrib for s in t.steps] for t in trajs], dtype=float),
            losses=np.array([t.final_loss for t in trajs], dtype=float),
        )


def _index_output(out: Any, b: int) -> Any:
    if isinstance(out, dict):
        return {k: _index_output(v, b) for k, v in out.items()}
    if isinstance(out, np.ndarray):
        return out[b].copy()
    return out


class Environment(Protocol):
    """Batched pipeline environment.

    ``reset`` samples a batch of fresh inputs and returns an opaque state;
    ``context``/``step`` must be called in module order; ``loss`` is read
    once every module has stepped.
    """

    spec: PipelineSpec
    input_dim: int

    def context_dim(self, module_id: int) -> int: ...

    def reset(self, batch_size: int, rng: np.random.Generator) -> Any: ...

    def heldout(self, rng: np.random.Generator) -> Any: ...

    def context(self, state: Any, module_id: int) -> np.ndarray: ...

    def step(self, state: Any, module_id: int, actions: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...

    def output(self, state: Any, module_id: int) -> Any: ...

    def loss(self, state: Any) -> np.ndarray: ...


class Policy:
    """Per-module action selection.

    Subclasses implement :meth:`act_batch`; :meth:`act` is the single-context
    convenience wrapper.  The returned probability is the probability the
    policy assigned to the returned action (1 for deterministic choices).
    """

    def begin_batch(self, batch_size: int) -> None:
        """Called before module 1 of every batch of episodes."""

    def act_batch(
        self, module_id: int, contexts: np.ndarray, rng: np.random.Generator, greedy: bool = False
    ) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def act(self, module_id: int, context: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
        self.begin_batch(1)
        a, p = self.act_batch(module_id, np.atleast_2d(context), rng)
        return int(a[0]), float(p[0])


class ConstantPolicy(Policy):
    def __init__(self, assignment: Sequence[int]):
        self.assignment = np.asarray(assignment, dtype=np.int64)

    def act_batch(self, module_id, contexts, rng, greedy=False):
        B = contexts.shape[0]
        return np.full(B, self.assignment[module_id - 1], dtype=np.int64), np.ones(B)


class FunctionPolicy(Policy):
    """Deterministic policy from ``fn(module_id, contexts) -> actions``."""

    def __init__(self, fn):
        self.fn = fn

    def act_batch(self, module_id, contexts, rng, greedy=False):
        a = np.asarray(self.fn(module_id, contexts), dtype=np.int64)
        return a, np.ones(len(a))


def run_batch(
    env: Environment,
    policy: Policy,
    batch_size: int,
    rng: np.random.Generator,
    episode_start: int = 0,
    *,
    policy_rng: np.random.Generator | None = None,
    state: Any = None,
    greedy: bool = False,
) -> BatchTrajectory:
    """Execute ``batch_size`` independent episodes module by module.

    Environment randomness is drawn from ``rng`` and action sampling from
    ``policy_rng`` (defaults to ``rng``).  Pass ``state`` to run on an
    already prepared input batch (e.g. a held-out set).
    """
    prng = rng if policy_rng is None else policy_rng
    if state is None:
        state = env.reset(batch_size, rng)
    spec = env.spec
    M = spec.num_modules
    contexts, outputs = [], []
    policy.begin_batch(batch_size)
    acts = probs = lats = None
    try:
        for j in range(1, M + 1):
            ctx = env.context(state, j)
            a, p = policy.act_batch(j, ctx, prng, greedy=greedy)
            if acts is None:
                B = ctx.shape[0]
                acts = np.zeros((B, M), dtype=np.int64)
                probs = np.zeros((B, M))
                lats = np.zeros((B, M))
            if np.any(a < 0) or np.any(a >= spec.modules[j - 1].num_actions):
                raise EpisodeError(f"module {j}: action index out of range")
            lat = env.step(state, j, a, rng)
            contexts.append(ctx)
            acts[:, j - 1] = a
            probs[:, j - 1] = p
            lats[:, j - 1] = lat
            outputs.append(env.output(state, j))
        losses = np.asarray(env.loss(state), dtype=float)
    except EpisodeError:
        raise
    except Exception as exc:  # environment bug or bad input; surface as episode failure
        raise EpisodeError(f"episode batch starting at {episode_start} failed: {exc}") from exc
    if not np.all(np.isfinite(losses)):
        raise NonFiniteLoss(f"non-finite loss in episode batch starting at {episode_start}")
    return BatchTrajectory(episode_start, contexts, acts, probs, lats, losses, outputs)


def run_episode(env: Environment, policies: Policy, episode_index: int, rng: np.random.Generator) -> Trajectory:
    return run_batch(env, policies, 1, rng, episode_index).trajectories()[0]


def average_loss(trajectories: Sequence[Trajectory]) -> float:
    if not trajectories:
        raise ValueError("average_loss of an empty trajectory list")
    return math.fsum(t.final_loss for t in trajectories) / len(trajectories)
