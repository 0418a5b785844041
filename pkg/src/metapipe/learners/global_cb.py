"""Single contextual bandit over the joint (cartesian product) action space."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..core import BatchTrajectory, PipelineSpec
from ..tinynn import (
    RMSPropState,
    backward,
    forward,
    init_mlp,
    rmsprop_step,
    softmax_policy,
    zero_mlp,
)
from .base import Learner, sample_categorical


class JointActionCodec:
    """Mixed-radix bijection between per-module actions and a joint index.

    Module 1 is the most significant digit.
    """

    def __init__(self, action_counts: Sequence[int]):
        self.radices = tuple(int(k) for k in action_counts)
        if not self.radices or min(self.radices) < 1:
            raise ValueError("every module needs at least one action")
        self.size = math.prod(self.radices)
        place = [1] * len(self.radices)
        for j in range(len(self.radices) - 2, -1, -1):
            place[j] = place[j + 1] * self.radices[j + 1]
        self._place = np.array(place, dtype=np.int64)

    def encode(self, actions) -> np.ndarray | int:
        a = np.asarray(actions, dtype=np.int64)
        if a.shape[-1] != len(self.radices):
            raise ValueError("wrong number of per-module actions")
        if np.any(a < 0) or np.any(a >= np.array(self.radices)):
            raise ValueError("per-module action index out of range")
        idx = a @ self._place
        return int(idx) if idx.ndim == 0 else idx

    def decode(self, index) -> np.ndarray:
        i = np.asarray(index, dtype=np.int64)
        if np.any(i < 0) or np.any(i >= self.size):
            raise ValueError(f"joint index out of range [0, {self.size})")
        return (i[..., None] // self._place) % np.array(self.radices)


def default_global_hidden(input_dim: int, num_joint: int) -> int:
    return math.ceil((input_dim + num_joint) / 2)


class GlobalCB(Learner):
    """Boltzmann-exploration bandit trained by importance-weighted regression.

    The joint action is drawn when module 1 asks for its action; later
    modules read their component from that draw with probability 1, so the
    product of per-step probabilities in a trajectory is the joint
    propensity.
    """

    kind = "global_cb"

    def __init__(
        self,
        spec: PipelineSpec,
        input_dim: int,
        rng: np.random.Generator,
        *,
        lam: float = 1.0,
        learning_rate: float = 0.001,
        l2_weight_decay: float = 0.01,
        hidden_dim: int | None = None,
        init: str = "glorot",
    ):
        super().__init__(spec, rng)
        if lam <= 0:
            raise ValueError("lambda must be positive")
        self.codec = JointActionCodec(spec.action_counts)
        self.input_dim = input_dim
        self.lam = float(lam)
        self.hidden_dim = hidden_dim or default_global_hidden(input_dim, self.codec.size)
        if init == "zeros":
            self.policy_net = zero_mlp(input_dim, self.hidden_dim, self.codec.size)
        else:
            self.policy_net = init_mlp(input_dim, self.hidden_dim, self.codec.size, rng)
        self.opt = RMSPropState.for_params(self.policy_net, learning_rate, l2_weight_decay)
        self._pending: np.ndarray | None = None

    # -- acting --------------------------------------------------------
    def probabilities(self, x1: np.ndarray) -> np.ndarray:
        scores, _ = forward(self.policy_net, x1)
        return softmax_policy(scores, self.lam)

    def act_joint(self, x1: np.ndarray, rng: np.random.Generator, greedy: bool = False):
        """Sample joint indices for a batch of initial inputs; returns (index, prob)."""
        probs = self.probabilities(np.atleast_2d(x1))
        idx = probs.argmax(axis=1) if greedy else sample_categorical(probs, rng)
        return idx, probs[np.arange(len(idx)), idx]

    def begin_batch(self, batch_size):
        self._pending = None

    def act_batch(self, module_id, contexts, rng, greedy=False):
        if module_id == 1:
            idx, p = self.act_joint(contexts[:, : self.input_dim], rng, greedy)
            self._pending = self.codec.decode(idx)
            return self._pending[:, 0].copy(), p
        if self._pending is None or len(self._pending) != len(contexts):
            raise RuntimeError("global CB must choose module 1 before later modules")
        return self._pending[:, module_id - 1].copy(), np.ones(len(contexts))

    # -- learning ------------------------------------------------------
    def iwr_terms(self, batch: BatchTrajectory):
        """Per-example IWR losses and gradients w.r.t. the network scores."""
        x1 = batch.contexts[0][:, : self.input_dim]
        joint = self.codec.encode(batch.actions)
        prop = np.prod(batch.probs, axis=1)
        if np.any(prop <= 0):
            raise ValueError("logged action probability must be positive")
        reward = -batch.losses
        scores, cache = forward(self.policy_net, x1)
        rows = np.arange(len(joint))
        resid = reward - scores[rows, joint]
        losses = resid**2 / prop
        g = np.zeros_like(scores)
        g[rows, joint] = -2.0 * resid / prop
        return losses, g, cache

    def update(self, batch: BatchTrajectory) -> dict:
        losses, g, cache = self.iwr_terms(batch)
        grads = backward(self.policy_net, cache, g / len(losses))
        rmsprop_step(self.policy_net, grads, self.opt)
        self.num_updates += 1
        return {"iwr_loss": float(losses.mean())}

    # -- snapshot ------------------------------------------------------
    def hyperparameters(self):
        return {
            "input_dim": self.input_dim,
            "lam": self.lam,
            "learning_rate": self.opt.learning_rate,
            "l2_weight_decay": self.opt.l2_weight_decay,
            "hidden_dim": self.hidden_dim,
        }

    def networks(self):
        return {"policy": (self.policy_net, self.opt)}
