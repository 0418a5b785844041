"""One softmax policy and one loss-predicting critic per module.

All modules are trained together from the end-of-pipeline loss: module
``j``'s policy follows ``(L - C_j(x_j)) * grad log pi_j(a_j | x_j)`` with an
entropy bonus, and ``C_j`` regresses ``L``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..core import BatchTrajectory, PipelineSpec
from ..tinynn import (
    MLPParams,
    RMSPropState,
    backward,
    entropy_and_grad,
    forward,
    init_mlp,
    log_softmax_grad,
    rmsprop_step,
    softmax_policy,
    zero_mlp,
)
from .base import Learner, sample_categorical

CONCURRENT, COORDINATE = "concurrent", "coordinate"


def default_module_hidden(context_dim: int) -> int:
    return context_dim // 2 + 1


@dataclass
class ModuleNets:
    policy: MLPParams
    policy_opt: RMSPropState
    critic: MLPParams
    critic_opt: RMSPropState


class PerModuleCB(Learner):
    kind = "per_module_cb"

    def __init__(
        self,
        spec: PipelineSpec,
        context_dims: Sequence[int],
        rng: np.random.Generator,
        *,
        learning_rate: float = 0.001,
        l2_weight_decay: float = 0.01,
        ent_wt: float = 0.01,
        hidden_dims: Sequence[int] | int | None = None,
        use_critic: bool = True,
        mode: str = CONCURRENT,
        coordinate_period: int = 100,
        init: str = "glorot",
    ):
        super().__init__(spec, rng)
        if mode not in (CONCURRENT, COORDINATE):
            raise ValueError(f"unknown per-module training mode {mode!r}")
        M = spec.num_modules
        if len(context_dims) != M:
            raise ValueError("need one context dimension per module")
        if hidden_dims is None:
            hidden_dims = [default_module_hidden(d) for d in context_dims]
        elif isinstance(hidden_dims, int):
            hidden_dims = [hidden_dims] * M
        self.context_dims = [int(d) for d in context_dims]
        self.hidden_dims = [int(h) for h in hidden_dims]
        self.ent_wt = float(ent_wt)
        self.use_critic = use_critic
        self.mode = mode
        self.coordinate_period = coordinate_period
        self.active_module = 0
        self.modules: list[ModuleNets] = []
        for d, h, k in zip(self.context_dims, self.hidden_dims, spec.action_counts):
            if init == "zeros":
                pol, crit = zero_mlp(d, h, k), zero_mlp(d, h, 1)
            else:
                pol, crit = init_mlp(d, h, k, rng), init_mlp(d, h, 1, rng)
            self.modules.append(
                ModuleNets(
                    pol, RMSPropState.for_params(pol, learning_rate, l2_weight_decay),
                    crit, RMSPropState.for_params(crit, learning_rate, l2_weight_decay),
                )
            )

    @property
    def learning_rate(self) -> float:
        return self.modules[0].policy_opt.learning_rate

    # -- acting --------------------------------------------------------
    def probabilities(self, module_id: int, contexts: np.ndarray) -> np.ndarray:
        scores, _ = forward(self.modules[module_id - 1].policy, contexts)
        return softmax_policy(scores, 1.0)

    def act_batch(self, module_id, contexts, rng, greedy=False):
        probs = self.probabilities(module_id, contexts)
        a = probs.argmax(axis=1) if greedy else sample_categorical(probs, rng)
        return a, probs[np.arange(len(a)), a]

    def act_with_stats(self, module_id: int, context: np.ndarray, rng: np.random.Generator):
        """Returns ``(actions, log-probabilities, entropies)`` for a batch of contexts."""
        probs = self.probabilities(module_id, np.atleast_2d(context))
        a = sample_categorical(probs, rng)
        H, _ = entropy_and_grad(probs)
        return a, np.log(probs[np.arange(len(a)), a]), H

    def critic_values(self, module_id: int, contexts: np.ndarray) -> np.ndarray:
        out, _ = forward(self.modules[module_id - 1].critic, contexts)
        return out[:, 0]

    # -- learning ------------------------------------------------------
    def score_gradients(self, module_id: int, contexts, actions, losses, baseline=None):
        """Per-example gradient of the surrogate loss w.r.t. module scores.

        Surrogate: ``(L - b) * log pi(a|x) - ent_wt * H(pi(.|x))``; its
        expectation's gradient is the gradient of expected loss minus the
        entropy bonus.  Returns ``(grad, probs, forward cache)``.
        """
        net = self.modules[module_id - 1].policy
        scores, cache = forward(net, contexts)
        probs = softmax_policy(scores, 1.0)
        adv = np.asarray(losses, dtype=float) if baseline is None else losses - baseline
        g = adv[:, None] * log_softmax_grad(probs, actions)
        if self.ent_wt:
            _, gH = entropy_and_grad(probs)
            g -= self.ent_wt * gH
        return g, probs, cache

    def _update_module(self, j: int, batch: BatchTrajectory) -> dict:
        nets = self.modules[j]
        ctx = batch.contexts[j]
        L = batch.losses
        B = len(L)
        stats = {}
        baseline = None
        if self.use_critic:
            c_out, c_cache = forward(nets.critic, ctx)
            baseline = c_out[:, 0]
            c_grad = backward(nets.critic, c_cache, (2.0 / B) * (baseline - L)[:, None])
            stats["critic_mse"] = float(np.mean((L - baseline) ** 2))
        g, _, cache = self.score_gradients(j + 1, ctx, batch.actions[:, j], L, baseline)
        rmsprop_step(nets.policy, backward(nets.policy, cache, g / B), nets.policy_opt)
        if self.use_critic:
            rmsprop_step(nets.critic, c_grad, nets.critic_opt)
        return stats

    def update(self, batch: BatchTrajectory) -> dict:
        if self.mode == COORDINATE:
            if self.num_updates and self.num_updates % self.coordinate_period == 0:
                self.active_module = int(self.rng.integers(0, self.spec.num_modules))
            targets = [self.active_module]
        else:
            targets = range(self.spec.num_modules)
        stats = {}
        for j in targets:
            for k, v in self._update_module(j, batch).items():
                stats[f"m{j + 1}.{k}"] = v
        self.num_updates += 1
        return stats

    # -- snapshot ------------------------------------------------------
    def hyperparameters(self):
        return {
            "context_dims": self.context_dims,
            "hidden_dims": self.hidden_dims,
            "learning_rate": self.learning_rate,
            "l2_weight_decay": self.modules[0].policy_opt.l2_weight_decay,
            "ent_wt": self.ent_wt,
            "use_critic": self.use_critic,
            "mode": self.mode,
            "coordinate_period": self.coordinate_period,
        }

    def networks(self):
        out = {}
        for j, m in enumerate(self.modules, start=1):
            out[f"m{j}.policy"] = (m.policy, m.policy_opt)
            out[f"m{j}.critic"] = (m.critic, m.critic_opt)
        return out

    def extra_state(self):
        return {"active_module": self.active_module}

    def load_extra_state(self, extra):
        self.active_module = int(extra.get("active_module", 0))
