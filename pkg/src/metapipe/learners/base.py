from __future__ import annotations

import numpy as np

from ..core import BatchTrajectory, PipelineSpec, Policy
from ..tinynn import MLPParams, RMSPropState, params_from_tensors, params_to_tensors


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of ``probs`` by inverse-CDF with a single uniform each."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


class Learner(Policy):
    """A policy that also learns from minibatches of finished episodes."""

    kind = "learner"

    def __init__(self, spec: PipelineSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.num_updates = 0

    def update(self, batch: BatchTrajectory) -> dict:
        raise NotImplementedError

    # snapshot plumbing: subclasses list their networks and optimizer states
    def hyperparameters(self) -> dict:
        raise NotImplementedError

    def networks(self) -> dict[str, tuple[MLPParams, RMSPropState]]:
        raise NotImplementedError

    def extra_state(self) -> dict:
        return {}

    def load_extra_state(self, extra: dict) -> None:
        pass

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, (params, opt) in self.networks().items():
            out.update(params_to_tensors(params, name))
            out.update(params_to_tensors(opt.v, name + ".v"))
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name, (params, opt) in self.networks().items():
            new = params_from_tensors(tensors, name)
            newv = params_from_tensors(tensors, name + ".v")
            for dst, src in zip(params.arrays() + opt.v.arrays(), new.arrays() + newv.arrays()):
                if dst.shape != src.shape:
                    raise ValueError(f"snapshot tensor shape mismatch for {name}: {src.shape} vs {dst.shape}")
                dst[...] = src
