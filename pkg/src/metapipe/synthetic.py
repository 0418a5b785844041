"""Synthetic chain pipeline with input-dependent cheap/expensive actions.

Each of the ``n`` modules sees a noisy copy of a random bit string.  Action
0 is cheap (latency 0) and action 1 expensive (latency 1).  A cheap action
on a module whose bit is 1 corrupts the pipeline output for good.  The
terminal loss trades latency (centred at ``n/2``) against that error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PipelineSpec

CHEAP, EXPENSIVE = 0, 1
MAX_BRUTE_FORCE_N = 20


@dataclass(frozen=True)
class SyntheticConfig:
    n: int
    noise_half_width: float = 0.3
    heldout_size: int = 2000

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"chain length must be >= 1, got {self.n}")
        if self.noise_half_width < 0:
            raise ValueError("noise_half_width must be non-negative")


@dataclass
class SyntheticEpisodeState:
    """Batched per-episode state; every array has a leading batch axis."""

    true_bits: np.ndarray  # (B, n) int
    noisy_context: np.ndarray  # (B, n)
    actions_so_far: np.ndarray  # (B, n), zero beyond the modules already run
    accumulated_latency: np.ndarray  # (B,) int
    error_flag: np.ndarray  # (B,) bool
    next_module: int = 1

    @property
    def batch_size(self) -> int:
        return self.true_bits.shape[0]


def sample_input(cfg: SyntheticConfig, rng: np.random.Generator, batch_size: int = 1) -> SyntheticEpisodeState:
    bits = rng.integers(0, 2, size=(batch_size, cfg.n))
    w = cfg.noise_half_width
    noise = rng.uniform(-w, w, size=(batch_size, cfg.n)) if w > 0 else np.zeros((batch_size, cfg.n))
    return SyntheticEpisodeState(
        true_bits=bits,
        noisy_context=bits + noise,
        actions_so_far=np.zeros((batch_size, cfg.n)),
        accumulated_latency=np.zeros(batch_size, dtype=np.int64),
        error_flag=np.zeros(batch_size, dtype=bool),
    )


def step_module(state: SyntheticEpisodeState, module_index: int, action) -> SyntheticEpisodeState:
    """Apply ``action`` (scalar or per-episode array) at 1-based ``module_index``."""
    if module_index != state.next_module:
        raise ValueError(f"module {module_index} stepped out of order (expected {state.next_module})")
    a = np.broadcast_to(np.asarray(action, dtype=np.int64), (state.batch_size,))
    if np.any((a != CHEAP) & (a != EXPENSIVE)):
        raise ValueError("synthetic actions must be 0 (cheap) or 1 (expensive)")
    i = module_index - 1
    state.accumulated_latency += a
    state.error_flag |= (state.true_bits[:, i] == 1) & (a == CHEAP)
    state.actions_so_far[:, i] = a
    state.next_module += 1
    return state


def synthetic_loss(latency, error_flag, n: int):
    latency = np.asarray(latency, dtype=float)
    out = (4.0 / n**2) * (latency - n / 2.0) ** 2 + np.asarray(error_flag, dtype=float)
    return float(out) if out.ndim == 0 else out


def module_context(state: SyntheticEpisodeState, module_index: int) -> np.ndarray:
    """Noisy input, zero-padded upstream actions, then raw latency: ``(B, 2n+1)``."""
    if module_index > state.next_module:
        raise ValueError(f"context for module {module_index} requested before module {state.next_module} ran")
    acts = state.actions_so_far.copy()
    acts[:, module_index - 1 :] = 0.0
    lat = state.accumulated_latency[:, None].astype(float)
    return np.concatenate([state.noisy_context, acts, lat], axis=1)


def exact_expected_loss(assignment, n: int | None = None) -> float:
    a = np.asarray(assignment, dtype=np.int64)
    n = len(a) if n is None else n
    if len(a) != n or np.any((a != 0) & (a != 1)):
        raise ValueError("assignment must be a binary vector of length n")
    k = int(np.sum(a == CHEAP))
    return float(_expected_loss_by_cheap_count(k, n))


def _expected_loss_by_cheap_count(k, n):
    # each cheap module errs independently with probability 1/2
    return (4.0 / n**2) * ((n - k) - n / 2.0) ** 2 + (1.0 - 2.0 ** (-np.asarray(k, dtype=float)))


def oracle_table(n: int) -> list[tuple[int, int, float]]:
    """(bitmask, k, expected_loss) for every constant assignment.

    Bit ``n-1-i`` of the mask holds module ``i+1``'s action, so numeric mask
    order is lexicographic order of the assignment tuple.
    """
    if n > MAX_BRUTE_FORCE_N:
        raise ValueError(f"n={n} too large for exhaustive enumeration (max {MAX_BRUTE_FORCE_N})")
    masks = np.arange(2**n, dtype=np.int64)
    expensive = np.zeros_like(masks)
    for i in range(n):
        expensive += (masks >> i) & 1
    ks = n - expensive
    losses = _expected_loss_by_cheap_count(ks, n)
    return [(int(m), int(k), float(v)) for m, k, v in zip(masks, ks, losses)]


def mask_to_assignment(mask: int, n: int) -> tuple[int, ...]:
    return tuple((mask >> (n - 1 - i)) & 1 for i in range(n))


def brute_force_best_constant(n: int) -> tuple[tuple[int, ...], float]:
    """Exhaustive minimizer; ties go to fewest cheap actions, then lexicographic."""
    table = oracle_table(n)
    mask, _, loss = min(table, key=lambda r: (r[2], r[1], r[0]))
    return mask_to_assignment(mask, n), loss


def perfect_routing_expected_loss(n: int) -> float:
    """Expected loss of the policy that sets each action equal to its bit."""
    return 1.0 / n


class SyntheticEnv:
    """Batched environment wrapper around the functions above."""

    def __init__(self, cfg: SyntheticConfig | int):
        self.cfg = SyntheticConfig(cfg) if isinstance(cfg, int) else cfg
        self.n = self.cfg.n
        self.spec = PipelineSpec.chain([2] * self.n, loss_name="synthetic")
        self.input_dim = self.n

    def context_dim(self, module_id: int) -> int:
        return 2 * self.n + 1

    def reset(self, batch_size, rng):
        return sample_input(self.cfg, rng, batch_size)

    def heldout(self, rng):
        return sample_input(self.cfg, rng, self.cfg.heldout_size)

    def context(self, state, module_id):
        return module_context(state, module_id)

    def step(self, state, module_id, actions, rng):
        step_module(state, module_id, actions)
        return np.asarray(actions, dtype=float).copy()

    def output(self, state, module_id):
        return {"error": state.error_flag.copy(), "latency": state.accumulated_latency.copy()}

    def loss(self, state):
        return synthetic_loss(state.accumulated_latency, state.error_flag, self.n)

    def constant_loss(self, assignment) -> float:
        return exact_expected_loss(assignment, self.n)
