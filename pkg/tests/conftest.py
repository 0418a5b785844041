import numpy as np
import pytest

from metapipe.core import PipelineSpec


class StatelessBanditEnv:
    """Single module, constant context, per-action losses.

    ``losses[a]`` is a float (deterministic loss) or ``(p, hi)``: loss
    ``hi`` with probability ``p``, otherwise 0.
    """

    def __init__(self, losses, context_dim=1):
        self.losses = list(losses)
        self.spec = PipelineSpec.chain([len(self.losses)])
        self.input_dim = context_dim

    def context_dim(self, module_id):
        return self.input_dim

    def reset(self, batch_size, rng):
        return {"B": batch_size, "rng": rng}

    def heldout(self, rng):
        return self.reset(1000, rng)

    def context(self, state, module_id):
        return np.ones((state["B"], self.input_dim))

    def step(self, state, module_id, actions, rng):
        state["a"] = np.asarray(actions)
        return np.zeros(state["B"])

    def output(self, state, module_id):
        return None

    def loss(self, state):
        out = np.zeros(state["B"])
        for a, spec in enumerate(self.losses):
            m = state["a"] == a
            if isinstance(spec, tuple):
                p, hi = spec
                out[m] = hi * (state["rng"].random(int(m.sum())) < p)
            else:
                out[m] = spec
        return out


class SeparableEnv:
    """Chain whose loss is a sum of fixed per-module action costs.

    Every module has a strictly dominant action, so coordinate search has
    no local optima.
    """

    def __init__(self, costs):
        self.costs = [np.asarray(c, dtype=float) for c in costs]
        self.spec = PipelineSpec.chain([len(c) for c in self.costs])
        self.input_dim = 1

    def context_dim(self, module_id):
        return 1

    def reset(self, batch_size, rng):
        return {"B": batch_size, "total": np.zeros(batch_size)}

    def heldout(self, rng):
        return self.reset(100, rng)

    def context(self, state, module_id):
        return np.zeros((state["B"], 1))

    def step(self, state, module_id, actions, rng):
        state["total"] = state["total"] + self.costs[module_id - 1][actions]
        return np.zeros(state["B"])

    def output(self, state, module_id):
        return None

    def loss(self, state):
        return state["total"]


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for an acceptance criterion and return ``ok``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(criterion, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
