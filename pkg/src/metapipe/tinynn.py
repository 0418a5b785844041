"""Single-hidden-layer ReLU networks with hand-written backprop and RMSProp.

Inputs may be a single vector ``(d,)`` or a batch ``(B, d)``; gradients
returned by :func:`backward` are summed over the batch.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass
class MLPParams:
    W1: np.ndarray  # (hidden, input)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (output, hidden)
    b2: np.ndarray  # (output,)

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def output_dim(self) -> int:
        return self.W2.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def named(self) -> dict[str, np.ndarray]:
        return dict(zip(PARAM_NAMES, self.arrays()))

    def copy(self) -> "MLPParams":
        return MLPParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "MLPParams":
        return MLPParams(*(np.zeros_like(a) for a in self.arrays()))


def init_mlp(input_dim: int, hidden_dim: int, output_dim: int, rng: np.random.Generator) -> MLPParams:
    """Glorot-uniform weights, zero biases."""
    r1 = math.sqrt(6.0 / (input_dim + hidden_dim))
    r2 = math.sqrt(6.0 / (hidden_dim + output_dim))
    return MLPParams(
        W1=rng.uniform(-r1, r1, size=(hidden_dim, input_dim)),
        b1=np.zeros(hidden_dim),
        W2=rng.uniform(-r2, r2, size=(output_dim, hidden_dim)),
        b2=np.zeros(output_dim),
    )


def zero_mlp(input_dim: int, hidden_dim: int, output_dim: int) -> MLPParams:
    return MLPParams(
        np.zeros((hidden_dim, input_dim)), np.zeros(hidden_dim),
        np.zeros((output_dim, hidden_dim)), np.zeros(output_dim),
    )


@dataclass
class ForwardCache:
    x: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray


def forward(params: MLPParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"input dimension {x.shape[-1]} != network input dimension {params.input_dim}")
    pre = x @ params.W1.T + params.b1
    hidden = np.maximum(pre, 0.0)
    scores = hidden @ params.W2.T + params.b2
    return scores, ForwardCache(x, pre, hidden)


def backward(params: MLPParams, cache: ForwardCache, output_grad: np.ndarray) -> MLPParams:
    """Gradient of ``sum(scores * output_grad)`` with respect to every parameter."""
    g = np.asarray(output_grad, dtype=float)
    x, h = cache.x, cache.hidden
    if g.ndim == 1:
        g, x, h, pre = g[None], x[None], h[None], cache.pre[None]
    else:
        pre = cache.pre
    dW2 = g.T @ h
    db2 = g.sum(axis=0)
    dh = g @ params.W2
    dpre = dh * (pre > 0.0)  # subgradient 0 at exactly 0
    dW1 = dpre.T @ x
    db1 = dpre.sum(axis=0)
    return MLPParams(dW1, db1, dW2, db2)


def softmax_policy(scores: np.ndarray, lam: float = 1.0) -> np.ndarray:
    if lam <= 0:
        raise ValueError("inverse temperature must be positive")
    z = lam * np.asarray(scores, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy_and_grad(probs: np.ndarray, lam: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Entropy (natural log) of each distribution and its gradient w.r.t. the scores.

    With ``p = softmax(lam * s)``, ``dH/ds_i = -lam * p_i * (log p_i + H)``.
    """
    p = np.asarray(probs, dtype=float)
    logp = np.log(np.where(p > 0, p, 1.0))  # 0 log 0 := 0
    H = -np.sum(p * logp, axis=-1)
    grad = -lam * p * (logp + H[..., None])
    return H, grad


def log_softmax_grad(probs: np.ndarray, actions: np.ndarray, lam: float = 1.0) -> np.ndarray:
    """Rows of ``d log pi(a|x) / d scores = lam * (onehot(a) - p)``."""
    g = -lam * np.asarray(probs, dtype=float)
    g[np.arange(len(actions)), actions] += lam
    return g


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class RMSPropState:
    learning_rate: float
    l2_weight_decay: float = 0.0
    rho: float = 0.99
    eps: float = 1e-8
    v: MLPParams | None = None

    @classmethod
    def for_params(cls, params: MLPParams, learning_rate: float, l2_weight_decay: float = 0.0, **kw) -> "RMSPropState":
        return cls(learning_rate, l2_weight_decay, v=params.zeros_like(), **kw)


def rmsprop_step(params: MLPParams, grads: MLPParams, state: RMSPropState) -> MLPParams:
    """One RMSProp update with L2 decay folded into the gradient.

    ``params`` and ``state.v`` are updated in place and ``params`` returned.
    """
    if state.v is None:
        state.v = params.zeros_like()
    gs = grads.arrays()
    for g in gs:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient passed to rmsprop_step")
    rho, lr, l2, eps = state.rho, state.learning_rate, state.l2_weight_decay, state.eps
    for p, g, v in zip(params.arrays(), gs, state.v.arrays()):
        if l2:
            g = g + l2 * p
        v *= rho
        v += (1.0 - rho) * g * g
        p -= lr * g / (np.sqrt(v) + eps)
    return params


# ---------------------------------------------------------------------------
# tensor checkpoints: "name d0 d1 ..." header line, then one line of values
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "# tinynn-tensors v1"


def dump_tensors(tensors: dict[str, np.ndarray]) -> str:
    buf = io.StringIO()
    buf.write(CHECKPOINT_MAGIC + "\n")
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        a = np.asarray(arr, dtype=float)
        buf.write(" ".join([name, str(a.ndim), *map(str, a.shape)]) + "\n")
        buf.write(" ".join(repr(float(v)) for v in a.ravel(order="C")) + "\n")
    return buf.getvalue()


def load_tensors(text: str) -> dict[str, np.ndarray]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        raise ValueError("not a tinynn tensor checkpoint")
    out = {}
    body = lines[1:]
    if len(body) % 2:
        raise ValueError("truncated tensor checkpoint")
    for head, vals in zip(body[::2], body[1::2]):
        parts = head.split()
        try:
            name, ndim = parts[0], int(parts[1])
            shape = tuple(int(s) for s in parts[2 : 2 + ndim])
            data = np.array([float(v) for v in vals.split()], dtype=float)
        except (IndexError, ValueError) as exc:
            raise ValueError(f"corrupt tensor record {head!r}") from exc
        if len(parts) != 2 + ndim or data.size != math.prod(shape):
            raise ValueError(f"tensor {name!r}: shape/value count mismatch")
        out[name] = data.reshape(shape)
    return out


def params_to_tensors(params: MLPParams, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in params.named().items()}


def params_from_tensors(tensors: dict[str, np.ndarray], prefix: str) -> MLPParams:
    try:
        return MLPParams(*(tensors[f"{prefix}.{k}"].copy() for k in PARAM_NAMES))
    except KeyError as exc:
        raise ValueError(f"checkpoint is missing tensor {exc}") from exc


__all__ = [
    "MLPParams", "ForwardCache", "RMSPropState", "NonFiniteGradient",
    "init_mlp", "zero_mlp", "forward", "backward", "softmax_policy",
    "entropy_and_grad", "log_softmax_grad", "rmsprop_step",
    "dump_tensors", "load_tensors", "params_to_tensors", "params_from_tensors",
]
