"""Parameter update rules fed by (possibly transformed) gradients.

Weight decay is coupled: lambda * w is added to the gradient before the
rule, after any gradient transform has run. Schedules live in the harness;
the optimizer sees the effective learning rate through ``state.lr``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor
from .transforms import NonFiniteGradientError

KINDS = ("sgd", "momentum", "adam")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class OptimizerState:
    kind: str
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    t: int = 0
    buffers: dict[str, dict[str, Tensor]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}; expected one of {KINDS}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")


def _buffer(state: OptimizerState, path: str, name: str, like: Tensor) -> Tensor:
    slot = state.buffers.setdefault(path, {})
    if name not in slot:
        slot[name] = np.zeros_like(like)
    return slot[name]


def step(state: OptimizerState, params, grads: dict[str, Tensor]) -> None:
    """Apply one update in place; aborts before touching any weight if a
    gradient is non-finite."""
    for path, p in params.items():
        if not np.all(np.isfinite(grads[path])):
            raise NonFiniteGradientError(path)
    state.t += 1
    for path, p in params.items():
        g = grads[path]
        w = p.value
        dt = w.dtype.type
        if state.weight_decay:
            g = g + dt(state.weight_decay) * w
        if state.kind == "sgd":
            w -= dt(state.lr) * g
        elif state.kind == "momentum":
            v = _buffer(state, path, "v", w)
            v *= dt(state.momentum)
            v += g
            w -= dt(state.lr) * v
        else:  # adam, bias-corrected
            m = _buffer(state, path, "m", w)
            v = _buffer(state, path, "v", w)
            m *= dt(ADAM_BETA1)
            m += dt(1 - ADAM_BETA1) * g
            v *= dt(ADAM_BETA2)
            v += dt(1 - ADAM_BETA2) * (g * g)
            mhat = m / dt(1 - ADAM_BETA1 ** state.t)
            vhat = v / dt(1 - ADAM_BETA2 ** state.t)
            w -= dt(state.lr) * mhat / (np.sqrt(vhat) + dt(ADAM_EPS))


def lr_at_epoch(base_lr: float, epoch: int, decay_epochs: tuple[int, ...]) -> float:
    """Step decay: x0.1 at each configured epoch boundary (0-based epochs)."""
    drops = sum(1 for e in decay_epochs if epoch >= e)
    return base_lr * (0.1 ** drops)
