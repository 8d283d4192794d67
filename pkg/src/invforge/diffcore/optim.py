from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NumericalError


def cosine_lr(step: int, t_sched: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from ``lr_max`` at step 0 to ``lr_min`` at ``t_sched``."""
    if t_sched <= 0:
        raise ConfigError("cosine schedule horizon must be positive")
    if not 0 <= step <= t_sched:
        raise ConfigError(f"step {step} outside [0, {t_sched}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / t_sched))


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t_sched: int | None = None
    min_lr: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        if self.t_sched is None:
            return self.lr
        return cosine_lr(min(self.step, self.t_sched), self.t_sched, self.lr, self.min_lr)


def adamw_step(state: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    The learning rate used is the schedule value at the current step
    counter, which is then incremented.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericalError(f"non-finite gradient for parameter {name!r} ({bad} entries) "
                                 f"at step {state.step}")
    lr = state.current_lr()
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {name!r} {theta.shape}")
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            theta -= lr * state.weight_decay * theta
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    """Binds an :class:`OptimizerState` to a module's parameter set."""

    def __init__(self, module, lr: float, weight_decay: float = 0.01, betas=(0.9, 0.999),
                 eps: float = 1e-8, total_steps: int | None = None, min_lr: float = 0.0) -> None:
        self.module = module
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, betas=tuple(betas), eps=eps,
                                    t_sched=total_steps, min_lr=min_lr)

    def step(self) -> float:
        lr = self.state.current_lr()
        params, grads = {}, {}
        for name, p, g in self.module.named_parameters():
            params[name] = p
            grads[name] = g
        adamw_step(self.state, params, grads)
        return lr
