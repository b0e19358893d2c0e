"""In-place SGD and RMSProp parameter updates."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    """Update rule, its hyper-parameters and per-parameter accumulators.

    ``rho`` is the RMSProp decay of the squared-gradient average; ``momentum``
    only applies to ``sgd``.  ``weight_decay`` adds an L2 term to each
    gradient before the rule is applied.
    """

    rule: str = "rmsprop"
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    momentum: float = 0.0
    weight_decay: float = 0.0
    accum: list = field(default_factory=list)
    steps: int = 0

    def __post_init__(self):
        if self.rule not in ("sgd", "rmsprop"):
            raise ValueError(f"unknown optimizer rule {self.rule!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")


def optimizer_step(net, grads, state):
    """Apply one update to ``net`` in place; returns ``(net, state)``."""
    update_arrays(net.parameters(), [g for group in grads for g in group], state)
    return net, state


def update_arrays(params, flat, state):
    """Update a flat list of parameter arrays in place."""
    if len(flat) != len(params):
        raise ValueError(f"{len(flat)} gradients for {len(params)} parameters")
    if not state.accum:
        state.accum = [np.zeros_like(p) for p in params]
    dtype = params[0].dtype.type if params else np.float32
    lr = dtype(state.lr)
    for p, g, acc in zip(params, flat, state.accum):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if state.weight_decay:
            g = g + dtype(state.weight_decay) * p
        if state.rule == "sgd":
            if state.momentum:
                acc *= dtype(state.momentum)
                acc += g
                g = acc
            p -= lr * g
        else:
            acc *= dtype(state.rho)
            acc += dtype(1.0 - state.rho) * g * g
            p -= lr * g / (np.sqrt(acc) + dtype(state.eps))
    state.steps += 1
    return state
