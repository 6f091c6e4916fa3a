"""Parameter-update rules: SGD with momentum, RMSprop, and Adam.

All step functions operate on lists of float64 arrays, update the parameter
arrays in place, and mutate their state object. Each parameter entry only ever
sees its own gradient history, so the rules are element-wise decoupled.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class HyperParams:
    learning_rate: float = 0.001
    beta1: float = 0.9          # momentum decay: 90% previous accumulation, 10% current gradient
    beta2: float = 0.999        # squared-gradient decay
    epsilon: float = 1e-8
    bias_correction: bool = False  # optional m/(1-b1^t), s/(1-b2^t) rescale; off by default

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.beta1 < 1.0:
            raise ValueError(f"beta1 must be in [0, 1), got {self.beta1}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ValueError(f"beta2 must be in [0, 1), got {self.beta2}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


class MomentumState:
    """First-moment accumulators for momentum_step."""

    def __init__(self, params):
        self.m = [np.zeros_like(p) for p in params]
        self.t = 0


class RmspropState:
    """Squared-gradient accumulators for rmsprop_step."""

    def __init__(self, params):
        self.s = [np.zeros_like(p) for p in params]
        self.t = 0


class AdamState:
    """First (m) and second (s) moment accumulators plus step counter."""

    def __init__(self, params):
        self.m = [np.zeros_like(p) for p in params]
        self.s = [np.zeros_like(p) for p in params]
        self.t = 0


def _check_shapes(params, grads, state_arrays):
    if len(params) != len(grads) or len(params) != len(state_arrays):
        raise ValueError(
            f"parameter/gradient/state count mismatch: "
            f"{len(params)}/{len(grads)}/{len(state_arrays)}"
        )
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient {i} shape {g.shape} does not match parameter {p.shape}")


def momentum_step(params, grads, state: MomentumState, hp: HyperParams):
    """m <- b1*m + (1-b1)*g; w <- w - lr*m."""
    _check_shapes(params, grads, state.m)
    state.t += 1
    for i, g in enumerate(grads):
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g
        params[i] -= hp.learning_rate * state.m[i]
    return params


def rmsprop_step(params, grads, state: RmspropState, hp: HyperParams):
    """s <- b2*s + (1-b2)*g^2; w <- w - lr/(sqrt(s)+eps) * g."""
    _check_shapes(params, grads, state.s)
    state.t += 1
    for i, g in enumerate(grads):
        state.s[i] = hp.beta2 * state.s[i] + (1.0 - hp.beta2) * g * g
        params[i] -= hp.learning_rate * g / (np.sqrt(state.s[i]) + hp.epsilon)
    return params


def adam_step(params, grads, state: AdamState, hp: HyperParams):
    """Momentum and RMSprop combined: w <- w - lr/(sqrt(s)+eps) * m.

    The plain rule applies the accumulators directly; set
    hp.bias_correction to rescale by 1/(1-beta^t) first.
    """
    _check_shapes(params, grads, state.m)
    state.t += 1
    for i, g in enumerate(grads):
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g
        state.s[i] = hp.beta2 * state.s[i] + (1.0 - hp.beta2) * g * g
        m = state.m[i]
        s = state.s[i]
        if hp.bias_correction:
            m = m / (1.0 - hp.beta1 ** state.t)
            s = s / (1.0 - hp.beta2 ** state.t)
        params[i] -= hp.learning_rate * m / (np.sqrt(s) + hp.epsilon)
    return params
