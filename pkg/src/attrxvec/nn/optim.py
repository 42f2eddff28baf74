"""Adam with L2 weight decay and the learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError, DataError


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0,
              decay_names=None):
    """Update ``params`` (name -> ndarray) in place.

    ``state`` maps name -> {"m", "v", "t"} and is created lazily; the L2 term
    ``weight_decay * theta`` is added to the gradient before the moment updates.
    ``decay_names`` restricts the decay to a subset (all params when None).
    """
    for name, grad in grads.items():
        theta = params[name]
        if grad is None:
            grad = np.zeros_like(theta)
        if grad.shape != theta.shape:
            raise DataError(f"gradient shape {grad.shape} != parameter shape {theta.shape} for {name}")
        if weight_decay and (decay_names is None or name in decay_names):
            grad = grad + weight_decay * theta
        st = state.get(name)
        if st is None:
            st = state[name] = {"m": np.zeros_like(theta), "v": np.zeros_like(theta), "t": 0}
        st["t"] += 1
        st["m"] = beta1 * st["m"] + (1.0 - beta1) * grad
        st["v"] = beta2 * st["v"] + (1.0 - beta2) * grad * grad
        m_hat = st["m"] / (1.0 - beta1 ** st["t"])
        v_hat = st["v"] / (1.0 - beta2 ** st["t"])
        theta -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(theta.dtype, copy=False)
    return params, state


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state = {}

    def step(self, tensors, lr, decay_names=None):
        """Apply one step to the given name -> Tensor mapping (others untouched)."""
        params = {k: t.data for k, t in tensors.items()}
        grads = {k: t.grad for k, t in tensors.items()}
        adam_step(params, grads, self.state, lr, self.beta1, self.beta2, self.eps,
                  self.weight_decay, decay_names)

    def arrays(self):
        out = {}
        for name in sorted(self.state):
            out[f"m/{name}"] = self.state[name]["m"]
            out[f"v/{name}"] = self.state[name]["v"]
        return out

    def steps(self):
        return {name: self.state[name]["t"] for name in sorted(self.state)}

    def load(self, arrays, steps):
        self.state = {name: {"m": np.array(arrays[f"m/{name}"]), "v": np.array(arrays[f"v/{name}"]),
                             "t": int(t)} for name, t in steps.items()}


def lr_schedule(step, total_steps, initial=1e-3, final=1e-4, shape="exponential"):
    if not 0 <= step <= max(total_steps, 0):
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return initial
    frac = step / total_steps
    if shape == "exponential":
        return initial * math.exp(frac * math.log(final / initial))
    if shape == "linear":
        return initial + frac * (final - initial)
    raise ConfigError(f"unknown schedule shape {shape!r}")
