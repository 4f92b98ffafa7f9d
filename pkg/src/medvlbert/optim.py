"""ADAM with bias correction and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class AdamState:
    """Optimizer state keyed by parameter name.

    ``step_count`` counts optimizer calls.  Bias correction uses the
    per-parameter ``param_steps`` because parameters on an inactive branch
    skip whole procedures and would otherwise be over-corrected.
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lr_overrides: dict[str, float] = field(default_factory=dict)
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    param_steps: dict[str, int] = field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        """Learning rate for ``name``; the longest matching prefix override wins."""
        best, best_len = self.learning_rate, -1
        for prefix, lr in self.lr_overrides.items():
            if (name == prefix or name.startswith(prefix + ".")) and len(prefix) > best_len:
                best, best_len = lr, len(prefix)
        return best


def adam_step(params: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]], state: AdamState) -> AdamState:
    """Apply one ADAM update in place to every parameter in ``params``."""
    items = list(params.items()) if isinstance(params, Mapping) else list(params)
    missing = [name for name, p in items if p.grad is None]
    if missing:
        raise ContractError(f"adam_step: parameter {missing[0]!r} has no gradient")
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    for name, p in items:
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        t = state.param_steps.get(name, 0) + 1
        state.param_steps[name] = t
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        update = state.lr_for(name) * m_hat / (np.sqrt(v_hat) + eps)
        p.data -= update.astype(p.data.dtype, copy=False)
    state.step_count += 1
    return state


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total
