"""AdamW with decoupled weight decay and the linear warmup/decay schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractViolationError


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1


@dataclass
class OptimizerState:
    """First/second moment accumulators, one pair per tunable parameter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )

    def scalar_count(self) -> int:
        return sum(p.size for p in self.m.values())


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr_t: float,
    config: AdamWConfig,
) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update; returns fresh parameter arrays.

    Gradients must be present for exactly the tracked parameter set: a
    gradient for anything else means a frozen parameter leaked into the
    backward pass.
    """
    if set(grads) != set(state.m):
        extra = sorted(set(grads) - set(state.m))
        missing = sorted(set(state.m) - set(grads))
        raise ContractViolationError(
            f"gradient/parameter set mismatch: unexpected={extra} missing={missing}"
        )
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractViolationError(
                f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        out[name] = p - lr_t * (m_hat / (np.sqrt(v_hat) + config.eps)
                                + config.weight_decay * p)
    return out


def lr_schedule(step: int, total_steps: int, peak_lr: float, warmup_rate: float) -> float:
    """Linear ramp 0..peak over ceil(warmup_rate*total) steps, then linear decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside 0..{total_steps}")
    warmup = math.ceil(warmup_rate * total_steps)
    if warmup > 0 and step <= warmup:
        return peak_lr * step / warmup
    if total_steps == warmup:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup)
