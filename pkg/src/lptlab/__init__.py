"""Desk-scale late prompt tuning lab.

A miniature frozen transformer encoder, the soft-prompt family (input-layer
tuning, late prompts, instance-aware generators), truncated backprop below
the prompt layer, and the measurement tools around them: throughput/memory
benchmarks, prompt-layer sweeps, and mutual-information probes.
"""

from .tensor import (
    Tensor,
    Tape,
    precision,
    set_default_dtype,
    detach,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "precision",
    "set_default_dtype",
    "detach",
    "__version__",
]
