"""Soft prompts, late insertion, and instance-aware prompt generators.

Methods:

* ``PT``          — classic prompt tuning: a raw l x d prompt at the input layer.
* ``LATE_NOPG``   — the same raw prompt, prepended at an intermediate layer k.
* ``NPG``         — bottleneck feed-forward on the classification-token state
                    producing the whole l x d prompt.
* ``APPG/MPPG``   — down-project all token states, pool the sequence from
                    length n to l (average / max), ReLU, up-project.

Generator inputs are detached: gradients never reach the frozen stack below
the prompt layer, not even transiently. The only trainable parameters are
the generator weights (or, for PT/LATE_NOPG, the prompt matrix itself).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tt
from .encoder import ModelConfig
from .errors import ConfigError
from .tensor import Tensor

METHODS = ("PT", "LATE_NOPG", "NPG", "APPG", "MPPG")
GENERATOR_METHODS = ("NPG", "APPG", "MPPG")

DEFAULT_PROMPT_LEN = {"PT": 20, "LATE_NOPG": 20, "NPG": 5, "APPG": 5, "MPPG": 5}
DEFAULT_BOTTLENECK = 128


def default_prompt_layer(n_layers: int) -> int:
    """The most intermediate layer: k = floor(L/2) + 1."""
    if n_layers < 1:
        raise ConfigError(f"n_layers={n_layers} must be >= 1")
    return n_layers // 2 + 1


@dataclass(frozen=True)
class PromptSpec:
    method: str
    l: int | None = None  # prompt length
    k: int | None = None  # prompt layer
    m: int | None = None  # generator bottleneck width

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown prompt method {self.method!r}; expected one of {METHODS}")
        if self.l is not None and self.l < 1:
            raise ConfigError("prompt length l must be >= 1")
        if self.m is not None and self.m < 1:
            raise ConfigError("bottleneck m must be >= 1")
        if self.method == "PT" and self.k not in (None, 1):
            raise ConfigError("PT inserts at the input layer; k must be 1")

    def resolved(self, config: ModelConfig) -> "PromptSpec":
        """Fill defaults against a concrete model."""
        l = self.l if self.l is not None else DEFAULT_PROMPT_LEN[self.method]
        if self.method == "PT":
            k = 1
        elif self.k is not None:
            k = self.k
        else:
            k = default_prompt_layer(config.n_layers)
        m = self.m
        if self.method in GENERATOR_METHODS and m is None:
            m = DEFAULT_BOTTLENECK
        if not 1 <= k <= config.n_layers:
            raise ConfigError(f"prompt layer k={k} outside 1..{config.n_layers}")
        return replace(self, l=l, k=k, m=m)

    def to_dict(self) -> dict:
        return {"method": self.method, "l": self.l, "k": self.k, "m": self.m}


def count_tunable(spec: PromptSpec, config: ModelConfig) -> int:
    """Exact tunable-parameter count; the frozen backbone and head are excluded."""
    d = config.d_model
    l, m = spec.l, spec.m
    if l is None or (spec.method in GENERATOR_METHODS and m is None):
        raise ConfigError("count_tunable needs a resolved PromptSpec")
    if spec.method in ("PT", "LATE_NOPG"):
        return l * d
    if spec.method == "NPG":
        return m * d + m + (l * d) * m + l * d
    return m * d + m + d * m + d  # APPG / MPPG


def init_soft_prompt(l: int, d: int, seed: int) -> np.ndarray:
    """Random prompt matrix: i.i.d. normal, mean 0, std 0.02."""
    if l < 1 or d < 1:
        raise ConfigError(f"invalid prompt shape ({l}, {d})")
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((l, d)) * 0.02).astype(tt.default_dtype())


def init_prompt_params(spec: PromptSpec, config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """The complete tunable set for a method, seeded."""
    d = config.d_model
    l, m = spec.l, spec.m
    if spec.method in ("PT", "LATE_NOPG"):
        return {"prompt": init_soft_prompt(l, d, seed)}
    rng = np.random.default_rng(seed)
    dt = tt.default_dtype()

    def normal(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(dt)

    if spec.method == "NPG":
        return {
            "gen.w1": normal(m, d),
            "gen.b1": np.zeros(m, dtype=dt),
            "gen.w2": normal(l * d, m),
            "gen.b2": np.zeros(l * d, dtype=dt),
        }
    return {
        "gen.w1": normal(m, d),
        "gen.b1": np.zeros(m, dtype=dt),
        "gen.w2": normal(d, m),
        "gen.b2": np.zeros(d, dtype=dt),
    }


def npg_generate(h_cls: Tensor, gw: dict[str, Tensor], l: int, d: int) -> Tensor:
    """Bottleneck feed-forward on the classification-token state.

    h_cls is the first-position row of the lower-stack output, shape (1, d)
    or (d,); it is detached on entry. Output is the full l x d prompt.
    """
    if h_cls.data.size != d:
        raise ConfigError(f"h_cls has {h_cls.data.size} entries, expected d={d}")
    h = tt.reshape(tt.detach(h_cls), (d, 1))
    m = gw["gen.w1"].shape[0]
    z = tt.add(tt.matmul(gw["gen.w1"], h), tt.reshape(gw["gen.b1"], (m, 1)))
    hidden = tt.relu(z)
    flat = tt.add(tt.matmul(gw["gen.w2"], hidden), tt.reshape(gw["gen.b2"], (l * d, 1)))
    return tt.reshape(flat, (l, d))


def ppg_generate(h: Tensor, pad_mask, gw: dict[str, Tensor], l: int, mode: str) -> Tensor:
    """Pooling generator: down-project, pool n -> l, ReLU, up-project.

    ``mode`` AVG selects average pooling (APPG), MAX selects max pooling
    (MPPG). Pad positions are excluded from pooling; the up-projection
    bias is broadcast across all l prompt positions.
    """
    n, d = h.shape
    valid = n if pad_mask is None else int(np.asarray(pad_mask).sum())
    ht = tt.transpose(tt.detach(h))  # (d, n)
    m = gw["gen.w1"].shape[0]
    z = tt.add(tt.matmul(gw["gen.w1"], ht), tt.reshape(gw["gen.b1"], (m, 1)))
    pooled = tt.relu(tt.bucket_pool(z, l, mode, valid))  # (m, l)
    up = tt.add(tt.matmul(gw["gen.w2"], pooled), tt.reshape(gw["gen.b2"], (d, 1)))
    return tt.transpose(up)  # (l, d)


def generate_prompt(spec: PromptSpec, params: dict[str, Tensor], lower: Tensor,
                    pad_mask, config: ModelConfig) -> Tensor:
    """Produce this instance's prompt for any method."""
    if spec.method in ("PT", "LATE_NOPG"):
        return params["prompt"]
    if spec.method == "NPG":
        h_cls = tt.slice_rows(lower, 0, 1)
        return npg_generate(h_cls, params, spec.l, config.d_model)
    mode = "AVG" if spec.method == "APPG" else "MAX"
    return ppg_generate(lower, pad_mask, params, spec.l, mode)


def insert_prompt(prompt: Tensor | None, hidden: Tensor, pad_mask):
    """Prepend prompt rows; returns (extended hidden, extended mask, shift).

    Prompt rows occupy positions 0..l-1 and are attendable; original
    positions (and any [MASK] index) shift by l. ``prompt=None`` is the
    l=0 identity.
    """
    n = hidden.shape[0]
    mask = np.ones(n) if pad_mask is None else np.asarray(pad_mask, dtype=np.float64)
    if prompt is None:
        return hidden, mask, 0
    if prompt.data.ndim != 2 or prompt.shape[1] != hidden.shape[1]:
        raise tt.ShapeMismatchError(
            f"insert_prompt: prompt {prompt.shape} vs hidden {hidden.shape}"
        )
    l = prompt.shape[0]
    ext = tt.concat_rows([prompt, hidden])
    ext_mask = np.concatenate([np.ones(l), mask])
    return ext, ext_mask, l


def export_prompts(spec: PromptSpec, params: dict[str, Tensor], lowers,
                   pad_masks, config: ModelConfig, path) -> int:
    """Dump one generated prompt per instance as CSV (id, l*d flat values)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id"] + [f"v{i}" for i in range(spec.l * config.d_model)])
        count = 0
        for idx, (lower, mask) in enumerate(zip(lowers, pad_masks)):
            p = generate_prompt(spec, params, lower, mask, config)
            writer.writerow([idx] + [f"{x:.8g}" for x in p.data.reshape(-1)])
            count += 1
    return count
