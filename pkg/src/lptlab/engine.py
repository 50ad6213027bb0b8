"""Downstream tuning: the truncated-backprop training loop and evaluation.

Each step runs the lower stack forward-only, generates/fetches the prompt,
prepends it, runs the recorded upper stack, and backpropagates the
restricted cross-entropy at the shifted mask position into the tunable set
alone. The backbone stays frozen: its arrays are never written, gradients
for it are never computed, and the optimizer tracks exactly the declared
tunable scalars.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .encoder import ModelConfig, as_constant_tensors, forward_lower, forward_upper, mlm_logits_at
from .errors import ConfigError, DivergenceError
from .optim import AdamWConfig, OptimizerState, adamw_step, lr_schedule
from .prompting import PromptSpec, count_tunable, generate_prompt, init_prompt_params, insert_prompt
from .tasks import Example, TaskSpec, Vocab, apply_template, verbalize
from .tensor import ContractViolationError, Tensor

LR_GRID = (5e-4, 1e-3, 5e-3, 1e-2)


@dataclass(frozen=True)
class Backbone:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    vocab: Vocab


@dataclass
class TrainConfig:
    peak_lr: float = 5e-3
    warmup_rate: float = 0.0
    batch_size: int = 8
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int | None = 1000
    epochs: int | None = None
    eval_every: int = 50
    seed: int = 0
    precision: str = "single"

    def __post_init__(self):
        if not 5e-4 <= self.peak_lr <= 1e-2:
            raise ConfigError(f"peak_lr={self.peak_lr} outside the 5e-4..1e-2 range")
        if self.warmup_rate not in (0, 0.0, 0.06):
            raise ConfigError(f"warmup_rate={self.warmup_rate} not in {{0, 0.06}}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if (self.steps is None) == (self.epochs is None):
            raise ConfigError("exactly one of steps (few-shot) or epochs (full-data) must be set")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps must be positive")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision {self.precision!r} not 'single' or 'double'")

    def adamw(self) -> AdamWConfig:
        return AdamWConfig(beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                           weight_decay=self.weight_decay)

    def to_dict(self) -> dict:
        return {
            "peak_lr": self.peak_lr, "warmup_rate": self.warmup_rate,
            "batch_size": self.batch_size, "weight_decay": self.weight_decay,
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "steps": self.steps, "epochs": self.epochs,
            "eval_every": self.eval_every, "seed": self.seed,
            "precision": self.precision,
        }


@dataclass
class RunRecord:
    method: str
    prompt: dict
    train: dict
    tunable_params: int
    losses: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    best_step: int = -1
    best_dev: dict = field(default_factory=dict)
    backward_layers_per_step: int = 0

    def to_dict(self) -> dict:
        return {
            "method": self.method, "prompt": self.prompt, "train": self.train,
            "tunable_params": self.tunable_params, "losses": self.losses,
            "evals": self.evals, "best_step": self.best_step,
            "best_dev": self.best_dev,
            "backward_layers_per_step": self.backward_layers_per_step,
        }


def encode_examples(task: TaskSpec, vocab: Vocab, examples: list[Example],
                    max_len: int) -> list[tuple[np.ndarray, int, int]]:
    """Pre-tokenize: (token ids, mask position, label index) per example."""
    out = []
    for ex in examples:
        ids, mask_pos = apply_template(task, vocab, ex, max_len=max_len)
        out.append((np.asarray(ids, dtype=np.int64), mask_pos, task.label_index(ex.label)))
    return out


def example_logits(weights: dict[str, Tensor], config: ModelConfig, spec: PromptSpec,
                   params: dict[str, Tensor], ids: np.ndarray, mask_pos: int,
                   verb_ids: list[int]) -> Tensor:
    """Split forward for one example; returns (1, |Y|) restricted logits."""
    lower = forward_lower(weights, config, ids, None, spec.k)
    prompt = generate_prompt(spec, params, lower, None, config)
    hidden, ext_mask, shift = insert_prompt(prompt, lower, None)
    final = forward_upper(weights, config, hidden, ext_mask, spec.k)
    return mlm_logits_at(weights, final, mask_pos + shift, verb_ids)


def _metric_from_counts(task: TaskSpec, preds: np.ndarray, golds: np.ndarray) -> dict:
    acc = float((preds == golds).mean())
    if task.metric == "acc":
        return {"acc": acc}
    # binary F1, positive class = first label (index 0)
    tp = int(((preds == 0) & (golds == 0)).sum())
    fp = int(((preds == 0) & (golds != 0)).sum())
    fn = int(((preds != 0) & (golds == 0)).sum())
    f1 = 0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    return {"acc": acc, "f1": f1, "acc_and_f1": (acc + f1) / 2.0}


def primary_metric(task: TaskSpec, metrics: dict) -> float:
    return metrics["acc"] if task.metric == "acc" else metrics["acc_and_f1"]


def evaluate_encoded(backbone_t: dict[str, Tensor], config: ModelConfig, spec: PromptSpec,
                     params: dict[str, Tensor], task: TaskSpec, verb_ids: list[int],
                     encoded) -> dict:
    if not encoded:
        raise ConfigError("evaluate: empty split")
    preds = np.empty(len(encoded), dtype=np.int64)
    golds = np.empty(len(encoded), dtype=np.int64)
    for i, (ids, mask_pos, label) in enumerate(encoded):
        logits = example_logits(backbone_t, config, spec, params, ids, mask_pos, verb_ids)
        preds[i] = int(logits.data.argmax())
        golds[i] = label
    return _metric_from_counts(task, preds, golds)


def evaluate(backbone: Backbone, spec: PromptSpec, params: dict[str, np.ndarray],
             task: TaskSpec, examples: list[Example]) -> dict:
    """Accuracy (and binary F1 for acc_and_f1 tasks) of the current prompt state."""
    spec = spec.resolved(backbone.config)
    weights = as_constant_tensors(backbone.weights)
    encoded = encode_examples(task, backbone.vocab, examples,
                              backbone.config.max_seq_len - spec.l)
    param_t = {k: Tensor(v) for k, v in params.items()}
    verb_ids = verbalize(task, backbone.vocab)
    return evaluate_encoded(weights, backbone.config, spec, param_t, task, verb_ids, encoded)


def train(backbone: Backbone, spec: PromptSpec, task: TaskSpec,
          train_examples: list[Example], dev_examples: list[Example],
          cfg: TrainConfig) -> tuple[RunRecord, dict[str, np.ndarray]]:
    """Tune the prompt state on train_examples, selecting by best dev metric."""
    with tt.precision(cfg.precision):
        return _train_inner(backbone, spec, task, train_examples, dev_examples, cfg)


def _train_inner(backbone, spec, task, train_examples, dev_examples, cfg):
    config = backbone.config
    spec = spec.resolved(config)
    weights = as_constant_tensors(backbone.weights)
    verb_ids = verbalize(task, backbone.vocab)
    max_len = config.max_seq_len - spec.l
    train_enc = encode_examples(task, backbone.vocab, train_examples, max_len)
    dev_enc = encode_examples(task, backbone.vocab, dev_examples, max_len)
    if not train_enc:
        raise ConfigError("train: empty training split")

    params = init_prompt_params(spec, config, seed=cfg.seed)
    declared = count_tunable(spec, config)
    actual = sum(p.size for p in params.values())
    if actual != declared:
        raise ContractViolationError(
            f"tunable set has {actual} scalars but count_tunable says {declared}"
        )
    state = OptimizerState.for_params(params)
    adamw_cfg = cfg.adamw()

    if cfg.steps is not None:
        total_steps = cfg.steps
    else:
        total_steps = cfg.epochs * math.ceil(len(train_enc) / cfg.batch_size)

    record = RunRecord(method=spec.method, prompt=spec.to_dict(), train=cfg.to_dict(),
                       tunable_params=declared)
    expected_layer_bwd = config.n_layers - spec.k + 1

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(train_enc))
    cursor = 0
    best_value = -np.inf
    best_params = {k: v.copy() for k, v in params.items()}

    for step in range(total_steps):
        take = min(cfg.batch_size, len(train_enc))
        if cursor + take > len(order):
            order = rng.permutation(len(train_enc))
            cursor = 0
        batch = [train_enc[i] for i in order[cursor:cursor + take]]
        cursor += take

        tape = tt.Tape()
        with tape:
            leaves = {name: tape.watch(arr) for name, arr in params.items()}
            rows = []
            labels = []
            for ids, mask_pos, label in batch:
                rows.append(example_logits(weights, config, spec, leaves, ids,
                                           mask_pos, verb_ids))
                labels.append(label)
            loss = tt.cross_entropy_with_restricted_vocab(tt.concat_rows(rows), labels)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise DivergenceError(step, lr_schedule(step, total_steps, cfg.peak_lr,
                                                    cfg.warmup_rate))
        grads_by_node = tape.backward(loss.node_id)

        layer_bwd = sum(1 for s in tape.backward_scopes if s.startswith("layer"))
        if layer_bwd != expected_layer_bwd:
            raise ContractViolationError(
                f"backward touched {layer_bwd} layers, expected L-k+1={expected_layer_bwd}"
            )
        record.backward_layers_per_step = layer_bwd

        grads = {}
        for name, leaf in leaves.items():
            g = grads_by_node.get(leaf.node_id)
            if g is None:
                raise ContractViolationError(f"tunable parameter {name!r} received no gradient")
            grads[name] = g.data
        lr_t = lr_schedule(step, total_steps, cfg.peak_lr, cfg.warmup_rate)
        params = adamw_step(params, grads, state, lr_t, adamw_cfg)
        record.losses.append(loss_val)

        if dev_enc and ((step + 1) % cfg.eval_every == 0 or step == total_steps - 1):
            param_t = {k: Tensor(v) for k, v in params.items()}
            metrics = evaluate_encoded(weights, config, spec, param_t, task,
                                       verb_ids, dev_enc)
            record.evals.append({"step": step + 1, **metrics})
            value = primary_metric(task, metrics)
            if value > best_value:
                best_value = value
                record.best_step = step + 1
                record.best_dev = metrics
                best_params = {k: v.copy() for k, v in params.items()}

    if not dev_enc:
        best_params = params
        record.best_step = total_steps
    return record, best_params
