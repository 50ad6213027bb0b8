"""Small pre-LayerNorm transformer encoder with a tied MLM head.

The forward pass is split at a prompt layer k: ``forward_lower`` runs
embeddings plus layers 1..k-1 with recording paused (its outputs are
constants), ``forward_upper`` runs layers k..L plus the final norm with
recording on. Layer weights enter the upper graph as constants, so only
the incoming prompt/generator nodes carry gradient.

``pretrain_toy`` manufactures a frozen backbone by masked-language-model
training on a synthetic corpus; it is the stand-in for a public PTM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ConfigError
from .optim import AdamWConfig, OptimizerState, adamw_step, lr_schedule
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def init_weights(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh encoder weights: N(0, 0.02) matrices, zero biases, unit norms."""
    rng = np.random.default_rng(seed)
    dt = tt.default_dtype()
    d, ff, v = config.d_model, config.d_ff, config.vocab_size

    def normal(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(dt)

    # positional table starts at zero: content has to drive attention first,
    # and positions are picked up only where the data demands them
    w: dict[str, np.ndarray] = {
        "tok_emb": normal(v, d),
        "pos_emb": np.zeros((config.max_seq_len, d), dtype=dt),
        "final_ln.g": np.ones((1, d), dtype=dt),
        "final_ln.b": np.zeros((1, d), dtype=dt),
        "mlm_bias": np.zeros((1, v), dtype=dt),
    }
    for i in range(1, config.n_layers + 1):
        p = f"layer{i}."
        for proj in ("wq", "wk", "wv", "wo"):
            w[p + f"attn.{proj}"] = normal(d, d)
        for b in ("bq", "bk", "bv", "bo"):
            w[p + f"attn.{b}"] = np.zeros((1, d), dtype=dt)
        w[p + "ffn.w1"] = normal(d, ff)
        w[p + "ffn.b1"] = np.zeros((1, ff), dtype=dt)
        w[p + "ffn.w2"] = normal(ff, d)
        w[p + "ffn.b2"] = np.zeros((1, d), dtype=dt)
        for ln in ("ln1", "ln2"):
            w[p + f"{ln}.g"] = np.ones((1, d), dtype=dt)
            w[p + f"{ln}.b"] = np.zeros((1, d), dtype=dt)
    return w


def as_constant_tensors(weights: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap raw arrays once; constants are reusable across tapes and steps."""
    return {name: Tensor(arr) for name, arr in weights.items()}


def _block(w: dict[str, Tensor], i: int, config: ModelConfig, x: Tensor, key_mask) -> Tensor:
    p = f"layer{i}."
    d = config.d_model
    dh = d // config.n_heads

    xn = tt.layer_norm(x, w[p + "ln1.g"], w[p + "ln1.b"])
    q = tt.add(tt.matmul(xn, w[p + "attn.wq"]), w[p + "attn.bq"])
    k = tt.add(tt.matmul(xn, w[p + "attn.wk"]), w[p + "attn.bk"])
    v = tt.add(tt.matmul(xn, w[p + "attn.wv"]), w[p + "attn.bv"])
    heads = []
    for j in range(config.n_heads):
        lo, hi = j * dh, (j + 1) * dh
        qj = tt.slice_cols(q, lo, hi)
        kj = tt.slice_cols(k, lo, hi)
        vj = tt.slice_cols(v, lo, hi)
        scores = tt.scale(tt.matmul(qj, tt.transpose(kj)), 1.0 / math.sqrt(dh))
        probs = tt.softmax_rows(scores, key_mask=key_mask)
        heads.append(tt.matmul(probs, vj))
    ctx = heads[0] if len(heads) == 1 else tt.concat_cols(heads)
    x = tt.add(x, tt.add(tt.matmul(ctx, w[p + "attn.wo"]), w[p + "attn.bo"]))

    xn2 = tt.layer_norm(x, w[p + "ln2.g"], w[p + "ln2.b"])
    hidden = tt.relu(tt.add(tt.matmul(xn2, w[p + "ffn.w1"]), w[p + "ffn.b1"]))
    ff = tt.add(tt.matmul(hidden, w[p + "ffn.w2"]), w[p + "ffn.b2"])
    return tt.add(x, ff)


def embed(w: dict[str, Tensor], config: ModelConfig, token_ids) -> Tensor:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size > config.max_seq_len:
        raise ConfigError(f"sequence length {ids.size} exceeds max_seq_len={config.max_seq_len}")
    tok = tt.embedding_lookup(w["tok_emb"], ids)
    pos = tt.slice_rows(w["pos_emb"], 0, ids.size)
    return tt.add(tok, pos)


def _check_prompt_layer(config: ModelConfig, k: int, upper_bound: int) -> None:
    if not 1 <= k <= upper_bound:
        raise ConfigError(f"prompt layer k={k} outside 1..{upper_bound}")


def forward_lower(w: dict[str, Tensor], config: ModelConfig, token_ids, pad_mask, k: int) -> Tensor:
    """Embeddings plus layers 1..k-1, recording paused: output is constant."""
    _check_prompt_layer(config, k, config.n_layers + 1)
    with tt.recording_paused():
        x = embed(w, config, token_ids)
        for i in range(1, k):
            x = _block(w, i, config, x, pad_mask)
    return x


def forward_upper(w: dict[str, Tensor], config: ModelConfig, hidden: Tensor,
                  ext_pad_mask, k: int) -> Tensor:
    """Layers k..L plus the final norm, recorded for backward."""
    _check_prompt_layer(config, k, config.n_layers + 1)
    if hidden.data.ndim != 2 or hidden.shape[1] != config.d_model:
        raise ConfigError(f"hidden shape {hidden.shape} does not match d_model={config.d_model}")
    x = hidden
    for i in range(k, config.n_layers + 1):
        with tt.scope(f"layer{i}"):
            x = _block(w, i, config, x, ext_pad_mask)
    with tt.scope("final_ln"):
        return tt.layer_norm(x, w["final_ln.g"], w["final_ln.b"])


def forward_full(w: dict[str, Tensor], config: ModelConfig, token_ids, pad_mask) -> Tensor:
    """Monolithic forward (no prompt, no recording)."""
    with tt.recording_paused():
        x = forward_lower(w, config, token_ids, pad_mask, config.n_layers + 1)
        return tt.layer_norm(x, w["final_ln.g"], w["final_ln.b"])


def forward_layerwise(w: dict[str, Tensor], config: ModelConfig, token_ids, pad_mask) -> list[np.ndarray]:
    """Outputs of every layer 1..L (pre final norm), as plain arrays."""
    with tt.recording_paused():
        x = embed(w, config, token_ids)
        outs = []
        for i in range(1, config.n_layers + 1):
            x = _block(w, i, config, x, pad_mask)
            outs.append(x.data)
    return outs


def _encode_recorded(w: dict[str, Tensor], config: ModelConfig, token_ids, pad_mask) -> Tensor:
    x = embed(w, config, token_ids)
    return forward_upper(w, config, x, pad_mask, 1)


def mlm_logits_at(w: dict[str, Tensor], final_states: Tensor, mask_position: int,
                  verbalizer_token_ids) -> Tensor:
    """Tied-embedding readout at the mask row, restricted to the label words.

    Expects a frozen head: the embedding table and output bias must be
    constants here, otherwise their gradients would silently be dropped.
    """
    ids = np.asarray(verbalizer_token_ids, dtype=np.int64)
    if ids.size == 0:
        raise ConfigError("empty verbalizer")
    if not 0 <= mask_position < final_states.shape[0]:
        raise ConfigError(
            f"mask position {mask_position} outside sequence of length {final_states.shape[0]}"
        )
    if w["tok_emb"].node_id is not None or w["mlm_bias"].node_id is not None:
        raise ConfigError("mlm_logits_at requires a frozen (constant) MLM head")
    row = tt.slice_rows(final_states, mask_position, mask_position + 1)
    label_emb = Tensor(w["tok_emb"].data[ids])          # (|Y|, d)
    label_bias = Tensor(w["mlm_bias"].data[:, ids])     # (1, |Y|)
    return tt.add(tt.matmul(row, tt.transpose(label_emb)), label_bias)


def tied_logits(w: dict[str, Tensor], rows: Tensor) -> Tensor:
    """Full-vocabulary tied readout for a stack of hidden rows."""
    return tt.add(tt.matmul(rows, tt.transpose(w["tok_emb"])), w["mlm_bias"])


# ---------------------------------------------------------------------------
# toy MLM pretraining
# ---------------------------------------------------------------------------

def _choose_mask_positions(rng, ids: np.ndarray, special_ids: frozenset, mlm_prob: float) -> list[int]:
    eligible = [p for p in range(ids.size) if int(ids[p]) not in special_ids]
    picked = [p for p in eligible if rng.random() < mlm_prob]
    if not picked and eligible:
        picked = [eligible[rng.integers(len(eligible))]]
    return picked


def _mlm_heldout_stats(w: dict[str, Tensor], config: ModelConfig, sequences,
                       mask_id: int, special_ids: frozenset, mlm_prob: float,
                       seed: int) -> dict:
    rng = np.random.default_rng(seed)
    total_nll = 0.0
    hits = 0
    count = 0
    with tt.recording_paused():
        for ids in sequences:
            positions = _choose_mask_positions(rng, ids, special_ids, mlm_prob)
            if not positions:
                continue
            masked = ids.copy()
            masked[positions] = mask_id
            final = forward_full(w, config, masked, None)
            rows = tt.concat_rows([tt.slice_rows(final, p, p + 1) for p in positions])
            logits = tied_logits(w, rows).data
            targets = ids[positions]
            zmax = logits.max(axis=1, keepdims=True)
            lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
            total_nll += float((lse - logits[np.arange(len(positions)), targets]).sum())
            hits += int((logits.argmax(axis=1) == targets).sum())
            count += len(positions)
    if count == 0:
        raise ConfigError("held-out corpus produced no maskable positions")
    return {"loss": total_nll / count, "accuracy": hits / count, "masked_tokens": count}


def pretrain_toy(config: ModelConfig, corpus: list[np.ndarray], mask_id: int,
                 special_ids, mlm_prob: float = 0.15, steps: int = 2000,
                 batch_size: int = 8, peak_lr: float = 1e-3,
                 warmup_rate: float = 0.06, seed: int = 0,
                 heldout_fraction: float = 0.05) -> tuple[dict[str, np.ndarray], dict]:
    """Masked-language-model training from scratch on a toy corpus.

    ``corpus`` is a list of token-id sequences already framed with
    [CLS]/[SEP]. 15% of non-special tokens are replaced by [MASK] and
    predicted through the tied head. Fully seeded: the same inputs give
    bitwise-identical weights.
    """
    if not corpus:
        raise ConfigError("pretraining corpus is empty")
    if len(corpus) < batch_size:
        raise ConfigError(f"corpus has {len(corpus)} sequences, fewer than one batch of {batch_size}")
    special_ids = frozenset(int(s) for s in special_ids)
    corpus = [np.asarray(c, dtype=np.int64) for c in corpus]

    n_heldout = max(1, int(len(corpus) * heldout_fraction))
    heldout, trainset = corpus[:n_heldout], corpus[n_heldout:]
    if len(trainset) < batch_size:
        raise ConfigError("corpus too small after held-out split")

    params = init_weights(config, seed=seed)
    adamw = AdamWConfig(weight_decay=0.0)
    state = OptimizerState.for_params(params)
    rng = np.random.default_rng(seed + 1)

    initial = _mlm_heldout_stats(as_constant_tensors(params), config, heldout,
                                 mask_id, special_ids, mlm_prob, seed=seed + 2)

    order = rng.permutation(len(trainset))
    cursor = 0
    losses = []
    for step in range(steps):
        if cursor + batch_size > len(order):
            order = rng.permutation(len(trainset))
            cursor = 0
        batch = [trainset[i] for i in order[cursor:cursor + batch_size]]
        cursor += batch_size

        tape = tt.Tape()
        with tape:
            leaves = {name: tape.watch(arr) for name, arr in params.items()}
            rows = []
            targets = []
            for ids in batch:
                positions = _choose_mask_positions(rng, ids, special_ids, mlm_prob)
                masked = ids.copy()
                masked[positions] = mask_id
                final = _encode_recorded(leaves, config, masked, None)
                rows.extend(tt.slice_rows(final, p, p + 1) for p in positions)
                targets.extend(int(t) for t in ids[positions])
            logits = tied_logits(leaves, tt.concat_rows(rows))
            loss = tt.cross_entropy_with_restricted_vocab(logits, targets)
        grads_by_node = tape.backward(loss.node_id)
        grads = {name: grads_by_node[leaf.node_id].data for name, leaf in leaves.items()}
        lr_t = lr_schedule(step, steps, peak_lr, warmup_rate)
        params = adamw_step(params, grads, state, lr_t, adamw)
        losses.append(loss.item())

    final = _mlm_heldout_stats(as_constant_tensors(params), config, heldout,
                               mask_id, special_ids, mlm_prob, seed=seed + 2)
    stats = {
        "steps": steps,
        "batch_size": batch_size,
        "peak_lr": peak_lr,
        "corpus_sequences": len(corpus),
        "heldout_sequences": len(heldout),
        "initial_heldout": initial,
        "final_heldout": final,
        "first_train_loss": losses[0],
        "last_train_loss": losses[-1],
    }
    return params, stats
