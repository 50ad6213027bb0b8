"""Dense row-major tensors with a reverse-mode autodiff tape.

The tape has an explicit recording boundary: ops executed while recording
is paused, or whose inputs are all constants, return constant tensors that
can never receive gradients. ``detach`` turns any tensor into such a
constant. Together these let a training step run the lower half of a
network forward-only and backpropagate through the upper half alone.

Scalar precision defaults to single; ``precision("double")`` switches new
tensors to float64 for tight gradient checks and bitwise-reproducible runs.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_DTYPES = {"single": np.float32, "double": np.float64}
_default_dtype = np.float32


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes for the requested op."""


class UnsupportedInputError(ValueError):
    """Structurally valid input outside the op's supported domain."""


class ContractViolationError(RuntimeError):
    """An API contract was broken (non-scalar loss, nested tapes, ...)."""


def set_default_dtype(kind: str) -> None:
    global _default_dtype
    if kind not in _DTYPES:
        raise ValueError(f"unknown precision {kind!r}; expected 'single' or 'double'")
    _default_dtype = _DTYPES[kind]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextlib.contextmanager
def precision(kind: str):
    """Temporarily switch the scalar precision used for new tensors."""
    global _default_dtype
    if kind not in _DTYPES:
        raise ValueError(f"unknown precision {kind!r}; expected 'single' or 'double'")
    prev = _default_dtype
    _default_dtype = _DTYPES[kind]
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    """Flat row-major array plus an optional tape handle.

    ``node_id is None`` marks a constant: it is invisible to the tape and
    never receives a gradient.
    """

    __slots__ = ("data", "node_id")

    def __init__(self, data, node_id: int | None = None):
        if isinstance(data, np.ndarray):
            arr = data if data.dtype in (np.float32, np.float64) else data.astype(_default_dtype)
        else:
            arr = np.asarray(data, dtype=_default_dtype)
        self.data = np.ascontiguousarray(arr)
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"


class _Node:
    __slots__ = ("op", "inputs", "saved", "bwd", "scope", "out_shape", "out_dtype")

    def __init__(self, op, inputs, saved, bwd, scope, out_shape, out_dtype):
        self.op = op
        self.inputs = inputs
        self.saved = saved
        self.bwd = bwd
        self.scope = scope
        self.out_shape = out_shape
        self.out_dtype = out_dtype


_active_tape: "Tape | None" = None


def active_tape() -> "Tape | None":
    return _active_tape


class Tape:
    """Append-only record of differentiable ops.

    Use as a context manager to make it the active tape. Nodes are stored
    in creation order, which is a topological order, so ``backward`` walks
    them in strict reverse. A tape is never mutated by backward; calling
    it twice recomputes identical gradients.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, Tensor] = {}
        self.recording = True
        self.backward_scopes: set[str] = set()
        self._scope: str | None = None

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise ContractViolationError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = None
        return False

    @contextlib.contextmanager
    def scope(self, name: str):
        prev = self._scope
        self._scope = name
        try:
            yield
        finally:
            self._scope = prev

    @contextlib.contextmanager
    def paused(self):
        prev = self.recording
        self.recording = False
        try:
            yield
        finally:
            self.recording = prev

    def watch(self, value) -> Tensor:
        """Register a trainable leaf; its gradient appears after backward."""
        if not self.recording:
            raise ContractViolationError("cannot watch a leaf while recording is paused")
        t = Tensor(value)
        self.nodes.append(_Node("leaf", (), (), None, self._scope, t.shape, t.data.dtype))
        t.node_id = len(self.nodes) - 1
        return t

    def _push(self, op, input_ids, saved, bwd, out) -> int:
        self.nodes.append(_Node(op, input_ids, saved, bwd, self._scope, out.shape, out.dtype))
        return len(self.nodes) - 1

    def saved_bytes(self) -> int:
        """Analytic size of everything the tape holds for backward."""
        total = 0
        for node in self.nodes:
            for item in node.saved:
                if isinstance(item, np.ndarray):
                    total += item.nbytes
        return total

    def grad_for(self, t: Tensor) -> np.ndarray | None:
        if t.node_id is None:
            return None
        g = self.grads.get(t.node_id)
        return None if g is None else g.data

    def backward(self, loss_node: int) -> dict[int, Tensor]:
        """Populate gradients for every recorded ancestor of the loss node."""
        if loss_node is None or not 0 <= loss_node < len(self.nodes):
            raise ContractViolationError("loss node is not recorded on this tape")
        loss = self.nodes[loss_node]
        if math.prod(loss.out_shape) != 1:
            raise ContractViolationError(
                f"loss must be scalar-shaped, got shape {loss.out_shape}"
            )

        needed = bytearray(len(self.nodes))
        needed[loss_node] = 1
        for nid in range(loss_node, -1, -1):
            if needed[nid]:
                for i in self.nodes[nid].inputs:
                    if i is not None:
                        needed[i] = 1

        grads: dict[int, np.ndarray] = {
            loss_node: np.ones(loss.out_shape, dtype=loss.out_dtype)
        }
        touched: set[str] = set()
        for nid in range(loss_node, -1, -1):
            if not needed[nid]:
                continue
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.bwd is None:  # leaf
                continue
            if node.scope is not None:
                touched.add(node.scope)
            needs = tuple(i is not None for i in node.inputs)
            for i, gi in zip(node.inputs, node.bwd(g, node.saved, needs)):
                if i is None or gi is None:
                    continue
                acc = grads.get(i)
                grads[i] = gi if acc is None else acc + gi

        self.backward_scopes = touched
        self.grads = {nid: Tensor(arr) for nid, arr in grads.items()}
        return self.grads


def backward(tape: Tape, loss_node: int) -> dict[int, Tensor]:
    return tape.backward(loss_node)


@contextlib.contextmanager
def recording_paused():
    """Pause recording on the active tape; no-op when none is active."""
    tape = _active_tape
    if tape is None:
        yield
    else:
        with tape.paused():
            yield


@contextlib.contextmanager
def scope(name: str):
    """Label nodes created in this block; no-op when no tape is active."""
    tape = _active_tape
    if tape is None:
        yield
    else:
        with tape.scope(name):
            yield


def _should_record(*tensors: Tensor) -> bool:
    tape = _active_tape
    if tape is None or not tape.recording:
        return False
    return any(t.node_id is not None for t in tensors)


def _record(op, out_data, inputs, saved, bwd) -> Tensor:
    tape = _active_tape
    ids = tuple(t.node_id for t in inputs)
    nid = tape._push(op, ids, saved, bwd, out_data)
    return Tensor(out_data, nid)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def detach(x: Tensor) -> Tensor:
    """Same values, no tape handle: gradient flow stops here."""
    return Tensor(x.data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _add_bwd(g, saved, needs):
    xs, ys = saved
    return (_unbroadcast(g, xs) if needs[0] else None,
            _unbroadcast(g, ys) if needs[1] else None)


def add(x: Tensor, y: Tensor) -> Tensor:
    try:
        out = x.data + y.data
    except ValueError as e:
        raise ShapeMismatchError(f"add: {x.shape} + {y.shape}") from e
    if not _should_record(x, y):
        return Tensor(out)
    return _record("add", out, (x, y), (x.shape, y.shape), _add_bwd)


def _mul_bwd(g, saved, needs):
    xd, yd, xs, ys = saved
    gx = _unbroadcast(g * yd, xs) if needs[0] else None
    gy = _unbroadcast(g * xd, ys) if needs[1] else None
    return gx, gy


def mul(x: Tensor, y: Tensor) -> Tensor:
    try:
        out = x.data * y.data
    except ValueError as e:
        raise ShapeMismatchError(f"mul: {x.shape} * {y.shape}") from e
    if not _should_record(x, y):
        return Tensor(out)
    saved = (x.data if y.node_id is not None else None,
             y.data if x.node_id is not None else None,
             x.shape, y.shape)
    return _record("mul", out, (x, y), saved, _mul_bwd)


def _scale_bwd(g, saved, needs):
    (c,) = saved
    return (g * c,)


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * c
    if not _should_record(x):
        return Tensor(out)
    return _record("scale", out, (x,), (c,), _scale_bwd)


def _matmul_bwd(g, saved, needs):
    a_data, b_data = saved
    ga = g @ b_data.T if needs[0] else None
    gb = a_data.T @ g if needs[1] else None
    return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: {a.shape} x {b.shape}")
    out = a.data @ b.data
    if not _should_record(a, b):
        return Tensor(out)
    saved = (a.data if b.node_id is not None else None,
             b.data if a.node_id is not None else None)
    return _record("matmul", out, (a, b), saved, _matmul_bwd)


def _relu_bwd(g, saved, needs):
    (mask,) = saved
    return (g * mask,)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    out = np.maximum(x.data, 0)
    if not _should_record(x):
        return Tensor(out)
    mask = (x.data > 0).astype(x.data.dtype)
    return _record("relu", out, (x,), (mask,), _relu_bwd)


def _transpose_bwd(g, saved, needs):
    return (np.ascontiguousarray(g.T),)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"transpose: expected rank-2 tensor, got {x.shape}")
    out = np.ascontiguousarray(x.data.T)
    if not _should_record(x):
        return Tensor(out)
    return _record("transpose", out, (x,), (), _transpose_bwd)


def _reshape_bwd(g, saved, needs):
    (old_shape,) = saved
    return (g.reshape(old_shape),)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != x.data.size:
        raise ShapeMismatchError(f"reshape: {x.shape} -> {shape}")
    out = x.data.reshape(shape)
    if not _should_record(x):
        return Tensor(out)
    return _record("reshape", out, (x,), (x.shape,), _reshape_bwd)


def _sum_all_bwd(g, saved, needs):
    (shape, dtype) = saved
    return (np.full(shape, g.reshape(()), dtype=dtype),)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    if not _should_record(x):
        return Tensor(out)
    return _record("sum", out, (x,), (x.shape, x.data.dtype), _sum_all_bwd)


def _concat_rows_bwd(g, saved, needs):
    (counts,) = saved
    outs, offset = [], 0
    for c, need in zip(counts, needs):
        outs.append(g[offset:offset + c] if need else None)
        offset += c
    return tuple(outs)


def concat_rows(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise UnsupportedInputError("concat_rows: empty input")
    cols = {p.shape[1] for p in parts if p.data.ndim == 2}
    if any(p.data.ndim != 2 for p in parts) or len(cols) != 1:
        raise ShapeMismatchError(
            f"concat_rows: shapes {[p.shape for p in parts]} do not align on columns"
        )
    out = np.concatenate([p.data for p in parts], axis=0)
    if not _should_record(*parts):
        return Tensor(out)
    counts = tuple(p.shape[0] for p in parts)
    return _record("concat_rows", out, tuple(parts), (counts,), _concat_rows_bwd)


def _concat_cols_bwd(g, saved, needs):
    (counts,) = saved
    outs, offset = [], 0
    for c, need in zip(counts, needs):
        outs.append(np.ascontiguousarray(g[:, offset:offset + c]) if need else None)
        offset += c
    return tuple(outs)


def concat_cols(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise UnsupportedInputError("concat_cols: empty input")
    rows = {p.shape[0] for p in parts if p.data.ndim == 2}
    if any(p.data.ndim != 2 for p in parts) or len(rows) != 1:
        raise ShapeMismatchError(
            f"concat_cols: shapes {[p.shape for p in parts]} do not align on rows"
        )
    out = np.concatenate([p.data for p in parts], axis=1)
    if not _should_record(*parts):
        return Tensor(out)
    counts = tuple(p.shape[1] for p in parts)
    return _record("concat_cols", out, tuple(parts), (counts,), _concat_cols_bwd)


def _slice_rows_bwd(g, saved, needs):
    shape, dtype, start, stop = saved
    gx = np.zeros(shape, dtype=dtype)
    gx[start:stop] = g
    return (gx,)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[0]:
        raise ShapeMismatchError(f"slice_rows: [{start}:{stop}] of {x.shape}")
    out = np.ascontiguousarray(x.data[start:stop])
    if not _should_record(x):
        return Tensor(out)
    return _record("slice_rows", out, (x,), (x.shape, x.data.dtype, start, stop),
                   _slice_rows_bwd)


def _slice_cols_bwd(g, saved, needs):
    shape, dtype, start, stop = saved
    gx = np.zeros(shape, dtype=dtype)
    gx[:, start:stop] = g
    return (gx,)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeMismatchError(f"slice_cols: [{start}:{stop}] of {x.shape}")
    out = np.ascontiguousarray(x.data[:, start:stop])
    if not _should_record(x):
        return Tensor(out)
    return _record("slice_cols", out, (x,), (x.shape, x.data.dtype, start, stop),
                   _slice_cols_bwd)


def _embedding_bwd(g, saved, needs):
    ids, table_shape, dtype = saved
    if not needs[0]:
        return (None,)
    gt = np.zeros(table_shape, dtype=dtype)
    np.add.at(gt, ids, g)
    return (gt,)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or ids.ndim != 1:
        raise ShapeMismatchError(
            f"embedding_lookup: table {table.shape}, ids shape {ids.shape}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise UnsupportedInputError("embedding_lookup: id out of table range")
    out = table.data[ids]
    if not _should_record(table):
        return Tensor(out)
    return _record("embedding_lookup", out, (table,),
                   (ids, table.shape, table.data.dtype), _embedding_bwd)


def _softmax_bwd(g, saved, needs):
    (p,) = saved
    dot = (g * p).sum(axis=1, keepdims=True)
    return (p * (g - dot),)


def softmax_rows(x: Tensor, key_mask=None) -> Tensor:
    """Rowwise softmax; positions where ``key_mask`` is 0 get exactly 0."""
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"softmax_rows: expected rank-2 tensor, got {x.shape}")
    z = x.data
    if key_mask is not None:
        key_mask = np.asarray(key_mask)
        if key_mask.shape != (x.shape[1],):
            raise ShapeMismatchError(
                f"softmax_rows: mask {key_mask.shape} vs columns {x.shape[1]}"
            )
        if not key_mask.any():
            raise UnsupportedInputError("softmax_rows: mask excludes every position")
        z = np.where(key_mask > 0, z, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    p = e / e.sum(axis=1, keepdims=True)
    if not _should_record(x):
        return Tensor(p)
    return _record("softmax_rows", p, (x,), (p,), _softmax_bwd)


def _layer_norm_bwd(g, saved, needs):
    xhat, inv, gain_data = saved
    n = xhat.shape[1]
    dgain = (g * xhat).sum(axis=0, keepdims=True) if needs[1] else None
    dbias = g.sum(axis=0, keepdims=True) if needs[2] else None
    if needs[0]:
        dxhat = g * gain_data
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
    else:
        dx = None
    return dx, dgain, dbias


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Rowwise normalization to mean 0 / variance 1, then gain and bias."""
    if x.data.ndim != 2 or gain.shape != (1, x.shape[1]) or bias.shape != (1, x.shape[1]):
        raise ShapeMismatchError(
            f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    if not _should_record(x, gain, bias):
        return Tensor(out)
    return _record("layer_norm", out, (x, gain, bias), (xhat, inv, gain.data),
                   _layer_norm_bwd)


def _bucket_bounds(valid: int, l: int) -> list[tuple[int, int]]:
    return [(i * valid // l, (i + 1) * valid // l) for i in range(l)]


def _bucket_pool_avg_bwd(g, saved, needs):
    bounds, shape, dtype = saved
    gx = np.zeros(shape, dtype=dtype)
    for i, (lo, hi) in enumerate(bounds):
        gx[:, lo:hi] += (g[:, i] / (hi - lo))[:, None]
    return (gx,)


def _bucket_pool_max_bwd(g, saved, needs):
    argcols, shape, dtype = saved
    gx = np.zeros(shape, dtype=dtype)
    rows = np.arange(shape[0])
    for i in range(argcols.shape[1]):
        np.add.at(gx, (rows, argcols[:, i]), g[:, i])
    return (gx,)


def bucket_pool(x: Tensor, l: int, mode: str, valid: int) -> Tensor:
    """Compress the first ``valid`` columns into ``l`` contiguous buckets.

    Bucket i spans columns [floor(i*valid/l), floor((i+1)*valid/l)); output
    column i is the per-row average (AVG) or maximum (MAX) over the bucket.
    Columns at and beyond ``valid`` (padding) never contribute. MAX breaks
    ties toward the lowest column index.
    """
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"bucket_pool: expected rank-2 tensor, got {x.shape}")
    if mode not in ("AVG", "MAX"):
        raise UnsupportedInputError(f"bucket_pool: unknown mode {mode!r}")
    m, n = x.shape
    if not 1 <= l:
        raise UnsupportedInputError(f"bucket_pool: prompt length {l} must be >= 1")
    if valid > n or valid < 1:
        raise UnsupportedInputError(f"bucket_pool: valid={valid} outside 1..{n}")
    if valid < l:
        raise UnsupportedInputError(
            f"bucket_pool: only {valid} non-pad positions for prompt length {l}; "
            "shorten the prompt or lengthen the input"
        )
    bounds = _bucket_bounds(valid, l)
    out = np.empty((m, l), dtype=x.data.dtype)
    if mode == "AVG":
        for i, (lo, hi) in enumerate(bounds):
            out[:, i] = x.data[:, lo:hi].mean(axis=1)
        if not _should_record(x):
            return Tensor(out)
        return _record("bucket_pool_avg", out, (x,),
                       (tuple(bounds), x.shape, x.data.dtype), _bucket_pool_avg_bwd)
    argcols = np.empty((m, l), dtype=np.int64)
    for i, (lo, hi) in enumerate(bounds):
        seg = x.data[:, lo:hi]
        am = seg.argmax(axis=1)
        out[:, i] = seg[np.arange(m), am]
        argcols[:, i] = lo + am
    if not _should_record(x):
        return Tensor(out)
    return _record("bucket_pool_max", out, (x,),
                   (argcols, x.shape, x.data.dtype), _bucket_pool_max_bwd)


def _cross_entropy_bwd(g, saved, needs):
    p, cols, labels, full_shape, dtype = saved
    b = p.shape[0]
    dsub = p.copy()
    dsub[np.arange(b), labels] -= 1.0
    dsub *= g.reshape(()) / b
    if cols is None:
        return (dsub.astype(dtype, copy=False),)
    gz = np.zeros(full_shape, dtype=dtype)
    gz[:, cols] = dsub
    return (gz,)


def cross_entropy_with_restricted_vocab(logits: Tensor, labels, restrict=None) -> Tensor:
    """Mean negative log-likelihood (nats) over rows of ``logits``.

    ``restrict`` optionally names the logit columns to keep, in label
    order; ``labels`` index into the restricted columns. With no
    restriction the full row is the distribution.
    """
    if logits.data.ndim != 2:
        raise ShapeMismatchError(
            f"cross_entropy: expected rank-2 logits, got {logits.shape}"
        )
    labels = np.asarray(labels, dtype=np.int64)
    b, full_c = logits.shape
    if labels.shape != (b,):
        raise ShapeMismatchError(f"cross_entropy: {b} rows but labels {labels.shape}")
    cols = None
    if restrict is not None:
        cols = np.asarray(restrict, dtype=np.int64)
        if cols.size == 0:
            raise UnsupportedInputError("cross_entropy: empty vocabulary restriction")
        if cols.min() < 0 or cols.max() >= full_c:
            raise UnsupportedInputError("cross_entropy: restricted column out of range")
        sub = logits.data[:, cols]
    else:
        sub = logits.data
    if labels.size and (labels.min() < 0 or labels.max() >= sub.shape[1]):
        raise UnsupportedInputError("cross_entropy: label outside class range")
    zmax = sub.max(axis=1, keepdims=True)
    e = np.exp(sub - zmax)
    denom = e.sum(axis=1, keepdims=True)
    lse = zmax + np.log(denom)
    nll = lse[:, 0] - sub[np.arange(b), labels]
    out = np.asarray(nll.mean(), dtype=logits.data.dtype)
    if not _should_record(logits):
        return Tensor(out)
    p = e / denom
    return _record("cross_entropy", out, (logits,),
                   (p, cols, labels, logits.shape, logits.data.dtype),
                   _cross_entropy_bwd)
