import numpy as np
import pytest
from hypothesis import given, strategies as st

import lptlab.tensor as tt
from lptlab.tensor import (
    ContractViolationError,
    ShapeMismatchError,
    Tape,
    Tensor,
    UnsupportedInputError,
    add,
    bucket_pool,
    concat_cols,
    concat_rows,
    cross_entropy_with_restricted_vocab,
    detach,
    embedding_lookup,
    layer_norm,
    matmul,
    mul,
    precision,
    relu,
    reshape,
    scale,
    slice_cols,
    slice_rows,
    softmax_rows,
    sum_all,
    transpose,
)
from gradcheck import numeric_grad, rel_err

RNG = np.random.default_rng(7)


def leafy_loss(build):
    """Run build(watch) on a fresh tape, return (loss_value, grads_by_key)."""
    tape = Tape()
    leaves = {}

    def watch(name, arr):
        leaves[name] = tape.watch(arr)
        return leaves[name]

    with tape:
        loss = build(watch)
    tape.backward(loss.node_id)
    grads = {k: tape.grad_for(t) for k, t in leaves.items()}
    return loss.item(), grads


def check_grads(build, arrays, tol=1e-5):
    """Tape gradients for every named array match central differences."""
    with precision("double"):
        _, grads = leafy_loss(lambda watch: build({k: watch(k, v) for k, v in arrays.items()}))
        for name, arr in arrays.items():
            def f(name=name):
                consts = {k: Tensor(v) for k, v in arrays.items()}
                return build(consts).item()

            num = numeric_grad(f, arr)
            err = rel_err(grads[name], num)
            assert err <= tol, f"grad mismatch for {name}: rel err {err:.2e}"


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.allclose(matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_projection():
    a = Tensor([[1.0, 0.0], [0.0, 0.0]])
    b = Tensor([[5.0], [7.0]])
    assert np.allclose(matmul(a, b).data, [[5.0], [0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradcheck():
    arrays = {
        "a": RNG.normal(size=(3, 3)),
        "b": RNG.normal(size=(3, 3)),
    }
    check_grads(lambda t: sum_all(matmul(t["a"], t["b"])), arrays)


# ---------------------------------------------------------------------------
# relu
# ---------------------------------------------------------------------------

def test_relu_values():
    out = relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.allclose(out.data, [0.0, 0.0, 2.0])


def test_relu_gradient_mask():
    tape = Tape()
    with tape:
        x = tape.watch(np.array([-1.0, 2.0]))
        loss = sum_all(relu(x))
    tape.backward(loss.node_id)
    assert np.allclose(tape.grad_for(x), [0.0, 1.0])


def test_relu_gradcheck_away_from_zero():
    x = RNG.normal(size=(4, 3))
    x[np.abs(x) < 0.2] = 0.5  # keep clear of the kink
    check_grads(lambda t: sum_all(relu(t["x"])), {"x": x})


# ---------------------------------------------------------------------------
# bucket_pool
# ---------------------------------------------------------------------------

def test_bucket_pool_avg_example():
    x = Tensor([[1.0, 2.0, 3.0, 4.0]])
    out = bucket_pool(x, 2, "AVG", valid=4)
    assert np.allclose(out.data, [[1.5, 3.5]])


def test_bucket_pool_max_uneven_buckets():
    # valid=3, l=2: buckets [0,1) and [1,3)
    x = Tensor([[5.0, 1.0, 7.0]])
    out = bucket_pool(x, 2, "MAX", valid=3)
    assert np.allclose(out.data, [[5.0, 7.0]])


@pytest.mark.parametrize("mode", ["AVG", "MAX"])
def test_bucket_pool_identity_when_l_equals_valid(mode):
    x = Tensor(RNG.normal(size=(3, 6)))
    out = bucket_pool(x, 6, mode, valid=6)
    assert np.allclose(out.data, x.data)


@pytest.mark.parametrize("mode", ["AVG", "MAX"])
def test_bucket_pool_ignores_pad_columns(mode):
    base = RNG.normal(size=(2, 5))
    padded = np.concatenate([base, np.full((2, 3), 99.0)], axis=1)
    a = bucket_pool(Tensor(base), 2, mode, valid=5)
    b = bucket_pool(Tensor(padded), 2, mode, valid=5)
    assert np.allclose(a.data, b.data)


def test_bucket_pool_valid_shorter_than_prompt():
    with pytest.raises(UnsupportedInputError, match="shorten the prompt"):
        bucket_pool(Tensor(np.zeros((1, 4))), 3, "AVG", valid=2)


def test_bucket_pool_max_tie_breaks_to_lowest_index():
    tape = Tape()
    with tape:
        x = tape.watch(np.array([[2.0, 2.0, 1.0]]))
        loss = sum_all(bucket_pool(x, 1, "MAX", valid=3))
    tape.backward(loss.node_id)
    assert np.allclose(tape.grad_for(x), [[1.0, 0.0, 0.0]])


@pytest.mark.parametrize("mode,l,valid", [("AVG", 2, 5), ("AVG", 3, 7), ("MAX", 2, 5), ("MAX", 3, 7)])
def test_bucket_pool_gradcheck(mode, l, valid):
    x = RNG.normal(size=(3, 8)) * 3  # spread out: keeps MAX argmax stable under eps
    check_grads(lambda t: sum_all(bucket_pool(t["x"], l, mode, valid)), {"x": x})


@given(st.integers(1, 6), st.integers(1, 12))
def test_bucket_pool_buckets_partition_valid_prefix(l, valid):
    if valid < l:
        return
    bounds = tt._bucket_bounds(valid, l)
    assert bounds[0][0] == 0 and bounds[-1][1] == valid
    for (a0, a1), (b0, b1) in zip(bounds, bounds[1:]):
        assert a1 == b0 and a0 < a1
    assert bounds[-1][0] < bounds[-1][1]


# ---------------------------------------------------------------------------
# backward / detach / tape semantics
# ---------------------------------------------------------------------------

def test_detach_preserves_values():
    assert np.allclose(detach(Tensor([3.0, 4.0])).data, [3.0, 4.0])


def test_detach_blocks_gradient():
    tape = Tape()
    with tape:
        a = tape.watch(np.array([1.0, 2.0]))
        b = tape.watch(np.array([3.0, 4.0]))
        loss = sum_all(add(detach(a), b))
    grads = tape.backward(loss.node_id)
    assert np.allclose(tape.grad_for(b), [1.0, 1.0])
    assert tape.grad_for(a) is None
    assert a.node_id not in grads


def test_detached_product_gradient():
    tape = Tape()
    x_val = np.array([[2.0, 3.0]])
    with tape:
        x = tape.watch(x_val.copy())
        w = tape.watch(np.array([[5.0, 7.0]]))
        loss = sum_all(mul(detach(x), w))
    tape.backward(loss.node_id)
    assert np.allclose(tape.grad_for(w), x_val)
    assert tape.grad_for(x) is None


def test_detach_wall_blocks_ancestors():
    # nothing upstream of a detach may appear in the grad map
    tape = Tape()
    with tape:
        a = tape.watch(np.array([[1.0, 2.0]]))
        b = tape.watch(np.array([[3.0, 4.0]]))
        hidden = relu(mul(a, Tensor([[2.0, 2.0]])))
        loss = sum_all(mul(detach(hidden), b))
    grads = tape.backward(loss.node_id)
    assert b.node_id in grads
    assert a.node_id not in grads and hidden.node_id not in grads


def test_two_layer_composition_gradcheck():
    arrays = {
        "w1": RNG.normal(size=(4, 5)),
        "w2": RNG.normal(size=(5, 3)),
    }
    x = Tensor(RNG.normal(size=(2, 4)) + 1.0)

    def build(t):
        return sum_all(relu(matmul(relu(matmul(x, t["w1"])), t["w2"])))

    check_grads(build, arrays)


def test_backward_twice_identical():
    tape = Tape()
    with tape:
        w = tape.watch(RNG.normal(size=(3, 3)))
        loss = sum_all(relu(matmul(w, Tensor(RNG.normal(size=(3, 2))))))
    g1 = tape.backward(loss.node_id)[w.node_id].data.copy()
    g2 = tape.backward(loss.node_id)[w.node_id].data
    assert np.array_equal(g1, g2)


def test_backward_requires_scalar_loss():
    tape = Tape()
    with tape:
        w = tape.watch(np.ones((2, 2)))
        out = relu(w)
    with pytest.raises(ContractViolationError, match="scalar"):
        tape.backward(out.node_id)


def test_ops_outside_recording_are_constant():
    tape = Tape()
    with tape:
        w = tape.watch(np.ones((2, 2)))
        with tape.paused():
            frozen = matmul(w, w)
        assert frozen.node_id is None
        loss = sum_all(matmul(frozen, w))
    grads = tape.backward(loss.node_id)
    assert w.node_id in grads
    assert len(tape.nodes) == 3  # leaf, matmul, sum


def test_constant_inputs_produce_constant_outputs():
    tape = Tape()
    with tape:
        c = matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
    assert c.node_id is None
    assert len(tape.nodes) == 0


def test_grads_cover_recorded_ancestors_only():
    tape = Tape()
    with tape:
        a = tape.watch(np.ones((2, 2)))
        b = tape.watch(np.ones((2, 2)))
        mid = matmul(a, Tensor(np.ones((2, 2))))
        _unused = relu(b)
        loss = sum_all(mid)
    grads = tape.backward(loss.node_id)
    assert mid.node_id in grads and a.node_id in grads
    assert b.node_id not in grads


def test_nested_tapes_rejected():
    with Tape():
        with pytest.raises(ContractViolationError, match="nest"):
            with Tape():
                pass


# ---------------------------------------------------------------------------
# remaining elementwise / structural ops
# ---------------------------------------------------------------------------

def test_add_broadcast_row_and_col():
    x = RNG.normal(size=(3, 4))
    row = RNG.normal(size=(1, 4))
    col = RNG.normal(size=(3, 1))
    check_grads(lambda t: sum_all(mul(add(add(t["x"], t["row"]), t["col"]), t["x"])),
                {"x": x, "row": row, "col": col})


def test_add_shape_error():
    with pytest.raises(ShapeMismatchError):
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_scale_and_reshape_gradcheck():
    x = RNG.normal(size=(2, 6))
    w = Tensor(RNG.normal(size=(3, 4)))
    check_grads(lambda t: sum_all(mul(reshape(scale(t["x"], 2.5), (3, 4)), w)),
                {"x": x})


def test_transpose_gradcheck():
    x = RNG.normal(size=(2, 5))
    w = Tensor(RNG.normal(size=(2, 3)))
    check_grads(lambda t: sum_all(matmul(transpose(t["x"]), w)), {"x": x})


def test_concat_and_slice_gradcheck():
    arrays = {"a": RNG.normal(size=(2, 3)), "b": RNG.normal(size=(4, 3))}

    def build(t):
        cat = concat_rows([t["a"], t["b"]])
        left = slice_rows(cat, 1, 5)
        right = slice_cols(cat, 0, 2)
        return add(sum_all(mul(left, left)), sum_all(right))

    check_grads(build, arrays)


def test_concat_cols_gradcheck():
    arrays = {"a": RNG.normal(size=(3, 2)), "b": RNG.normal(size=(3, 4))}
    w = Tensor(RNG.normal(size=(6, 2)))
    check_grads(lambda t: sum_all(matmul(concat_cols([t["a"], t["b"]]), w)), arrays)


def test_embedding_lookup_gradient_scatters():
    tape = Tape()
    with tape:
        table = tape.watch(RNG.normal(size=(5, 3)))
        out = embedding_lookup(table, [1, 1, 4])
        loss = sum_all(out)
    tape.backward(loss.node_id)
    g = tape.grad_for(table)
    assert np.allclose(g[1], 2.0) and np.allclose(g[4], 1.0)
    assert np.allclose(g[[0, 2, 3]], 0.0)


def test_embedding_lookup_gradcheck():
    table = RNG.normal(size=(6, 4))
    w = Tensor(RNG.normal(size=(4, 4)))
    check_grads(lambda t: sum_all(mul(embedding_lookup(t["e"], [0, 2, 2, 5]), w)),
                {"e": table})


def test_softmax_rows_sum_to_one():
    p = softmax_rows(Tensor(RNG.normal(size=(5, 7)) * 4)).data
    assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-6


def test_softmax_mask_zeroes_excluded_positions():
    mask = np.array([1, 1, 0, 1, 0])
    p = softmax_rows(Tensor(RNG.normal(size=(3, 5))), key_mask=mask).data
    assert np.all(p[:, mask == 0] == 0.0)
    assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-6


def test_softmax_all_masked_rejected():
    with pytest.raises(UnsupportedInputError):
        softmax_rows(Tensor(np.zeros((2, 3))), key_mask=np.zeros(3))


def test_softmax_gradcheck_masked():
    x = RNG.normal(size=(3, 5))
    mask = np.array([1, 1, 0, 1, 1])
    w = Tensor(RNG.normal(size=(3, 5)))
    check_grads(lambda t: sum_all(mul(softmax_rows(t["x"], key_mask=mask), w)), {"x": x})


def test_layer_norm_statistics():
    x = Tensor(RNG.normal(size=(6, 16)) * 3 + 1)
    g = Tensor(np.ones((1, 16)))
    b = Tensor(np.zeros((1, 16)))
    out = layer_norm(x, g, b).data
    assert np.abs(out.mean(axis=1)).max() <= 1e-5
    assert np.abs(out.var(axis=1) - 1.0).max() <= 1e-4


def test_layer_norm_gradcheck():
    arrays = {
        "x": RNG.normal(size=(3, 6)),
        "g": RNG.normal(size=(1, 6)) + 1.0,
        "b": RNG.normal(size=(1, 6)),
    }
    w = Tensor(RNG.normal(size=(3, 6)))
    check_grads(lambda t: sum_all(mul(layer_norm(t["x"], t["g"], t["b"]), w)),
                {"x": arrays["x"], "g": arrays["g"], "b": arrays["b"]})


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((2, 4)))
    loss = cross_entropy_with_restricted_vocab(logits, [0, 3])
    assert abs(loss.item() - np.log(4)) <= 1e-6


def test_cross_entropy_restriction_matches_manual_subset():
    z = RNG.normal(size=(3, 10))
    restrict = [2, 7, 9]
    labels = [0, 2, 1]
    full = cross_entropy_with_restricted_vocab(Tensor(z[:, restrict]), labels).item()
    restricted = cross_entropy_with_restricted_vocab(Tensor(z), labels, restrict=restrict).item()
    assert abs(full - restricted) <= 1e-6


def test_cross_entropy_gradcheck_restricted():
    z = RNG.normal(size=(3, 8))
    check_grads(
        lambda t: cross_entropy_with_restricted_vocab(t["z"], [1, 0, 2], restrict=[1, 4, 6]),
        {"z": z},
    )


def test_cross_entropy_gradcheck_full():
    z = RNG.normal(size=(4, 5))
    check_grads(lambda t: cross_entropy_with_restricted_vocab(t["z"], [0, 1, 2, 3]), {"z": z})


def test_cross_entropy_empty_restriction():
    with pytest.raises(UnsupportedInputError):
        cross_entropy_with_restricted_vocab(Tensor(np.zeros((1, 3))), [0], restrict=[])


# ---------------------------------------------------------------------------
# precision switch
# ---------------------------------------------------------------------------

def test_precision_context_switches_dtype():
    assert Tensor([1.0]).data.dtype == np.float32
    with precision("double"):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_float32_gradcheck_loose_tolerance():
    # single precision: rel err <= 1e-3
    a32 = RNG.normal(size=(3, 3)).astype(np.float32)
    tape = Tape()
    with tape:
        a = tape.watch(a32)
        loss = sum_all(matmul(a, Tensor(a32.T)))
    tape.backward(loss.node_id)
    analytic = tape.grad_for(a)

    a64 = a32.astype(np.float64)

    def f():
        return float((a64 @ a32.T.astype(np.float64)).sum())

    num = numeric_grad(f, a64, eps=1e-4)
    assert rel_err(analytic, num) <= 1e-3
