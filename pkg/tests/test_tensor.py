"""Tensor engine: forward semantics and gradients against finite differences."""

import numpy as np
import pytest

import escaip.tensor as T
from escaip.errors import ContractError, ShapeError
from escaip.tensor import ComputationTape, Tensor


def fd_gradient(f, x, h=1e-6):
    """Central finite differences of scalar f with respect to array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_grads(build, tensors, rel_tol=1e-4, h=1e-6):
    """Compare tape gradients of sum(build(...)) against finite differences."""
    with ComputationTape() as tape:
        out = build()
        loss = T.reduce_sum(out) if out.size > 1 else out
        tape.backward(loss)
    for t in tensors:
        def f(t=t):
            val = build()
            return float(val.data.sum())

        ref = fd_gradient(f, t.data, h=h)
        got = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = np.maximum(np.abs(ref), 1e-6)
        assert np.max(np.abs(got - ref) / denom) < rel_tol, (got, ref)


def t64(data, requires_grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# matmul

def test_matmul_identity():
    x = t64(np.arange(12.0).reshape(3, 4))
    out = T.matmul(t64(np.eye(3)), x)
    np.testing.assert_array_equal(out.data, x.data)


def test_matmul_hand_arithmetic():
    out = T.matmul(t64([[1.0, 2.0], [3.0, 4.0]]), t64([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_matmul_gradient_random(rng):
    a = t64(rng.normal(size=(5, 4)))
    b = t64(rng.normal(size=(4, 6)))
    check_grads(lambda: T.matmul(a, b), [a, b], rel_tol=1e-5)


def test_matmul_batched_gradient(rng):
    a = t64(rng.normal(size=(3, 2, 4)))
    b = t64(rng.normal(size=(3, 4, 5)))
    check_grads(lambda: T.matmul(a, b), [a, b], rel_tol=1e-5)


def test_affine_matches_matmul_plus_bias(rng):
    x = t64(rng.normal(size=(4, 3, 5)))
    w = t64(rng.normal(size=(5, 2)))
    b = t64(rng.normal(size=(2,)))
    out = T.affine(x, w, b)
    ref = np.matmul(x.data, w.data) + b.data
    np.testing.assert_allclose(out.data, ref, atol=1e-14)
    check_grads(lambda: T.affine(x, w, b), [x, w, b], rel_tol=1e-5)


# ---------------------------------------------------------------------------
# masked softmax

def test_masked_softmax_uniform():
    logits = t64([[1.0, 1.0, 1.0, 1.0]])
    out = T.masked_softmax(logits, np.ones((1, 4), dtype=bool), axis=-1)
    np.testing.assert_allclose(out.data, [[0.25, 0.25, 0.25, 0.25]], atol=1e-15)


def test_masked_softmax_single_survivor():
    logits = t64([[0.0, 0.0]])
    out = T.masked_softmax(logits, np.array([[True, False]]), axis=-1)
    np.testing.assert_array_equal(out.data, [[1.0, 0.0]])


def test_masked_softmax_matches_neg_inf_oracle(rng):
    logits = rng.normal(size=8)
    mask = np.ones(8, dtype=bool)
    mask[[1, 4, 6]] = False
    out = T.masked_softmax(t64(logits), mask, axis=-1).data
    z = np.where(mask, logits, -np.inf)
    e = np.exp(z - z[mask].max())
    oracle = e / e.sum()
    assert np.abs(out - oracle).max() <= 1e-7


def test_masked_softmax_all_masked_row_is_zero():
    logits = t64([[3.0, -2.0], [1.0, 1.0]])
    mask = np.array([[False, False], [True, True]])
    out = T.masked_softmax(logits, mask, axis=-1)
    np.testing.assert_array_equal(out.data[0], [0.0, 0.0])
    np.testing.assert_allclose(out.data[1], [0.5, 0.5], atol=1e-15)


def test_masked_softmax_ignores_masked_logits(rng):
    base = rng.normal(size=(3, 6))
    mask = rng.random((3, 6)) > 0.4
    mask[:, 0] = True
    out1 = T.masked_softmax(t64(base), mask, axis=-1).data
    poisoned = base.copy()
    poisoned[~mask] = rng.normal(size=(~mask).sum()) * 1e6
    out2 = T.masked_softmax(t64(poisoned), mask, axis=-1).data
    np.testing.assert_array_equal(out1, out2)


def test_masked_softmax_gradient(rng):
    logits = t64(rng.normal(size=(2, 5)))
    mask = np.array([[True, True, False, True, True],
                     [True, False, True, True, False]])
    w = t64(rng.normal(size=(2, 5)), requires_grad=False)
    check_grads(lambda: T.mul(T.masked_softmax(logits, mask, axis=-1), w), [logits],
                rel_tol=1e-5)


# ---------------------------------------------------------------------------
# layer norm

def test_layer_norm_constant_row_is_zero():
    x = t64([[3.0, 3.0, 3.0, 3.0]])
    out = T.layer_norm(x, t64(np.ones(4)), t64(np.zeros(4)))
    np.testing.assert_allclose(out.data, np.zeros((1, 4)), atol=1e-12)


def test_layer_norm_already_normalized_row():
    x = t64([[1.0, -1.0]])
    out = T.layer_norm(x, t64(np.ones(2)), t64(np.zeros(2)))
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-4)


def test_layer_norm_moments(rng):
    x = t64(rng.normal(2.0, 3.0, size=(6, 64)))
    out = T.layer_norm(x, t64(np.ones(64)), t64(np.zeros(64))).data
    assert np.abs(out.mean(axis=-1)).max() <= 1e-6
    assert np.abs(out.var(axis=-1) - 1.0).max() <= 1e-3


def test_layer_norm_gradient(rng):
    x = t64(rng.normal(size=(3, 7)))
    g = t64(rng.normal(size=(7,)))
    b = t64(rng.normal(size=(7,)))
    w = t64(rng.normal(size=(3, 7)), requires_grad=False)
    check_grads(lambda: T.mul(T.layer_norm(x, g, b), w), [x, g, b], rel_tol=1e-4)


# ---------------------------------------------------------------------------
# backward contract

def test_backward_of_sum_is_ones(rng):
    p = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    with ComputationTape() as tape:
        loss = T.reduce_sum(p)
        grads = tape.backward(loss, {"p": p})
    np.testing.assert_array_equal(grads["p"], np.ones((3, 4)))


def test_backward_of_half_square_is_identity(rng):
    p = Tensor(rng.normal(size=(5,)), requires_grad=True, dtype=np.float64)
    with ComputationTape() as tape:
        loss = T.reduce_sum(T.mul(p, p)) * 0.5
        grads = tape.backward(loss, {"p": p})
    np.testing.assert_allclose(grads["p"], p.data, atol=1e-12)


def test_backward_requires_scalar_loss(rng):
    p = Tensor(rng.normal(size=(3,)), requires_grad=True, dtype=np.float64)
    with ComputationTape() as tape:
        out = T.mul(p, p)
        with pytest.raises(ContractError):
            tape.backward(out)


def test_params_off_tape_get_zero_gradient(rng):
    p = Tensor(rng.normal(size=(3,)), requires_grad=True, dtype=np.float64)
    q = Tensor(rng.normal(size=(2,)), requires_grad=True, dtype=np.float64)
    with ComputationTape() as tape:
        loss = T.reduce_sum(p)
        grads = tape.backward(loss, {"p": p, "q": q})
    np.testing.assert_array_equal(grads["q"], np.zeros(2))


def test_shared_parameter_gradients_sum(rng):
    p = Tensor(rng.normal(size=(4,)), requires_grad=True, dtype=np.float64)
    with ComputationTape() as tape:
        loss = T.reduce_sum(T.add(T.mul(p, p), p))  # p used three times
        grads = tape.backward(loss, {"p": p})
    np.testing.assert_allclose(grads["p"], 2 * p.data + 1.0, atol=1e-12)


def test_tape_replay_is_bit_identical(rng):
    p = Tensor(rng.normal(size=(6, 6)), requires_grad=True, dtype=np.float64)
    q = Tensor(rng.normal(size=(6, 6)), requires_grad=True, dtype=np.float64)
    with ComputationTape() as tape:
        loss = T.reduce_sum(T.silu(T.matmul(p, q)))
        g1 = tape.backward(loss, {"p": p, "q": q})
        g2 = tape.backward(loss, {"p": p, "q": q})
    assert np.array_equal(g1["p"], g2["p"])
    assert np.array_equal(g1["q"], g2["q"])


def test_backward_without_tape_raises():
    with pytest.raises(ContractError):
        T.backward(Tensor(np.zeros(()), dtype=np.float64))


def test_nested_tapes_rejected():
    with ComputationTape():
        with pytest.raises(ContractError):
            with ComputationTape():
                pass


# ---------------------------------------------------------------------------
# remaining primitives: value spot checks + finite-difference gradients

def test_elementwise_add_mul_values(rng):
    a, b = t64([1.0, 2.0]), t64([3.0, 4.0])
    np.testing.assert_array_equal(T.add(a, b).data, [4.0, 6.0])
    np.testing.assert_array_equal(T.mul(a, b).data, [3.0, 8.0])


def test_silu_known_values():
    x = t64([0.0, 100.0])
    out = T.silu(x).data
    assert out[0] == 0.0
    np.testing.assert_allclose(out[1], 100.0, rtol=1e-12)


def test_gather_rows_values(rng):
    table = t64(rng.normal(size=(5, 3)))
    idx = np.array([[0, 4], [2, 2]])
    out = T.gather_rows(table, idx)
    assert out.shape == (2, 2, 3)
    np.testing.assert_array_equal(out.data[1, 0], table.data[2])


def test_gather_rows_rejects_bad_index():
    table = t64(np.ones((3, 2)))
    with pytest.raises(ShapeError):
        T.gather_rows(table, np.array([3]))
    with pytest.raises(ShapeError):
        T.gather_rows(table, np.array([0.5]))


def test_masked_sum_zeroes_invalid_slots(rng):
    x = t64(rng.normal(size=(2, 3, 4)))
    mask = np.array([[1.0, 0.0, 1.0], [0.0, 0.0, 0.0]])[..., None]
    out = T.masked_sum(x, mask, axis=1)
    np.testing.assert_allclose(out.data[0], x.data[0, 0] + x.data[0, 2], atol=1e-14)
    np.testing.assert_array_equal(out.data[1], np.zeros(4))


def test_broadcast_to_values(rng):
    x = t64(rng.normal(size=(3, 1, 2)))
    out = T.broadcast_to(x, (3, 4, 2))
    assert out.shape == (3, 4, 2)
    np.testing.assert_array_equal(out.data[:, 2], x.data[:, 0])
    with pytest.raises(ShapeError):
        T.broadcast_to(x, (2, 4, 2))


def test_concat_values(rng):
    a, b = t64(rng.normal(size=(2, 3))), t64(rng.normal(size=(2, 2)))
    out = T.concat([a, b], axis=-1)
    assert out.shape == (2, 5)
    np.testing.assert_array_equal(out.data[:, 3:], b.data)


@pytest.mark.parametrize("name,builder", [
    ("add", lambda rng: (lambda a, b: T.add(a, b),
                         [rng.normal(size=(3, 4)), rng.normal(size=(4,))])),
    ("sub", lambda rng: (lambda a, b: T.sub(a, b),
                         [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))])),
    ("mul", lambda rng: (lambda a, b: T.mul(a, b),
                         [rng.normal(size=(2, 5)), rng.normal(size=(5,))])),
    ("div", lambda rng: (lambda a, b: T.div(a, b),
                         [rng.normal(size=(4,)), rng.normal(size=(4,)) + 3.0])),
    ("silu", lambda rng: (lambda a: T.silu(a), [rng.normal(size=(6,))])),
    ("absolute", lambda rng: (lambda a: T.absolute(a),
                              [rng.normal(size=(8,)) + 0.5])),
    ("smooth_l1", lambda rng: (lambda a: T.smooth_l1(a, beta=0.7),
                               [rng.normal(size=(9,)) * 2])),
    ("sqrt", lambda rng: (lambda a: T.sqrt(a), [rng.random(7) + 0.5])),
    ("maximum", lambda rng: (lambda a: T.maximum(a, 0.3),
                             [rng.normal(size=(8,)) + 2.0])),
    ("reduce_sum", lambda rng: (lambda a: T.reduce_sum(a, axis=1),
                                [rng.normal(size=(3, 4, 2))])),
    ("mean", lambda rng: (lambda a: T.mean(a, axis=-1), [rng.normal(size=(3, 5))])),
    ("reshape", lambda rng: (lambda a: T.reshape(a, (6, 2)),
                             [rng.normal(size=(3, 4))])),
    ("swapaxes", lambda rng: (lambda a: T.swapaxes(a, 0, 2),
                              [rng.normal(size=(2, 3, 4))])),
    ("broadcast_to", lambda rng: (lambda a: T.broadcast_to(a, (5, 3, 2)),
                                  [rng.normal(size=(1, 3, 2))])),
    ("neg", lambda rng: (lambda a: T.neg(a), [rng.normal(size=(4,))])),
])
def test_primitive_gradients(name, builder, rng):
    op, arrays = builder(rng)
    tensors = [t64(a) for a in arrays]
    check_grads(lambda: op(*tensors), tensors)


def test_gather_and_concat_gradients(rng):
    table = t64(rng.normal(size=(6, 3)))
    idx = np.array([[0, 5, 2], [2, 2, 1]])
    w = t64(rng.normal(size=(2, 3, 3)), requires_grad=False)
    check_grads(lambda: T.mul(T.gather_rows(table, idx), w), [table])
    a, b = t64(rng.normal(size=(2, 3))), t64(rng.normal(size=(2, 4)))
    check_grads(lambda: T.concat([a, b], axis=1), [a, b])


def test_masked_sum_gradient(rng):
    x = t64(rng.normal(size=(3, 4, 2)))
    mask = (rng.random((3, 4, 1)) > 0.3).astype(float)
    check_grads(lambda: T.masked_sum(x, mask, axis=1), [x])


def test_mixed_dtype_rejected():
    a = Tensor(np.ones(3, dtype=np.float32))
    b = Tensor(np.ones(3, dtype=np.float64))
    with pytest.raises(ShapeError):
        T.add(a, b)


def test_tensor_invariants(rng):
    t = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    assert t.data.flags["C_CONTIGUOUS"]
    assert t.size == int(np.prod(t.shape))
    assert t.grad is None


def test_alloc_watermark_moves():
    T.reset_alloc_peak()
    before = T.alloc_peak_bytes()
    keep = Tensor(np.zeros((256, 256), dtype=np.float64))
    assert T.alloc_peak_bytes() >= before + keep.data.nbytes
