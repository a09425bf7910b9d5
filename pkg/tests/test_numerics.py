import math

import numpy as np
import pytest

from mdsgnn.numerics import (
    ShapeError,
    SparseMatrix,
    Tape,
    Tensor,
    add,
    backward,
    bce_with_logits,
    concat_cols,
    cosine_similarity_matrix,
    dropout,
    elu,
    exp,
    grad_check,
    l2_normalize_rows,
    leaky_relu,
    load_arrays,
    log,
    log_softmax_rows,
    matmul,
    mean_cols,
    mul,
    pick,
    relu,
    row_sum,
    save_arrays,
    scale,
    segment_softmax,
    segment_sum,
    self_loop_normalize,
    sigmoid,
    softmax_rows,
    spmm,
    sub,
    sum_all,
    sym_normalize,
    take_rows,
    transpose,
)

STAR = SparseMatrix.from_edges(4, np.array([[0, 1], [0, 2], [0, 3]]))


def weighted(out: Tensor, seed: int = 0) -> Tensor:
    weights = Tensor(np.random.default_rng(seed).normal(size=out.shape))
    return sum_all(mul(out, weights))


def test_row_softmax_of_zeros():
    np.testing.assert_allclose(softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_matmul_identity(rng):
    x = Tensor(rng.normal(size=(3, 4)))

    np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), x).data, x.data)


def test_cosine_of_orthogonal_rows():
    similarity = cosine_similarity_matrix(Tensor([[1.0, 0.0], [0.0, 1.0]])).data

    np.testing.assert_allclose(similarity, np.eye(2))


def test_cosine_zero_row_scores_zero():
    similarity = cosine_similarity_matrix(Tensor([[0.0, 0.0], [1.0, 1.0]])).data

    np.testing.assert_array_equal(similarity[0], [0.0, 0.0])
    assert similarity[1, 1] == pytest.approx(1.0)


def test_tensor_is_two_dimensional():
    assert Tensor(3.0).shape == (1, 1)
    assert Tensor([1.0, 2.0]).shape == (1, 2)
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2, 2)))


def test_sum_gradient_is_ones():
    w = Tensor.parameter(np.arange(6.0).reshape(2, 3))

    with Tape() as tape:
        loss = sum_all(w)
    grads = tape.backward(loss, [w])

    np.testing.assert_array_equal(grads[w], np.ones((2, 3)))
    np.testing.assert_array_equal(w.grad, np.ones((2, 3)))


def test_relu_dead_region_has_zero_gradient():
    w = Tensor.parameter(-np.ones((2, 2)))

    with Tape():
        loss = sum_all(relu(w))
    grads = backward(loss, [w])

    np.testing.assert_array_equal(grads[w], np.zeros((2, 2)))


def test_untouched_parameter_gets_zero_gradient():
    used = Tensor.parameter(np.ones((1, 2)))
    unused = Tensor.parameter(np.ones((3, 1)))

    with Tape() as tape:
        loss = sum_all(used)
    grads = tape.backward(loss, [used, unused])

    np.testing.assert_array_equal(grads[unused], np.zeros((3, 1)))


def test_operations_outside_tape_are_untracked():
    w = Tensor.parameter(np.ones((2, 2)))

    loss = sum_all(w)

    assert not loss.requires_grad
    with pytest.raises(ShapeError, match="not produced"):
        backward(loss, [w])


def test_backward_needs_scalar():
    w = Tensor.parameter(np.ones((2, 2)))

    with Tape() as tape:
        out = scale(w, 2.0)
    with pytest.raises(ShapeError, match="scalar"):
        tape.backward(out, [w])


def test_add_broadcasts_second_operand_only():
    a = Tensor(np.zeros((3, 2)))
    row = Tensor([[1.0, 2.0]])

    np.testing.assert_array_equal(add(a, row).data, np.tile([1.0, 2.0], (3, 1)))
    with pytest.raises(ShapeError):
        add(row, a)


def test_linear_model_grad_check(rng):
    x = Tensor(rng.normal(size=(5, 3)))
    w = Tensor.parameter(rng.normal(size=(3, 2)), name="w")

    report = grad_check(lambda: weighted(matmul(x, w)), [w])

    assert report.max_error < 1e-8, report.worst
    assert report.coordinates == 6


def test_two_layer_mlp_grad_check(rng):
    x = Tensor(rng.normal(size=(6, 4)))
    w0 = Tensor.parameter(rng.normal(size=(4, 5)), name="w0")
    w1 = Tensor.parameter(rng.normal(size=(5, 3)), name="w1")
    labels = rng.integers(0, 3, size=6)

    def loss():
        probs = softmax_rows(matmul(relu(matmul(x, w0)), w1))
        return scale(sum_all(log(pick(probs, labels), floor=1e-12)), -1.0 / 6)

    assert grad_check(loss, [w0, w1]).max_error < 1e-4


UNARY = {
    "relu": relu,
    "leaky_relu": lambda t: leaky_relu(t, 0.2),
    "elu": elu,
    "sigmoid": sigmoid,
    "exp": exp,
    "softmax_rows": softmax_rows,
    "log_softmax_rows": log_softmax_rows,
    "mean_cols": mean_cols,
    "row_sum": row_sum,
    "transpose": transpose,
    "l2_normalize_rows": l2_normalize_rows,
    "cosine_self": cosine_similarity_matrix,
    "take_rows": lambda t: take_rows(t, np.array([2, 0, 2])),
    "pick": lambda t: pick(t, np.array([0, 3, 1, 2])),
    "segment_softmax": lambda t: segment_softmax(t, np.array([0, 0, 1, 1]), 2),
    "segment_sum": lambda t: segment_sum(t, np.array([1, 0, 1, 1]), 2),
    "bce": lambda t: bce_with_logits(t, np.eye(4)),
    "log": lambda t: log(exp(t), floor=1e-12),
    "spmm": lambda t: spmm(self_loop_normalize(STAR), t),
    "scale": lambda t: scale(t, -1.5),
}


@pytest.mark.parametrize("name", list(UNARY))
def test_primitive_gradients(name):
    rng = np.random.default_rng(7)
    # offsets keep the relu family away from its kink
    data = rng.normal(size=(4, 4))
    data += np.sign(data) * 0.05
    x = Tensor.parameter(data, name=name)

    report = grad_check(lambda: weighted(UNARY[name](x), seed=1), [x], rng=rng)

    assert report.max_error < 1e-4, report.worst


@pytest.mark.parametrize("op", [add, sub, mul, matmul])
def test_binary_gradients(op):
    rng = np.random.default_rng(11)
    a = Tensor.parameter(rng.normal(size=(3, 3)), name="a")
    b = Tensor.parameter(rng.normal(size=(3, 3)), name="b")

    assert grad_check(lambda: weighted(op(a, b)), [a, b]).max_error < 1e-4


@pytest.mark.parametrize("shape", [(1, 3), (4, 1)])
def test_broadcast_gradients(shape):
    rng = np.random.default_rng(5)
    a = Tensor.parameter(rng.normal(size=(4, 3)), name="a")
    b = Tensor.parameter(rng.normal(size=shape), name="b")

    assert grad_check(lambda: weighted(mul(add(a, b), b)), [a, b]).max_error < 1e-4


def test_concat_cols_gradient(rng):
    a = Tensor.parameter(rng.normal(size=(3, 2)), name="a")
    b = Tensor.parameter(rng.normal(size=(3, 1)), name="b")

    assert grad_check(lambda: weighted(concat_cols([a, b])), [a, b]).max_error < 1e-4


def test_cosine_between_views_gradient(rng):
    a = Tensor.parameter(rng.normal(size=(4, 3)), name="a")
    b = Tensor.parameter(rng.normal(size=(4, 3)), name="b")

    report = grad_check(lambda: weighted(cosine_similarity_matrix(a, b)), [a, b])

    assert report.max_error < 1e-4


def test_l2_normalize_zero_row_has_zero_gradient():
    x = Tensor.parameter(np.array([[0.0, 0.0], [3.0, 4.0]]))

    with Tape() as tape:
        loss = weighted(l2_normalize_rows(x))
    grads = tape.backward(loss, [x])

    np.testing.assert_array_equal(grads[x][0], [0.0, 0.0])
    np.testing.assert_allclose(l2_normalize_rows(x).data[1], [0.6, 0.8])


def test_leaky_relu_gradient_at_zero_is_zero():
    x = Tensor.parameter(np.zeros((1, 2)))

    with Tape() as tape:
        loss = sum_all(leaky_relu(x, 0.2))

    np.testing.assert_array_equal(tape.backward(loss, [x])[x], [[0.0, 0.0]])


def test_dropout_identity_when_not_training(rng):
    x = Tensor(rng.normal(size=(3, 3)))

    assert dropout(x, 0.5, rng, train=False) is x
    assert dropout(x, 0.0, rng, train=True) is x


def test_dropout_keeps_expectation():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones((200, 200)))

    out = dropout(x, 0.3, rng, train=True).data

    assert set(np.unique(out)) <= {0.0, 1.0 / 0.7}
    assert out.mean() == pytest.approx(1.0, abs=0.02)


def test_bce_of_zero_logits():
    value = sum_all(bce_with_logits(Tensor([[0.0, 0.0]]), np.array([[1.0, 0.0]]))).item()

    assert value == pytest.approx(2 * math.log(2), abs=1e-12)


def test_sym_normalize_single_edge():
    normalized = sym_normalize(SparseMatrix.from_edges(2, np.array([[0, 1]])))

    np.testing.assert_array_equal(normalized.to_dense(), [[0.0, 1.0], [1.0, 0.0]])


def test_sym_normalize_regular_graph():
    ring = SparseMatrix.from_edges(5, np.array([[i, (i + 1) % 5] for i in range(5)]))

    dense = sym_normalize(ring).to_dense()

    np.testing.assert_allclose(dense[dense > 0], 0.5)
    np.testing.assert_allclose(dense.sum(axis=1), 1.0)


def test_sym_normalize_star():
    dense = sym_normalize(STAR).to_dense()

    np.testing.assert_allclose(dense[0, 1:], 1 / math.sqrt(3))
    np.testing.assert_array_equal(dense, dense.T)


def test_sym_normalize_isolated_node_stays_zero():
    dense = sym_normalize(SparseMatrix.from_edges(3, np.array([[0, 1]]))).to_dense()

    np.testing.assert_array_equal(dense[2], np.zeros(3))


def test_symmetric_flag_is_checked():
    with pytest.raises(ValueError, match="not symmetric"):
        SparseMatrix.from_dense(np.array([[0.0, 1.0], [0.0, 0.0]]), symmetric=True)


def test_self_loops_and_edge_index():
    looped = STAR.with_self_loops()
    targets, sources = looped.edge_index()

    assert looped.nnz == STAR.nnz + 4
    assert set(zip(targets.tolist(), sources.tolist())) >= {(i, i) for i in range(4)}
    np.testing.assert_array_equal(STAR.degrees(), [3, 1, 1, 1])


def test_array_file_round_trip(tmp_path, rng):
    arrays = {
        "w": rng.normal(size=(3, 2)),
        "vector": rng.normal(size=4),
        "ünïcode": np.ones((1, 1)),
    }

    save_arrays(tmp_path / "params.bin", arrays)
    loaded = load_arrays(tmp_path / "params.bin")

    assert list(loaded) == list(arrays)
    for name, array in arrays.items():
        np.testing.assert_array_equal(loaded[name], array)


def test_array_file_layout(tmp_path):
    save_arrays(tmp_path / "one.bin", {"a": np.array([[1.5]])})

    payload = (tmp_path / "one.bin").read_bytes()

    assert payload[:4] == (1).to_bytes(4, "little")
    assert payload[4:5] == b"a"
    assert payload[5:9] == (2).to_bytes(4, "little")
    assert len(payload) == 4 + 1 + 4 + 2 * 8 + 8


def test_truncated_array_file(tmp_path):
    save_arrays(tmp_path / "one.bin", {"a": np.ones((2, 2))})
    path = tmp_path / "one.bin"
    path.write_bytes(path.read_bytes()[:-3])

    with pytest.raises(ValueError, match="truncated"):
        load_arrays(path)
