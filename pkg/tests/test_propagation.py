import numpy as np
import pytest

from mdsgnn.numerics import SparseMatrix, Tensor, sym_normalize
from mdsgnn.propagation import AugmentedGraph, knn_graph, ppr_propagate


def augmented(pairs, n) -> AugmentedGraph:
    adjacency = SparseMatrix.from_edges(n, np.array(pairs))
    return AugmentedGraph(knn_adjacency=adjacency, normalized=sym_normalize(adjacency), k=1)


def test_identical_rows_give_complete_graph():
    aug = knn_graph(np.ones((5, 3)), k=2)

    expected = np.ones((5, 5)) - np.eye(5)
    np.testing.assert_array_equal(aug.knn_adjacency.to_dense(), expected)


def test_paired_unit_vectors():
    x = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])

    aug = knn_graph(Tensor(x), k=1)

    assert {tuple(pair) for pair in aug.edge_pairs().tolist()} == {(0, 1), (2, 3)}


def test_k_must_be_below_n():
    with pytest.raises(ValueError, match="k should be in"):
        knn_graph(np.eye(3), k=3)


def test_structural_invariants_over_random_inputs():
    rng = np.random.default_rng(0)
    for trial in range(200):
        n = int(rng.integers(3, 200))
        k = int(rng.integers(1, min(n, 12)))
        x = rng.normal(size=(n, int(rng.integers(1, 8))))
        if trial % 4 == 0:
            x = np.round(x)

        dense = knn_graph(x, k).knn_adjacency.to_dense()
        scaled = knn_graph(x * rng.uniform(0.1, 10.0, size=(n, 1)), k).knn_adjacency.to_dense()

        np.testing.assert_array_equal(dense, dense.T, err_msg=f"trial {trial}")
        assert not dense.diagonal().any(), trial
        assert dense.sum(axis=1).min() >= k, trial
        np.testing.assert_array_equal(dense, scaled, err_msg=f"trial {trial}")


def test_zero_rows_score_zero():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.1], [-1.0, 0.0]])

    dense = knn_graph(x, k=1).knn_adjacency.to_dense()

    assert dense[1, 2] == 1.0
    assert dense.sum(axis=1).min() >= 1


def test_normalized_form_matches_adjacency():
    aug = knn_graph(np.random.default_rng(4).normal(size=(20, 5)), k=3)

    np.testing.assert_array_equal(
        aug.normalized.to_dense(), sym_normalize(aug.knn_adjacency).to_dense()
    )
    assert aug.n == 20
    assert aug.k == 3


def test_ppr_hand_iteration():
    aug = augmented([[0, 1]], 2)
    x = np.array([[1.0], [0.0]])

    np.testing.assert_allclose(ppr_propagate(aug, x, 0.5, 1), [[0.5], [0.5]], atol=1e-12)
    np.testing.assert_allclose(ppr_propagate(aug, x, 0.5, 2), [[0.75], [0.25]], atol=1e-12)


@pytest.mark.parametrize("steps", [1, 3, 10])
def test_full_teleport_returns_input(steps):
    x = np.random.default_rng(1).normal(size=(6, 3))
    aug = knn_graph(x, k=2)

    np.testing.assert_array_equal(ppr_propagate(aug, x, 1.0, steps), x)


def test_constant_column_is_fixed_on_regular_graph():
    ring = augmented([[i, (i + 1) % 6] for i in range(6)], 6)
    x = np.full((6, 1), 2.5)

    np.testing.assert_allclose(ppr_propagate(ring, x, 0.1, 7), x, atol=1e-12)


@pytest.mark.parametrize("alpha, steps", [(0.0, 1), (1.5, 1), (0.5, 0)])
def test_ppr_rejects_bad_arguments(alpha, steps):
    with pytest.raises(ValueError):
        ppr_propagate(augmented([[0, 1]], 2), np.ones((2, 1)), alpha, steps)


def test_ppr_result_is_plain_array():
    out = ppr_propagate(augmented([[0, 1]], 2), Tensor.parameter(np.ones((2, 1))), 0.5, 2)

    assert isinstance(out, np.ndarray)


@pytest.mark.parametrize("alpha", [0.01, 0.2, 0.7])
def test_successive_iterates_contract(alpha):
    rng = np.random.default_rng(11)
    for trial in range(20):
        n = int(rng.integers(4, 40))
        pairs = rng.integers(0, n, size=(2 * n, 2))
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        aug = augmented(pairs, n)
        x = rng.normal(size=(n, 3))

        iterates = [x] + [ppr_propagate(aug, x, alpha, steps) for steps in range(1, 12)]
        gaps = [np.linalg.norm(b - a) for a, b in zip(iterates, iterates[1:])]

        for before, after in zip(gaps, gaps[1:]):
            assert after <= (1 - alpha) * before + 1e-12, (trial, gaps)
