"""Attention scoring, top-k selection, and graph coarsening."""

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import assert_grad_matches
from hcl import l2pool
from hcl.tensor import Tape, Tensor, sum_all


def make_layer(tape, d_model=4, heads=2, ratio=0.5, seed=0, gcnii_layers=2):
    return l2pool.L2PoolLayer(tape, np.random.default_rng(seed), d_model, heads,
                              ratio, gcnii_layers=gcnii_layers)


def path_adj(n):
    return sp.diags([np.ones(n - 1), np.ones(n - 1)], [1, -1], format="csr")


class TestAttend:
    def test_single_node_reduces_to_value_projection(self):
        tape = Tape()
        layer = make_layer(tape)
        h = Tensor(np.random.default_rng(1).standard_normal((1, 4)))
        prop = Tensor([[1.0]])
        out = l2pool.attend(layer, h, prop)
        values = np.concatenate(
            [head.value.forward(prop, h).data for head in layer.attention_heads],
            axis=1)
        np.testing.assert_allclose(out.data,
                                   values @ layer.output_projection.data, atol=1e-12)

    def test_attention_rows_sum_to_one_per_head(self):
        import math

        from hcl.tensor import matmul, scale, softmax_rows, transpose
        tape = Tape()
        layer = make_layer(tape, seed=3)
        rng = np.random.default_rng(2)
        h = Tensor(rng.standard_normal((6, 4)))
        for head in layer.attention_heads:
            q = matmul(h, head.wq)
            k = matmul(h, head.wk)
            att = softmax_rows(scale(matmul(q, transpose(k)),
                                     1.0 / math.sqrt(layer.d_head)))
            np.testing.assert_allclose(att.data.sum(axis=1), 1.0, atol=1e-9)

    def test_three_node_path_matches_direct_calculation(self):
        tape = Tape()
        layer = l2pool.L2PoolLayer(tape, np.random.default_rng(4), d_model=2,
                                   heads=1, ratio=0.5, gcnii_layers=1)
        rng = np.random.default_rng(5)
        h = rng.standard_normal((3, 2))
        prop = rng.random((3, 3))
        out = l2pool.attend(layer, Tensor(h), Tensor(prop))

        head = layer.attention_heads[0]
        q = h @ head.wq.data
        k = h @ head.wk.data
        logits = (q @ k.T) / np.sqrt(2.0)
        weights = np.exp(logits - logits.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        stack = head.value
        h0 = h @ stack.input_projection.data
        v = h0
        for l, (w, slope, beta) in enumerate(stack.layers, start=1):
            support = (1 - stack.alpha) * (prop @ v) + stack.alpha * h0
            mixed = (1 - beta) * support + beta * (support @ w.data)
            v = np.where(mixed > 0, mixed, slope.data[0, 0] * mixed)
        expected = (weights @ v) @ layer.output_projection.data
        np.testing.assert_allclose(out.data, expected, atol=1e-10)

    def test_rejects_indivisible_heads(self):
        tape = Tape()
        with pytest.raises(ValueError, match="divisible"):
            make_layer(tape, d_model=5, heads=2)


class TestScore:
    def test_zero_score_vector_gives_zero_scores(self):
        tape = Tape()
        layer = make_layer(tape)
        layer.score_vector.data[:] = 0.0
        h = Tensor(np.random.default_rng(0).standard_normal((5, 4)))
        y = l2pool.score(layer, h, Tensor(np.eye(5)))
        np.testing.assert_array_equal(y.data, np.zeros((5, 1)))

    def test_scores_bounded_by_tanh(self):
        tape = Tape()
        layer = make_layer(tape, seed=6)
        h = Tensor(np.random.default_rng(7).uniform(-3, 3, (8, 4)))
        y = l2pool.score(layer, h, Tensor(np.eye(8)))
        assert np.all(np.abs(y.data) < 1.0)
        # saturating inputs may round onto the bound but never beyond it
        big = Tensor(np.random.default_rng(8).uniform(-50, 50, (8, 4)))
        assert np.all(np.abs(l2pool.score(layer, big, Tensor(np.eye(8))).data) <= 1.0)

    def test_score_vector_gradient_vs_fd(self):
        rng = np.random.default_rng(8)
        tape = Tape()
        layer = make_layer(tape, seed=8, gcnii_layers=1)
        h = Tensor(rng.standard_normal((4, 4)))
        prop = Tensor(rng.random((4, 4)))
        assert_grad_matches(lambda: sum_all(l2pool.score(layer, h, prop)),
                            [layer.score_vector])


class TestTopK:
    def test_direct_ordering(self):
        # two-thirds of three nodes keeps the top two
        np.testing.assert_array_equal(
            l2pool.top_k_select(np.array([0.9, 0.1, 0.5]), 2 / 3), [0, 2])

    def test_ratio_one_keeps_everything(self):
        np.testing.assert_array_equal(
            l2pool.top_k_select(np.array([3.0, 1.0, 2.0]), 1.0), [0, 1, 2])

    def test_ties_break_toward_smaller_index(self):
        np.testing.assert_array_equal(
            l2pool.top_k_select(np.array([1.0, 1.0, 1.0, 1.0]), 0.5), [0, 1])

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(9)
        for trial in range(50):
            scores = rng.standard_normal(100)
            ratio = rng.uniform(0.05, 1.0)
            got = l2pool.top_k_select(scores, ratio)
            k = len(got)
            oracle = set(np.argsort(-scores)[:k].tolist())
            assert set(got.tolist()) == oracle
            assert np.all(np.diff(got) > 0)

    def test_retention_count_float_robust(self):
        assert l2pool.retention_count(1000, 0.9) == 900
        assert l2pool.retention_count(900, 0.8) == 720
        assert l2pool.retention_count(720, 0.7) == 504
        assert l2pool.retention_count(9, 0.8) == 8  # ceil(7.2)
        assert l2pool.retention_count(3, 0.1) == 1  # floor of 1 node

    def test_empty_scores_rejected(self):
        with pytest.raises(ValueError):
            l2pool.top_k_select(np.array([]), 0.5)


class TestCoarsen:
    def test_ratio_one_zero_scores_is_identity_pool(self):
        tape = Tape()
        layer = make_layer(tape, ratio=1.0)
        layer.score_vector.data[:] = 0.0
        rng = np.random.default_rng(10)
        feats = rng.standard_normal((6, 4))
        adj = path_adj(6)
        prop = Tensor(np.eye(6))
        result = l2pool.coarsen(layer, Tensor(feats), prop, adj)
        np.testing.assert_array_equal(result.selected, np.arange(6))
        np.testing.assert_allclose(result.child_features.data, feats, atol=1e-15)

    def test_four_cycle_induced_edges(self):
        adj = sp.csr_matrix(np.array([
            [0, 1, 0, 1],
            [1, 0, 1, 0],
            [0, 1, 0, 1],
            [1, 0, 1, 0]], dtype=float))
        adjacent = l2pool.induced_subgraph(adj, np.array([0, 1]))
        assert adjacent.nnz == 2  # one undirected edge
        opposite = l2pool.induced_subgraph(adj, np.array([0, 2]))
        assert opposite.nnz == 0

    def test_schedule_sizes_cascade(self):
        n = 1000
        sizes = [n]
        for ratio in (0.9, 0.8, 0.7):
            sizes.append(l2pool.retention_count(sizes[-1], ratio))
        assert sizes == [1000, 900, 720, 504]

    def test_child_graph_invariants_on_random_graphs(self):
        rng = np.random.default_rng(11)
        for trial in range(20):
            n = int(rng.integers(6, 20))
            upper = np.triu(rng.random((n, n)) < 0.4, k=1)
            adj = sp.csr_matrix((upper | upper.T).astype(float))
            tape = Tape()
            layer = make_layer(tape, ratio=float(rng.uniform(0.3, 1.0)),
                               seed=trial)
            feats = Tensor(rng.standard_normal((n, 4)))
            prop = Tensor(np.asarray(
                (adj + sp.identity(n)).todense() / (n + 1.0)))
            result = l2pool.coarsen(layer, feats, prop, adj)
            child = result.child_adj
            assert (child != child.T).nnz == 0
            expected = adj.toarray()[np.ix_(result.selected, result.selected)]
            np.testing.assert_array_equal(child.toarray(), expected)
            assert len(result.selected) == l2pool.retention_count(n, layer.ratio)

    def test_gradient_reaches_score_vector_through_gate(self):
        rng = np.random.default_rng(12)
        tape = Tape()
        layer = make_layer(tape, ratio=0.5, seed=13, gcnii_layers=1)
        feats = Tensor(rng.standard_normal((6, 4)))
        adj = path_adj(6)
        prop = Tensor(np.eye(6))

        def forward():
            result = l2pool.coarsen(layer, feats, prop, adj)
            return sum_all(result.child_features)

        loss = forward()
        tape.zero_grad()
        tape.backward(loss)
        assert layer.score_vector.grad is not None
        assert np.abs(layer.score_vector.grad).max() > 0
        # full finite-difference agreement through gather + gating
        assert_grad_matches(forward, [layer.score_vector])

    def test_permutation_consistency(self):
        rng = np.random.default_rng(14)
        n = 8
        upper = np.triu(rng.random((n, n)) < 0.5, k=1)
        adj = (upper | upper.T).astype(float)
        feats = rng.standard_normal((n, 4))
        prop = adj / n + np.eye(n)

        tape = Tape()
        layer = make_layer(tape, ratio=0.5, seed=15)
        base_scores = l2pool.score(layer, Tensor(feats), Tensor(prop)).data
        base_selected = l2pool.top_k_select(base_scores, layer.ratio)
        for trial in range(20):
            perm = np.random.default_rng(trial).permutation(n)
            p_feats = feats[perm]
            p_adj = adj[np.ix_(perm, perm)]
            p_prop = prop[np.ix_(perm, perm)]
            p_scores = l2pool.score(layer, Tensor(p_feats), Tensor(p_prop)).data
            np.testing.assert_allclose(p_scores, base_scores[perm], atol=1e-9)
            p_selected = l2pool.top_k_select(p_scores, layer.ratio)
            assert set(perm[p_selected].tolist()) == set(base_selected.tolist())

    def test_two_hop_closure(self):
        adj = path_adj(4)  # 0-1-2-3
        closed = l2pool.two_hop_closure(adj).toarray()
        assert closed[0, 2] > 0 and closed[1, 3] > 0
        assert np.all(np.diag(closed) == 0)
        np.testing.assert_array_equal(closed, closed.T)
