"""Learned pooling: topology-enhanced multi-head attention scoring,
top-k node selection, and coarsened-graph construction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .encoder import GcniiStack, as_prop_tensor, xavier_uniform
from .graph_data import PropagationMatrix, normalize_csr
from .tensor import (Tape, Tensor, add, concat_cols, gather_rows, matmul,
                     scale, scale_rows, softmax_rows, tanh, transpose)


class _AttentionHead:
    """Projections for one head; the value path is a deep residual stack."""

    def __init__(self, tape: Tape, rng: np.random.Generator, d_model: int,
                 d_head: int, gcnii_layers: int, alpha: float, lam: float, name: str):
        self.wq = tape.parameter(xavier_uniform(rng, d_model, d_head), f"{name}.wq")
        self.wk = tape.parameter(xavier_uniform(rng, d_model, d_head), f"{name}.wk")
        self.value = GcniiStack(tape, rng, d_model, d_head, gcnii_layers, alpha, lam,
                                f"{name}.value")


class L2PoolLayer:
    """Node scorer for one pooled scale.

    Self-attention (queries = keys = the input embeddings) weights a
    topology-aware value path; a learnable projection plus tanh turns the
    attended features into one bounded score per node.
    """

    def __init__(self, tape: Tape, rng: np.random.Generator, d_model: int,
                 heads: int, ratio: float, gcnii_layers: int = 4,
                 alpha: float = 0.1, lam: float = 0.5, name: str = "pool"):
        if heads < 1:
            raise ValueError(f"heads must be >= 1, got {heads}")
        if d_model % heads != 0:
            raise ValueError(f"d_model {d_model} is not divisible by {heads} heads")
        if not 0.0 < ratio <= 1.0:
            raise ValueError(f"pooling ratio must lie in (0, 1], got {ratio}")
        self.heads = heads
        self.d_head = d_model // heads
        self.ratio = ratio
        self.attention_heads = [
            _AttentionHead(tape, rng, d_model, self.d_head, gcnii_layers, alpha, lam,
                           f"{name}.head{i}")
            for i in range(heads)
        ]
        self.output_projection = tape.parameter(xavier_uniform(rng, d_model, d_model),
                                                f"{name}.wo")
        self.score_vector = tape.parameter(xavier_uniform(rng, d_model, 1),
                                           f"{name}.score")


@dataclass
class PoolResult:
    """Outcome of coarsening one scale."""

    selected: np.ndarray          # strictly increasing indices into the parent
    scores: Tensor                # n x 1 scores of every parent node
    child_features: Tensor        # len(selected) x d
    child_prop: PropagationMatrix
    child_adj: sp.csr_matrix      # induced raw adjacency, feeds the next scale


def attend(layer: L2PoolLayer, h: Tensor, prop) -> Tensor:
    """Multi-head self-attention with the structural value path."""
    pt = as_prop_tensor(prop)
    inv_sqrt_dk = 1.0 / math.sqrt(layer.d_head)
    outputs = []
    for head in layer.attention_heads:
        q = matmul(h, head.wq)
        k = matmul(h, head.wk)
        weights = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_dk))
        outputs.append(matmul(weights, head.value.forward(pt, h)))
    return matmul(concat_cols(outputs), layer.output_projection)


def score(layer: L2PoolLayer, h: Tensor, prop) -> Tensor:
    """Per-node scores in (-1, 1), shape n x 1."""
    return tanh(matmul(attend(layer, h, prop), layer.score_vector))


def retention_count(n: int, ratio: float) -> int:
    """ceil(ratio * n), robust to float artifacts like 0.8 * 900 > 720."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    raw = ratio * n
    nearest = round(raw)
    k = int(nearest) if abs(raw - nearest) < 1e-9 else int(math.ceil(raw))
    return min(max(k, 1), n)


def top_k_select(scores, ratio: float) -> np.ndarray:
    """Indices of the ceil(ratio*n) largest scores, ascending; ties keep
    the smaller index."""
    values = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("top_k_select on an empty score vector")
    k = retention_count(values.size, ratio)
    order = np.argsort(-values, kind="stable")
    return np.sort(order[:k])


def induced_subgraph(adj: sp.csr_matrix, selected: np.ndarray) -> sp.csr_matrix:
    return adj[selected, :][:, selected].tocsr()


def two_hop_closure(adj: sp.csr_matrix) -> sp.csr_matrix:
    """A + A^2 with the diagonal cleared; keeps pooled graphs connected
    when selection would otherwise isolate nodes."""
    closed = (adj + adj @ adj).tolil()
    closed.setdiag(0.0)
    out = closed.tocsr()
    out.eliminate_zeros()
    return out


def coarsen(layer: L2PoolLayer, g_features: Tensor, prop, parent_adj,
            scoring_input: Tensor | None = None, gate: bool = True,
            closure: bool = False) -> PoolResult:
    """Score, select, and build the coarser graph.

    Scores come from ``scoring_input`` when the caller separates the
    representation being ranked from the features being carried forward;
    by default they come from ``g_features`` itself.  Selected feature
    rows are gated by (1 + score) so the scorer stays on the gradient
    path; the child adjacency is the induced restriction of the parent
    (optionally of its two-hop closure), renormalized.
    """
    parent_adj = sp.csr_matrix(parent_adj, dtype=np.float64)
    scores = score(layer, scoring_input if scoring_input is not None else g_features,
                   prop)
    selected = top_k_select(scores, layer.ratio)
    child_features = gather_rows(g_features, selected)
    if gate:
        child_features = scale_rows(child_features,
                                    add(gather_rows(scores, selected), 1.0))
    base = two_hop_closure(parent_adj) if closure else parent_adj
    child_adj = induced_subgraph(base, selected)
    child_prop = PropagationMatrix("normalized_adjacency", normalize_csr(child_adj))
    return PoolResult(selected=selected, scores=scores, child_features=child_features,
                      child_prop=child_prop, child_adj=child_adj)
