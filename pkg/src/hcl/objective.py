"""Readout, per-scale contrastive discrimination, and the ratio-weighted
hierarchical total loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import xavier_uniform
from .tensor import (Tape, Tensor, add, log_sigmoid, matmul, mean_rows, scale,
                     sigmoid, sum_all, transpose)


class Discriminator:
    """Bilinear scorer between node embeddings and a graph summary.

    One independent instance per scale; ``discriminate`` yields
    pre-sigmoid logits h @ W @ s^T.
    """

    def __init__(self, tape: Tape, rng: np.random.Generator, dim: int, name: str):
        self.weight = tape.parameter(xavier_uniform(rng, dim, dim), f"{name}.weight")


@dataclass
class ScaleLossTerms:
    """Bookkeeping for one scale's contribution to the total loss."""

    delta: float | None
    ratio_weight: float
    loss_value: float


def readout(h: Tensor) -> Tensor:
    """Summary vector: sigmoid of the column mean, shape 1 x d."""
    return sigmoid(mean_rows(h))


def discriminate(d: Discriminator, h_node: Tensor, s: Tensor) -> Tensor:
    if s.shape[0] != 1 or s.shape[1] != h_node.shape[1]:
        raise ValueError(
            f"summary must be 1x{h_node.shape[1]} to match nodes {h_node.shape}, "
            f"got {s.shape}")
    return matmul(matmul(h_node, d.weight), transpose(s))


def mix_channels(h1: Tensor, h2: Tensor | None, delta) -> Tensor:
    """h1 + delta * h2; plain h1 when the second channel is absent."""
    if h2 is None:
        return h1
    return add(h1, scale(h2, delta))


def scale_loss(d: Discriminator, h1_pos: Tensor, h2_pos: Tensor | None,
               h1_neg: Tensor, h2_neg: Tensor | None, delta,
               reduction: str = "mean") -> Tensor:
    """Binary cross-entropy between real and corrupted mixed embeddings.

    The summary comes from the positive mixed embeddings and is shared by
    both terms; both sums run over the same pooled node count.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    if h1_pos.shape != h1_neg.shape:
        raise ValueError(
            f"positive and negative node counts differ: {h1_pos.shape} vs {h1_neg.shape}")
    m_pos = mix_channels(h1_pos, h2_pos, delta)
    m_neg = mix_channels(h1_neg, h2_neg, delta)
    summary = readout(m_pos)
    logits_pos = discriminate(d, m_pos, summary)
    logits_neg = discriminate(d, m_neg, summary)
    total = add(sum_all(log_sigmoid(logits_pos)),
                sum_all(log_sigmoid(scale(logits_neg, -1.0))))
    if reduction == "mean":
        return scale(total, -1.0 / (2.0 * h1_pos.shape[0]))
    return scale(total, -1.0)


def ratio_weights(ratios) -> list[float]:
    """Cumulative products of the pooling ratios (weight of each pooled scale)."""
    weights = []
    w = 1.0
    for r in ratios:
        w *= r
        weights.append(w)
    return weights


def total_loss(scale_losses, ratios) -> Tensor:
    """L0 plus each pooled scale's loss weighted by its cumulative ratio."""
    losses = list(scale_losses)
    ratios = list(ratios)
    if len(losses) != len(ratios) + 1:
        raise ValueError(
            f"expected {len(ratios) + 1} scale losses for {len(ratios)} ratios, "
            f"got {len(losses)}")
    out = losses[0]
    for w, term in zip(ratio_weights(ratios), losses[1:]):
        out = add(out, scale(term, w))
    return out
