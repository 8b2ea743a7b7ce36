"""Propagation layers: single graph convolution, deep residual stack,
and the dual-channel (pseudo-siamese) encoder."""

from __future__ import annotations

import math

import numpy as np

from .graph_data import PropagationMatrix
from .tensor import Tape, Tensor, add, matmul, prelu, scale

PRELU_INIT = 0.25


def xavier_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def as_prop_tensor(prop) -> Tensor:
    """Coerce a propagation operand to a constant dense tensor."""
    if isinstance(prop, Tensor):
        return prop
    if isinstance(prop, PropagationMatrix):
        return Tensor(prop.dense())
    return Tensor(np.asarray(prop, dtype=np.float64))


class GcnLayer:
    """One graph convolution: PReLU(prop @ x @ W), learnable slope."""

    def __init__(self, tape: Tape, rng: np.random.Generator, d_in: int, d_out: int,
                 name: str):
        self.weight = tape.parameter(xavier_uniform(rng, d_in, d_out), f"{name}.weight")
        self.slope = tape.parameter([[PRELU_INIT]], f"{name}.slope")

    def forward(self, prop: Tensor, x: Tensor) -> Tensor:
        return prelu(matmul(matmul(prop, x), self.weight), self.slope)


def gcn_forward(layer: GcnLayer, prop, x: Tensor) -> Tensor:
    return layer.forward(as_prop_tensor(prop), x)


class GcniiStack:
    """Deep graph convolution with an initial-residual anchor and
    identity-mapped weights.

    The anchor H0 is the projected input and stays fixed across layers;
    layer l computes PReLU(((1-a)*prop*H + a*H0) @ ((1-b_l)*I + b_l*W_l))
    with b_l = log(lam / l + 1).
    """

    def __init__(self, tape: Tape, rng: np.random.Generator, d_in: int, d: int,
                 layers: int, alpha: float, lam: float, name: str):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        self.alpha = alpha
        self.input_projection = tape.parameter(xavier_uniform(rng, d_in, d),
                                               f"{name}.proj")
        self.layers = []
        for l in range(1, layers + 1):
            self.layers.append((
                tape.parameter(xavier_uniform(rng, d, d), f"{name}.layer{l}.weight"),
                tape.parameter([[PRELU_INIT]], f"{name}.layer{l}.slope"),
                math.log(lam / l + 1.0),
            ))

    def forward(self, prop: Tensor, x: Tensor) -> Tensor:
        h0 = matmul(x, self.input_projection)
        h = h0
        for weight, slope, beta in self.layers:
            support = add(scale(matmul(prop, h), 1.0 - self.alpha),
                          scale(h0, self.alpha))
            mixed = add(scale(support, 1.0 - beta),
                        scale(matmul(support, weight), beta))
            h = prelu(mixed, slope)
        return h


def gcnii_forward(stack: GcniiStack, prop, x: Tensor) -> Tensor:
    return stack.forward(as_prop_tensor(prop), x)


class DualChannelEncoder:
    """Two structurally identical channels with independent parameters.

    With ``dual=False`` the second channel is dropped entirely and
    ``forward`` returns None in its place.
    """

    def __init__(self, tape: Tape, rng: np.random.Generator, d_in: int, d_out: int,
                 depth: int = 1, dual: bool = True, name: str = "encoder"):
        if depth < 1:
            raise ValueError(f"encoder depth must be >= 1, got {depth}")
        dims = [d_in] + [d_out] * depth
        self.channel1 = [GcnLayer(tape, rng, dims[i], dims[i + 1], f"{name}.ch1.layer{i}")
                         for i in range(depth)]
        self.channel2 = None
        if dual:
            self.channel2 = [GcnLayer(tape, rng, dims[i], dims[i + 1],
                                      f"{name}.ch2.layer{i}")
                             for i in range(depth)]

    @staticmethod
    def _run(layers, prop: Tensor, x: Tensor) -> Tensor:
        h = x
        for layer in layers:
            h = layer.forward(prop, h)
        return h

    def forward(self, prop: Tensor, x: Tensor) -> tuple[Tensor, Tensor | None]:
        h1 = self._run(self.channel1, prop, x)
        h2 = self._run(self.channel2, prop, x) if self.channel2 is not None else None
        return h1, h2


def encode_dual(enc: DualChannelEncoder, prop, x: Tensor):
    return enc.forward(as_prop_tensor(prop), x)
