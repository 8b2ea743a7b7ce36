"""End-to-end optimization: scale pyramid, hierarchical loss, Adam loop,
early stopping, checkpointing, and inference embeddings."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np
import scipy.sparse as sp

from . import checkpoint as ckpt
from . import graph_data, l2pool, objective
from .encoder import DualChannelEncoder
from .graph_data import Graph, PropagationMatrix
from .objective import Discriminator, ScaleLossTerms, mix_channels
from .tensor import DomainError, Tape, Tensor, add, gather_rows, scale_rows


class ConfigError(ValueError):
    """A configuration file or value is invalid."""


class NumericalError(RuntimeError):
    """Training produced non-finite values."""


@dataclass(frozen=True)
class TrainConfig:
    hidden_dim: int = 512
    pool_ratios: tuple[float, ...] = (0.9, 0.8, 0.7)
    heads: int = 4
    gcnii_layers: int = 4
    gcnii_alpha: float = 0.1
    gcnii_lambda: float = 0.5
    encoder_depth: int = 1
    lr: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 2000
    patience: int = 20
    input_mode: str = "adjacency"
    ppr_teleport: float = 0.2
    ppr_top_t: int = 128
    seed: int = 0
    loss_reduction: str = "mean"
    adjacency_closure: bool = False
    pooling_gate: bool = True
    channels: str = "dual"
    embed_mode: str = "mixed"
    row_normalize_features: bool = False

    def validate(self) -> "TrainConfig":
        if self.hidden_dim < 1:
            raise ConfigError(f"hidden_dim must be positive, got {self.hidden_dim}")
        for r in self.pool_ratios:
            if not 0.0 < r <= 1.0:
                raise ConfigError(f"pool ratios must lie in (0, 1], got {r}")
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        if self.hidden_dim % self.heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} is not divisible by {self.heads} heads")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.input_mode not in ("adjacency", "diffusion"):
            raise ConfigError(f"unknown input_mode {self.input_mode!r}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown loss_reduction {self.loss_reduction!r}")
        if self.channels not in ("dual", "single"):
            raise ConfigError(f"unknown channels {self.channels!r}")
        if self.embed_mode not in ("mixed", "concat"):
            raise ConfigError(f"unknown embed_mode {self.embed_mode!r}")
        return self

    @property
    def n_scales(self) -> int:
        return len(self.pool_ratios) + 1


_BOOL_TOKENS = {"true": True, "false": False, "1": True, "0": False,
                "yes": True, "no": False, "on": True, "off": False}


def _convert(key: str, raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() not in _BOOL_TOKENS:
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return _BOOL_TOKENS[raw.lower()]
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw
    # pool_ratios: comma-separated floats, empty string means no pooling
    if raw == "":
        return ()
    return tuple(float(tok) for tok in raw.split(","))


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse flat ``key = value`` lines; unknown keys are errors."""
    kinds = {f.name: (type(f.default) if f.name != "pool_ratios" else tuple)
             for f in fields(TrainConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            updates[key] = _convert(key, value, kinds[key])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: {key}: {exc}") from None
    return replace(base or TrainConfig(), **updates).validate()


def load_config(path: str, base: TrainConfig | None = None) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base=base)


def config_to_text(config: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        value = getattr(config, f.name)
        if f.name == "pool_ratios":
            value = ",".join(f"{r:g}" for r in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_to_dict(config: TrainConfig) -> dict:
    out = {}
    for f in fields(TrainConfig):
        value = getattr(config, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def config_from_dict(data: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    clean = {k: tuple(v) if k == "pool_ratios" else v for k, v in data.items()}
    return TrainConfig(**clean).validate()


# ---------------------------------------------------------------------------
# model


class HclModel:
    """All learnable state: dual encoder, per-scale pool layers and
    discriminators, and per-scale channel-mixing weights."""

    def __init__(self, config: TrainConfig, d_in: int):
        config.validate()
        self.config = config
        self.d_in = d_in
        self.tape = Tape()
        rng = np.random.default_rng(config.seed)
        dual = config.channels == "dual"
        self.encoder = DualChannelEncoder(self.tape, rng, d_in, config.hidden_dim,
                                          depth=config.encoder_depth, dual=dual)
        self.pool_layers = [
            l2pool.L2PoolLayer(self.tape, rng, config.hidden_dim, config.heads, ratio,
                               gcnii_layers=config.gcnii_layers,
                               alpha=config.gcnii_alpha, lam=config.gcnii_lambda,
                               name=f"pool{i}")
            for i, ratio in enumerate(config.pool_ratios)
        ]
        self.discriminators = [
            Discriminator(self.tape, rng, config.hidden_dim, f"disc{s}")
            for s in range(config.n_scales)
        ]
        if dual:
            self.deltas = [self.tape.parameter([[1.0]], f"delta{s}")
                           for s in range(config.n_scales)]
        else:
            self.deltas = [None] * config.n_scales

    def parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.tape.parameters}

    def clamp_deltas(self) -> None:
        for d in self.deltas:
            if d is not None:
                np.clip(d.data, -1.0, 1.0, out=d.data)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters().items():
            p.data[:] = snapshot[name]


# ---------------------------------------------------------------------------
# forward pass over scales


@dataclass
class ScaleState:
    features: Tensor
    prop: Tensor
    adjacency: sp.csr_matrix
    h1: Tensor
    h2: Tensor | None
    mixed: Tensor
    selected: np.ndarray | None = None   # indices into the parent scale
    gate: Tensor | None = None


@dataclass
class ScalePyramid:
    """Per-scale states from fine to coarse, with index maps."""

    scales: list[ScaleState] = field(default_factory=list)

    def sizes(self) -> list[int]:
        return [s.features.shape[0] for s in self.scales]

    def global_indices(self, s: int) -> np.ndarray:
        """Scale-s node positions expressed in original node ids."""
        idx = np.arange(self.scales[0].features.shape[0])
        for state in self.scales[1:s + 1]:
            idx = idx[state.selected]
        return idx


def forward_pyramid(model: HclModel, features, prop, adjacency,
                    reuse: ScalePyramid | None = None) -> ScalePyramid:
    """Dual-encode every scale, pooling recursively between scales.

    Pool scores are computed from the parent scale's mixed embeddings;
    the selected feature rows (gated by 1 + score) are re-encoded on the
    induced child graph.  When ``reuse`` is given (corrupted branch) the
    selection, gates, and child graphs of the reference pyramid are
    applied instead of fresh scoring, keeping both branches aligned.
    """
    config = model.config
    x = features if isinstance(features, Tensor) else Tensor(features)
    prop_t = Tensor(prop.dense()) if isinstance(prop, PropagationMatrix) else prop
    adjacency = sp.csr_matrix(adjacency, dtype=np.float64)

    pyramid = ScalePyramid()
    h1, h2 = model.encoder.forward(prop_t, x)
    mixed = mix_channels(h1, h2, model.deltas[0])
    pyramid.scales.append(ScaleState(x, prop_t, adjacency, h1, h2, mixed))

    for s, pool in enumerate(model.pool_layers):
        parent = pyramid.scales[-1]
        if reuse is not None:
            ref = reuse.scales[s + 1]
            selected, gate = ref.selected, ref.gate
            child_prop_t, child_adj = ref.prop, ref.adjacency
        else:
            scores = l2pool.score(pool, parent.mixed, parent.prop)
            selected = l2pool.top_k_select(scores, pool.ratio)
            gate = (add(gather_rows(scores, selected), 1.0)
                    if config.pooling_gate else None)
            base = (l2pool.two_hop_closure(parent.adjacency)
                    if config.adjacency_closure else parent.adjacency)
            child_adj = l2pool.induced_subgraph(base, selected)
            child_prop_t = Tensor(np.asarray(
                graph_data.normalize_csr(child_adj).todense()))
        child_features = gather_rows(parent.features, selected)
        if gate is not None:
            child_features = scale_rows(child_features, gate)
        h1, h2 = model.encoder.forward(child_prop_t, child_features)
        mixed = mix_channels(h1, h2, model.deltas[s + 1])
        pyramid.scales.append(ScaleState(child_features, child_prop_t, child_adj,
                                         h1, h2, mixed, selected, gate))
    return pyramid


def hierarchical_loss(model: HclModel, positive: ScalePyramid,
                      negative: ScalePyramid):
    """Total loss tensor plus per-scale bookkeeping."""
    config = model.config
    losses = []
    for s in range(config.n_scales):
        pos, neg = positive.scales[s], negative.scales[s]
        losses.append(objective.scale_loss(
            model.discriminators[s], pos.h1, pos.h2, neg.h1, neg.h2,
            model.deltas[s], reduction=config.loss_reduction))
    total = objective.total_loss(losses, config.pool_ratios)
    weights = [1.0] + objective.ratio_weights(config.pool_ratios)
    terms = [ScaleLossTerms(
        delta=None if model.deltas[s] is None else model.deltas[s].item(),
        ratio_weight=weights[s], loss_value=losses[s].item())
        for s in range(config.n_scales)]
    return total, terms


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else 0.0
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    trace: list[dict]
    best_epoch: int
    best_loss: float
    epochs_run: int


def _input_features(graph: Graph, config: TrainConfig) -> np.ndarray:
    feats = graph.features
    if config.row_normalize_features:
        feats = graph_data.row_normalize(feats)
    return feats


def train(model: HclModel, graph: Graph, config: TrainConfig | None = None) -> TrainResult:
    """Full-batch optimization with a fresh corruption every epoch.

    Stops at ``max_epochs`` or after ``patience`` epochs without a new
    best loss; the best-loss parameters are restored before returning.
    """
    config = (config or model.config).validate()
    prop = graph_data.build_propagation(graph, config.input_mode,
                                        config.ppr_teleport, config.ppr_top_t)
    prop_t = Tensor(prop.dense())
    features = _input_features(graph, config)

    opt = Adam(model.tape.parameters, config.lr, config.adam_beta1,
               config.adam_beta2, config.adam_eps)
    trace: list[dict] = []
    best_loss = np.inf
    best_epoch = -1
    best_snapshot = model.snapshot()
    stale = 0

    for epoch in range(config.max_epochs):
        model.tape.zero_grad()
        corrupted = graph_data.corrupt(graph, [config.seed, epoch])
        neg_features = corrupted.features
        if config.row_normalize_features:
            neg_features = graph_data.row_normalize(neg_features)

        try:
            positive = forward_pyramid(model, features, prop_t, graph.adjacency)
            negative = forward_pyramid(model, neg_features, prop_t, graph.adjacency,
                                       reuse=positive)
            loss, terms = hierarchical_loss(model, positive, negative)
        except DomainError as exc:
            culprit = model.tape.first_nonfinite() or str(exc)
            raise NumericalError(
                f"non-finite values at epoch {epoch}; first appeared in "
                f"{culprit}") from exc
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            culprit = model.tape.first_nonfinite() or "total loss"
            raise NumericalError(
                f"non-finite loss at epoch {epoch}; first appeared in {culprit}")

        model.tape.backward(loss)
        opt.step()
        model.clamp_deltas()

        trace.append({"epoch": epoch, "total_loss": loss_value,
                      "scale_losses": [t.loss_value for t in terms],
                      "deltas": [t.delta for t in terms]})
        if loss_value < best_loss:
            best_loss = loss_value
            best_epoch = epoch
            best_snapshot = model.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    model.restore(best_snapshot)
    return TrainResult(trace=trace, best_epoch=best_epoch, best_loss=best_loss,
                       epochs_run=len(trace))


def write_loss_trace(path: str, result: TrainResult, config: TrainConfig) -> None:
    n_scales = config.n_scales
    header = (["epoch", "total_loss"]
              + [f"scale{s}_loss" for s in range(n_scales)]
              + [f"delta{s}" for s in range(n_scales)])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in result.trace:
            deltas = ["" if d is None else f"{d:.17g}" for d in row["deltas"]]
            writer.writerow([row["epoch"], f"{row['total_loss']:.17g}"]
                            + [f"{v:.17g}" for v in row["scale_losses"]] + deltas)


# ---------------------------------------------------------------------------
# inference


def embed(model: HclModel, graph: Graph, config: TrainConfig | None = None) -> np.ndarray:
    """Node embeddings on the full (unpooled, uncorrupted) graph."""
    config = (config or model.config).validate()
    prop = graph_data.build_propagation(graph, config.input_mode,
                                        config.ppr_teleport, config.ppr_top_t)
    features = _input_features(graph, config)
    with model.tape.paused():
        h1, h2 = model.encoder.forward(Tensor(prop.dense()), Tensor(features))
        if h2 is None:
            return h1.data.copy()
        if config.embed_mode == "concat":
            return np.concatenate([h1.data, h2.data], axis=1)
        mixed = mix_channels(h1, h2, model.deltas[0])
        return mixed.data.copy()


# ---------------------------------------------------------------------------
# persistence


def save_model(model: HclModel, path: str) -> None:
    meta = {"kind": "hcl-model", "d_in": model.d_in,
            "config": config_to_dict(model.config)}
    params = {name: p.data for name, p in model.parameters().items()}
    ckpt.save_checkpoint(path, params, meta)


def load_model(path: str) -> HclModel:
    meta, params = ckpt.load_checkpoint(path)
    if meta.get("kind") != "hcl-model":
        raise ckpt.CheckpointError(f"{path} does not hold a model checkpoint")
    try:
        config = config_from_dict(meta["config"])
    except (KeyError, ConfigError) as exc:
        raise ckpt.CheckpointError(f"bad checkpoint config: {exc}") from None
    model = HclModel(config, int(meta["d_in"]))
    own = model.parameters()
    if set(own) != set(params):
        missing = sorted(set(own) ^ set(params))
        raise ckpt.CheckpointError(f"checkpoint/model parameter mismatch: {missing}")
    for name, p in own.items():
        if params[name].shape != p.data.shape:
            raise ckpt.CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {params[name].shape}, "
                f"model {p.data.shape}")
        p.data[:] = params[name]
    return model
