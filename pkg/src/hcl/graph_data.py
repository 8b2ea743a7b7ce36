"""Graph containers, preprocessing, corruption, file ingestion and synthesis."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

EDGE_FILE = "edges.tsv"
FEATURE_FILE = "features.tsv"
LABEL_FILE = "labels.tsv"
MASK_FILE = "masks.tsv"

_MASK_NAMES = ("train", "val", "test", "none")


class GraphFormatError(ValueError):
    """A graph input file violates the on-disk format."""


@dataclass
class Graph:
    """Node features plus a sparse symmetric adjacency.

    ``labels`` and the masks exist only for downstream evaluation; the
    training loop never reads them.
    """

    features: np.ndarray
    adjacency: sp.csr_matrix
    labels: np.ndarray | None = None
    mask_train: np.ndarray | None = None
    mask_val: np.ndarray | None = None
    mask_test: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        self.adjacency = sp.csr_matrix(self.adjacency, dtype=np.float64)
        n = self.features.shape[0]
        if self.adjacency.shape != (n, n):
            raise ValueError(
                f"adjacency shape {self.adjacency.shape} does not match {n} feature rows")
        if self.adjacency.nnz and self.adjacency.data.min() < 0:
            raise ValueError("adjacency has negative edge weights")
        if (self.adjacency != self.adjacency.T).nnz != 0:
            raise ValueError("adjacency is not symmetric")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError(f"labels must have length {n}")
        for field in ("mask_train", "mask_val", "mask_test"):
            m = getattr(self, field)
            if m is not None:
                m = np.asarray(m, dtype=bool)
                if m.shape != (n,):
                    raise ValueError(f"{field} must have length {n}")
                setattr(self, field, m)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def masks(self):
        return self.mask_train, self.mask_val, self.mask_test


@dataclass
class PropagationMatrix:
    """An n x n propagation operator fed to the encoders.

    kind is one of ``normalized_adjacency`` (sparse, symmetric) or
    ``ppr_diffusion`` (dense, row-stochastic before sparsification).
    """

    kind: str
    matrix: sp.csr_matrix | np.ndarray

    def dense(self) -> np.ndarray:
        if sp.issparse(self.matrix):
            return np.asarray(self.matrix.todense(), dtype=np.float64)
        return np.asarray(self.matrix, dtype=np.float64)

    @property
    def shape(self):
        return self.matrix.shape


def normalize_csr(adj: sp.csr_matrix) -> sp.csr_matrix:
    """D^{-1/2} (A + I) D^{-1/2} with D the degree matrix of A + I."""
    adj = sp.csr_matrix(adj, dtype=np.float64)
    if adj.nnz and adj.data.min() < 0:
        raise ValueError("adjacency has negative edge weights")
    a_hat = (adj + sp.identity(adj.shape[0], format="csr")).tocsr()
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    d_inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
    return (d_inv_sqrt @ a_hat @ d_inv_sqrt).tocsr()


def normalize_adjacency(g: Graph) -> PropagationMatrix:
    return PropagationMatrix("normalized_adjacency", normalize_csr(g.adjacency))


def ppr_diffusion(g: Graph, teleport: float = 0.2, top_t: int = 128) -> PropagationMatrix:
    """Personalized-PageRank smoothing of the graph, sparsified per row.

    Uses the row-stochastic transition of A + I so that every row of the
    full diffusion is a probability distribution; rows are then truncated
    to their ``top_t`` largest entries and renormalized to sum 1.
    """
    if not 0.0 < teleport < 1.0:
        raise ValueError(f"teleport must lie in (0, 1), got {teleport}")
    if top_t < 1:
        raise ValueError(f"top_t must be >= 1, got {top_t}")
    n = g.n
    a_hat = (g.adjacency + sp.identity(n, format="csr")).tocsr()
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    trans = np.asarray((sp.diags(1.0 / deg) @ a_hat).todense())
    diff = teleport * np.linalg.inv(np.eye(n) - (1.0 - teleport) * trans)
    if top_t < n:
        keep = np.argpartition(-diff, top_t - 1, axis=1)[:, :top_t]
        truncated = np.zeros_like(diff)
        rows = np.arange(n)[:, None]
        truncated[rows, keep] = diff[rows, keep]
        diff = truncated / truncated.sum(axis=1, keepdims=True)
    return PropagationMatrix("ppr_diffusion", diff)


def build_propagation(g: Graph, input_mode: str, teleport: float = 0.2,
                      top_t: int = 128) -> PropagationMatrix:
    if input_mode == "adjacency":
        return normalize_adjacency(g)
    if input_mode == "diffusion":
        return ppr_diffusion(g, teleport=teleport, top_t=top_t)
    raise ValueError(f"unknown input_mode {input_mode!r}")


def corrupt(g: Graph, rng_seed) -> Graph:
    """Negative sample: shuffle feature rows, keep the topology untouched.

    The permutation is uniform over non-identity permutations (resampled
    if the identity comes up) and reproducible from ``rng_seed``.
    """
    if g.n < 2:
        raise ValueError("corruption needs at least 2 nodes")
    rng = np.random.default_rng(rng_seed)
    perm = rng.permutation(g.n)
    while np.array_equal(perm, np.arange(g.n)):
        perm = rng.permutation(g.n)
    return Graph(features=g.features[perm], adjacency=g.adjacency)


def row_normalize(features: np.ndarray) -> np.ndarray:
    """Scale each feature row to unit L1 norm (zero rows are left alone)."""
    norms = np.abs(features).sum(axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return features / norms


# ---------------------------------------------------------------------------
# file ingestion


def _data_lines(path: str):
    """Yield (line_number, payload) pairs with comments and blanks removed."""
    with open(path, "r", encoding="utf-8") as fh:
        for i, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield i, line


def _parse_feature_file(path: str) -> np.ndarray:
    declared = None
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("#dims"):
        parts = first.split()
        if len(parts) != 3:
            raise GraphFormatError(f"{path}:1: malformed #dims header")
        declared = (int(parts[1]), int(parts[2]))
    rows = []
    width = None
    for lineno, line in _data_lines(path):
        try:
            row = [float(tok) for tok in line.split()]
        except ValueError as exc:
            raise GraphFormatError(f"{path}:{lineno}: {exc}") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise GraphFormatError(
                f"{path}:{lineno}: expected {width} values, found {len(row)}")
        rows.append(row)
    if not rows:
        raise GraphFormatError(f"{path}: no feature rows")
    feats = np.array(rows, dtype=np.float64)
    if declared is not None and feats.shape != declared:
        raise GraphFormatError(
            f"{path}: #dims header says {declared}, file holds {feats.shape}")
    return feats


def _parse_edge_file(path: str, n: int) -> sp.csr_matrix:
    weights: dict[tuple[int, int], float] = {}
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) not in (2, 3):
            raise GraphFormatError(
                f"{path}:{lineno}: expected 'src dst [weight]', got {len(parts)} fields")
        try:
            src, dst = int(parts[0]), int(parts[1])
            w = float(parts[2]) if len(parts) == 3 else 1.0
        except ValueError as exc:
            raise GraphFormatError(f"{path}:{lineno}: {exc}") from None
        if not (0 <= src < n and 0 <= dst < n):
            raise GraphFormatError(
                f"{path}:{lineno}: node id out of range for {n} nodes")
        if w < 0:
            raise GraphFormatError(f"{path}:{lineno}: negative edge weight {w}")
        key = (min(src, dst), max(src, dst))
        if key in weights and weights[key] != w:
            raise GraphFormatError(
                f"{path}:{lineno}: conflicting weights for edge {key}: "
                f"{weights[key]} vs {w}")
        weights[key] = w
    ii, jj, vv = [], [], []
    for (i, j), w in weights.items():
        ii.append(i)
        jj.append(j)
        vv.append(w)
        if i != j:
            ii.append(j)
            jj.append(i)
            vv.append(w)
    return sp.csr_matrix((vv, (ii, jj)), shape=(n, n))


def _parse_label_file(path: str, n: int) -> np.ndarray:
    labels = np.full(n, -1, dtype=np.int64)
    count = 0
    for lineno, line in _data_lines(path):
        if count >= n:
            raise GraphFormatError(f"{path}:{lineno}: more labels than nodes ({n})")
        try:
            labels[count] = int(line)
        except ValueError as exc:
            raise GraphFormatError(f"{path}:{lineno}: {exc}") from None
        count += 1
    if count != n:
        raise GraphFormatError(f"{path}: {count} labels for {n} nodes")
    return labels


def _parse_mask_file(path: str, n: int):
    masks = {name: np.zeros(n, dtype=bool) for name in ("train", "val", "test")}
    count = 0
    for lineno, line in _data_lines(path):
        if count >= n:
            raise GraphFormatError(f"{path}:{lineno}: more mask rows than nodes ({n})")
        token = line.strip()
        if token not in _MASK_NAMES:
            raise GraphFormatError(
                f"{path}:{lineno}: mask must be one of {_MASK_NAMES}, got {token!r}")
        if token != "none":
            masks[token][count] = True
        count += 1
    if count != n:
        raise GraphFormatError(f"{path}: {count} mask rows for {n} nodes")
    return masks["train"], masks["val"], masks["test"]


def load_graph(edge_path: str, feature_path: str, label_path: str | None = None,
               mask_path: str | None = None) -> Graph:
    features = _parse_feature_file(feature_path)
    n = features.shape[0]
    adjacency = _parse_edge_file(edge_path, n)
    labels = _parse_label_file(label_path, n) if label_path else None
    masks = _parse_mask_file(mask_path, n) if mask_path else (None, None, None)
    return Graph(features=features, adjacency=adjacency, labels=labels,
                 mask_train=masks[0], mask_val=masks[1], mask_test=masks[2])


def load_graph_dir(path: str) -> Graph:
    edge_path = os.path.join(path, EDGE_FILE)
    feature_path = os.path.join(path, FEATURE_FILE)
    for p in (edge_path, feature_path):
        if not os.path.exists(p):
            raise FileNotFoundError(f"missing graph file: {p}")
    label_path = os.path.join(path, LABEL_FILE)
    mask_path = os.path.join(path, MASK_FILE)
    return load_graph(edge_path, feature_path,
                      label_path if os.path.exists(label_path) else None,
                      mask_path if os.path.exists(mask_path) else None)


def save_graph_dir(g: Graph, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    coo = sp.triu(g.adjacency).tocoo()
    with open(os.path.join(path, EDGE_FILE), "w", encoding="utf-8") as fh:
        for i, j, w in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i}\t{j}\t{w:.17g}\n")
    with open(os.path.join(path, FEATURE_FILE), "w", encoding="utf-8") as fh:
        fh.write(f"#dims {g.n} {g.features.shape[1]}\n")
        for row in g.features:
            fh.write("\t".join(f"{v:.17g}" for v in row) + "\n")
    if g.labels is not None:
        with open(os.path.join(path, LABEL_FILE), "w", encoding="utf-8") as fh:
            for v in g.labels:
                fh.write(f"{v}\n")
    if g.mask_train is not None:
        with open(os.path.join(path, MASK_FILE), "w", encoding="utf-8") as fh:
            for tr, va, te in zip(g.mask_train, g.mask_val, g.mask_test):
                name = "train" if tr else "val" if va else "test" if te else "none"
                fh.write(name + "\n")


# ---------------------------------------------------------------------------
# synthetic graphs


def generate_sbm(blocks: int, nodes_per_block: int, p_in: float, p_out: float,
                 feature_noise: float, rng_seed) -> Graph:
    """Stochastic-block-model graph with one-hot-plus-noise features.

    Labels are block ids; masks give a stratified 10/10/80 split per block.
    """
    if blocks < 1 or nodes_per_block < 1:
        raise ValueError("blocks and nodes_per_block must be positive")
    if not (0.0 <= p_out < p_in <= 1.0):
        raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if feature_noise < 0.0:
        raise ValueError(f"feature_noise must be >= 0, got {feature_noise}")
    rng = np.random.default_rng(rng_seed)
    n = blocks * nodes_per_block
    labels = np.repeat(np.arange(blocks), nodes_per_block)

    same_block = labels[:, None] == labels[None, :]
    prob = np.where(same_block, p_in, p_out)
    draws = rng.random((n, n))
    upper = np.triu(draws < prob, k=1)
    adjacency = sp.csr_matrix((upper | upper.T).astype(np.float64))

    features = np.eye(blocks)[labels]
    if feature_noise > 0.0:
        features = features + feature_noise * rng.standard_normal((n, blocks))

    mask_train = np.zeros(n, dtype=bool)
    mask_val = np.zeros(n, dtype=bool)
    mask_test = np.zeros(n, dtype=bool)
    n_train = max(1, int(round(0.1 * nodes_per_block)))
    n_val = max(1, int(round(0.1 * nodes_per_block)))
    for b in range(blocks):
        members = rng.permutation(np.where(labels == b)[0])
        mask_train[members[:n_train]] = True
        mask_val[members[n_train:n_train + n_val]] = True
        mask_test[members[n_train + n_val:]] = True

    return Graph(features=features, adjacency=adjacency, labels=labels,
                 mask_train=mask_train, mask_val=mask_val, mask_test=mask_test)
