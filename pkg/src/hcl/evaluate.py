"""Downstream evaluation of frozen embeddings: linear probe, k-means with
NMI/ARI, graph-level classification, and report formatting."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ProbeResult:
    accuracy_mean: float
    accuracy_std: float
    runs: int
    per_run: list[float] = field(default_factory=list)


@dataclass
class ClusterResult:
    nmi: float
    ari: float
    runs: int


def _subseed(seed, *extra) -> list[int]:
    """Flat integer seed list for numpy's SeedSequence."""
    base = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    return base + [int(e) for e in extra]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(logits.argmax(axis=1) == y))


def probe_gradients(X: np.ndarray, Y: np.ndarray, W: np.ndarray, b: np.ndarray,
                    weight_decay: float):
    """Softmax cross-entropy gradients for one full-batch descent step."""
    probs = _softmax(X @ W + b)
    err = (probs - Y) / X.shape[0]
    return X.T @ err + weight_decay * W, err.sum(axis=0, keepdims=True)


def _stratified_split(labels: np.ndarray, labeled: np.ndarray, per_class_train: int,
                      per_class_val: int, rng: np.random.Generator):
    train = np.zeros(labels.shape[0], dtype=bool)
    val = np.zeros(labels.shape[0], dtype=bool)
    test = np.zeros(labels.shape[0], dtype=bool)
    for c in np.unique(labels[labeled]):
        members = rng.permutation(np.where(labeled & (labels == c))[0])
        train[members[:per_class_train]] = True
        val[members[per_class_train:per_class_train + per_class_val]] = True
        test[members[per_class_train + per_class_val:]] = True
    return train, val, test


def linear_probe(embeddings: np.ndarray, labels: np.ndarray, masks=None,
                 runs: int = 50, seed: int = 0, *, lr: float = 0.5,
                 weight_decay: float = 1e-4, iterations: int = 300,
                 per_class_train: int = 20, per_class_val: int = 20) -> ProbeResult:
    """Multinomial logistic regression on frozen embeddings.

    Fits by full-batch gradient descent on the train mask, keeps the
    iterate with the best validation accuracy, and reports test accuracy
    aggregated over ``runs`` repetitions.  When ``masks`` is None a fresh
    stratified split is sampled per run.
    """
    X_all = np.asarray(embeddings, dtype=np.float64)
    y_all = np.asarray(labels, dtype=np.int64)
    labeled = y_all >= 0
    classes = np.unique(y_all[labeled])
    class_index = {c: i for i, c in enumerate(classes)}
    n_classes = len(classes)

    per_run: list[float] = []
    for run in range(runs):
        rng = np.random.default_rng(_subseed(seed, run))
        if masks is None:
            tr, va, te = _stratified_split(y_all, labeled, per_class_train,
                                           per_class_val, rng)
        else:
            tr, va, te = (np.asarray(m, dtype=bool) & labeled for m in masks)
        train_classes = set(y_all[tr])
        for c in classes:
            if c not in train_classes:
                raise ValueError(f"class {c} absent from the train mask")

        mean = X_all[tr].mean(axis=0)
        std = X_all[tr].std(axis=0)
        std[std == 0.0] = 1.0
        X = (X_all - mean) / std
        y = np.array([class_index.get(v, -1) for v in y_all])

        W = 0.01 * rng.standard_normal((X.shape[1], n_classes))
        b = np.zeros((1, n_classes))
        best = (W.copy(), b.copy())
        best_val = -1.0
        has_val = bool(va.any())
        for _ in range(iterations):
            gW, gb = probe_gradients(X[tr], np.eye(n_classes)[y[tr]], W, b,
                                     weight_decay)
            W -= lr * gW
            b -= lr * gb
            if has_val:
                val_acc = _accuracy(X[va] @ W + b, y[va])
                if val_acc > best_val:
                    best_val = val_acc
                    best = (W.copy(), b.copy())
        if not has_val:
            best = (W, b)
        W, b = best
        per_run.append(_accuracy(X[te] @ W + b, y[te]))

    arr = np.array(per_run)
    return ProbeResult(accuracy_mean=float(arr.mean()), accuracy_std=float(arr.std()),
                       runs=runs, per_run=per_run)


# ---------------------------------------------------------------------------
# clustering


@dataclass
class KmeansResult:
    assignments: np.ndarray
    inertia: float
    histories: list[list[float]]   # per-restart inertia after each iteration


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        probs = d2 / d2.sum()
        centers[c] = X[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((X - centers[c]) ** 2).sum(axis=1))
    return centers


def kmeans(embeddings: np.ndarray, k: int, restarts: int = 10, seed: int = 0,
           iterations: int = 100, tol: float = 1e-6) -> KmeansResult:
    """Lloyd's algorithm with k-means++ seeding; best inertia over restarts."""
    X = np.asarray(embeddings, dtype=np.float64)
    n = X.shape[0]
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if np.unique(X, axis=0).shape[0] < k:
        raise ValueError(f"fewer than k={k} distinct points")

    best_assign = None
    best_inertia = np.inf
    histories: list[list[float]] = []
    for r in range(restarts):
        rng = np.random.default_rng(_subseed(seed, r))
        centers = _kmeanspp(X, k, rng)
        history: list[float] = []
        assign = np.zeros(n, dtype=np.int64)
        for _ in range(iterations):
            d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            assign = d2.argmin(axis=1)
            for c in range(k):
                if not np.any(assign == c):
                    # empty cluster: move its center onto the farthest point
                    far = int(d2[np.arange(n), assign].argmax())
                    centers[c] = X[far]
                    assign[far] = c
            inertia = float(((X - centers[assign]) ** 2).sum())
            history.append(inertia)
            new_centers = np.array([X[assign == c].mean(axis=0) for c in range(k)])
            shift = float(np.abs(new_centers - centers).max())
            centers = new_centers
            if shift < tol:
                break
        final = float(((X - centers[assign]) ** 2).sum())
        history.append(final)
        histories.append(history)
        if final < best_inertia:
            best_inertia = final
            best_assign = assign.copy()
    return KmeansResult(assignments=best_assign, inertia=best_inertia,
                        histories=histories)


def _contingency(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"label vectors differ in length: {pred.shape} vs {truth.shape}")
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    return table


def nmi(pred, truth) -> float:
    """Mutual information normalized by the geometric mean of entropies.

    Defined as 0 when either labeling is a single cluster.
    """
    table = _contingency(pred, truth)
    n = table.sum()
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    nz = table > 0
    mi = float(np.sum(table[nz] / n * np.log(n * table[nz] /
                                             np.outer(a, b)[nz])))
    h_pred = float(-np.sum(a[a > 0] / n * np.log(a[a > 0] / n)))
    h_truth = float(-np.sum(b[b > 0] / n * np.log(b[b > 0] / n)))
    if h_pred == 0.0 or h_truth == 0.0:
        return 0.0
    return mi / np.sqrt(h_pred * h_truth)


def ari(pred, truth) -> float:
    """Adjusted Rand index under the permutation-model expectation."""
    table = _contingency(pred, truth)
    n = table.sum()

    def comb2(x):
        return x * (x - 1) / 2.0

    index = float(comb2(table).sum())
    sum_a = float(comb2(table.sum(axis=1)).sum())
    sum_b = float(comb2(table.sum(axis=0)).sum())
    expected = sum_a * sum_b / comb2(n)
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:
        return 1.0 if index == expected else 0.0
    return (index - expected) / (maximum - expected)


def cluster_eval(embeddings: np.ndarray, labels: np.ndarray, k: int | None = None,
                 runs: int = 50, seed: int = 0) -> ClusterResult:
    """NMI/ARI of single-restart k-means, averaged over independent runs."""
    labels = np.asarray(labels, dtype=np.int64)
    labeled = labels >= 0
    if k is None:
        k = int(np.unique(labels[labeled]).size)
    nmis, aris = [], []
    for r in range(runs):
        result = kmeans(embeddings, k, restarts=1, seed=_subseed(seed, r))
        nmis.append(nmi(result.assignments[labeled], labels[labeled]))
        aris.append(ari(result.assignments[labeled], labels[labeled]))
    return ClusterResult(nmi=float(np.mean(nmis)), ari=float(np.mean(aris)), runs=runs)


# ---------------------------------------------------------------------------
# graph-level tasks


def graph_level_embed(node_embeddings) -> np.ndarray:
    """One vector per graph: the column mean of its node embeddings."""
    rows = []
    for i, emb in enumerate(node_embeddings):
        emb = np.asarray(emb, dtype=np.float64)
        if emb.size == 0:
            raise ValueError(f"graph {i} has no node embeddings")
        rows.append(emb.mean(axis=0))
    return np.vstack(rows)


def stratified_folds(labels: np.ndarray, folds: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(folds)]
    for c in np.unique(labels):
        members = rng.permutation(np.where(labels == c)[0])
        for i, idx in enumerate(members):
            buckets[i % folds].append(int(idx))
    return [np.sort(np.array(b, dtype=np.int64)) for b in buckets]


def graph_classify(graph_embeddings: np.ndarray, labels: np.ndarray,
                   folds: int = 10, seed: int = 0, **probe_kwargs) -> ProbeResult:
    """K-fold linear-probe accuracy on graph-level embeddings."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    fold_sets = stratified_folds(labels, folds, seed)
    per_fold = []
    for f, test_idx in enumerate(fold_sets):
        test = np.zeros(n, dtype=bool)
        test[test_idx] = True
        train = ~test
        result = linear_probe(graph_embeddings, labels, masks=(train, train, test),
                              runs=1, seed=[seed, f], **probe_kwargs)
        per_fold.append(result.accuracy_mean)
    arr = np.array(per_fold)
    return ProbeResult(accuracy_mean=float(arr.mean()), accuracy_std=float(arr.std()),
                       runs=folds, per_run=per_fold)


# ---------------------------------------------------------------------------
# embedding files and reports


def save_embeddings(path: str, embeddings: np.ndarray) -> None:
    emb = np.asarray(embeddings, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{emb.shape[0]} {emb.shape[1]}\n")
        for row in emb:
            fh.write("\t".join(f"{v:.17g}" for v in row) + "\n")


def load_embeddings(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: malformed embedding header")
        n, d = int(header[0]), int(header[1])
        emb = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if emb.shape != (n, d):
        raise ValueError(f"{path}: header says {(n, d)}, file holds {emb.shape}")
    return emb


def content_hash(paths) -> str:
    digest = hashlib.sha256()
    for path in paths:
        with open(path, "rb") as fh:
            digest.update(fh.read())
    return digest.hexdigest()


def format_report(title: str, config_text: str, input_hashes: dict[str, str],
                  seeds, metrics: dict[str, object]) -> str:
    lines = [f"== {title} ==", "", "[inputs]"]
    for name in sorted(input_hashes):
        lines.append(f"{name}: sha256={input_hashes[name]}")
    lines += ["", "[seeds]", ", ".join(str(s) for s in seeds), "", "[metrics]"]
    for key, value in metrics.items():
        lines.append(f"{key} = {value}")
    lines += ["", "[config]", config_text.rstrip("\n"), ""]
    return "\n".join(lines)
