"""Downstream protocols on frozen slide embeddings: few-shot linear probing,
prototype classification and retrieval."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from . import numerics as nx
from .dataio import PairDataset, PatchEmbeddingSet
from .encoders import INFER, abmil_forward
from .errors import DimensionError, InputError, MetricError, ParameterError

RESULT_COLUMNS = ("task", "k", "run", "metric", "value")
POSITIVE, NORMAL = "positive", "normal"


# ---------------------------------------------------------------- embedding

def embed_slide(ckpt, H) -> tuple[np.ndarray, np.ndarray]:
    """Infer-mode slide embedding over all patches, plus attention weights."""
    data = H.embeddings if isinstance(H, PatchEmbeddingSet) else np.asarray(H)
    if data.ndim != 2 or data.shape[0] == 0:
        raise InputError(f"patch set must be a non-empty N×d matrix, got shape {data.shape}")
    if data.shape[1] != ckpt.abmil.config.in_dim:
        raise DimensionError(f"slide has {data.shape[1]}-dim patches, checkpoint expects {ckpt.abmil.config.in_dim}")
    h, a = abmil_forward(data.astype(ckpt.abmil.dtype, copy=False), ckpt.abmil, INFER)
    return h.data.copy(), a


def embed_dataset(ckpt, dataset: PairDataset) -> tuple[np.ndarray, list[np.ndarray]]:
    out, attn = [], []
    for p in dataset.patches:
        h, a = embed_slide(ckpt, p)
        out.append(h)
        attn.append(a)
    return np.stack(out), attn


def mean_pool_embeddings(dataset: PairDataset) -> np.ndarray:
    """Average patch embedding per slide (the no-training baseline)."""
    return np.stack([p.embeddings.astype(np.float64).mean(axis=0) for p in dataset.patches])


# ---------------------------------------------------------------- metrics

def _auc_binary(scores: np.ndarray, labels: np.ndarray) -> float:
    ranks = rankdata(scores, method="average")
    pos = labels > 0.5
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_class_auc(scores, labels) -> np.ndarray:
    """ROC-AUC per column via the rank statistic; NaN where a class lacks
    positives or negatives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    if scores.shape != labels.shape:
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} differ")
    out = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        n_pos = int((labels[:, c] > 0.5).sum())
        if 0 < n_pos < labels.shape[0]:
            out[c] = _auc_binary(scores[:, c], labels[:, c])
    return out


def macro_auc(scores, labels, return_excluded: bool = False):
    """Unweighted mean of per-class AUC over classes with both labels present."""
    aucs = per_class_auc(scores, labels)
    valid = ~np.isnan(aucs)
    if not valid.any():
        raise MetricError("no class has both positive and negative examples")
    value = float(aucs[valid].mean())
    if return_excluded:
        return value, [int(c) for c in np.flatnonzero(~valid)]
    return value


# ---------------------------------------------------------------- linear probing

@dataclass
class ProbeConfig:
    k_per_class: int = 10
    l2_penalty: float = 1e-4
    max_iters: int = 20000
    tol: float = 1e-8
    lr: float | None = None  # defaults to 1/L of the logistic objective
    seed: int = 0

    def __post_init__(self):
        if self.k_per_class < 1:
            raise ParameterError("k_per_class must be >= 1")
        if self.l2_penalty < 0:
            raise ParameterError("l2_penalty must be nonnegative")


@dataclass
class LinearProbe:
    weights: np.ndarray  # L × d
    bias: np.ndarray  # L
    degenerate: np.ndarray  # L booleans
    train_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def scores(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        s = expit(X @ self.weights.T + self.bias)
        s[:, self.degenerate] = 0.5
        return s


def logistic_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float) -> float:
    """Mean log-loss plus (l2/2)·‖w‖² (bias unpenalised); y in {0, 1}."""
    z = X @ w + b
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * (w @ w))


def fit_logistic(X: np.ndarray, y: np.ndarray, l2: float, max_iters: int = 20000, tol: float = 1e-8,
                 lr: float | None = None) -> tuple[np.ndarray, float, int]:
    """Minimise :func:`logistic_objective` by full-batch accelerated gradient
    descent with adaptive restart. Returns (w, b, iterations)."""
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0
    if lr is None:
        lipschitz = 0.25 * np.linalg.norm(Xa, 2) ** 2 / n + l2
        lr = 1.0 / lipschitz

    def grad(theta):
        return Xa.T @ (expit(Xa @ theta) - y) / n + reg * theta

    theta = np.zeros(d + 1)
    prev = theta.copy()
    momentum_t = 1.0
    it = 0
    for it in range(1, max_iters + 1):
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum_t ** 2))
        look = theta + ((momentum_t - 1.0) / t_next) * (theta - prev)
        g = grad(look)
        prev, theta = theta, look - lr * g
        momentum_t = t_next
        if np.dot(g, theta - prev) > 0:  # restart when momentum points uphill
            momentum_t = 1.0
        if np.max(np.abs(grad(theta))) < tol:
            break
    return theta[:-1], float(theta[-1]), it


def draw_few_shot(labels: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Union of k randomly drawn positives per class (sorted indices)."""
    labels = np.asarray(labels)
    chosen: list[int] = []
    for c in range(labels.shape[1]):
        pool = np.flatnonzero(labels[:, c] > 0.5)
        if pool.size < k:
            raise InputError(f"class {c} has {pool.size} examples, fewer than k={k}")
        chosen.extend(rng.choice(pool, size=k, replace=False).tolist())
    return np.unique(np.array(chosen, dtype=np.int64))


def fit_probe(X, Y, cfg: ProbeConfig) -> LinearProbe:
    """One-vs-rest L2-regularised logistic regression on all given rows."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise DimensionError(f"{X.shape[0]} embeddings but {Y.shape[0]} label rows")
    L, d = Y.shape[1], X.shape[1]
    W, b = np.zeros((L, d)), np.zeros(L)
    degenerate = np.zeros(L, dtype=bool)
    iters = np.zeros(L, dtype=np.int64)
    for c in range(L):
        y = (Y[:, c] > 0.5).astype(np.float64)
        if y.sum() == 0 or y.sum() == y.size:
            degenerate[c] = True
            continue
        W[c], b[c], iters[c] = fit_logistic(X, y, cfg.l2_penalty, cfg.max_iters, cfg.tol, cfg.lr)
    return LinearProbe(W, b, degenerate, np.arange(X.shape[0]), iters)


def linear_probe(X, Y, cfg: ProbeConfig) -> LinearProbe:
    """Draw ``k_per_class`` shots per class (seeded) and fit a probe on them."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    idx = draw_few_shot(Y, cfg.k_per_class, nx.rng_stream(cfg.seed, 11))
    probe = fit_probe(np.asarray(X)[idx], Y[idx], cfg)
    probe.train_indices = idx
    return probe


def few_shot_eval(X, Y, k: int, runs: int = 5, seed: int = 0, l2_penalty: float = 1e-4) -> list[float]:
    """Macro-AUC of k-shot probes on the rows not drawn as shots, one value per run."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    out = []
    for run in range(runs):
        probe = linear_probe(X, Y, ProbeConfig(k_per_class=k, l2_penalty=l2_penalty, seed=seed + run))
        rest = np.setdiff1d(np.arange(X.shape[0]), probe.train_indices)
        out.append(macro_auc(probe.scores(X[rest]), Y[rest]))
    return out


# ---------------------------------------------------------------- prototypes

@dataclass
class Prototype:
    kind: str
    embedding: np.ndarray
    k_used: int


def build_prototype(embeddings: Sequence, kind: str = POSITIVE) -> Prototype:
    if kind not in (POSITIVE, NORMAL):
        raise ParameterError(f"prototype kind must be {POSITIVE!r} or {NORMAL!r}")
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] == 0:
        raise InputError("prototype needs at least one embedding")
    return Prototype(kind, E.mean(axis=0), E.shape[0])


def prototype_classify(query, pos: Prototype, normal: Prototype) -> tuple[float, str]:
    """score = ‖q − p_normal‖ − ‖q − p_pos‖; positive iff score > 0."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != pos.embedding.shape or q.shape != normal.embedding.shape:
        raise DimensionError(f"query {q.shape} vs prototypes {pos.embedding.shape}/{normal.embedding.shape}")
    score = float(np.linalg.norm(q - normal.embedding) - np.linalg.norm(q - pos.embedding))
    return score, POSITIVE if score > 0 else NORMAL


# ---------------------------------------------------------------- retrieval

def retrieve(query_id: str, ids: Sequence[str], embeddings, k: int, query_embedding=None) -> list[str]:
    """Top-k index slides by cosine similarity, excluding the query itself.

    Zero-norm index entries rank last; ties break on slide id.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    ids = list(ids)
    if E.shape[0] != len(ids):
        raise DimensionError(f"{len(ids)} ids but {E.shape[0]} embeddings")
    if query_embedding is None:
        try:
            query_embedding = E[ids.index(query_id)]
        except ValueError:
            raise InputError(f"query {query_id!r} not in index and no query embedding given") from None
    q = np.asarray(query_embedding, dtype=np.float64)
    if q.shape != (E.shape[1],):
        raise DimensionError(f"query embedding {q.shape} incompatible with index dimension {E.shape[1]}")
    candidates = [i for i, s in enumerate(ids) if s != query_id]
    if not 1 <= k <= len(candidates):
        raise ParameterError(f"k must be in [1, {len(candidates)}], got {k}")
    norms = np.linalg.norm(E, axis=1)
    qn = np.linalg.norm(q)
    keyed = []
    for i in candidates:
        zero = norms[i] == 0 or qn == 0
        sim = 0.0 if zero else float(E[i] @ q) / (norms[i] * qn)
        keyed.append((zero, -sim, ids[i]))
    keyed.sort()
    return [key[2] for key in keyed[:k]]


def recall_at_k(ranked: Sequence[str], relevant: Iterable[str], k: int) -> float:
    relevant = set(relevant)
    if not relevant:
        raise MetricError("relevant set is empty")
    return len(set(ranked[:k]) & relevant) / len(relevant)


def mean_recall_at_k(ids: Sequence[str], embeddings, groups: Sequence, k: int) -> float:
    """Mean Recall@k over queries that share a group with at least one other slide."""
    ids = list(ids)
    values = []
    for qi, (qid, g) in enumerate(zip(ids, groups)):
        relevant = {s for s, gg in zip(ids, groups) if gg == g and s != qid}
        if g is None or not relevant:
            continue
        values.append(recall_at_k(retrieve(qid, ids, embeddings, k), relevant, k))
    if not values:
        raise MetricError("no query has a relevant slide")
    return float(np.mean(values))


def random_recall_expectation(groups: Sequence, k: int) -> float:
    """Expected Recall@k of a uniformly random ranking (k / (n - 1) per query)."""
    n = len(groups)
    counts: dict = {}
    for g in groups:
        counts[g] = counts.get(g, 0) + 1
    valid = [g for g in groups if g is not None and counts[g] > 1]
    if not valid:
        raise MetricError("no query has a relevant slide")
    return min(1.0, k / (n - 1))


def write_results(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for r in rows:
            writer.writerow([r["task"], r["k"], r["run"], r["metric"], repr(float(r["value"]))])
