"""Post-hoc analysis: smooth rank of embedding matrices, Integrated Gradients
over the expression encoder, top-gene frequency tables and attention export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .encoders import expression_forward
from .errors import DimensionError, InputError, NumericalError, ParameterError
from .numerics import Tensor

RANKME_EPS = 1e-7


@dataclass
class RankReport:
    smooth_rank: float
    singular_values: np.ndarray
    n: int
    d: int


def rankme(embeddings, epsilon: float = RANKME_EPS) -> RankReport:
    """exp(entropy) of the L1-normalised singular values (plus ``epsilon``)."""
    H = np.asarray(embeddings, dtype=np.float64)
    if H.ndim != 2:
        raise DimensionError(f"expected an n×d matrix, got shape {H.shape}")
    n, d = H.shape
    if not n > d >= 1:
        raise ParameterError(f"rank analysis assumes n > d >= 1, got n={n}, d={d}")
    if not np.all(np.isfinite(H)):
        raise InputError("embedding matrix contains non-finite values")
    sigma = np.linalg.svd(H, compute_uv=False)
    total = sigma.sum()
    if total == 0:
        raise InputError("all-zero embedding matrix has no spectrum")
    p = sigma / total + epsilon
    return RankReport(float(np.exp(-np.sum(p * np.log(p)))), sigma, n, d)


# ---------------------------------------------------------------- integrated gradients

@dataclass
class AttributionVector:
    scores: np.ndarray
    baseline: np.ndarray
    steps: int
    target: str
    delta: float  # F(input) - F(baseline)
    residual: float  # |sum(scores) - delta|
    gene_ids: list[str] | None = None
    sample_id: str | None = None


def integrated_gradients_fn(fn: Callable[[Tensor], Tensor], t, baseline, steps: int,
                            target: str = "custom") -> AttributionVector:
    """Midpoint-rule Integrated Gradients for a row-wise scalar function.

    ``fn`` maps an S×G batch of inputs to the length-S vector of outputs, one
    per row, with rows evaluated independently.
    """
    t = np.asarray(t, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    if t.shape != b.shape or t.ndim != 1:
        raise DimensionError(f"input {t.shape} and baseline {b.shape} must be equal-length vectors")
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    path = Tensor(b[None, :] + alphas[:, None] * (t - b)[None, :], requires_grad=True)
    out = fn(path)
    if out.shape != (steps,):
        raise DimensionError(f"target function returned shape {out.shape}, expected ({steps},)")
    nx.backward(nx.sum_all(out))
    grads = path.grad
    bad = np.flatnonzero(~np.all(np.isfinite(grads), axis=1))
    if bad.size:
        raise NumericalError(f"non-finite gradient on the integration path at step {int(bad[0]) + 1} of {steps}")
    scores = (t - b) * grads.mean(axis=0)
    ends = fn(Tensor(np.stack([t, b]))).data
    delta = float(ends[0] - ends[1])
    return AttributionVector(scores, b, steps, target, delta, abs(float(scores.sum()) - delta))


def expression_target(expr_params, target: str = "cosine", reference=None) -> Callable[[Tensor], Tensor]:
    """Row-wise scalar of the expression embedding.

    ``cosine``: cosine similarity to ``reference`` (e.g. a slide embedding).
    ``projection``: dot product with ``reference`` scaled to unit length.
    """
    params = expr_params.astype(np.float64, requires_grad=False)
    if reference is None:
        raise ParameterError(f"target {target!r} needs a reference vector")
    ref = np.asarray(reference, dtype=np.float64)
    if ref.shape != (params.config.out_dim,):
        raise DimensionError(f"reference has shape {ref.shape}, embedding dimension is {params.config.out_dim}")
    norm = np.linalg.norm(ref)
    if norm == 0:
        raise InputError("reference vector has zero norm")
    unit = Tensor((ref / norm)[:, None])
    if target == "cosine":
        return lambda x: nx.reshape(nx.matmul(nx.l2_normalize_rows(expression_forward(x, params))[0], unit), (-1,))
    if target == "projection":
        return lambda x: nx.reshape(nx.matmul(expression_forward(x, params), unit), (-1,))
    raise ParameterError(f"unknown attribution target {target!r}")


def integrated_gradients(ckpt, t, baseline=None, steps: int = 128, target: str = "cosine",
                         reference=None, gene_ids: Sequence[str] | None = None) -> AttributionVector:
    """Gene attributions for the expression encoder of ``ckpt``.

    ``baseline`` defaults to zeros (no change from control). Without a
    ``reference`` the projection target uses the direction of φ(t).
    """
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (ckpt.expr_mlp.config.n_genes,):
        raise DimensionError(f"profile has {t.shape[-1]} genes, encoder expects {ckpt.expr_mlp.config.n_genes}")
    baseline = np.zeros_like(t) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if reference is None:
        if target == "cosine":
            raise ParameterError("cosine target needs a reference slide embedding")
        reference = expression_forward(t, ckpt.expr_mlp.astype(np.float64, requires_grad=False)).data
    attr = integrated_gradients_fn(expression_target(ckpt.expr_mlp, target, reference), t, baseline, steps, target)
    attr.gene_ids = list(gene_ids) if gene_ids is not None else None
    return attr


def top_gene_frequency(attributions: Sequence[AttributionVector], k: int,
                       gene_ids: Sequence[str] | None = None) -> list[tuple[str, float]]:
    """Percentage of samples in which each gene is among the top-k by |score|."""
    if not attributions:
        raise InputError("need at least one attribution vector")
    ids = list(gene_ids) if gene_ids is not None else attributions[0].gene_ids
    n_genes = attributions[0].scores.shape[0]
    if ids is None:
        ids = [str(j) for j in range(n_genes)]
    if len(ids) != n_genes:
        raise InputError(f"{len(ids)} gene ids for {n_genes} scores")
    if not 1 <= k <= n_genes:
        raise ParameterError(f"k must be in [1, {n_genes}], got {k}")
    counts = np.zeros(n_genes, dtype=np.int64)
    for a in attributions:
        if a.scores.shape[0] != n_genes or (a.gene_ids is not None and list(a.gene_ids) != ids):
            raise InputError("attribution vectors cover different gene sets")
        order = np.lexsort((np.arange(n_genes), -np.abs(a.scores)))
        counts[order[:k]] += 1
    pct = 100.0 * counts / len(attributions)
    table = [(ids[j], float(pct[j])) for j in range(n_genes)]
    table.sort(key=lambda row: (-row[1], row[0]))
    return table


def write_frequency_table(path, table: Sequence[tuple[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gene_id", "percent"])
        for gene, pct in table:
            w.writerow([gene, repr(pct)])


def write_rank_report(path, report: RankReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "index", "value"])
        w.writerow(["smooth_rank", "", repr(report.smooth_rank)])
        w.writerow(["n", "", report.n])
        w.writerow(["d", "", report.d])
        for i, s in enumerate(report.singular_values):
            w.writerow(["singular_value", i, repr(float(s))])


# ---------------------------------------------------------------- attention export

def attention_percentiles(attention) -> np.ndarray:
    """100 × fraction of patches whose attention is <= each patch's attention."""
    a = np.asarray(attention, dtype=np.float64)
    sorted_a = np.sort(a)
    return 100.0 * np.searchsorted(sorted_a, a, side="right") / a.size


def export_attention(slide_id: str, coords, attention, path) -> np.ndarray:
    """Write ``x,y,attention,attention_percentile`` rows for one slide."""
    coords = np.asarray(coords, dtype=np.float64)
    a = np.asarray(attention, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] != a.shape[0]:
        raise DimensionError(f"slide {slide_id}: {coords.shape[0]} coordinates for {a.shape[0]} attention weights")
    pct = attention_percentiles(a)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "attention", "attention_percentile"])
        for (x, y), av, pv in zip(coords, a, pct):
            w.writerow([repr(float(np.float32(x))), repr(float(np.float32(y))),
                        repr(float(np.float32(av))), repr(float(pv))])
    return pct


def read_attention_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["x", "y", "attention", "attention_percentile"]:
            raise InputError(f"unexpected attention CSV header {header}")
        return np.array([[float(v) for v in row] for row in reader])
