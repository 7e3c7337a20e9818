"""Pretraining objectives: cross-modal contrastive, reconstruction, intra-slide."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, DimensionError, InputError, ParameterError
from .numerics import Tensor

DISTANCE_VARIANTS = ("symcl", "l1", "l2")
INTRA_VARIANTS = ("both", "local_global", "local_local")
LOSS_TERMS = ("symcl", "rec", "intra")


@dataclass
class LossConfig:
    tau: float = 1.0 / 0.07
    weights: dict = field(default_factory=lambda: {"symcl": 1.0, "rec": 0.0, "intra": 0.0})
    normalize_embeddings: bool = True
    symmetric: bool = True
    distance_variant: str = "symcl"
    intra_variant: str = "both"

    def __post_init__(self):
        unknown = set(self.weights) - set(LOSS_TERMS)
        if unknown:
            raise ConfigurationError(f"unknown loss weights {sorted(unknown)}")
        self.weights = {k: float(self.weights.get(k, 0.0)) for k in LOSS_TERMS}
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if any(w < 0 for w in self.weights.values()) or not any(w > 0 for w in self.weights.values()):
            raise ConfigurationError(f"loss weights must be nonnegative with at least one positive: {self.weights}")
        if self.distance_variant not in DISTANCE_VARIANTS:
            raise ConfigurationError(f"distance_variant must be one of {DISTANCE_VARIANTS}")
        if self.intra_variant not in INTRA_VARIANTS:
            raise ConfigurationError(f"intra_variant must be one of {INTRA_VARIANTS}")


@dataclass
class BatchEmbeddings:
    slide: Tensor
    expression: Tensor | None = None
    slide_view2: Tensor | None = None
    mean_patch: Tensor | None = None

    def __post_init__(self):
        for name in ("slide", "expression", "slide_view2", "mean_patch"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, Tensor):
                setattr(self, name, Tensor(np.asarray(value)))
        m, d = self.slide.shape
        if m < 1:
            raise InputError("batch must contain at least one pair")
        for name in ("expression", "slide_view2", "mean_patch"):
            value = getattr(self, name)
            if value is not None and value.shape != (m, d):
                raise DimensionError(f"{name} has shape {value.shape}, slide embeddings are {(m, d)}")

    @property
    def size(self) -> int:
        return self.slide.shape[0]


def _prep(x: Tensor, cfg: LossConfig) -> Tensor:
    return nx.l2_normalize_rows(x)[0] if cfg.normalize_embeddings else x


def _ce_diag(logits: Tensor, tau: float) -> Tensor:
    """Mean over rows of -log softmax(tau * row) at the diagonal entry."""
    return nx.scale(nx.mean(nx.diag(nx.log_softmax_rows(logits, tau))), -1.0)


def similarity_contrastive(sim: Tensor, sim_t: Tensor, tau: float, symmetric: bool = True) -> Tensor:
    """Contrastive loss from a similarity matrix and its transpose.

    The transpose is passed in (rather than derived) so swapping the two
    modalities reproduces the value bit-for-bit.
    """
    forward = _ce_diag(sim, tau)
    if not symmetric:
        return forward
    return nx.add(nx.scale(forward, 0.5), nx.scale(_ce_diag(sim_t, tau), 0.5))


def symcl_loss(batch: BatchEmbeddings, cfg: LossConfig) -> Tensor:
    """Symmetric slide/expression InfoNCE with in-batch negatives."""
    if batch.expression is None:
        raise InputError("symcl_loss needs expression embeddings")
    h, g = _prep(batch.slide, cfg), _prep(batch.expression, cfg)
    return similarity_contrastive(nx.matmul(h, g.T), nx.matmul(g, h.T), cfg.tau, cfg.symmetric)


def distance_loss(batch: BatchEmbeddings, cfg: LossConfig, variant: str) -> Tensor:
    """Batch mean of per-pair L1 distance or squared L2 distance between h_i and g_i."""
    if batch.expression is None:
        raise InputError("distance loss needs expression embeddings")
    diff = nx.sub(_prep(batch.slide, cfg), _prep(batch.expression, cfg))
    if variant == "l1":
        per = nx.sum_rows(nx.absolute(diff))
    elif variant == "l2":
        per = nx.sum_rows(nx.square(diff))
    else:
        raise ParameterError(f"unknown distance variant {variant!r}")
    return nx.mean(per)


def rec_loss(targets, predictions) -> Tensor:
    """Mean Euclidean (not squared) norm of the per-sample residual."""
    targets = targets if isinstance(targets, Tensor) else Tensor(np.asarray(targets))
    predictions = predictions if isinstance(predictions, Tensor) else Tensor(np.asarray(predictions))
    if targets.shape != predictions.shape or targets.data.ndim != 2:
        raise DimensionError(f"rec_loss: targets {targets.shape} vs predictions {predictions.shape}")
    if predictions.dtype != targets.dtype:
        targets = Tensor(targets.data.astype(predictions.dtype))
    return nx.mean(nx.norm_rows(nx.sub(targets, predictions)))


def intra_loss(batch: BatchEmbeddings, cfg: LossConfig, variant: str | None = None) -> Tensor:
    """Slide-only contrastive loss between a patch-subset view and the mean patch
    embedding (local-global) and/or a second view (local-local)."""
    variant = variant or cfg.intra_variant
    if variant not in INTRA_VARIANTS:
        raise ParameterError(f"intra variant must be one of {INTRA_VARIANTS}")
    need_global = variant in ("both", "local_global")
    need_local = variant in ("both", "local_local")
    if need_global and batch.mean_patch is None:
        raise InputError("intra loss (local_global) needs mean patch embeddings")
    if need_local and batch.slide_view2 is None:
        raise InputError("intra loss (local_local) needs a second slide view")
    h1 = _prep(batch.slide, cfg)
    terms = []
    if need_global:
        terms.append(_ce_diag(nx.matmul(h1, _prep(batch.mean_patch, cfg).T), cfg.tau))
    if need_local:
        terms.append(_ce_diag(nx.matmul(h1, _prep(batch.slide_view2, cfg).T), cfg.tau))
    if len(terms) == 1:
        return terms[0]
    return nx.add(nx.scale(terms[0], 0.5), nx.scale(terms[1], 0.5))


def combined_loss(batch: BatchEmbeddings, expr_targets, expr_preds, cfg: LossConfig) -> tuple[Tensor, dict]:
    """Weighted sum of the active objectives and a per-term report of their values."""
    w = cfg.weights
    parts: list[Tensor] = []
    report = {k: float("nan") for k in LOSS_TERMS}
    if w["symcl"] > 0:
        if batch.expression is None:
            raise ConfigurationError("symcl weight > 0 but no expression embeddings supplied")
        term = (symcl_loss(batch, cfg) if cfg.distance_variant == "symcl"
                else distance_loss(batch, cfg, cfg.distance_variant))
        report["symcl"] = float(term.data)
        parts.append(nx.scale(term, w["symcl"]))
    if w["rec"] > 0:
        if expr_targets is None or expr_preds is None:
            raise ConfigurationError("rec weight > 0 but targets/predictions missing")
        term = rec_loss(expr_targets, expr_preds)
        report["rec"] = float(term.data)
        parts.append(nx.scale(term, w["rec"]))
    if w["intra"] > 0:
        try:
            term = intra_loss(batch, cfg)
        except InputError as exc:
            raise ConfigurationError(f"intra weight > 0 but {exc}") from exc
        report["intra"] = float(term.data)
        parts.append(nx.scale(term, w["intra"]))
    total = parts[0]
    for p in parts[1:]:
        total = nx.add(total, p)
    report["total"] = float(total.data)
    return total, report
