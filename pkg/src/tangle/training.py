"""Slide/expression pretraining loop, optimizer, LR schedule and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .dataio import PairDataset, PatchEmbeddingSet, _atomic_write
from .encoders import (TRAIN, AbmilConfig, AbmilParams, ExpressionConfig, ExpressionMlpParams,
                       ReconConfig, ReconHeadParams, abmil_forward_bags, expression_forward, recon_forward)
from .errors import ConfigurationError, FormatError, InputError, TrainingError
from .objectives import BatchEmbeddings, LossConfig, combined_loss

log = logging.getLogger(__name__)

CKPT_MAGIC = b"TNGL"
CKPT_VERSION = 1
LOSS_LOG_COLUMNS = ("epoch", "step", "lr", "loss_total", "loss_symcl", "loss_rec", "loss_intra")

# rng stream namespaces; every random draw is keyed (seed, namespace, ...)
_RNG_SHUFFLE, _RNG_PATCHES, _RNG_DROPOUT = 1, 2, 3


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 50
    warmup_epochs: int = 5
    lr_start: float = 1e-8
    lr_peak: float = 1e-4
    lr_final: float = 1e-8
    patches_per_slide: int = 4096
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    embed_dim: int = 768
    abmil_hidden: int = 768
    attn_hidden: int = 512
    dropout: float = 0.1
    attn_dropout: float = 0.25
    expr_hidden: int = 512
    recon_hidden: int = 256
    recon_layers: int = 2

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.batch_size < 1 or self.patches_per_slide < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size, patches_per_slide and epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.seed < 0:
            raise ConfigurationError("seed must be an unsigned integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class ModelCheckpoint:
    abmil: AbmilParams
    expr_mlp: ExpressionMlpParams
    recon_head: ReconHeadParams | None
    config: TrainConfig
    seed: int
    step: int
    format_version: int = CKPT_VERSION

    @property
    def embed_dim(self) -> int:
        return self.abmil.config.out_dim


# ---------------------------------------------------------------- sampling / schedule

def sample_patch_indices(n_available: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if n_available < 1:
        raise InputError("cannot sample patches from an empty slide")
    if n < 1:
        raise ConfigurationError(f"number of patches to sample must be >= 1, got {n}")
    if n_available >= n:
        return rng.choice(n_available, size=n, replace=False)
    extra = rng.integers(0, n_available, size=n - n_available)
    return rng.permutation(np.concatenate([np.arange(n_available), extra]))


def sample_patches(H, n: int, rng_key: Sequence[int]):
    """Exactly ``n`` rows: a random subset, or every row plus resampled extras when
    the slide is smaller than ``n``. Row order is shuffled."""
    pes = H if isinstance(H, PatchEmbeddingSet) else None
    data = pes.embeddings if pes is not None else np.asarray(H)
    idx = sample_patch_indices(data.shape[0], n, nx.rng_stream(*rng_key))
    if pes is None:
        return data[idx]
    coords = None if pes.coords is None else pes.coords[idx]
    return PatchEmbeddingSet(pes.embeddings[idx], coords, pes.slide_id)


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup to ``lr_peak`` then cosine decay that lands on ``lr_final``
    at the last optimizer step (index ``epochs * steps_per_epoch - 1``)."""
    warmup = cfg.warmup_epochs * steps_per_epoch
    last = cfg.epochs * steps_per_epoch - 1
    if step <= warmup:
        if warmup == 0:
            return cfg.lr_peak
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * step / warmup
    if last <= warmup:
        return cfg.lr_final
    progress = min(1.0, (step - warmup) / (last - warmup))
    return cfg.lr_final + 0.5 * (cfg.lr_peak - cfg.lr_final) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- optimizer

def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float, cfg: TrainConfig) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update with decoupled weight decay (in place)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise TrainingError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if cfg.weight_decay:
            p *= p.dtype.type(1.0 - lr * cfg.weight_decay)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------- model construction

def build_models(cfg: TrainConfig, patch_dim: int, n_genes: int, dtype=np.float32):
    abmil = AbmilParams.init(AbmilConfig(patch_dim, cfg.abmil_hidden, cfg.attn_hidden, cfg.embed_dim,
                                         cfg.dropout, cfg.attn_dropout), seed=cfg.seed, dtype=dtype)
    expr = ExpressionMlpParams.init(ExpressionConfig(n_genes, cfg.expr_hidden, cfg.embed_dim),
                                    seed=cfg.seed, dtype=dtype)
    recon = None
    if cfg.loss.weights["rec"] > 0:
        recon = ReconHeadParams.init(ReconConfig(cfg.embed_dim, n_genes, cfg.recon_hidden, cfg.recon_layers),
                                     seed=cfg.seed, dtype=dtype)
    return abmil, expr, recon


def _validate(dataset: PairDataset, cfg: TrainConfig) -> None:
    w = cfg.loss.weights
    if (w["symcl"] > 0 or w["rec"] > 0) and dataset.expression is None:
        raise ConfigurationError("symcl/rec objectives need an expression profile for every record")
    if cfg.batch_size < 2 and ((w["symcl"] > 0 and cfg.loss.distance_variant == "symcl") or w["intra"] > 0):
        raise ConfigurationError("contrastive objectives need batch_size >= 2 (a single pair gives a constant loss)")
    if len(dataset) < cfg.batch_size:
        raise ConfigurationError(f"dataset has {len(dataset)} records, fewer than one batch of {cfg.batch_size}")


def pretrain(dataset: PairDataset, cfg: TrainConfig,
             on_step: Callable[[dict], None] | None = None) -> tuple[ModelCheckpoint, list[dict]]:
    """Train the slide encoder (and expression/reconstruction heads) on ``dataset``.

    Returns the checkpoint and one loss-log row per optimizer step.
    """
    _validate(dataset, cfg)
    n = len(dataset)
    abmil, expr, recon = build_models(cfg, dataset.patch_dim, max(dataset.n_genes, 1))
    w = cfg.loss.weights
    trainable: dict[str, nx.Tensor] = {f"abmil/{k}": t for k, t in abmil.tensors.items()}
    if w["symcl"] > 0:
        trainable.update({f"expr/{k}": t for k, t in expr.tensors.items()})
    if recon is not None:
        trainable.update({f"recon/{k}": t for k, t in recon.tensors.items()})
    values = {k: t.data for k, t in trainable.items()}
    state = OptimizerState()
    spe = n // cfg.batch_size
    dropped = n - spe * cfg.batch_size
    if dropped:
        log.info("dropping the last incomplete batch (%d records) every epoch", dropped)
    expression = None if dataset.expression is None else dataset.expression.astype(np.float32)
    mean_patches = [p.embeddings.mean(axis=0, keepdims=True) for p in dataset.patches] if w["intra"] > 0 else None
    rows: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = nx.rng_stream(cfg.seed, _RNG_SHUFFLE, epoch).permutation(n)
        for b in range(spe):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = lr_at(step, cfg, spe)
            nx.zero_grad(trainable.values())

            def view(v):
                return [sample_patches(dataset.patches[i].embeddings, cfg.patches_per_slide,
                                       (cfg.seed, _RNG_PATCHES, epoch, int(i), v)) for i in idx]

            h, _ = abmil_forward_bags(view(0), abmil, TRAIN, (cfg.seed, _RNG_DROPOUT, epoch, b, 0))
            g = expression_forward(expression[idx], expr) if w["symcl"] > 0 else None
            h2 = hbar = None
            if w["intra"] > 0:
                if cfg.loss.intra_variant in ("both", "local_local"):
                    h2, _ = abmil_forward_bags(view(1), abmil, TRAIN, (cfg.seed, _RNG_DROPOUT, epoch, b, 1))
                if cfg.loss.intra_variant in ("both", "local_global"):
                    hbar, _ = abmil_forward_bags([mean_patches[i] for i in idx], abmil, TRAIN,
                                                 (cfg.seed, _RNG_DROPOUT, epoch, b, 2))
            targets = preds = None
            if recon is not None:
                targets = expression[idx]
                preds = recon_forward(h, recon)
            batch = BatchEmbeddings(h, g, h2, hbar)
            loss, report = combined_loss(batch, targets, preds, cfg.loss)
            if not math.isfinite(report["total"]):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            nx.backward(loss)
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in trainable.items()}
            adamw_step(values, grads, state, lr, cfg)
            row = {"epoch": epoch, "step": step, "lr": lr, "loss_total": report["total"],
                   "loss_symcl": report["symcl"], "loss_rec": report["rec"], "loss_intra": report["intra"]}
            rows.append(row)
            if on_step is not None:
                on_step(row)
            step += 1
        log.debug("epoch %d mean loss %.6f", epoch, epoch_means(rows).get(epoch, float("nan")))
    for t in trainable.values():
        t.grad = None
    return ModelCheckpoint(abmil, expr, recon, cfg, cfg.seed, step), rows


def epoch_means(rows: Sequence[dict]) -> dict[int, float]:
    sums: dict[int, list[float]] = {}
    for r in rows:
        sums.setdefault(r["epoch"], []).append(r["loss_total"])
    return {e: float(np.mean(v)) for e, v in sums.items()}


def write_loss_log(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_LOG_COLUMNS)
        for r in rows:
            writer.writerow([r["epoch"], r["step"], repr(float(r["lr"]))]
                            + [repr(float(r[c])) for c in LOSS_LOG_COLUMNS[3:]])


# ---------------------------------------------------------------- checkpoints

def _named_params(ckpt: ModelCheckpoint):
    groups = [("abmil", ckpt.abmil), ("expr", ckpt.expr_mlp)]
    if ckpt.recon_head is not None:
        groups.append(("recon", ckpt.recon_head))
    for prefix, ps in groups:
        for name, t in ps.tensors.items():
            yield f"{prefix}/{name}", t.data


def checkpoint_bytes(ckpt: ModelCheckpoint) -> bytes:
    meta = {
        "train_config": ckpt.config.to_dict(),
        "abmil_config": asdict(ckpt.abmil.config),
        "expr_config": asdict(ckpt.expr_mlp.config),
        "recon_config": None if ckpt.recon_head is None else asdict(ckpt.recon_head.config),
        "seed": ckpt.seed,
        "step": ckpt.step,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    named = list(_named_params(ckpt))
    out = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(blob)), blob, struct.pack("<I", len(named))]
    for name, arr in named:
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    _atomic_write(path, checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def parse_checkpoint(buf: bytes) -> ModelCheckpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic, expected {CKPT_MAGIC!r}", offset=0)
    (version,) = r.unpack("<H", "version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (this build reads {CKPT_VERSION})", offset=4)
    (blob_len,) = r.unpack("<I", "config length")
    blob_at = r.pos
    try:
        meta = json.loads(r.take(blob_len, "config blob").decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("config blob is not valid JSON", offset=blob_at) from None
    (count,) = r.unpack("<I", "tensor count")
    arrays: dict[str, dict[str, np.ndarray]] = {"abmil": {}, "expr": {}, "recon": {}}
    for _ in range(count):
        at = r.pos
        (name_len,) = r.unpack("<I", "name length")
        name = r.take(name_len, "tensor name").decode()
        (rank,) = r.unpack("<I", "rank")
        dims = r.unpack(f"<{rank}I", "dims") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * size, f"payload of {name}")
        prefix, _, short = name.partition("/")
        if prefix not in arrays:
            raise FormatError(f"unknown tensor group in {name!r}", offset=at)
        arrays[prefix][short] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last tensor", offset=r.pos)
    cfg = TrainConfig.from_dict(meta["train_config"])
    abmil = AbmilParams.from_arrays(AbmilConfig(**meta["abmil_config"]), arrays["abmil"])
    expr = ExpressionMlpParams.from_arrays(ExpressionConfig(**meta["expr_config"]), arrays["expr"])
    recon = None
    if meta["recon_config"] is not None:
        recon = ReconHeadParams.from_arrays(ReconConfig(**meta["recon_config"]), arrays["recon"])
    return ModelCheckpoint(abmil, expr, recon, cfg, int(meta["seed"]), int(meta["step"]), version)


def load_checkpoint(path) -> ModelCheckpoint:
    return parse_checkpoint(Path(path).read_bytes())
