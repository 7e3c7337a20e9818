"""Patch-embedding and expression file formats, manifests, preprocessing and the
synthetic slide/expression generator."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, InputError, ParameterError, ParseError

EMB_MAGIC = b"TEMB"
EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<4sHBIIB")
DTYPE_F32 = 0


class EmptySlideError(InputError):
    pass


@dataclass
class PatchEmbeddingSet:
    embeddings: np.ndarray  # N_H × d_H float32
    coords: np.ndarray | None = None  # N_H × 2 float32
    slide_id: str | None = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2:
            raise InputError(f"patch embeddings must be a matrix, got shape {self.embeddings.shape}")
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=np.float32)
            if self.coords.shape != (self.embeddings.shape[0], 2):
                raise InputError(f"coords shape {self.coords.shape} does not match {self.embeddings.shape[0]} patches")

    @property
    def n_patches(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class ExpressionProfile:
    gene_ids: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.gene_ids),):
            raise InputError(f"{len(self.gene_ids)} gene ids but values have shape {self.values.shape}")


# ---------------------------------------------------------------- patch embeddings

def write_embeddings(path, embeddings: np.ndarray, coords: np.ndarray | None = None) -> None:
    emb = np.ascontiguousarray(embeddings, dtype="<f4")
    if emb.ndim != 2:
        raise InputError(f"embeddings must be a matrix, got shape {emb.shape}")
    n, dim = emb.shape
    parts = [_EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, DTYPE_F32, n, dim, int(coords is not None)), emb.tobytes()]
    if coords is not None:
        c = np.ascontiguousarray(coords, dtype="<f4")
        if c.shape != (n, 2):
            raise InputError(f"coords must be {n}×2, got {c.shape}")
        parts.append(c.tobytes())
    _atomic_write(path, b"".join(parts))


def parse_embeddings(buf: bytes) -> PatchEmbeddingSet:
    if len(buf) < _EMB_HEADER.size:
        raise FormatError(f"file shorter than the {_EMB_HEADER.size}-byte header", offset=len(buf))
    magic, version, dtype, n, dim, has_coords = _EMB_HEADER.unpack_from(buf, 0)
    if magic != EMB_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {EMB_MAGIC!r}", offset=0)
    if version != EMB_VERSION:
        raise FormatError(f"unsupported embedding file version {version}", offset=4)
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}", offset=6)
    if has_coords not in (0, 1):
        raise FormatError(f"has_coords flag must be 0 or 1, got {has_coords}", offset=15)
    if n == 0:
        raise EmptySlideError("embedding file declares zero patches")
    if dim == 0:
        raise FormatError("embedding dimension is zero", offset=11)
    expected = _EMB_HEADER.size + 4 * n * dim + (8 * n if has_coords else 0)
    if len(buf) != expected:
        raise FormatError(f"declared sizes need {expected} bytes, file has {len(buf)}",
                          offset=min(len(buf), expected))
    off = _EMB_HEADER.size
    emb = np.frombuffer(buf, dtype="<f4", count=n * dim, offset=off).reshape(n, dim).astype(np.float32)
    coords = None
    if has_coords:
        coords = np.frombuffer(buf, dtype="<f4", count=2 * n, offset=off + 4 * n * dim).reshape(n, 2).astype(np.float32)
    return PatchEmbeddingSet(emb, coords)


def load_embeddings(path) -> PatchEmbeddingSet:
    data = Path(path).read_bytes()
    pes = parse_embeddings(data)
    pes.slide_id = Path(path).stem
    return pes


# ---------------------------------------------------------------- expression CSV

def write_expression(path, profile: ExpressionProfile) -> None:
    buf = io.StringIO()
    buf.write("gene_id,value\n")
    for gene, value in zip(profile.gene_ids, profile.values):
        buf.write(f"{gene},{float(value)!r}\n")
    _atomic_write(path, buf.getvalue().encode())


def parse_expression(text: str) -> ExpressionProfile:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty expression file", line=1) from None
    if [h.strip() for h in header] != ["gene_id", "value"]:
        raise ParseError(f"expected header 'gene_id,value', got {','.join(header)!r}", line=1)
    genes: list[str] = []
    values: list[float] = []
    seen: dict[str, int] = {}
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != 2:
            raise ParseError(f"expected 2 fields, got {len(row)}", line=line)
        gene, raw = row[0].strip(), row[1].strip()
        if gene in seen:
            raise ParseError(f"duplicate gene_id {gene!r} (first seen on line {seen[gene]})", line=line)
        try:
            value = float(raw)
        except ValueError:
            raise ParseError(f"non-numeric value {raw!r} for gene {gene!r}", line=line) from None
        seen[gene] = line
        genes.append(gene)
        values.append(value)
    return ExpressionProfile(genes, np.array(values, dtype=np.float64))


def load_expression(path) -> ExpressionProfile:
    return parse_expression(Path(path).read_text())


# ---------------------------------------------------------------- preprocessing

def log2_fold_change(sample, control, pseudo: float = 1.0) -> np.ndarray:
    """log2((sample + pseudo) / (mean(control) + pseudo)) per gene."""
    sample = np.asarray(sample, dtype=np.float64)
    control = np.atleast_2d(np.asarray(control, dtype=np.float64))
    if not pseudo > 0:
        raise ParameterError(f"pseudo-count must be positive, got {pseudo}")
    if control.shape[0] < 1 or control.shape[1] != sample.shape[-1]:
        raise InputError(f"control group shape {control.shape} incompatible with {sample.shape[-1]} genes")
    if np.any(sample < 0) or np.any(control < 0):
        raise InputError("raw expression intensities must be nonnegative")
    return np.log2((sample + pseudo) / (control.mean(axis=0) + pseudo))


def select_top_genes(lfc_matrix, k: int) -> list[int]:
    """Indices of the k genes with the largest mean |log2 fold change|, ties by index."""
    lfc = np.atleast_2d(np.asarray(lfc_matrix, dtype=np.float64))
    n_genes = lfc.shape[1]
    if not 1 <= k <= n_genes:
        raise ParameterError(f"k must be in [1, {n_genes}], got {k}")
    score = np.abs(lfc).mean(axis=0)
    order = np.lexsort((np.arange(n_genes), -score))
    return [int(i) for i in order[:k]]


# ---------------------------------------------------------------- manifest / dataset

@dataclass
class ManifestRecord:
    slide_id: str
    embedding_path: str
    expression_path: str | None = None
    labels: list = field(default_factory=list)
    group_id: str | None = None
    split: str | None = None


def load_manifest(path, check_files: bool = True) -> list[ManifestRecord]:
    """Read a JSON-lines manifest. Relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    records: list[ManifestRecord] = []
    ids: set[str] = set()
    allowed = set(ManifestRecord.__dataclass_fields__)
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from None
        extra = set(obj) - allowed
        if extra or "slide_id" not in obj or "embedding_path" not in obj:
            raise ParseError(f"bad manifest record keys {sorted(obj)}", line=lineno)
        rec = ManifestRecord(**obj)
        if rec.slide_id in ids:
            raise ParseError(f"duplicate slide_id {rec.slide_id!r}", line=lineno)
        ids.add(rec.slide_id)
        rec.embedding_path = str(base / rec.embedding_path)
        if rec.expression_path is not None:
            rec.expression_path = str(base / rec.expression_path)
        if check_files:
            for p in (rec.embedding_path, rec.expression_path):
                if p is not None and not os.path.exists(p):
                    raise InputError(f"line {lineno}: referenced file {p} does not exist")
        records.append(rec)
    return records


def write_manifest(path, records: Iterable[ManifestRecord]) -> None:
    lines = [json.dumps(asdict(r), sort_keys=True) for r in records]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


@dataclass
class PairDataset:
    slide_ids: list[str]
    patches: list[PatchEmbeddingSet]
    expression: np.ndarray | None  # n × N_G, or None when no record has expression
    gene_ids: list[str] | None
    labels: np.ndarray  # n × L
    group_ids: list[str | None]
    splits: list[str | None]

    def __len__(self) -> int:
        return len(self.slide_ids)

    @property
    def patch_dim(self) -> int:
        return self.patches[0].dim

    @property
    def n_genes(self) -> int:
        return 0 if self.expression is None else self.expression.shape[1]

    def subset(self, indices: Sequence[int]) -> "PairDataset":
        idx = list(indices)
        return PairDataset(
            [self.slide_ids[i] for i in idx], [self.patches[i] for i in idx],
            None if self.expression is None else self.expression[idx], self.gene_ids,
            self.labels[idx], [self.group_ids[i] for i in idx], [self.splits[i] for i in idx])

    def split(self, name: str) -> "PairDataset":
        return self.subset([i for i, s in enumerate(self.splits) if s == name])


def load_dataset(manifest_path, split: str | None = None) -> PairDataset:
    records = load_manifest(manifest_path)
    if split is not None:
        records = [r for r in records if r.split == split]
    if not records:
        raise InputError(f"manifest {manifest_path} has no records" + (f" in split {split!r}" if split else ""))
    patches = []
    for r in records:
        p = load_embeddings(r.embedding_path)
        p.slide_id = r.slide_id
        patches.append(p)
    dims = {p.dim for p in patches}
    if len(dims) != 1:
        raise InputError(f"inconsistent patch dimensions across slides: {sorted(dims)}")
    expression = gene_ids = None
    with_expr = [r.expression_path is not None for r in records]
    if all(with_expr):
        profiles = [load_expression(r.expression_path) for r in records]
        gene_ids = profiles[0].gene_ids
        for r, prof in zip(records, profiles):
            if prof.gene_ids != gene_ids:
                raise InputError(f"slide {r.slide_id}: gene list differs from the first record")
        expression = np.stack([p.values for p in profiles])
    elif any(with_expr):
        raise InputError("either every record or none must carry an expression profile")
    n_labels = {len(r.labels) for r in records}
    if len(n_labels) != 1:
        raise InputError(f"inconsistent label vector lengths: {sorted(n_labels)}")
    labels = np.array([r.labels for r in records], dtype=np.float64).reshape(len(records), -1)
    return PairDataset([r.slide_id for r in records], patches, expression, gene_ids, labels,
                       [r.group_id for r in records], [r.split for r in records])


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthConfig:
    """Coupled slide/expression generator.

    Each slide draws a latent ``z = class_anchor + bucket_offset + noise``.
    Foreground patches are a linear image of ``z``; background patches come
    from a class-independent mixture of tissue types whose proportions vary
    per slide, plus a per-slide background shift; a per-slide stain offset
    is added to every patch.  Expression is ``coupling * B z`` plus noise.
    """

    n_slides: int = 400
    n_classes: int = 2
    latent_dim: int = 8
    patch_dim: int = 32
    n_genes: int = 64
    min_patches: int = 96
    max_patches: int = 160
    patch_noise: float = 0.5
    background_noise: float = 1.0
    stain_noise: float = 1.5
    stain_rank: int = 4
    latent_noise: float = 0.3
    expression_noise: float = 0.3
    coupling: float = 1.0
    class_scale: float = 1.5
    bucket_scale: float = 1.0
    n_buckets: int = 10
    background_fraction: float = 0.7
    n_background_types: int = 4
    background_type_scale: float = 3.0
    background_mix_alpha: float = 0.5
    background_shift: float = 0.5
    test_fraction: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_slides < 1 or self.n_classes < 1:
            raise ConfigurationError("n_slides and n_classes must be positive")
        if self.latent_dim > min(self.patch_dim, self.n_genes) or self.latent_dim < self.n_classes:
            raise ConfigurationError("need n_classes <= latent_dim <= min(patch_dim, n_genes)")
        if not 1 <= self.min_patches <= self.max_patches:
            raise ConfigurationError("need 1 <= min_patches <= max_patches")
        for name in ("patch_noise", "background_noise", "stain_noise", "latent_noise", "expression_noise",
                     "coupling", "class_scale", "bucket_scale", "background_shift"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if not 0 <= self.background_fraction < 1:
            raise ConfigurationError("background_fraction must lie in [0, 1)")
        if self.n_background_types < 1 or self.background_type_scale < 0 or not self.background_mix_alpha > 0:
            raise ConfigurationError("invalid background tissue-type settings")
        if not 0 <= self.test_fraction < 1 or self.n_buckets < 1 or self.stain_rank < 1:
            raise ConfigurationError("invalid test_fraction, n_buckets or stain_rank")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown synth config keys {sorted(unknown)}")
        return cls(**d)


def _fmt(x: float) -> str:
    return repr(float(x))


def synth_generate(cfg: SynthConfig, out_dir) -> PairDataset:
    """Write a synthetic (slide, expression) corpus into ``out_dir`` and return it.

    Layout: ``manifest.jsonl``, ``embeddings/<id>.temb``, ``expression/<id>.csv``,
    ``latents.csv`` (true latent per slide) and ``synth_config.json``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    r, dH = cfg.latent_dim, cfg.patch_dim
    q, _ = np.linalg.qr(rng.standard_normal((r, r)))
    anchors = cfg.class_scale * q[:, : cfg.n_classes].T  # classes × r, orthogonal
    buckets = cfg.bucket_scale * rng.standard_normal((cfg.n_buckets, r)) / math.sqrt(r)
    fg_map = rng.standard_normal((dH, r)) / math.sqrt(r)
    fg_marker = 1.5 * rng.standard_normal(dH) / math.sqrt(dH)
    bg_center = 1.5 * rng.standard_normal(dH) / math.sqrt(dH)
    bg_types = bg_center + cfg.background_type_scale * rng.standard_normal((cfg.n_background_types, dH)) / math.sqrt(dH)
    bg_mix = rng.standard_normal((dH, dH)) / math.sqrt(dH)
    stain_basis = rng.standard_normal((dH, cfg.stain_rank)) / math.sqrt(cfg.stain_rank)
    expr_map = rng.standard_normal((cfg.n_genes, r)) / math.sqrt(r)
    gene_ids = [f"G{j:05d}" for j in range(cfg.n_genes)]

    classes = rng.permutation(np.arange(cfg.n_slides) % cfg.n_classes)
    n_test = int(round(cfg.test_fraction * cfg.n_slides))
    out = Path(out_dir)
    (out / "embeddings").mkdir(parents=True, exist_ok=True)
    (out / "expression").mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(cfg.n_slides - 1)))
    records, patches, expressions, latents = [], [], [], []
    for i in range(cfg.n_slides):
        sid = f"S{i:0{width}d}"
        c = int(classes[i])
        b = int(rng.integers(cfg.n_buckets))
        z = anchors[c] + buckets[b] + cfg.latent_noise * rng.standard_normal(r)
        n = int(rng.integers(cfg.min_patches, cfg.max_patches + 1))
        background = rng.random(n) < cfg.background_fraction
        stain = stain_basis @ (cfg.stain_noise * rng.standard_normal(cfg.stain_rank))
        fg = fg_map @ z + fg_marker
        mix = rng.dirichlet(np.full(cfg.n_background_types, cfg.background_mix_alpha))
        tissue = rng.choice(cfg.n_background_types, size=n, p=mix)
        shift = cfg.background_shift * rng.standard_normal(dH)
        bg = bg_types[tissue] + shift + cfg.background_noise * rng.standard_normal((n, dH)) @ bg_mix.T
        H = np.where(background[:, None], bg, fg[None, :])
        H = H + cfg.patch_noise * rng.standard_normal((n, dH)) + stain
        side = int(math.ceil(math.sqrt(n)))
        grid = np.stack([np.arange(n) % side, np.arange(n) // side], axis=1) * 256.0
        t = cfg.coupling * (expr_map @ z) + cfg.expression_noise * rng.standard_normal(cfg.n_genes)
        write_embeddings(out / "embeddings" / f"{sid}.temb", H, grid)
        write_expression(out / "expression" / f"{sid}.csv", ExpressionProfile(gene_ids, t))
        label = [0] * cfg.n_classes
        label[c] = 1
        records.append(ManifestRecord(sid, f"embeddings/{sid}.temb", f"expression/{sid}.csv", label,
                                      f"c{c}_b{b}", "test" if i >= cfg.n_slides - n_test else "train"))
        patches.append(PatchEmbeddingSet(H, grid, sid))
        expressions.append(t)
        latents.append(z)
    write_manifest(out / "manifest.jsonl", records)
    lat_lines = ["slide_id," + ",".join(f"z{k}" for k in range(r))]
    lat_lines += [rec.slide_id + "," + ",".join(_fmt(v) for v in z) for rec, z in zip(records, latents)]
    _atomic_write(out / "latents.csv", ("\n".join(lat_lines) + "\n").encode())
    _atomic_write(out / "synth_config.json", (json.dumps(asdict(cfg), sort_keys=True, indent=2) + "\n").encode())
    return PairDataset([rec.slide_id for rec in records], patches, np.stack(expressions), gene_ids,
                       np.array([rec.labels for rec in records], dtype=np.float64),
                       [rec.group_id for rec in records], [rec.split for rec in records])


def load_latents(path) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            ids.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return ids, np.array(rows)


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
