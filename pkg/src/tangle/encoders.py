"""Gated-attention MIL slide encoder, expression MLP and reconstruction head."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import DimensionError, InputError, ParameterError
from .numerics import Tensor

TRAIN = "train"
INFER = "infer"

# Dropout stream ids within one forward call.
_PRE_DROPOUT_LAYERS = (0, 1)
_ATTN_DROPOUT_LAYER = 2


@dataclass(frozen=True)
class AbmilConfig:
    in_dim: int
    hidden: int = 768
    attn_hidden: int = 512
    out_dim: int = 768
    dropout: float = 0.1
    attn_dropout: float = 0.25
    ln_eps: float = 1e-5


@dataclass(frozen=True)
class ExpressionConfig:
    n_genes: int
    hidden: int = 512
    out_dim: int = 768


@dataclass(frozen=True)
class ReconConfig:
    in_dim: int
    n_genes: int
    hidden: int = 256
    n_layers: int = 2


class ParamSet:
    """Ordered collection of named leaf tensors plus the config that shaped them."""

    config_type: type = object

    def __init__(self, config, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def leaves(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def astype(self, dtype, requires_grad: bool = True):
        return type(self)(self.config, {k: Tensor(t.data.astype(dtype), requires_grad=requires_grad)
                                        for k, t in self.tensors.items()})

    def copy(self):
        return self.astype(self.dtype, requires_grad=True)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    @classmethod
    def from_arrays(cls, config, arrays: dict[str, np.ndarray], requires_grad: bool = True):
        return cls(config, {k: Tensor(np.array(v), requires_grad=requires_grad) for k, v in arrays.items()})

    def config_dict(self) -> dict:
        return asdict(self.config)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())


def _uniform(rng: np.random.Generator, fan_in: int, shape, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _linear(rng, tensors, name, n_in, n_out, dtype, bias=True):
    tensors[f"{name}.weight"] = _uniform(rng, n_in, (n_in, n_out), dtype)
    if bias:
        tensors[f"{name}.bias"] = _uniform(rng, n_in, (n_out,), dtype)


def _affine(x: Tensor, params: ParamSet, name: str) -> Tensor:
    out = nx.matmul(x, params[f"{name}.weight"])
    bias = params.tensors.get(f"{name}.bias")
    return out if bias is None else nx.add(out, bias)


class AbmilParams(ParamSet):
    config_type = AbmilConfig

    @classmethod
    def init(cls, config: AbmilConfig, seed: int = 0, dtype=np.float32) -> "AbmilParams":
        rng = nx.rng_stream(seed, 101)
        t: dict[str, Tensor] = {}
        widths = [config.in_dim, config.hidden, config.hidden]
        for i in range(2):
            _linear(rng, t, f"pre.{i}", widths[i], widths[i + 1], dtype)
            t[f"pre.{i}.ln_gamma"] = Tensor(np.ones(config.hidden, dtype), requires_grad=True)
            t[f"pre.{i}.ln_beta"] = Tensor(np.zeros(config.hidden, dtype), requires_grad=True)
        _linear(rng, t, "gate_v", config.hidden, config.attn_hidden, dtype)
        _linear(rng, t, "gate_u", config.hidden, config.attn_hidden, dtype)
        # softmax is shift invariant, so a score bias would be a dead parameter
        _linear(rng, t, "attention_w", config.attn_hidden, 1, dtype, bias=False)
        _linear(rng, t, "post", config.hidden, config.out_dim, dtype)
        return cls(config, t)


def abmil_param_count(in_dim: int, hidden: int = 768, attn_hidden: int = 512, out_dim: int = 768) -> int:
    """Closed-form parameter count of :class:`AbmilParams`."""
    pre = (in_dim * hidden + hidden) + (hidden * hidden + hidden) + 2 * (2 * hidden)
    gates = 2 * (hidden * attn_hidden + attn_hidden)
    return pre + gates + attn_hidden + (hidden * out_dim + out_dim)


class ExpressionMlpParams(ParamSet):
    config_type = ExpressionConfig

    @classmethod
    def init(cls, config: ExpressionConfig, seed: int = 0, dtype=np.float32) -> "ExpressionMlpParams":
        rng = nx.rng_stream(seed, 202)
        t: dict[str, Tensor] = {}
        widths = [config.n_genes, config.hidden, config.hidden, config.out_dim]
        for i in range(3):
            _linear(rng, t, f"layer.{i}", widths[i], widths[i + 1], dtype)
        return cls(config, t)


class ReconHeadParams(ParamSet):
    config_type = ReconConfig

    @classmethod
    def init(cls, config: ReconConfig, seed: int = 0, dtype=np.float32) -> "ReconHeadParams":
        if config.n_layers < 1:
            raise ParameterError("reconstruction head needs at least one layer")
        rng = nx.rng_stream(seed, 303)
        widths = [config.in_dim] + [config.hidden] * (config.n_layers - 1) + [config.n_genes]
        t: dict[str, Tensor] = {}
        for i in range(config.n_layers):
            _linear(rng, t, f"layer.{i}", widths[i], widths[i + 1], dtype)
        return cls(config, t)


# ---------------------------------------------------------------- slide encoder

def _bag_starts(sizes: Sequence[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)


def canonical_order(H: np.ndarray) -> np.ndarray:
    """Row permutation sorting patches lexicographically by their values."""
    return np.lexsort(H.T[::-1])


def abmil_forward_bags(bags: Sequence[np.ndarray | Tensor], params: AbmilParams, mode: str = INFER,
                       rng_key: Sequence[int] | None = None) -> tuple[Tensor, Tensor]:
    """Encode several bags in one graph.

    Returns the ``bags × d`` slide embeddings and the flat attention vector
    (bag-major, in the row order given).
    """
    if mode not in (TRAIN, INFER):
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
    cfg = params.config
    sizes = []
    for b in bags:
        shape = b.shape
        if len(shape) != 2 or shape[0] < 1:
            raise InputError(f"patch set must be a non-empty N×d matrix, got shape {shape}")
        if shape[1] != cfg.in_dim:
            raise DimensionError(f"patch dimension {shape[1]} does not match encoder input {cfg.in_dim}")
        sizes.append(shape[0])
    if all(isinstance(b, Tensor) for b in bags) and len(bags) == 1:
        x = bags[0]
    else:
        x = Tensor(np.concatenate([b.data if isinstance(b, Tensor) else np.asarray(b) for b in bags])
                   .astype(params.dtype, copy=False))
    starts = _bag_starts(sizes)

    training = mode == TRAIN
    if training and rng_key is None:
        raise ParameterError("train mode needs an rng_key")

    def rng(layer):
        return nx.rng_stream(*rng_key, layer) if training else None

    z = x
    for i in _PRE_DROPOUT_LAYERS:
        z = _affine(z, params, f"pre.{i}")
        z = nx.layer_norm(z, params[f"pre.{i}.ln_gamma"], params[f"pre.{i}.ln_beta"], cfg.ln_eps)
        z = nx.gelu(z)
        z = nx.dropout(z, cfg.dropout, rng(i))
    gated = nx.mul(nx.tanh(_affine(z, params, "gate_v")), nx.sigmoid(_affine(z, params, "gate_u")))
    gated = nx.dropout(gated, cfg.attn_dropout, rng(_ATTN_DROPOUT_LAYER))
    scores = nx.reshape(_affine(gated, params, "attention_w"), (-1,))
    attention = nx.segment_softmax(scores, starts)
    pooled = nx.segment_weighted_sum(attention, z, starts)
    return _affine(pooled, params, "post"), attention


def abmil_forward(H: np.ndarray | Tensor, params: AbmilParams, mode: str = INFER,
                  rng_key: Sequence[int] | None = None) -> tuple[Tensor, np.ndarray]:
    """Slide embedding ``h`` (length d) and attention weights for one patch set.

    In infer mode the patches are processed in a canonical order so the
    result is bitwise independent of the input row order; the attention
    vector is returned in the caller's order.
    """
    data = H.data if isinstance(H, Tensor) else np.asarray(H)
    if data.ndim != 2 or data.shape[0] == 0:
        raise InputError(f"patch set must be a non-empty N×d matrix, got shape {data.shape}")
    order = None
    if mode == INFER and not isinstance(H, Tensor):
        order = canonical_order(data)
        H = data[order]
    h, attention = abmil_forward_bags([H], params, mode, rng_key)
    a = attention.data
    if order is not None:
        restored = np.empty_like(a)
        restored[order] = a
        a = restored
    return nx.reshape(h, (-1,)), a


# ---------------------------------------------------------------- MLP encoders

def _mlp(x: Tensor, params: ParamSet, n_layers: int) -> Tensor:
    for i in range(n_layers):
        x = _affine(x, params, f"layer.{i}")
        if i < n_layers - 1:
            x = nx.gelu(x)
    return x


def _as_matrix(t, dtype) -> tuple[Tensor, bool]:
    if not isinstance(t, Tensor):
        t = Tensor(np.asarray(t, dtype=dtype))
    if t.data.ndim == 1:
        return nx.reshape(t, (1, -1)), True
    return t, False


def expression_forward(t, params: ExpressionMlpParams) -> Tensor:
    """Expression embedding for one profile (vector) or a batch (rows)."""
    x, single = _as_matrix(t, params.dtype)
    if x.shape[1] != params.config.n_genes:
        raise DimensionError(f"expression has {x.shape[1]} genes, encoder expects {params.config.n_genes}")
    out = _mlp(x, params, 3)
    return nx.reshape(out, (-1,)) if single else out


def recon_forward(h, params: ReconHeadParams) -> Tensor:
    """Predicted expression profile(s) from slide embedding(s)."""
    x, single = _as_matrix(h, params.dtype)
    if x.shape[1] != params.config.in_dim:
        raise DimensionError(f"embedding has dimension {x.shape[1]}, head expects {params.config.in_dim}")
    out = _mlp(x, params, params.config.n_layers)
    return nx.reshape(out, (-1,)) if single else out
