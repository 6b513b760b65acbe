"""End-to-end next-item recommender: item embeddings, a selectable encoder
stack and a dot-product scoring head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .baselines import (
    AttentionParams,
    GruParams,
    attention_block_forward,
    gru_forward,
    init_attention_params,
    init_gru_params,
    linear_attention_forward,
)
from .errors import ConfigError, DataError, ShapeError
from .numerics import ops
from .numerics.rng import derive_seed, make_rng, xavier_normal_init
from .numerics.tensor import Tensor, parameter
from .ssm import MODES, SsmBlockParams, init_ssm_params, mamba_block_forward

PAD = 0
ENCODERS = ("ssm", "attention", "gru", "linear_attention")
_ALIASES = {"linear": "linear_attention", "mamba": "ssm", "sasrec": "attention", "gru4rec": "gru"}
DTYPES = {"float32": np.float32, "float64": np.float64}


def canonical_encoder(kind: str) -> str:
    kind = _ALIASES.get(kind, kind)
    if kind not in ENCODERS:
        raise ConfigError(f"unknown encoder kind {kind!r}; expected one of {ENCODERS}")
    return kind


@dataclass
class ModelConfig:
    encoder: str = "ssm"
    max_len: int = 2048
    d_model: int = 50
    vocab_size: int = 2  # item count + 1; id 0 is padding
    layers: int = 2
    d_state: int = 16
    conv_width: int = 4
    expand: int = 2
    heads: int = 1
    d_ff: int = 0  # 0 means d_model
    scan_mode: str = "parallel"
    scan_chunk: int = 256
    gru_bias: bool = False
    tie_output_embeddings: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        self.encoder = canonical_encoder(self.encoder)
        if self.max_len < 2:
            raise ConfigError(f"max_len must be >= 2, got {self.max_len}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_model < 1 or self.layers < 1:
            raise ConfigError("d_model and layers must be positive")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.scan_mode not in MODES:
            raise ConfigError(f"scan_mode must be one of {MODES}, got {self.scan_mode!r}")
        if self.encoder in ("attention", "linear_attention") and self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**values)


def pad_truncate(seq, L: int, vocab_size: int | None = None) -> np.ndarray:
    """Keep the most recent ``L`` ids, left-padding with 0 when shorter."""
    seq = np.asarray(seq, dtype=np.int64).reshape(-1)
    if seq.size and (seq.min() < 1 or (vocab_size is not None and seq.max() >= vocab_size)):
        raise DataError(f"item ids must lie in [1, {vocab_size}); got range [{seq.min()}, {seq.max()}]")
    out = np.zeros(L, dtype=np.int64)
    tail = seq[-L:] if seq.size else seq
    if tail.size:
        out[L - tail.size:] = tail
    return out


class SeqRecModel:
    """Parameters plus forward pass for one encoder configuration.

    Every learnable array has exactly one dotted name in
    :meth:`named_parameters`; that census is the checkpoint layout.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        dtype = config.np_dtype
        d, V = config.d_model, config.vocab_size
        rng = make_rng(derive_seed(seed, "model"))
        table = xavier_normal_init(V, d, rng, dtype)
        table[PAD] = 0.0
        self.item_embedding = parameter(table, "item_embedding")
        self.output_embedding = None
        if not config.tie_output_embeddings:
            out = xavier_normal_init(V, d, rng, dtype)
            out[PAD] = 0.0
            self.output_embedding = parameter(out, "output_embedding")

        self.norms: list[Tensor] = []
        self.ssm_blocks: list[SsmBlockParams] = []
        self.gru_blocks: list[GruParams] = []
        self.attention: AttentionParams | None = None
        kind = config.encoder
        if kind == "ssm":
            for i in range(config.layers):
                self.norms.append(parameter(np.ones(d, dtype=dtype)))
                self.ssm_blocks.append(init_ssm_params(
                    d, config.expand, config.d_state, config.conv_width,
                    rng=derive_seed(seed, "ssm", i), dtype=dtype))
        elif kind == "gru":
            for i in range(config.layers):
                self.norms.append(parameter(np.ones(d, dtype=dtype)))
                self.gru_blocks.append(init_gru_params(d, config.gru_bias, rng=derive_seed(seed, "gru", i),
                                                       dtype=dtype))
        else:
            self.attention = init_attention_params(
                d, config.max_len, config.layers, config.heads, config.d_ff or d,
                rng=derive_seed(seed, "attention"), dtype=dtype)
        self.final_gamma = parameter(np.ones(d, dtype=dtype))
        self.final_beta = parameter(np.zeros(d, dtype=dtype)) if self._uses_layer_norm else None

    @property
    def _uses_layer_norm(self) -> bool:
        return self.config.encoder in ("attention", "linear_attention")

    # ------------------------------------------------------------ parameter census

    def named_parameters(self) -> dict[str, Tensor]:
        named = {"item_embedding": self.item_embedding}
        if self.output_embedding is not None:
            named["output_embedding"] = self.output_embedding
        for i, g in enumerate(self.norms):
            named[f"blocks.{i}.norm"] = g
        for i, blk in enumerate(self.ssm_blocks):
            named.update({f"blocks.{i}.ssm.{k}": v for k, v in blk.named().items()})
        for i, blk in enumerate(self.gru_blocks):
            named.update({f"blocks.{i}.gru.{k}": v for k, v in blk.named().items()})
        if self.attention is not None:
            named.update({f"attention.{k}": v for k, v in self.attention.named().items()})
        named["final_norm.gamma"] = self.final_gamma
        if self.final_beta is not None:
            named["final_norm.beta"] = self.final_beta
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = set(named) - set(arrays)
        extra = set(arrays) - set(named)
        if missing or extra:
            raise ShapeError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in named.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data[...] = arr

    def output_table(self) -> Tensor:
        return self.output_embedding if self.output_embedding is not None else self.item_embedding

    # ------------------------------------------------------------ forward

    def encode(self, ids: np.ndarray, final_norm: bool = True) -> Tensor:
        """Hidden states [B, L, d] for padded id batches [B, L]."""
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ShapeError(f"encode expects [batch, L] ids, got shape {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise DataError(f"ids outside [0, {self.config.vocab_size})")
        cfg = self.config
        x = ops.embedding(self.item_embedding, ids)
        pad_mask = ids != PAD
        if cfg.encoder == "ssm":
            for g, blk in zip(self.norms, self.ssm_blocks):
                h = ops.rms_norm(x, g)
                x = ops.add(x, mamba_block_forward(h, blk, mode=cfg.scan_mode, chunk=cfg.scan_chunk))
        elif cfg.encoder == "gru":
            for g, blk in zip(self.norms, self.gru_blocks):
                x = ops.add(x, gru_forward(ops.rms_norm(x, g), blk))
        elif cfg.encoder == "attention":
            x = attention_block_forward(x, self.attention, pad_mask)
        else:
            x = linear_attention_forward(x, self.attention, pad_mask)
        if not final_norm:
            return x
        if self._uses_layer_norm:
            return ops.layer_norm(x, self.final_gamma, self.final_beta)
        return ops.rms_norm(x, self.final_gamma)

    def user_representation(self, ids: np.ndarray) -> Tensor:
        return self.encode(ids)[:, -1]

    def score_items(self, hidden_last: Tensor, candidates: np.ndarray | None = None) -> Tensor:
        """Dot-product scores.

        ``candidates=None`` scores the whole catalogue, returning [B, V-1]
        where column ``j`` is item ``j + 1``. Otherwise ``candidates`` is
        [C] (shared) or [B, C] (per row) and the result is [B, C].
        """
        table = self.output_table()
        if candidates is None:
            items = ops.getitem(table, slice(1, None))
            return ops.matmul(hidden_last, ops.swapaxes(items, 0, 1))
        candidates = np.asarray(candidates)
        if candidates.size and (candidates.min() < 1 or candidates.max() >= self.config.vocab_size):
            raise DataError("candidate ids must lie in [1, vocab_size); 0 is padding")
        emb = ops.embedding(table, candidates)
        if candidates.ndim == 1:
            return ops.matmul(hidden_last, ops.swapaxes(emb, 0, 1))
        return ops.sum(ops.mul(emb, ops.reshape(hidden_last, (hidden_last.shape[0], 1, -1))), axis=-1)

    def score_histories(self, prefixes: np.ndarray, candidates: np.ndarray | None = None) -> np.ndarray:
        """Raw scores for padded prefixes, without recording gradients."""
        return self.score_items(self.user_representation(prefixes), candidates).data
