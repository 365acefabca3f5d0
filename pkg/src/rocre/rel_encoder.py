"""Relation description encoder and the catalog retrieval index."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .dataio import RelationCatalog, Vocab, tokenize
from .numcore import ConfigError, ParamSet, Tensor, UsageError


@dataclass(frozen=True)
class RelEncoderConfig:
    num_layers: int = 2
    num_heads: int = 4
    ffn_width: int = 128
    max_desc_len: int = 48
    ffn_activation: str = "gelu"
    pool_exclude: tuple[str, ...] = ()

    def validate(self, hidden: int) -> None:
        if self.num_layers < 0:
            raise ConfigError("num_layers must be non-negative")
        if hidden % self.num_heads:
            raise ConfigError(f"hidden {hidden} not divisible by {self.num_heads} relation-encoder heads")
        nc.activation(self.ffn_activation)


@dataclass(frozen=True)
class RelationEmbedding:
    label: str
    h_r: np.ndarray
    description_len: int


@dataclass(frozen=True)
class CatalogMatrix:
    rows: np.ndarray
    labels: tuple[str, ...]
    catalog_version: str


def init_rel_params(params: ParamSet, cfg: RelEncoderConfig, hidden: int, vocab_size: int, rng: np.random.Generator, dtype=np.float64) -> None:
    params.add("rel.tok_emb", nc.trunc_normal(rng, (vocab_size, hidden), dtype=dtype))
    params.add("rel.pos_emb", nc.trunc_normal(rng, (cfg.max_desc_len, hidden), dtype=dtype))
    for i in range(cfg.num_layers):
        nc.init_layer(params, f"rel.layer{i}", rng, hidden, cfg.ffn_width, dtype)
    if cfg.num_layers > 0:
        params.add("rel.ln_g", np.ones((1, hidden), dtype=dtype))
        params.add("rel.ln_b", np.zeros((1, hidden), dtype=dtype))


def description_ids(description: str, vocab: Vocab, cfg: RelEncoderConfig) -> list[int]:
    toks = tokenize(description)[: cfg.max_desc_len]
    if not toks:
        raise UsageError("relation description has no tokens")
    return vocab.encode(toks)


def encode_descriptions(
    id_lists: list[list[int]],
    params: ParamSet,
    cfg: RelEncoderConfig,
    vocab: Vocab | None = None,
) -> Tensor:
    """Mean-pooled encodings, one row per description."""
    n = len(id_lists)
    length = max(len(x) for x in id_lists)
    pad_id = vocab.pad_id if vocab is not None else 0
    ids = np.full((n, length), pad_id, dtype=np.int64)
    mask = np.zeros((n, length), dtype=bool)
    for i, x in enumerate(id_lists):
        ids[i, : len(x)] = x
        mask[i, : len(x)] = True
    x = nc.embedding(params["rel.tok_emb"], ids) + params["rel.pos_emb"][:length]
    for i in range(cfg.num_layers):
        x = nc.encoder_layer(x, params.scope(f"rel.layer{i}"), cfg.num_heads, mask, cfg.ffn_activation)
    if cfg.num_layers > 0:
        x = nc.layer_norm(x, params["rel.ln_g"], params["rel.ln_b"])
    pool = mask
    if cfg.pool_exclude and vocab is not None:
        excluded = np.isin(ids, [vocab.id(t) for t in cfg.pool_exclude])
        pool = mask & ~excluded
    return nc.masked_mean(x, pool, axis=1)


def encode_relation(
    description: str,
    params: ParamSet,
    cfg: RelEncoderConfig,
    vocab: Vocab,
    label: str = "",
) -> RelationEmbedding:
    ids = description_ids(description, vocab, cfg)
    with nc.no_grad():
        h = encode_descriptions([ids], params, cfg, vocab)
    return RelationEmbedding(label, h.data[0].copy(), len(ids))


def catalog_version(catalog: RelationCatalog, params: ParamSet) -> str:
    """Hash of labels, descriptions and relation-encoder weights."""
    h = hashlib.sha256()
    for e in catalog.entries:
        h.update(e.label.encode())
        h.update(b"\0")
        h.update(e.description.encode())
        h.update(b"\0")
    for name, t in params.items():
        if name.startswith("rel."):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def encode_catalog(catalog: RelationCatalog, params: ParamSet, cfg: RelEncoderConfig, vocab: Vocab) -> CatalogMatrix:
    ids = [description_ids(e.description, vocab, cfg) for e in catalog.entries]
    with nc.no_grad():
        rows = encode_descriptions(ids, params, cfg, vocab).data.copy()
    rows.setflags(write=False)
    return CatalogMatrix(rows, tuple(catalog.labels), catalog_version(catalog, params))
