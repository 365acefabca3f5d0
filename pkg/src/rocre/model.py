"""Parameter container tying the two encoders, the vocab and the catalog together."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .dataio import Instance, RelationCatalog, Vocab
from .numcore import ConfigError, ParamSet, Tensor
from .pair_encoder import EncoderConfig, PairBatch, encode_pair_batch, init_pair_params, mark_instance, prepare_pair_batch
from .rel_encoder import (
    CatalogMatrix,
    RelEncoderConfig,
    catalog_version,
    description_ids,
    encode_catalog,
    encode_descriptions,
    init_rel_params,
)

HEADS = ("retrieval", "classification")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    rel: RelEncoderConfig = field(default_factory=RelEncoderConfig)
    head: str = "retrieval"
    dtype: str = "float64"

    def validate(self) -> None:
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        self.encoder.validate()
        self.rel.validate(self.encoder.hidden)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        rel = dict(d.get("rel", {}))
        if "pool_exclude" in rel:
            rel["pool_exclude"] = tuple(rel["pool_exclude"])
        return cls(
            encoder=EncoderConfig(**d.get("encoder", {})),
            rel=RelEncoderConfig(**rel),
            head=d.get("head", "retrieval"),
            dtype=d.get("dtype", "float64"),
        )


def init_params(config: ModelConfig, vocab_size: int, num_relations: int, seed: int) -> ParamSet:
    """Seeded initialization; the classifier head is drawn last so retrieval
    and classification models share every other initial weight."""
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params = ParamSet()
    init_pair_params(params, config.encoder, vocab_size, rng, dtype)
    init_rel_params(params, config.rel, config.encoder.hidden, vocab_size, rng, dtype)
    if config.head == "classification":
        params.add("cls.W_c", nc.xavier_uniform(rng, (num_relations, config.encoder.hidden), dtype))
        params.add("cls.b_c", np.zeros((1, num_relations), dtype=dtype))
    return params


class RocModel:
    """Frozen-architecture bundle of config, vocab, catalog and parameters."""

    def __init__(self, config: ModelConfig, vocab: Vocab, catalog: RelationCatalog, params: ParamSet):
        config.validate()
        self.config = config
        self.vocab = vocab
        self.catalog = catalog
        self.params = params
        self._desc_ids = [description_ids(e.description, vocab, config.rel) for e in catalog.entries]
        self._marked: dict[int, tuple] = {}

    @classmethod
    def initialize(cls, config: ModelConfig, vocab: Vocab, catalog: RelationCatalog, seed: int) -> "RocModel":
        return cls(config, vocab, catalog, init_params(config, len(vocab), len(catalog), seed))

    @property
    def encoder(self) -> EncoderConfig:
        return self.config.encoder

    def with_params(self, params: ParamSet) -> "RocModel":
        return RocModel(self.config, self.vocab, self.catalog, params)

    # -- pair side --

    def _prepared(self, inst: Instance):
        key = id(inst)
        hit = self._marked.get(key)
        if hit is None or hit[0] is not inst:
            marked = mark_instance(inst, self.vocab, self.encoder)
            vis = inst.visual.patch_vectors if marked.visual_len else None
            hit = (inst, marked, vis)
            self._marked[key] = hit
        return hit[1], hit[2]

    def pair_batch(self, instances: list[Instance]) -> PairBatch:
        prepared = [self._prepared(i) for i in instances]
        return prepare_pair_batch([m for m, _ in prepared], [v for _, v in prepared], self.encoder, self.vocab.pad_id)

    def encode_pairs(self, instances: list[Instance], attn_store: list | None = None) -> Tensor:
        h_e, _ = encode_pair_batch(self.pair_batch(instances), self.params, self.encoder, attn_store)
        return h_e

    # -- relation side --

    def encode_relations(self, indices) -> Tensor:
        """Encodings of catalog entries ``indices`` (each encoded once, then gathered)."""
        indices = np.asarray(indices, dtype=np.int64)
        uniq, inverse = np.unique(indices, return_inverse=True)
        enc = encode_descriptions([self._desc_ids[k] for k in uniq], self.params, self.config.rel, self.vocab)
        return enc[inverse.reshape(-1)]

    def catalog_matrix(self) -> CatalogMatrix:
        return encode_catalog(self.catalog, self.params, self.config.rel, self.vocab)

    def catalog_version(self) -> str:
        return catalog_version(self.catalog, self.params)

    def class_logits(self, h_e: Tensor) -> Tensor:
        return h_e @ self.params["cls.W_c"].T + self.params["cls.b_c"]

    # -- persistence --

    def save(self, path, seed: int, step: int) -> None:
        nc.save_checkpoint(
            path,
            self.params,
            self.config.to_dict(),
            seed,
            step,
            extra={"vocab": self.vocab.to_dict(), "catalog": self.catalog.to_dict()},
        )

    @classmethod
    def load(cls, path) -> tuple["RocModel", dict]:
        params, header = nc.load_checkpoint(path)
        config = ModelConfig.from_dict(header["architecture_config"])
        vocab = Vocab.from_dict(header["extra"]["vocab"])
        catalog = RelationCatalog.from_dict(header["extra"]["catalog"])
        return cls(config, vocab, catalog, params), header
