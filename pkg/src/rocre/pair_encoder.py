"""Type-aware multimodal entity-pair encoder.

Marked text ids are embedded, visual patches are linearly adapted, the two
segments are concatenated per instance and run through pre-norm fusion
layers; the rows at the subject/object opening markers are fused into a
single pair vector by one dense layer with a nonlinearity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .dataio import Instance, MarkedSequence, PromptConfig, VisualFeatures, Vocab, inject_type_prompts
from .numcore import ConfigError, ParamSet, Tensor, UsageError


@dataclass(frozen=True)
class EncoderConfig:
    hidden: int = 64
    num_fusion_layers: int = 2
    num_heads: int = 4
    ffn_width: int = 128
    max_text_len: int = 48
    visual_dim: int = 16
    max_patches: int = 16
    use_visual: bool = True
    use_fusion_encoder: bool = True
    use_types: bool = True
    use_positions: bool = True
    activation_sigma: str = "tanh"
    ffn_activation: str = "gelu"
    text_layers: int = 0
    retain_attention: bool = False

    def validate(self) -> None:
        if self.hidden <= 0 or self.hidden % self.num_heads:
            raise ConfigError(f"hidden {self.hidden} must be a positive multiple of num_heads {self.num_heads}")
        if self.num_fusion_layers < 0 or self.text_layers < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.max_text_len < 2:
            raise ConfigError("max_text_len must leave room for CLS and markers")
        nc.activation(self.activation_sigma)
        nc.activation(self.ffn_activation)

    @property
    def prompt(self) -> PromptConfig:
        return PromptConfig(self.use_types, self.use_positions, self.max_text_len)

    @property
    def fusion_active(self) -> bool:
        return self.use_fusion_encoder and self.num_fusion_layers > 0


@dataclass
class PairEmbedding:
    h_e: np.ndarray
    h_s: np.ndarray
    h_o: np.ndarray
    attention_maps: list[np.ndarray] | None = None
    marked: MarkedSequence | None = None


@dataclass
class PairBatch:
    """Padded arrays for B instances; positions index the fused sequence."""

    token_ids: np.ndarray  # (B, Lt) int
    text_mask: np.ndarray  # (B, Lt) bool
    visual: np.ndarray  # (B, P, D_v)
    source_index: np.ndarray  # (B, L) rows of [text_pad; visual_pad] per fused slot
    pad_mask: np.ndarray  # (B, L) bool, True at real rows
    s_idx: np.ndarray  # (B,) int, -1 when absent
    o_idx: np.ndarray
    marked: list[MarkedSequence] = field(default_factory=list)


def init_pair_params(params: ParamSet, cfg: EncoderConfig, vocab_size: int, rng: np.random.Generator, dtype=np.float64) -> None:
    h = cfg.hidden
    params.add("pair.tok_emb", nc.trunc_normal(rng, (vocab_size, h), dtype=dtype))
    params.add("pair.pos_emb", nc.trunc_normal(rng, (cfg.max_text_len, h), dtype=dtype))
    for i in range(cfg.text_layers):
        nc.init_layer(params, f"pair.text{i}", rng, h, cfg.ffn_width, dtype)
    if cfg.visual_dim > 0:
        params.add("pair.vis_W", nc.xavier_uniform(rng, (cfg.visual_dim, h), dtype))
        params.add("pair.vis_pos", nc.trunc_normal(rng, (cfg.max_patches, h), dtype=dtype))
    for i in range(cfg.num_fusion_layers):
        nc.init_layer(params, f"pair.fuse{i}", rng, h, cfg.ffn_width, dtype)
    if cfg.num_fusion_layers > 0:
        params.add("pair.fuse_ln_g", np.ones((1, h), dtype=dtype))
        params.add("pair.fuse_ln_b", np.zeros((1, h), dtype=dtype))
    params.add("pair.W_e", nc.xavier_uniform(rng, (h, 2 * h), dtype))
    params.add("pair.b_e", np.zeros((1, h), dtype=dtype))


# --- single-instance operations ----------------------------------------------


def _text_states(token_ids: np.ndarray, text_mask: np.ndarray, params: ParamSet, cfg: EncoderConfig) -> Tensor:
    table = params["pair.tok_emb"]
    if token_ids.size and token_ids.max() >= table.shape[0]:
        raise UsageError(f"token id {int(token_ids.max())} >= vocab size {table.shape[0]}")
    length = token_ids.shape[1]
    if length > cfg.max_text_len:
        raise UsageError(f"text length {length} exceeds max_text_len {cfg.max_text_len}")
    x = nc.embedding(table, token_ids) + params["pair.pos_emb"][:length]
    for i in range(cfg.text_layers):
        x = nc.encoder_layer(x, params.scope(f"pair.text{i}"), cfg.num_heads, text_mask, cfg.ffn_activation)
    return x


def encode_text(marked: MarkedSequence, params: ParamSet, cfg: EncoderConfig) -> Tensor:
    """L_T x H text features: token + position embeddings (+ text layers)."""
    ids = np.asarray(marked.token_ids, dtype=np.int64)[None, :]
    mask = np.ones_like(ids, dtype=bool)
    return _text_states(ids, mask, params, cfg)[0]


def _visual_states(v: np.ndarray, params: ParamSet, cfg: EncoderConfig) -> Tensor:
    """``v`` is (B, P, D_v); returns (B, P, H)."""
    p = v.shape[1]
    if p > cfg.max_patches:
        raise UsageError(f"{p} patches exceed max_patches {cfg.max_patches}")
    w = params["pair.vis_W"]
    return nc.as_tensor(v.astype(w.dtype, copy=False)) @ w + params["pair.vis_pos"][:p]


def adapt_visual(v: VisualFeatures | np.ndarray | None, params: ParamSet, cfg: EncoderConfig) -> Tensor:
    """P x H visual features; empty when visual input is off or absent."""
    dtype = params["pair.W_e"].dtype
    if v is None or not cfg.use_visual or cfg.visual_dim == 0:
        return Tensor(np.zeros((0, cfg.hidden), dtype=dtype))
    arr = v.patch_vectors if isinstance(v, VisualFeatures) else np.asarray(v)
    if arr.ndim != 2 or (arr.shape[0] and arr.shape[1] != cfg.visual_dim):
        raise UsageError(f"visual features of shape {arr.shape} do not match visual_dim {cfg.visual_dim}")
    if arr.shape[0] == 0:
        return Tensor(np.zeros((0, cfg.hidden), dtype=dtype))
    return _visual_states(arr[None], params, cfg)[0]


def _fusion_stack(x: Tensor, pad_mask: np.ndarray, params: ParamSet, cfg: EncoderConfig, attn_store: list | None) -> Tensor:
    if not cfg.fusion_active:
        return x
    for i in range(cfg.num_fusion_layers):
        x = nc.encoder_layer(x, params.scope(f"pair.fuse{i}"), cfg.num_heads, pad_mask, cfg.ffn_activation, attn_store)
    return nc.layer_norm(x, params["pair.fuse_ln_g"], params["pair.fuse_ln_b"])


def fuse(
    x_t: Tensor,
    x_i: Tensor,
    pad_mask,
    params: ParamSet,
    cfg: EncoderConfig,
    attn_store: list | None = None,
) -> Tensor:
    """Concatenate text and visual rows, then apply the fusion layers."""
    x_t, x_i = nc.as_tensor(x_t), nc.as_tensor(x_i)
    if x_t.shape[-1] != cfg.hidden or x_i.shape[-1] != cfg.hidden:
        raise UsageError("text and visual widths must equal hidden")
    x = nc.concat([x_t, x_i], axis=0) if x_i.shape[0] else x_t
    mask = np.asarray(pad_mask, dtype=bool)
    if mask.shape != (x.shape[0],):
        raise UsageError(f"pad_mask length {mask.shape} != sequence length {x.shape[0]}")
    if not cfg.fusion_active:
        return x
    out = _fusion_stack(nc.reshape(x, (1,) + x.shape), mask[None], params, cfg, attn_store)
    if attn_store is not None:
        attn_store[:] = [a[0] for a in attn_store]
    return out[0]


def extract_entity_states(h_x: Tensor, s_tilde: int | None, o_tilde: int | None, pad_mask) -> tuple[Tensor, Tensor]:
    """Rows at the entity indices; an absent index falls back to the mean of real rows."""
    h_x = nc.as_tensor(h_x)
    mask = np.asarray(pad_mask, dtype=bool)
    n = h_x.shape[0]
    for idx in (s_tilde, o_tilde):
        if idx is not None and not 0 <= idx < n:
            raise UsageError(f"entity index {idx} outside sequence of length {n}")
    mean = None
    if s_tilde is None or o_tilde is None:
        mean = nc.masked_mean(h_x, mask, axis=0)
    h_s = h_x[s_tilde] if s_tilde is not None else mean
    h_o = h_x[o_tilde] if o_tilde is not None else mean
    return h_s, h_o


def fuse_pair(h_s, h_o, params: ParamSet, cfg: EncoderConfig) -> Tensor:
    """sigma(W_e [h_s; h_o] + b_e); works on vectors or (B, H) batches."""
    h_s, h_o = nc.as_tensor(h_s), nc.as_tensor(h_o)
    if h_s.shape[-1] != cfg.hidden or h_o.shape[-1] != cfg.hidden:
        raise UsageError("entity states must have length hidden")
    z = nc.concat([h_s, h_o], axis=-1) @ params["pair.W_e"].T + params["pair.b_e"]
    out = nc.activation(cfg.activation_sigma)(z)
    return out[0] if h_s.ndim == 1 else out


# --- batched path --------------------------------------------------------------


def mark_instance(instance: Instance, vocab: Vocab, cfg: EncoderConfig) -> MarkedSequence:
    visual_len = 0
    if cfg.use_visual and cfg.visual_dim > 0 and instance.visual is not None:
        visual_len = instance.visual.num_patches
    return inject_type_prompts(instance, vocab, cfg.prompt, visual_len=visual_len)


def prepare_pair_batch(
    marked: list[MarkedSequence],
    visuals: list[np.ndarray | None],
    cfg: EncoderConfig,
    pad_id: int = 0,
) -> PairBatch:
    b = len(marked)
    if b == 0:
        raise UsageError("empty batch")
    lt = max(m.text_len for m in marked)
    p_max = max(m.visual_len for m in marked)
    total = max(m.total_len for m in marked)
    ids = np.full((b, lt), pad_id, dtype=np.int64)
    text_mask = np.zeros((b, lt), dtype=bool)
    vis = np.zeros((b, p_max, max(cfg.visual_dim, 0)))
    src = np.zeros((b, total), dtype=np.int64)
    pad = np.zeros((b, total), dtype=bool)
    s_idx = np.full(b, -1, dtype=np.int64)
    o_idx = np.full(b, -1, dtype=np.int64)
    for i, m in enumerate(marked):
        ids[i, : m.text_len] = m.token_ids
        text_mask[i, : m.text_len] = True
        if m.visual_len:
            vis[i, : m.visual_len] = visuals[i][: m.visual_len]
        real = list(range(m.text_len)) + [lt + j for j in range(m.visual_len)]
        used = set(real)
        filler = [k for k in range(lt + p_max) if k not in used]
        src[i] = real + filler[: total - len(real)]
        pad[i, : len(real)] = True
        if m.s_tilde is not None:
            s_idx[i] = m.s_tilde
        if m.o_tilde is not None:
            o_idx[i] = m.o_tilde
    return PairBatch(ids, text_mask, vis, src, pad, s_idx, o_idx, list(marked))


def encode_pair_batch(
    batch: PairBatch,
    params: ParamSet,
    cfg: EncoderConfig,
    attn_store: list | None = None,
) -> tuple[Tensor, Tensor]:
    """Returns (h_e (B, H), h_x (B, L, H))."""
    x_t = _text_states(batch.token_ids, batch.text_mask, params, cfg)
    parts = [x_t]
    if batch.visual.shape[1] and cfg.use_visual and cfg.visual_dim > 0:
        parts.append(_visual_states(batch.visual, params, cfg))
    x = nc.concat(parts, axis=1) if len(parts) > 1 else x_t
    b = batch.token_ids.shape[0]
    rows = np.arange(b)[:, None]
    x = x[rows, batch.source_index]
    h_x = _fusion_stack(x, batch.pad_mask, params, cfg, attn_store)

    absent = (batch.s_idx < 0) | (batch.o_idx < 0)
    if absent.any():
        mean = nc.masked_mean(h_x, batch.pad_mask, axis=1)
        h_x_ext = nc.concat([h_x, nc.reshape(mean, (b, 1, cfg.hidden))], axis=1)
        fallback = h_x.shape[1]
        s = np.where(batch.s_idx < 0, fallback, batch.s_idx)
        o = np.where(batch.o_idx < 0, fallback, batch.o_idx)
    else:
        h_x_ext, s, o = h_x, batch.s_idx, batch.o_idx
    h_s = h_x_ext[np.arange(b), s]
    h_o = h_x_ext[np.arange(b), o]
    return fuse_pair(h_s, h_o, params, cfg), h_x


def encode_pair(
    instance: Instance,
    params: ParamSet,
    cfg: EncoderConfig,
    vocab: Vocab,
    retain_attention: bool | None = None,
) -> PairEmbedding:
    """Full single-instance pipeline: prompts, text, visual, fusion, pair vector."""
    keep = cfg.retain_attention if retain_attention is None else retain_attention
    marked = mark_instance(instance, vocab, cfg)
    store: list | None = [] if keep else None
    with nc.no_grad():
        x_t = encode_text(marked, params, cfg)
        x_i = adapt_visual(instance.visual if marked.visual_len else None, params, cfg)
        h_x = fuse(x_t, x_i, marked.pad_mask, params, cfg, store)
        h_s, h_o = extract_entity_states(h_x, marked.s_tilde, marked.o_tilde, marked.pad_mask)
        h_e = fuse_pair(h_s, h_o, params, cfg)
    return PairEmbedding(h_e.data.copy(), h_s.data.copy(), h_o.data.copy(), store, marked)
