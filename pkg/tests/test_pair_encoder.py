import dataclasses
import hashlib
import json

import numpy as np
import pytest

from rocre import numcore as nc
from rocre.dataio import Instance, VisualFeatures, build_vocab
from rocre.model import RocModel
from rocre.numcore import ParamSet, Tensor, UsageError
from rocre.pair_encoder import (
    adapt_visual,
    encode_pair,
    encode_pair_batch,
    encode_text,
    extract_entity_states,
    fuse,
    fuse_pair,
    init_pair_params,
    mark_instance,
    prepare_pair_batch,
)
from rocre.trainer import contrastive_loss

from .conftest import FIXTURES, fixture_encoder_config, tiny_model_config


def digest(a):
    return hashlib.sha256(np.round(np.asarray(a, dtype=np.float64), 10).tobytes()).hexdigest()


@pytest.fixture
def setup(fixture_corpus):
    cfg = fixture_encoder_config()
    vocab = build_vocab(fixture_corpus)
    params = ParamSet()
    init_pair_params(params, cfg, len(vocab), np.random.default_rng(648))
    return cfg, vocab, params


# --- text and visual --------------------------------------------------------------


def test_encode_text_deterministic_and_local(setup, fixture_corpus):
    cfg, vocab, params = setup
    m = mark_instance(fixture_corpus[1], vocab, cfg)
    a = encode_text(m, params, cfg).data
    np.testing.assert_array_equal(a, encode_text(m, params, cfg).data)
    ids = list(m.token_ids)
    ids[2], ids[4] = ids[4], ids[2]
    b = encode_text(dataclasses.replace(m, token_ids=tuple(ids)), params, cfg).data
    changed = np.flatnonzero(np.any(a != b, axis=1))
    assert changed.tolist() == [2, 4]


def test_encode_text_id_out_of_range(setup, fixture_corpus):
    cfg, vocab, params = setup
    m = mark_instance(fixture_corpus[1], vocab, cfg)
    bad = dataclasses.replace(m, token_ids=(len(vocab),) + m.token_ids[1:])
    with pytest.raises(UsageError):
        encode_text(bad, params, cfg)


def test_golden_x_t(fixture_corpus):
    from tests.fixtures.make_golden import fixture_model

    model, corpus = fixture_model()
    x_t = encode_text(mark_instance(corpus[0], model.vocab, model.encoder), model.params, model.encoder).data
    golden = json.loads((FIXTURES / "golden" / "checksums.json").read_text())
    assert digest(x_t) == golden["x_t"]


def test_adapt_visual_cases(setup):
    cfg, _, params = setup
    assert adapt_visual(np.zeros((0, cfg.visual_dim)), params, cfg).shape == (0, cfg.hidden)
    zeros = adapt_visual(np.zeros((3, cfg.visual_dim)), params, cfg).data
    np.testing.assert_array_equal(zeros, params["pair.vis_pos"].data[:3])
    off = dataclasses.replace(cfg, use_visual=False)
    assert adapt_visual(np.ones((2, cfg.visual_dim)), params, off).shape == (0, cfg.hidden)
    with pytest.raises(UsageError):
        adapt_visual(np.ones((2, cfg.visual_dim + 1)), params, cfg)


def test_adapt_visual_identity_configuration(setup):
    cfg, _, params = setup
    params["pair.vis_W"].data[...] = np.eye(cfg.visual_dim, cfg.hidden)
    params["pair.vis_pos"].data[...] = 0.0
    v = np.random.default_rng(2).normal(size=(1, cfg.visual_dim))
    out = adapt_visual(v, params, cfg).data
    np.testing.assert_array_equal(out[0], v[0, : cfg.hidden])


# --- fusion ------------------------------------------------------------------------------


def test_fuse_depth_zero_is_concatenation(setup, rng):
    cfg, _, params = setup
    x_t, x_i = rng.normal(size=(5, cfg.hidden)), rng.normal(size=(2, cfg.hidden))
    for c in (dataclasses.replace(cfg, num_fusion_layers=0), dataclasses.replace(cfg, use_fusion_encoder=False)):
        out = fuse(x_t, x_i, np.ones(7, bool), params, c).data
        np.testing.assert_array_equal(out, np.vstack([x_t, x_i]))


def test_fuse_shape_and_text_only_equivalence(setup, rng):
    cfg, _, params = setup
    x_t = rng.normal(size=(5, cfg.hidden))
    out = fuse(x_t, rng.normal(size=(3, cfg.hidden)), np.ones(8, bool), params, cfg)
    assert out.shape == (8, cfg.hidden)
    empty = fuse(x_t, np.zeros((0, cfg.hidden)), np.ones(5, bool), params, cfg).data
    alone = nc.layer_norm(
        nc.encoder_layer(Tensor(x_t), params.scope("pair.fuse0"), cfg.num_heads, None),
        params["pair.fuse_ln_g"],
        params["pair.fuse_ln_b"],
    ).data
    np.testing.assert_allclose(empty, alone, atol=1e-9)


def test_fuse_mask_length_error(setup, rng):
    cfg, _, params = setup
    with pytest.raises(UsageError):
        fuse(rng.normal(size=(3, cfg.hidden)), np.zeros((0, cfg.hidden)), np.ones(4, bool), params, cfg)


# --- entity states and pair fusion ------------------------------------------------------


def test_extract_rows_bitwise(rng):
    h = rng.normal(size=(6, 4))
    s, o = extract_entity_states(h, 1, 4, np.ones(6, bool))
    assert np.array_equal(s.data, h[1]) and np.array_equal(o.data, h[4])
    with pytest.raises(UsageError):
        extract_entity_states(h, 1, 6, np.ones(6, bool))


def test_extract_absent_constant_rows():
    h = np.tile([1.5, -2.0, 0.25], (4, 1))
    s, o = extract_entity_states(h, None, None, np.ones(4, bool))
    np.testing.assert_array_equal(s.data, [1.5, -2.0, 0.25])
    np.testing.assert_array_equal(o.data, s.data)


def test_extract_absent_skips_pad_row(rng):
    h = rng.normal(size=(4, 3))
    mask = np.array([True, False, True, True])
    s, o = extract_entity_states(h, None, None, mask)
    expected = [(h[0, j] + h[2, j] + h[3, j]) / 3 for j in range(3)]
    np.testing.assert_allclose(s.data, expected, atol=1e-15)
    np.testing.assert_array_equal(o.data, s.data)


def test_fuse_pair_zero_map(setup):
    cfg, _, params = setup
    params["pair.W_e"].data[...] = 0.0
    out = fuse_pair(np.ones(cfg.hidden), -np.ones(cfg.hidden), params, cfg).data
    np.testing.assert_array_equal(out, np.zeros(cfg.hidden))


def test_fuse_pair_zero_inputs(setup):
    cfg, _, params = setup
    z = np.zeros(cfg.hidden)
    np.testing.assert_array_equal(fuse_pair(z, z, params, cfg).data, z)


def test_fuse_pair_against_matrix_vector_script(setup, rng):
    cfg, _, params = setup
    params["pair.b_e"].data[...] = rng.normal(size=(1, cfg.hidden))
    hs, ho = rng.normal(size=cfg.hidden), rng.normal(size=cfg.hidden)
    w, b = params["pair.W_e"].data, params["pair.b_e"].data[0]
    cat = list(hs) + list(ho)
    expected = [np.tanh(sum(w[i, j] * cat[j] for j in range(2 * cfg.hidden)) + b[i]) for i in range(cfg.hidden)]
    np.testing.assert_allclose(fuse_pair(hs, ho, params, cfg).data, expected, atol=1e-9)


# --- whole pipeline -------------------------------------------------------------------------


def test_golden_h_e():
    from tests.fixtures.make_golden import fixture_model

    model, corpus = fixture_model()
    h_e = encode_pair(corpus[0], model.params, model.encoder, model.vocab).h_e
    golden = json.loads((FIXTURES / "golden" / "checksums.json").read_text())
    np.testing.assert_allclose(h_e, golden["h_e_values"], atol=1e-12)
    assert digest(h_e) == golden["h_e"]


def test_batched_path_matches_single_instance(setup, fixture_corpus):
    cfg, vocab, params = setup
    marked = [mark_instance(i, vocab, cfg) for i in fixture_corpus]
    vis = [i.visual.patch_vectors if m.visual_len else None for i, m in zip(fixture_corpus, marked)]
    batch = prepare_pair_batch(marked, vis, cfg, vocab.pad_id)
    h_e, _ = encode_pair_batch(batch, params, cfg)
    for k, inst in enumerate(fixture_corpus):
        np.testing.assert_allclose(h_e.data[k], encode_pair(inst, params, cfg, vocab).h_e, atol=1e-12)


def test_visual_off_equals_no_patches(setup, fixture_corpus):
    cfg, vocab, params = setup
    inst = fixture_corpus[0]
    off = encode_pair(inst, params, dataclasses.replace(cfg, use_visual=False), vocab).h_e
    bare = dataclasses.replace(inst, visual=VisualFeatures("none", patch_vectors=np.zeros((0, cfg.visual_dim))))
    assert np.array_equal(off, encode_pair(bare, params, cfg, vocab).h_e)
    textual = fixture_corpus[1]
    assert np.array_equal(
        encode_pair(textual, params, cfg, vocab).h_e,
        encode_pair(textual, params, dataclasses.replace(cfg, use_visual=False), vocab).h_e,
    )


def test_types_change_h_e(setup, fixture_corpus):
    cfg, vocab, params = setup
    a = encode_pair(fixture_corpus[0], params, cfg, vocab).h_e
    b = encode_pair(fixture_corpus[0], params, dataclasses.replace(cfg, use_types=False), vocab).h_e
    assert not np.allclose(a, b)


def test_pad_isolation(setup, fixture_corpus):
    cfg, vocab, params = setup
    marked = [mark_instance(i, vocab, cfg) for i in fixture_corpus]
    vis = [i.visual.patch_vectors if m.visual_len else None for i, m in zip(fixture_corpus, marked)]
    batch = prepare_pair_batch(marked, vis, cfg, vocab.pad_id)
    ref = encode_pair_batch(batch, params, cfg)[0].data
    noisy = dataclasses.replace(batch)
    noisy.token_ids = np.where(batch.text_mask, batch.token_ids, 7)
    noisy.visual = batch.visual.copy()
    noisy.visual[1] = 123.0  # instance 1 has no patches; its visual rows are all padding
    np.testing.assert_allclose(encode_pair_batch(noisy, params, cfg)[0].data, ref, atol=1e-12)


def test_attention_maps_retained(setup, fixture_corpus):
    cfg, vocab, params = setup
    emb = encode_pair(fixture_corpus[0], params, cfg, vocab, retain_attention=True)
    total = emb.marked.total_len
    assert len(emb.attention_maps) == cfg.num_fusion_layers
    assert emb.attention_maps[0].shape == (cfg.num_heads, total, total)
    assert encode_pair(fixture_corpus[0], params, cfg, vocab).attention_maps is None


def _grad_norms(model, data, gold):
    loss = contrastive_loss(model.encode_pairs(data), model.encode_relations(gold), 0.07)
    return {k: float(np.abs(g).sum()) for k, g in nc.backward(loss, model.params).grads.items()}


def test_every_parameter_receives_gradient(tiny_data):
    train, _, catalog, _ = tiny_data
    from rocre.trainer import default_vocab

    vocab = default_vocab(train, catalog)
    gold = [catalog.index(i.gold_relation) for i in train]
    model = RocModel.initialize(tiny_model_config(), vocab, catalog, 1)
    norms = _grad_norms(model, train, gold)
    assert all(v > 0 for v in norms.values()), [k for k, v in norms.items() if v == 0]

    off = RocModel.initialize(tiny_model_config(use_visual=False, use_fusion_encoder=False), vocab, catalog, 1)
    norms = _grad_norms(off, train, gold)
    dead = {k for k, v in norms.items() if v == 0}
    assert dead == {k for k in norms if k.startswith(("pair.vis_", "pair.fuse"))}
