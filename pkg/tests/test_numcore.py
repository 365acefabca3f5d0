import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rocre import numcore as nc
from rocre.numcore import ConfigError, NumericDomainError, ParamSet, Tensor, UsageError


def attention_reference(x, p, num_heads, mask=None):
    """Loop-per-head attention written straight from the definition."""
    length, hidden = x.shape
    dh = hidden // num_heads
    q, k, v = x @ p["Wq"], x @ p["Wk"], x @ p["Wv"]
    out = np.zeros_like(x)
    for h in range(num_heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(length):
            logits = [q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(length)]
            keep = [j for j in range(length) if mask is None or mask[j]]
            m = max(logits[j] for j in keep)
            w = {j: math.exp(logits[j] - m) for j in keep}
            z = sum(w.values())
            out[i, sl] = sum(w[j] / z * v[j, sl] for j in keep)
    return out @ p["Wo"]


def random_layer(rng, hidden, ffn=6):
    params = ParamSet()
    nc.init_layer(params, "l", rng, hidden, ffn, np.float64)
    scoped = params.scope("l")
    return params, scoped, {k: t.data for k, t in scoped.items()}


# --- softmax ------------------------------------------------------------------


def test_softmax_uniform_row():
    out = nc.softmax_rows(np.zeros((1, 3))).data
    np.testing.assert_allclose(out, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_softmax_hand_values():
    e = np.exp([1.0, 2.0, 3.0])
    expected = e / e.sum()
    out = nc.softmax_rows(np.array([[1.0, 2.0, 3.0]])).data[0]
    np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-5)
    np.testing.assert_allclose(out, expected, rtol=1e-14)


@given(st.floats(-30, 30))
def test_softmax_shift_invariance(c):
    a = nc.softmax_rows(np.array([[5.0, 5.0 + c, 5.0]])).data
    b = nc.softmax_rows(np.array([[0.0, c, 0.0]])).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    out = nc.softmax_rows(x).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericDomainError):
        nc.softmax_rows(np.array([[0.0, np.nan]]))
    with pytest.raises(NumericDomainError):
        nc.softmax_rows(np.array([[np.inf, 0.0]]))


# --- attention -----------------------------------------------------------------


def test_attention_matches_reference(rng):
    _, scoped, arrays = random_layer(rng, 8)
    x = rng.normal(size=(5, 8))
    out = nc.multi_head_self_attention(x, scoped, 2).data
    np.testing.assert_allclose(out, attention_reference(x, arrays, 2), atol=1e-12)


def test_attention_single_position_is_value_projection(rng):
    _, scoped, arrays = random_layer(rng, 4)
    x = rng.normal(size=(1, 4))
    out = nc.multi_head_self_attention(x, scoped, 2).data
    np.testing.assert_allclose(out, x @ arrays["Wv"] @ arrays["Wo"], atol=1e-14)


def test_attention_masked_third_token_equals_prefix_run(rng):
    _, scoped, _ = random_layer(rng, 6)
    x = rng.normal(size=(3, 6))
    masked = nc.multi_head_self_attention(x, scoped, 3, np.array([True, True, False])).data
    prefix = nc.multi_head_self_attention(x[:2], scoped, 3).data
    np.testing.assert_allclose(masked[:2], prefix, atol=1e-9)


def test_attention_pad_keys_get_zero_weight(rng):
    _, scoped, _ = random_layer(rng, 4)
    store = []
    nc.multi_head_self_attention(rng.normal(size=(4, 4)), scoped, 2, np.array([True, False, True, False]), store)
    w = store[0]
    assert np.all(w[:, :, [1, 3]] == 0.0)


def test_attention_permutation_equivariance(rng):
    _, scoped, _ = random_layer(rng, 4)
    tok = rng.normal(size=(4, 4))
    pos = rng.normal(size=(4, 4))
    out = nc.multi_head_self_attention(tok + pos, scoped, 2).data
    perm = [0, 2, 1, 3]
    out_p = nc.multi_head_self_attention(tok[perm] + pos[perm], scoped, 2).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_attention_all_true_mask_equals_no_mask(length, seed):
    r = np.random.default_rng(seed)
    _, scoped, _ = random_layer(r, 4)
    x = r.normal(size=(length, 4))
    a = nc.multi_head_self_attention(x, scoped, 2).data
    b = nc.multi_head_self_attention(x, scoped, 2, np.ones(length, dtype=bool)).data
    np.testing.assert_array_equal(a, b)


def test_attention_indivisible_heads(rng):
    _, scoped, _ = random_layer(rng, 6)
    with pytest.raises(ConfigError):
        nc.multi_head_self_attention(rng.normal(size=(2, 6)), scoped, 4)


# --- backward --------------------------------------------------------------------


def test_backward_sum_gives_ones():
    p = ParamSet()
    w = p.add("W", np.arange(6.0).reshape(2, 3))
    res = nc.backward(w.sum(), p)
    np.testing.assert_array_equal(res.grads["W"], np.ones((2, 3)))
    assert res.loss == 15.0


def test_backward_disconnected_param_gets_zeros():
    p = ParamSet()
    a = p.add("A", np.ones((2, 2)))
    p.add("W", np.full((3, 1), 7.0))
    res = nc.backward((a * a).sum(), p)
    assert set(res.grads) == {"A", "W"}
    np.testing.assert_array_equal(res.grads["W"], np.zeros((3, 1)))


def test_backward_non_scalar_root_is_usage_error():
    p = ParamSet()
    a = p.add("A", np.ones((2, 2)))
    with pytest.raises(UsageError):
        nc.backward(a * 2.0, p)


def test_layer_norm_and_gelu_gradients(rng):
    p = ParamSet()
    p.add("x", rng.normal(size=(3, 5)))
    p.add("g", rng.normal(size=(1, 5)))
    p.add("b", rng.normal(size=(1, 5)))
    weights = rng.normal(size=(3, 5))

    def loss(ps):
        return (nc.gelu(nc.layer_norm(ps["x"], ps["g"], ps["b"])) * weights).sum()

    assert nc.finite_difference_check(loss, p) < 1e-6


def test_encoder_layer_gradients_with_padding(rng):
    params, scoped, _ = random_layer(rng, 4)
    x = rng.normal(size=(2, 3, 4))
    mask = np.array([[True, True, False], [True, True, True]])
    weights = rng.normal(size=(2, 3, 4))

    def loss(ps):
        out = nc.encoder_layer(Tensor(x), ps.scope("l"), 2, mask)
        return (out * weights).sum()

    assert nc.finite_difference_check(loss, params) < 1e-5


# --- finite differences --------------------------------------------------------------


def test_fd_quadratic():
    p = ParamSet()
    p.add("theta", np.array([[3.0]]))
    res = nc.backward((p["theta"] * p["theta"]).sum(), p)
    assert res.loss == 9.0
    assert abs(res.grads["theta"][0, 0] - 6.0) < 1e-9
    assert nc.finite_difference_check(lambda ps: (ps["theta"] * ps["theta"]).sum(), p) < 1e-9


def test_fd_requires_float64():
    p = ParamSet()
    p.add("w", np.ones((1, 1), dtype=np.float32))
    with pytest.raises(UsageError):
        nc.finite_difference_check(lambda ps: ps["w"].sum(), p)


# --- adam ------------------------------------------------------------------------------


def _single(value, grad):
    p = ParamSet()
    p.add("w", np.array([[value]]))
    return p, {"w": np.array([[grad]])}


def test_adam_zero_gradient_is_null_update():
    p, g = _single(0.5, 0.0)
    nc.adam_step(p, g, nc.AdamState.zeros_like(p), nc.AdamHyper())
    assert p["w"].data[0, 0] == 0.5


def test_adam_first_step_hand_value():
    p, g = _single(0.0, 1.0)
    nc.adam_step(p, g, nc.AdamState.zeros_like(p), nc.AdamHyper(lr=1e-3))
    expected = -1e-3 * (1.0 / (1.0 + 1e-8))
    assert abs(p["w"].data[0, 0] - expected) < 1e-18
    assert abs(p["w"].data[0, 0] - (-0.000999999990)) < 1e-12


def test_adam_symmetry():
    p = ParamSet()
    p.add("a", np.array([[0.3, -0.1]]))
    p.add("b", np.array([[0.3, -0.1]]))
    state = nc.AdamState.zeros_like(p)
    r = np.random.default_rng(1)
    for _ in range(5):
        g = r.normal(size=(1, 2))
        nc.adam_step(p, {"a": g, "b": g.copy()}, state, nc.AdamHyper(weight_decay=0.1))
    np.testing.assert_array_equal(p["a"].data, p["b"].data)


def test_adam_decoupled_weight_decay():
    p, g = _single(2.0, 0.0)
    nc.adam_step(p, g, nc.AdamState.zeros_like(p), nc.AdamHyper(lr=0.1, weight_decay=0.5))
    assert p["w"].data[0, 0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-15)


def test_adam_shape_mismatch():
    p, _ = _single(0.0, 0.0)
    with pytest.raises(UsageError):
        nc.adam_step(p, {"w": np.zeros((2, 1))}, nc.AdamState.zeros_like(p))


# --- params & checkpoints ----------------------------------------------------------------


def test_paramset_invariants():
    p = ParamSet()
    p.add("a", np.ones((2, 2)))
    with pytest.raises(UsageError):
        p.add("a", np.ones((1, 1)))
    with pytest.raises(UsageError):
        p.add("v", np.ones(3))
    with pytest.raises(NumericDomainError):
        p.add("bad", np.array([[np.nan]]))


def test_flat_view_roundtrip(rng):
    p = ParamSet()
    p.add("a", rng.normal(size=(2, 3)))
    p.add("b", rng.normal(size=(1, 4)))
    flat = p.flat()
    assert flat.shape == (10,)
    q = p.copy()
    q.load_flat(np.zeros(10))
    q.load_flat(flat)
    assert q.equals(p)


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    p = ParamSet()
    p.add("pair.W", rng.normal(size=(3, 2)))
    p.add("rel.b", np.array([[np.nextafter(0.0, 1.0), -0.0, 1e308]]))
    path = tmp_path / "m.ckpt"
    nc.save_checkpoint(path, p, {"hidden": 2}, seed=648, step=12)
    q, header = nc.load_checkpoint(path)
    assert q.equals(p)
    assert header["format_version"] == 1
    assert header["architecture_config"] == {"hidden": 2}
    assert (header["seed"], header["step"]) == (648, 12)
    nc.save_checkpoint(tmp_path / "again.ckpt", q, {"hidden": 2}, seed=648, step=12)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(UsageError):
        nc.load_checkpoint(bad)


def test_initializers(rng):
    w = nc.xavier_uniform(rng, (30, 50))
    assert np.abs(w).max() <= math.sqrt(6 / 80)
    e = nc.trunc_normal(rng, (200, 8))
    assert np.abs(e).max() <= 0.04
    assert 0.01 < e.std() < 0.02
