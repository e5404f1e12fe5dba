import math

import numpy as np
import pytest

from emovad.gradcore import ConfigError, ShapeError, Tensor, cross_entropy, grad_check, seeded_rng
from emovad.nnblocks import (
    HIDDEN,
    FeatureStack,
    FeaturizerParams,
    SerParams,
    VadParams,
    apply_mask,
    featurizer_forward,
    init_params,
    self_attention_pool,
    ser_forward,
    vad_forward,
)


def random_stack(seed, t=8, d=6, dtype=np.float32):
    rng = seeded_rng(seed, "stack")
    return FeatureStack(rng.normal(size=(13, t, d)).astype(dtype))


# ---------------------------------------------------------------------------
# featurizer


def test_featurizer_saturated_softmax_selects_one_layer():
    stack = random_stack(1)
    j = 7
    logits = np.zeros(13, dtype=np.float32)
    logits[j] = 50.0
    out = featurizer_forward(stack, FeaturizerParams(Tensor(logits, requires_grad=True)))
    np.testing.assert_allclose(out.data, stack.layers[j], atol=1e-6)


def test_featurizer_uniform_logits_give_layer_mean():
    stack = random_stack(2)
    out = featurizer_forward(stack, FeaturizerParams.init())
    np.testing.assert_allclose(out.data, stack.layers.mean(axis=0), atol=1e-6)


def test_featurizer_matches_brute_force_triple_loop():
    stack = random_stack(3, t=8, d=6)
    rng = seeded_rng(4)
    p = FeaturizerParams(Tensor(rng.normal(size=13).astype(np.float32), requires_grad=True))
    out = featurizer_forward(stack, p)

    w = p.normalized_weights()
    expected = np.zeros((8, 6), dtype=np.float64)
    for layer in range(13):
        for t in range(8):
            for d in range(6):
                expected[t, d] += w[layer] * stack.layers[layer, t, d]
    np.testing.assert_allclose(out.data, expected, atol=1e-5)


def test_featurizer_rejects_wrong_layer_count():
    with pytest.raises(ShapeError, match="13"):
        FeatureStack(np.zeros((12, 4, 3)))


def test_featurizer_gradient_matches_finite_differences():
    stack = random_stack(5, t=4, d=3, dtype=np.float64)
    p = FeaturizerParams.init(dtype=np.float64)
    proj = Tensor(seeded_rng(6).normal(size=(4, 3)))
    from emovad.gradcore import hadamard, sum_all

    err = grad_check(lambda: sum_all(hadamard(featurizer_forward(stack, p), proj)), [p.logits])
    assert err <= 1e-6


def test_featurizer_weights_on_simplex():
    rng = seeded_rng(7)
    p = FeaturizerParams(Tensor(rng.normal(size=13).astype(np.float32) * 5, requires_grad=True))
    w = p.normalized_weights()
    assert w.sum() == pytest.approx(1.0, abs=1e-6)
    assert np.all(w >= 0)


# ---------------------------------------------------------------------------
# VAD block


@pytest.fixture
def small_params():
    return init_params(seed=11, dim=8)


def test_vad_rows_on_simplex(small_params):
    _, _, vad, _ = small_params
    stack = random_stack(12, t=10, d=8)
    probs, mask = vad_forward(featurizer_forward(stack, FeaturizerParams.init()), vad)
    assert probs.shape == (10, 2)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)
    assert mask.shape == (10,)


def test_vad_zeroed_fc_gives_half_half_and_mask_zero(small_params):
    _, _, vad, _ = small_params
    vad.fc_w.data[...] = 0
    vad.fc_b.data[...] = 0
    stack = random_stack(13, t=6, d=8)
    probs, mask = vad_forward(featurizer_forward(stack, FeaturizerParams.init()), vad)
    np.testing.assert_array_equal(probs.data, np.full((6, 2), 0.5, dtype=np.float32))
    assert np.all(mask == 0)  # ties break to non-speech


def test_vad_argmax_invariant_to_common_logit_shift(small_params):
    _, _, vad, _ = small_params
    stack = random_stack(14, t=12, d=8)
    feats = featurizer_forward(stack, FeaturizerParams.init())
    _, mask_before = vad_forward(feats, vad)
    vad.fc_b.data += 3.7  # same constant on both classes
    _, mask_after = vad_forward(feats, vad)
    np.testing.assert_array_equal(mask_before, mask_after)


def test_vad_block_loss_gradient_matches_finite_differences():
    feat, _, vad, _ = init_params(seed=15, dim=6, dtype=np.float64)
    stack = random_stack(16, t=5, d=6, dtype=np.float64)
    labels = [0, 1, 1, 0, 1]

    def loss():
        probs, _ = vad_forward(featurizer_forward(stack, feat), vad)
        return cross_entropy(probs, labels)

    inputs = list(feat.named("feat_vad").values()) + list(vad.named().values())
    err = grad_check(loss, inputs, max_coords_per_tensor=8, seed=1)
    assert err <= 1e-5


# ---------------------------------------------------------------------------
# masking


def test_apply_mask_all_ones_is_bitwise_identity():
    rng = seeded_rng(21)
    f = Tensor(rng.normal(size=(7, 5)).astype(np.float32))
    out = apply_mask(f, np.ones(7), mode="hard")
    assert np.array_equal(out.data, f.data)


def test_apply_mask_all_zeros():
    rng = seeded_rng(22)
    f = Tensor(rng.normal(size=(7, 5)).astype(np.float32))
    out = apply_mask(f, np.zeros(7), mode="hard")
    assert np.array_equal(out.data, np.zeros((7, 5), dtype=np.float32))


def test_apply_mask_soft_half_scales_rows():
    rng = seeded_rng(23)
    f = Tensor(rng.normal(size=(4, 3)).astype(np.float32))
    soft = Tensor(np.full((4, 1), 0.5, dtype=np.float32), requires_grad=True)
    out = apply_mask(f, soft, mode="soft")
    np.testing.assert_allclose(out.data, f.data * 0.5, atol=1e-7)


def test_apply_mask_hard_rows_exactly_zero_where_masked():
    rng = seeded_rng(24)
    f = Tensor(rng.normal(size=(5, 4)).astype(np.float32))
    mask = np.array([1, 0, 1, 0, 0])
    out = apply_mask(f, mask, mode="hard")
    assert np.array_equal(out.data[1], np.zeros(4, dtype=np.float32))
    assert np.array_equal(out.data[0], f.data[0])


def test_apply_mask_length_mismatch():
    with pytest.raises(ShapeError):
        apply_mask(Tensor(np.zeros((4, 3))), np.ones(5), mode="hard")


def test_apply_mask_hard_rejects_non_binary():
    with pytest.raises(ValueError, match="binary"):
        apply_mask(Tensor(np.zeros((3, 2))), np.array([0.5, 1, 0]), mode="hard")


def test_apply_mask_unknown_mode():
    with pytest.raises(ConfigError):
        apply_mask(Tensor(np.zeros((3, 2))), np.ones(3), mode="fuzzy")


# ---------------------------------------------------------------------------
# self-attention pooling


def test_self_attention_pool_single_frame_is_identity():
    rng = seeded_rng(31)
    h = Tensor(rng.normal(size=(1, HIDDEN)).astype(np.float32))
    u = Tensor(rng.normal(size=HIDDEN).astype(np.float32))
    out = self_attention_pool(h, u)
    np.testing.assert_array_equal(out.data, h.data[0])


def test_self_attention_pool_identical_frames():
    rng = seeded_rng(32)
    row = rng.normal(size=HIDDEN).astype(np.float32)
    h = Tensor(np.tile(row, (6, 1)))
    u = Tensor(rng.normal(size=HIDDEN).astype(np.float32))
    np.testing.assert_allclose(self_attention_pool(h, u).data, row, atol=1e-6)


def test_self_attention_pool_closed_form_weights():
    h = np.zeros((2, HIDDEN), dtype=np.float64)
    h[0, 0] = 1.0
    h[1, 1] = 1.0
    u = np.zeros(HIDDEN, dtype=np.float64)
    u[0] = math.log(3.0)  # scores become (ln 3, 0) -> alpha (0.75, 0.25)
    out = self_attention_pool(Tensor(h), Tensor(u))
    expected = 0.75 * h[0] + 0.25 * h[1]
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# SER block


def test_ser_output_on_simplex(small_params):
    _, _, _, ser = small_params
    stack = random_stack(41, t=9, d=8)
    out = ser_forward(featurizer_forward(stack, FeaturizerParams.init()), ser)
    assert out.shape == (4,)
    assert out.data.sum() == pytest.approx(1.0, abs=1e-6)
    assert np.all(out.data > 0) and np.all(out.data < 1)


def test_ser_zeroed_head_gives_uniform(small_params):
    _, _, _, ser = small_params
    ser.out_w.data[...] = 0
    ser.out_b.data[...] = 0
    stack = random_stack(42, t=9, d=8)
    out = ser_forward(featurizer_forward(stack, FeaturizerParams.init()), ser)
    np.testing.assert_array_equal(out.data, np.full(4, 0.25, dtype=np.float32))


def test_ser_rejects_single_frame(small_params):
    _, _, _, ser = small_params
    with pytest.raises(ShapeError, match="too short"):
        ser_forward(Tensor(np.zeros((1, 8), dtype=np.float32)), ser)


def test_ser_deterministic(small_params):
    _, _, _, ser = small_params
    stack = random_stack(43, t=7, d=8)
    feats = featurizer_forward(stack, FeaturizerParams.init())
    a = ser_forward(feats, ser).data
    b = ser_forward(feats, ser).data
    np.testing.assert_array_equal(a, b)


def test_ser_block_loss_gradient_matches_finite_differences():
    _, feat, _, ser = init_params(seed=44, dim=6, dtype=np.float64)
    stack = random_stack(45, t=6, d=6, dtype=np.float64)

    def loss():
        return cross_entropy(ser_forward(featurizer_forward(stack, feat), ser), 2)

    inputs = list(feat.named("feat_ser").values()) + list(ser.named().values())
    err = grad_check(loss, inputs, max_coords_per_tensor=6, seed=2)
    assert err <= 1e-5


# ---------------------------------------------------------------------------
# initialization


def test_init_params_reproducible():
    a = init_params(seed=5, dim=8)
    b = init_params(seed=5, dim=8)
    for ta, tb in zip(_flatten(a), _flatten(b)):
        assert np.array_equal(ta.data, tb.data)


def test_init_params_seed_sensitivity():
    a = _flatten(init_params(seed=5, dim=8))
    b = _flatten(init_params(seed=6, dim=8))
    assert any(not np.array_equal(ta.data, tb.data) for ta, tb in zip(a, b))


def test_init_featurizer_weights_uniform():
    feat_vad, feat_ser, _, _ = init_params(seed=7, dim=8)
    np.testing.assert_allclose(feat_vad.normalized_weights(), np.full(13, 1 / 13), atol=1e-7)
    np.testing.assert_allclose(feat_ser.normalized_weights(), np.full(13, 1 / 13), atol=1e-7)


def test_init_biases_zero_and_weights_bounded():
    _, _, vad, ser = init_params(seed=8, dim=8)
    for w, b in vad.convs:
        assert np.all(b.data == 0)
        bound = math.sqrt(6.0 / (w.shape[1] * w.shape[2] + w.shape[0] * w.shape[2]))
        assert np.all(np.abs(w.data) <= bound)
    assert np.all(ser.reduce_b.data == 0)
    a = math.sqrt(6.0 / (8 + HIDDEN))
    assert np.all(np.abs(ser.reduce_w.data) <= a)


def test_init_rejects_odd_or_tiny_dim():
    with pytest.raises(ConfigError):
        init_params(seed=1, dim=7)
    with pytest.raises(ConfigError):
        init_params(seed=1, dim=2)


def _flatten(groups):
    feat_vad, feat_ser, vad, ser = groups
    out = [feat_vad.logits, feat_ser.logits]
    out += list(vad.named().values())
    out += list(ser.named().values())
    return out
