import numpy as np
import pytest

from vfmtok import tensor as T
from vfmtok.decoder import FEATURE, IMAGE, DecoderConfig, ReconDecoder, assemble_sequence, vit_forward
from vfmtok.encoder import EncoderConfig, FrozenEncoder, LevelProjection, encode_multilevel
from vfmtok.errors import ConfigError, ContractError, ShapeError
from vfmtok.quantizer import Codebook, codebook_usage, dequantize, nearest_indices, quantize, quantize_tokens
from vfmtok.region import (DeformLayer, RegionTokenizer, grid_reference_points, level_stack, star_offsets,
                           window_mask)
from vfmtok.rng import Rng
from vfmtok.tensor import Tensor, no_grad


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).uniform(0, 1, size=(3, 32, 32, 3)).astype(np.float32)


# -- frozen encoder -----------------------------------------------------------
def test_encoder_has_no_trainable_parameters():
    enc = FrozenEncoder(EncoderConfig())
    assert enc.parameters() == []
    assert any(True for _ in enc.named_tensors())


def test_encoder_taps_and_shapes(images):
    enc = FrozenEncoder(EncoderConfig())
    taps = enc.taps(Tensor(images))
    assert len(taps) == 4 and all(t.shape == (3, 8, 8, 64) for t in taps)
    np.testing.assert_array_equal(taps[-1].data, enc.deep_features(Tensor(images)).data)


def test_encoder_deterministic_from_seed(images):
    a = FrozenEncoder(EncoderConfig(seed=3)).pooled(images)
    b = FrozenEncoder(EncoderConfig(seed=3)).pooled(images)
    np.testing.assert_array_equal(a, b)


def test_encoder_rejects_wrong_size():
    with pytest.raises(ShapeError):
        FrozenEncoder(EncoderConfig()).taps(Tensor(np.zeros((1, 16, 16, 3), np.float32)))


@pytest.mark.parametrize("taps", [(2, 1, 4), (1, 2, 3)])
def test_encoder_config_validates_taps(taps):
    with pytest.raises(ConfigError):
        EncoderConfig(tap_layers=taps).validate()


def test_deep_features_differentiable_wrt_images(images):
    enc = FrozenEncoder(EncoderConfig())
    x = Tensor(images.astype(np.float64), requires_grad=True)
    enc.astype(np.float64)
    T.tsum(enc.deep_features(x)).backward()
    assert x.grad is not None and np.abs(x.grad).sum() > 0


def test_multilevel_toggle(images):
    enc = FrozenEncoder(EncoderConfig())
    proj1 = LevelProjection(1, 64, 32, Rng(0))
    feats = encode_multilevel(enc, Tensor(images), proj1, use_multilevel=False)
    assert len(feats.levels) == 1 and feats.levels[0].shape == (3, 8, 8, 32)
    assert feats.target.shape == (3, 8, 8, 64)


# -- region tokenizer ---------------------------------------------------------
def test_reference_points_are_cell_centres():
    ref = grid_reference_points(4)
    np.testing.assert_allclose(ref, [[0.25, 0.25], [0.25, 0.75], [0.75, 0.25], [0.75, 0.75]])
    with pytest.raises(ConfigError):
        grid_reference_points(5)


def test_zero_init_offsets_sample_star_around_reference():
    rng = Rng(0)
    layer = DeformLayer(8, 2, 4, 2, rng)
    stacked = Tensor(rng.normal((1, 2, 4, 4, 8)).astype(np.float32))
    q = Tensor(rng.normal((1, 4, 8)).astype(np.float32))
    ref = grid_reference_points(4)
    _, loc = layer.sample(q, ref, stacked)
    base = ref * 4 - 0.5
    expect = base[:, None, None, :] + star_offsets(4)[None, None]
    np.testing.assert_allclose(loc.data[0], np.broadcast_to(expect, (4, 2, 4, 2)), atol=1e-6)


def test_deform_on_constant_map_returns_projected_constant():
    rng = Rng(1)
    layer = DeformLayer(8, 2, 4, 2, rng)
    const = np.ones((1, 2, 4, 4, 8), np.float32) * np.arange(8, dtype=np.float32)
    agg, _ = layer.sample(Tensor(rng.normal((1, 4, 8)).astype(np.float32)), grid_reference_points(4),
                          Tensor(const))
    expected = layer.value(Tensor(const[0, 0, :1, 0])).data[0]
    np.testing.assert_allclose(agg.data[0], np.broadcast_to(expected, (4, 8)), atol=1e-5)


def test_region_tokenizer_rejects_level_mismatch(images):
    enc = FrozenEncoder(EncoderConfig())
    feats = encode_multilevel(enc, Tensor(images), LevelProjection(4, 64, 32, Rng(0)))
    rt = RegionTokenizer(4, 32, 3, Rng(0), depth=1)
    with pytest.raises(ConfigError):
        rt(feats)


@pytest.mark.parametrize("kind", ["deformable", "windowed"])
def test_region_tokens_shape_and_order(images, kind):
    enc = FrozenEncoder(EncoderConfig())
    feats = encode_multilevel(enc, Tensor(images), LevelProjection(4, 64, 32, Rng(0)))
    rt = RegionTokenizer(16, 32, 4, Rng(0), depth=2, attention_kind=kind)
    with no_grad():
        out = rt(feats)
    assert out.shape == (3, 16, 32)


def test_window_mask_contains_own_cell():
    ref = grid_reference_points(16)
    m = window_mask(ref, (8, 8), 3)
    assert m.shape == (16, 64) and (m.sum(1) <= 9).all()
    cells = (np.floor(ref * 8)).astype(int)
    assert m[np.arange(16), cells[:, 0] * 8 + cells[:, 1]].all()


# -- quantizer ----------------------------------------------------------------
def _normed(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def test_nearest_matches_exhaustive_scan_with_ties():
    rng = np.random.default_rng(0)
    codes = _normed(rng.normal(size=(64, 8)))
    codes[40] = codes[7]  # duplicate: ties must resolve to 7
    z = _normed(rng.normal(size=(1000, 8)))
    z[:50] = codes[7]
    got = nearest_indices(z, codes)
    for i in range(len(z)):
        d = [float(((z[i] - c) ** 2).sum()) for c in codes]
        best = min(d)
        assert got[i] == next(j for j, v in enumerate(d) if v == best)
    assert (got[:50] == 7).all()


def test_straight_through_forward_bit_equals_codes():
    cb = Codebook(16, 4, 8, Rng(0))
    tokens = Tensor(np.random.default_rng(1).normal(size=(2, 5, 8)).astype(np.float32), requires_grad=True)
    out = quantize_tokens(cb, tokens)
    z = T.l2_normalize(cb.in_proj(tokens))
    q = T.straight_through(z, out.codes)
    np.testing.assert_array_equal(q.data, out.codes.data)
    np.testing.assert_array_equal(out.codes.data, T.l2_normalize(cb.vectors).data[out.indices])


def test_straight_through_passes_gradient_unchanged():
    cb = Codebook(16, 4, 4, Rng(0))
    z = Tensor(_normed(np.random.default_rng(2).normal(size=(3, 4))), requires_grad=True)
    _, codes = quantize(cb, z)
    w = np.random.default_rng(3).normal(size=(3, 4))
    T.tsum(T.straight_through(z, codes) * w).backward()
    np.testing.assert_allclose(z.grad, w)


def test_usage_counts_only_in_eval_mode():
    cb = Codebook(16, 4, 8, Rng(0))
    tokens = Tensor(np.random.default_rng(1).normal(size=(2, 5, 8)).astype(np.float32))
    quantize_tokens(cb, tokens)
    with pytest.raises(ContractError):
        codebook_usage(cb)
    cb.training = False
    out = quantize_tokens(cb, tokens)
    assert cb.usage_counts.sum() == 10
    assert codebook_usage(cb) == len(np.unique(out.indices)) / 16


def test_vq_loss_zero_when_z_equals_codes():
    cb = Codebook(8, 4, 4, Rng(0))
    codes = T.l2_normalize(cb.vectors).data[:3]
    from vfmtok.quantizer import vq_loss

    assert float(vq_loss(Tensor(codes), Tensor(codes)).data) == 0.0


def test_dequantize_shape():
    cb = Codebook(8, 4, 16, Rng(0), out_dim=12)
    assert dequantize(cb, np.zeros((2, 3), int)).shape == (2, 3, 12)


# -- decoder ------------------------------------------------------------------
def _decoder(**kw):
    return ReconDecoder(DecoderConfig(width=16, depth=2, heads=2, embed_dim=8, channels=8, **kw), Rng(0))


def test_sequence_layout_and_distinct_mask_tokens():
    dec = _decoder()
    tok = Tensor(np.zeros((1, 4, 16), np.float32))
    seq_i = assemble_sequence(tok, dec.bank, IMAGE)
    seq_f = assemble_sequence(tok, dec.bank, FEATURE)
    assert seq_i.shape == (1, 4 + 1 + 4 + 64, 16)
    np.testing.assert_array_equal(seq_i.data[0, 4], dec.bank.cls_token.data[0])
    assert not np.array_equal(seq_i.data[0, 9:], seq_f.data[0, 9:])
    shared = _decoder(share_mask_token=True)
    np.testing.assert_array_equal(assemble_sequence(tok, shared.bank, IMAGE).data,
                                  assemble_sequence(tok, shared.bank, FEATURE).data)


def test_shared_vit_toggle():
    assert _decoder().vit_feature is None
    dec = _decoder(shared_vit=False)
    assert dec.branch_vit(FEATURE) is dec.vit_feature and dec.branch_vit(IMAGE) is dec.vit


def test_decoder_vit_is_causal():
    dec = _decoder()
    rng = np.random.default_rng(0)
    for _ in range(10):
        seq = rng.normal(size=(1, 20, 16)).astype(np.float32)
        j = int(rng.integers(1, 20))
        pert = seq.copy()
        pert[0, j:] += rng.normal(size=(20 - j, 16)).astype(np.float32)
        with no_grad():
            a = vit_forward(dec.vit, Tensor(seq)).data
            b = vit_forward(dec.vit, Tensor(pert)).data
        np.testing.assert_array_equal(a[0, :j], b[0, :j])
        assert not np.array_equal(a[0, j:], b[0, j:])


def test_pixel_decoder_output_range_and_size():
    dec = _decoder()
    out, cls, _ = dec.run_branch(Tensor(np.random.default_rng(0).normal(size=(2, 4, 16)).astype(np.float32)),
                                 IMAGE)
    from vfmtok.decoder import decode_pixels

    img = decode_pixels(dec, out).data
    assert img.shape == (2, 32, 32, 3) and img.min() >= 0 and img.max() <= 1
    assert cls.shape == (2, 16)
