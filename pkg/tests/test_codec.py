import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from semcom3d.codec import (HEADER_BITS, CodecConfig, SemanticCodec, SemanticPayload, attention, binarize_mask,
                            compress, full_bits, keep_count, kept_bits, kl_divergence, load_codec, pack_payload,
                            nominal_kept_bits, params_checksum, patch_embed, payload_bits, run_codec, save_codec,
                            skd_losses, toy_object_views, train_codec, unpack_payload)
from semcom3d.errors import FormatError, InvalidArgumentError

SMALL = dict(image_size=(16, 16), patch=4, dim=16, latent_dim=4, enc_layers=1, dec_layers=1, heads=2)


def small_codec(seed=0, **kw):
    torch.manual_seed(seed)
    return SemanticCodec(CodecConfig(**{**SMALL, **kw}))


# -- attention ---------------------------------------------------------------

def test_attention_single_token_returns_v():
    v = np.array([[0.3, -1.2, 2.0]])
    assert np.array_equal(attention([[1.0, 2.0]], [[-0.5, 4.0]], v, 2), v)


def test_attention_hand_evaluated_2x2():
    eye = np.eye(2)
    a = 1 / math.sqrt(2)
    p = math.exp(a) / (math.exp(a) + 1)
    expect = np.array([[p, 1 - p], [1 - p, p]])
    assert np.allclose(attention(eye, eye, eye, 2), expect, atol=1e-12)


def test_attention_zero_queries_average_values():
    g = np.random.default_rng(0)
    k, v = g.normal(size=(5, 3)), g.normal(size=(5, 4))
    out = attention(np.zeros((2, 3)), k, v, 3)
    assert np.allclose(out, v.mean(0), atol=1e-12)


def test_attention_rejects_bad_scale():
    with pytest.raises(InvalidArgumentError):
        attention(np.eye(2), np.eye(2), np.eye(2), 0)


@given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_attention_rows_sum_to_one(s, d, seed):
    g = np.random.default_rng(seed)
    q, k = g.normal(size=(s, d)) * 3, g.normal(size=(s, d)) * 3
    weights = attention(q, k, np.eye(s), d)  # V = I exposes the softmax matrix
    assert np.allclose(weights.sum(-1), 1.0, atol=1e-9)
    assert np.all(weights >= 0)


# -- patching and encoder -------------------------------------------------------

def test_patch_embed_shapes_and_zero_image():
    cfg = CodecConfig()
    codec = SemanticCodec(cfg)
    assert patch_embed(np.random.rand(64, 64, 3), cfg, codec).shape == (64, cfg.dim)
    with torch.no_grad():
        codec.patch_embed.bias.zero_()
    assert torch.all(patch_embed(np.zeros((64, 64, 3)), cfg, codec) == 0)
    with pytest.raises(InvalidArgumentError):
        patch_embed(np.zeros((32, 64, 3)), cfg, codec)


def test_patch_embed_is_local():
    codec = small_codec()
    cfg = codec.cfg
    a = np.random.default_rng(0).random((16, 16, 3))
    b = a.copy()
    b[4:8, 8:12] += 0.1  # patch (1, 2) of the 4x4 grid -> token 6
    with torch.no_grad():
        ta, tb = patch_embed(a, cfg, codec), patch_embed(b, cfg, codec)
    differs = (ta != tb).any(-1).numpy()
    assert np.flatnonzero(differs).tolist() == [6]


def test_encode_shapes_and_determinism():
    codec = small_codec()
    x = torch.rand(2, 16, 16, 3)
    with torch.no_grad():
        e1, l1 = codec.encode(x)
        e2, l2 = codec.encode(x)
    assert e1.shape == (2, 16, 4) and l1.shape == (2, 16)
    assert torch.equal(e1, e2) and torch.equal(l1, l2)


def test_encode_is_patch_permutation_equivariant_without_positions():
    codec = small_codec(pos_embed=False)
    g = np.random.default_rng(3)
    img = g.random((16, 16, 3))
    perm = g.permutation(16)
    blocks = img.reshape(4, 4, 4, 4, 3).transpose(0, 2, 1, 3, 4).reshape(16, 4, 4, 3)
    shuffled = blocks[perm].reshape(4, 4, 4, 4, 3).transpose(0, 2, 1, 3, 4).reshape(16, 16, 3)
    with torch.no_grad():
        e, lg = codec.encode(torch.as_tensor(img[None], dtype=torch.float32))
        ep, lp = codec.encode(torch.as_tensor(shuffled[None], dtype=torch.float32))
    assert torch.allclose(ep[0], e[0][perm], atol=1e-5)
    assert torch.allclose(lp[0], lg[0][perm], atol=1e-5)


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        CodecConfig(image_size=(64, 60), patch=8)
    with pytest.raises(InvalidArgumentError):
        CodecConfig(keep_rate=0.0)


# -- keep mask and compression --------------------------------------------------

def test_binarize_examples():
    assert binarize_mask(torch.tensor([0.9, 0.1, 0.8, 0.2]), 0.5).tolist() == [1, 0, 1, 0]
    assert binarize_mask(torch.randn(7), 1.0).tolist() == [1.0] * 7
    assert binarize_mask(torch.zeros(4), 0.5).tolist() == [1, 1, 0, 0]


def _tie_rule(logits, k):
    """Exhaustive rule: the mask keeps i when fewer than k entries beat it (greater, or equal at a lower index)."""
    return [int(sum(1 for j, y in enumerate(logits) if y > x or (y == x and j < i)) < k)
            for i, x in enumerate(logits)]


@given(st.lists(st.sampled_from([0.0, 0.5, 1.0]), min_size=1, max_size=10), st.floats(0.01, 1.0))
def test_binarize_matches_tie_rule(logits, rho):
    m = binarize_mask(torch.tensor(logits), rho)
    assert m.sum().item() == keep_count(len(logits), rho)
    assert m.int().tolist() == _tie_rule(logits, keep_count(len(logits), rho))


def test_binarize_straight_through_values_and_gradient():
    logits = torch.randn(3, 10, requires_grad=True)
    hard = binarize_mask(logits, 0.3, "infer")
    st_mask = binarize_mask(logits, 0.3, "train")
    assert torch.equal(hard, st_mask.detach())
    st_mask.sum().backward()
    assert logits.grad is not None and torch.all(logits.grad > 0)


def test_compress_examples():
    e = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert compress(e, torch.tensor([1, 0])).tolist() == [[1, 2], [0, 0]]
    assert torch.equal(compress(e, torch.ones(2)), e)
    assert torch.all(compress(e, torch.zeros(2)) == 0)
    with pytest.raises(InvalidArgumentError):
        compress(e, torch.ones(3))


@given(st.integers(0, 2 ** 31 - 1))
def test_compress_idempotent(seed):
    g = torch.Generator().manual_seed(seed)
    e = torch.randn(9, 3, generator=g)
    m = (torch.rand(9, generator=g) > 0.5).float()
    once = compress(e, m)
    assert torch.equal(compress(once, m), once)


# -- channel codec layers and decoder ----------------------------------------------

def test_channel_encode_zero_and_power():
    codec = small_codec()
    with torch.no_grad():
        codec.channel_enc.bias.zero_()
        assert torch.all(codec.channel_encode(torch.zeros(1, 16, 4)) == 0)
        x = codec.channel_encode(torch.randn(3, 16, 4))
        assert torch.allclose((x * x).mean(dim=(1, 2)), torch.ones(3), atol=1e-6)
        m = binarize_mask(torch.randn(3, 16), 0.25)
        xm = codec.channel_encode(compress(torch.randn(3, 16, 4), m), m)
        kept_power = (xm * xm).sum(dim=(1, 2)) / (m.sum(-1) * 4)
        assert torch.allclose(kept_power, torch.ones(3), atol=1e-6)
        e = torch.randn(2, 16, 4)
        assert torch.equal(codec.channel_encode(e), codec.channel_encode(e))


def test_channel_decode_zero_shape_and_errors():
    codec = small_codec()
    with torch.no_grad():
        codec.channel_dec.bias.zero_()
        assert torch.all(codec.channel_decode(torch.zeros(2, 64)) == 0)
        y = torch.randn(2, 64)
        out = codec.channel_decode(y)
        assert out.shape == (2, 16, 4)
        assert torch.equal(out, codec.channel_decode(y))
    with pytest.raises(InvalidArgumentError):
        codec.channel_decode(torch.zeros(2, 63))


@given(st.integers(0, 2 ** 31 - 1))
def test_decode_output_in_unit_range(seed):
    codec = small_codec()
    lat = torch.randn(2, 16, 4, generator=torch.Generator().manual_seed(seed)) * 10
    with torch.no_grad():
        img = codec.decode(lat)
        assert torch.all((img >= 0) & (img <= 1))
        assert torch.equal(img, codec.decode(lat))


def test_student_forward_equal_in_train_and_infer_mask_modes():
    codec = small_codec(keep_rate=0.25)
    x = torch.rand(2, 16, 16, 3)
    with torch.no_grad():
        a = codec(x, "student", mask_mode="infer")
        b = codec(x, "student", mask_mode="train")
    assert torch.equal(a["image"], b["image"])
    assert a["mask"].sum(-1).tolist() == [4.0, 4.0]


# -- distillation losses ---------------------------------------------------------

def test_kl_hand_value():
    assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.5 * math.log(2) - 0.5 * math.log(1.5),
                                                                    abs=1e-12)
    assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.14384, abs=1e-5)


def test_skd_losses_examples():
    img = torch.rand(1, 4, 4, 3, dtype=torch.float64)
    lat = torch.randn(1, 2, 3, dtype=torch.float64)
    _, _, kd = skd_losses(img, img * 0.5, img * 0.9, lat, lat)
    assert kd.item() == 0.0
    # softmax(0, 0) = (0.5, 0.5), softmax(0, ln 3) = (0.25, 0.75)
    a = torch.tensor([[[0.0, 0.0]]], dtype=torch.float64)
    b = torch.tensor([[[0.0, math.log(3)]]], dtype=torch.float64)
    lt, ls, kd = skd_losses(img, img, img, a, b, eps=1e-6)
    assert lt.item() == 0 and ls.item() == 0
    assert kd.item() == pytest.approx(kl_divergence([0.5, 0.5], [0.25, 0.75]) / 1e-6, rel=1e-9)
    with pytest.raises(InvalidArgumentError):
        skd_losses(img, img, img, a, b, eps=0.0)


def test_skd_gradient_matches_finite_differences():
    torch.manual_seed(0)
    enc = torch.nn.Linear(6, 4).double()
    dec = torch.nn.Linear(4, 6).double()
    x = torch.rand(2, 1, 2, 3, dtype=torch.float64)
    keep = torch.tensor([1.0, 0.0, 1.0, 1.0], dtype=torch.float64)

    def total():
        lat = torch.tanh(enc(x.reshape(2, 1, 6)))
        lat_s = lat * keep
        rec_t = torch.sigmoid(dec(lat)).reshape(x.shape)
        rec_s = torch.sigmoid(dec(lat_s)).reshape(x.shape)
        lt, ls, kd = skd_losses(x, rec_t, rec_s, lat, lat_s)
        return lt + ls + kd

    enc.zero_grad()
    dec.zero_grad()
    total().backward()
    for param, idx in [(enc.weight, (1, 2)), (enc.bias, (3,)), (dec.weight, (0, 1))]:
        analytic = param.grad[idx].item()
        eps = 1e-6
        with torch.no_grad():
            param[idx] += eps
            up = total().item()
            param[idx] -= 2 * eps
            down = total().item()
            param[idx] += eps
        assert analytic == pytest.approx((up - down) / (2 * eps), rel=1e-4, abs=1e-9)


# -- payload ---------------------------------------------------------------------

def test_payload_nominal_ratio():
    # 1,352 features at 16 bits each
    assert full_bits(169, 8, 16) == 21632
    assert nominal_kept_bits(169, 8, 16, 0.2) == 4326 == math.floor(0.2 * 21632)
    assert nominal_kept_bits(169, 8, 16, 0.2) / full_bits(169, 8, 16) == pytest.approx(0.2, abs=1e-3)


def test_payload_size_example():
    e = np.random.default_rng(0).uniform(-1, 1, (16, 8))
    m = np.arange(16) % 2 == 0
    p = pack_payload(e, m, 0.5, 16)
    assert p.kept_bits == 8 * 8 * 16 == 1024
    assert p.bit_size == 1024 + 16 + HEADER_BITS


@given(st.integers(1, 64), st.integers(1, 16), st.integers(1, 16), st.floats(0.01, 1.0))
def test_payload_bits_closed_form(s, d, q, rho):
    k = keep_count(s, rho)
    mask = np.zeros(s, bool)
    mask[:k] = True
    p = pack_payload(np.zeros((s, d)), mask, rho, q)
    assert p.bit_size == k * d * q + s + HEADER_BITS == payload_bits(s, d, q, k)
    assert p.kept_bits == kept_bits(s, d, q, k)
    assert len(p.to_bytes()) * 8 == p.wire_bits


@given(st.integers(2, 16), st.integers(0, 2 ** 31 - 1))
def test_payload_round_trip_error_bound(q, seed):
    g = np.random.default_rng(seed)
    e = g.uniform(-4, 4, (12, 5))
    m = g.random(12) < 0.5
    p = SemanticPayload.from_bytes(pack_payload(e * m[:, None], m, 0.5, q, clip=4.0).to_bytes())
    e_hat, m_hat = unpack_payload(p)
    assert np.array_equal(m_hat, m)
    assert np.all(e_hat[~m] == 0)
    assert np.abs(e_hat[m] - e[m]).max(initial=0) <= 4.0 / 2 ** (q - 1)


def test_payload_clipping_is_counted():
    e = np.array([[5.0, -6.0], [0.5, 0.1]])
    p = pack_payload(e, [True, True], 1.0, 8, clip=4.0)
    assert p.clipped == 2
    e_hat, _ = unpack_payload(p)
    assert e_hat[0].tolist() == pytest.approx([4.0, -4.0])
    assert SemanticPayload.from_bytes(p.to_bytes()).clipped == 2


def test_payload_wire_errors():
    blob = pack_payload(np.zeros((4, 2)), [1, 0, 1, 0], 0.5, 8).to_bytes()
    with pytest.raises(FormatError):
        SemanticPayload.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        SemanticPayload.from_bytes(blob[:-1])
    with pytest.raises(FormatError):
        SemanticPayload.from_bytes(blob[:5])
    with pytest.raises(InvalidArgumentError):
        pack_payload(np.zeros((4, 2)), [1, 0, 1], 0.5)


def test_student_payload_reduction_at_default_dimensions():
    cfg = CodecConfig()
    full = full_bits(cfg.tokens, cfg.latent_dim, cfg.quant_bits)
    kept = kept_bits(cfg.tokens, cfg.latent_dim, cfg.quant_bits, cfg.kept_tokens)
    # a whole token count rounds 0.2 * 64 up to 13 tokens
    assert 1 - kept / full == pytest.approx(0.8, abs=0.01)


# -- training --------------------------------------------------------------------

def test_train_codec_reduces_teacher_loss():
    imgs = toy_object_views(100, seed=5)
    codec = train_codec(imgs, CodecConfig(), epochs=40, seed=0)
    log = codec.train_log
    assert len(log.teacher_loss) == 40 and len(log.student_loss) == 40
    assert log.teacher_loss[-1] < log.initial_teacher_loss


def test_train_codec_deterministic_and_validated(tmp_path):
    imgs = np.random.default_rng(0).random((6, 16, 16, 3))
    cfg = CodecConfig(**SMALL)
    a = train_codec(imgs, cfg, epochs=1, seed=4, batch_size=4)
    b = train_codec(imgs, cfg, epochs=1, seed=4, batch_size=4)
    assert params_checksum(a) == params_checksum(b)
    with pytest.raises(InvalidArgumentError):
        train_codec(imgs, cfg, epochs=0)
    save_codec(a, tmp_path / "c.pt")
    c = load_codec(tmp_path / "c.pt")
    assert params_checksum(c) == params_checksum(a)
    assert np.array_equal(run_codec(a, imgs[:2]), run_codec(c, imgs[:2]))
    torch.save({"format": "nope"}, tmp_path / "bad.pt")
    with pytest.raises(FormatError):
        load_codec(tmp_path / "bad.pt")
