import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from semcom3d.errors import InvalidArgumentError
from semcom3d.metrics import (MetricReport, bleu, caption_stub, cosine_sim, embed_stub, format_value, nmse_db, psnr,
                              ssim)
from semcom3d.metrics import _token_bucket
from semcom3d.scene_io import Primitive, SceneSpec

from oracles import bleu_loop, cosine_loop, nmse_loop, psnr_loop, ssim_loop


def test_psnr_examples():
    a = np.random.default_rng(0).random((4, 4, 3))
    assert psnr(a, a) == math.inf
    assert psnr(np.zeros(4), np.ones(4)) == pytest.approx(0.0)
    assert psnr(np.zeros(10), np.ones(10), max_val=255) == pytest.approx(20 * math.log10(255), abs=1e-12)
    assert psnr(np.zeros(10), np.ones(10), max_val=255) == pytest.approx(48.1308, abs=1e-4)
    with pytest.raises(InvalidArgumentError):
        psnr(np.zeros(3), np.zeros(4))


@given(st.floats(1e-6, 1.0), st.floats(0.01, 0.99))
def test_psnr_strictly_decreasing_in_mse(mse, shrink):
    a = np.zeros(4)
    b1 = np.full(4, math.sqrt(mse))
    b2 = b1 * shrink
    assert psnr(a, b2) > psnr(a, b1)


def test_ssim_examples():
    g = np.random.default_rng(1)
    a, b = g.random((16, 16, 3)), g.random((16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    c1 = 1e-4
    expect = (2 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1)  # variances and covariance vanish
    assert ssim(np.full((2, 2), 0.5), np.full((2, 2), 0.6), window=2) == pytest.approx(expect, abs=1e-12)
    with pytest.raises(InvalidArgumentError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)), window=5)


@given(st.integers(0, 2 ** 31 - 1))
def test_ssim_bounded(seed):
    g = np.random.default_rng(seed)
    a, b = g.random((10, 10, 3)), g.random((10, 10, 3))
    assert -1 <= ssim(a, b) <= 1
    assert -1 <= ssim(a, 1 - a) <= 1


def test_nmse_examples():
    g = np.random.default_rng(2)
    h = g.normal(size=(8, 8)) + 1j * g.normal(size=(8, 8))
    assert nmse_db(h, h) == -math.inf
    assert nmse_db(h, h + 0.1 * (h - h.mean())) == pytest.approx(-20.0, abs=1e-9)
    var = np.mean(np.abs(h - h.mean()) ** 2)
    assert nmse_db(h, h + math.sqrt(var)) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(InvalidArgumentError):
        nmse_db(np.ones(4), np.zeros(4))


def test_bleu_examples():
    assert bleu("a b c d e", "a b c d e") == 1.0
    assert bleu("a b c", "x y z", smoothing=False) == 0.0
    assert bleu("a b c d", "a b c e", max_n=2) == pytest.approx(math.sqrt(3 / 4 * 2 / 3), abs=1e-12)
    assert bleu("a b c d", "a b c e", max_n=2) == pytest.approx(0.7071, abs=1e-4)
    assert bleu("a b", "") == 0.0
    with pytest.raises(InvalidArgumentError):
        bleu("a", "a", max_n=0)


@given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=9),
       st.lists(st.sampled_from("abcde"), min_size=1, max_size=9), st.integers(1, 4))
def test_bleu_matches_loop_and_is_bounded(ref, hyp, n):
    value = bleu(ref, hyp, max_n=n)
    assert 0 <= value <= 1
    assert value == pytest.approx(bleu_loop(ref, hyp, n), abs=1e-12)


def test_cosine_examples():
    assert cosine_sim([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert cosine_sim([1, 2, 3], [-1, -2, -3]) == pytest.approx(-1.0)
    assert cosine_sim([1, 0], [1, 1]) == pytest.approx(0.70711, abs=1e-5)
    with pytest.raises(InvalidArgumentError):
        cosine_sim([0, 0], [1, 1])


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_loop_oracles(seed):
    g = np.random.default_rng(seed)
    a, b = g.random((8, 8, 3)), g.random((8, 8, 3))
    assert psnr(a, b) == pytest.approx(psnr_loop(a, b), abs=1e-9)
    assert ssim(a, b) == pytest.approx(ssim_loop(a, b), abs=1e-9)
    assert ssim(a, b, window=3) == pytest.approx(ssim_loop(a, b, 3), abs=1e-9)
    h = g.normal(size=(8, 8)) + 1j * g.normal(size=(8, 8))
    e = h + 0.3 * (g.normal(size=(8, 8)) + 1j * g.normal(size=(8, 8)))
    assert nmse_db(h, e) == pytest.approx(nmse_loop(h, e), abs=1e-9)
    u, v = g.normal(size=8), g.normal(size=8)
    assert cosine_sim(u, v) == pytest.approx(cosine_loop(u.tolist(), v.tolist()), abs=1e-9)


def _two_object_image():
    img = np.zeros((16, 16, 3))
    img[2:8, 2:8] = (1.0, 0.1, 0.1)
    img[9:14, 9:15] = (0.1, 0.2, 1.0)
    return img


def test_caption_and_embedding_are_deterministic():
    img = _two_object_image()
    assert caption_stub(img) == caption_stub(img.copy())
    assert np.array_equal(embed_stub(caption_stub(img)), embed_stub(caption_stub(img)))
    assert caption_stub(np.zeros((4, 4, 3))) == "an empty dark scene"
    scene = SceneSpec([Primitive("sphere", (0, 0, 0), 0.2, (1.0, 0.1, 0.1), 40, 1),
                       Primitive("box", (0.5, 0, 0), 0.2, (0.1, 0.2, 1.0), 40, 2)])
    cap = caption_stub(img, scene)
    assert "sphere" in cap and "box" in cap


def test_embedding_is_order_invariant_and_unit_norm():
    a = embed_stub("a red sphere and a blue box")
    b = embed_stub("box blue a and sphere red a")
    assert np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0)


def test_disjoint_captions_are_orthogonal():
    left, right = "red sphere", "blue box"
    buckets = [_token_bucket(t, 256)[0] for t in (left + " " + right).split()]
    assert len(set(buckets)) == len(buckets)  # no hash collisions in this vocabulary
    assert cosine_sim(embed_stub(left), embed_stub(right)) == 0.0


def test_metric_report_ranges_and_formatting():
    MetricReport(psnr_db=math.inf, ssim=0.5, bleu=1.0, cosine=-1.0)
    with pytest.raises(InvalidArgumentError):
        MetricReport(ssim=1.5)
    with pytest.raises(InvalidArgumentError):
        MetricReport(bleu=-0.1)
    assert format_value(None) == "" and format_value(math.nan) == ""
    assert format_value(math.inf) == "inf" and format_value(-math.inf) == "-inf"
    assert format_value(3) == "3" and format_value(0.5) == "0.500000"
