"""Encoder front-ends: token arithmetic, masks, store IO, projection."""

import numpy as np
import pytest

from ausculta import tensor as T
from ausculta.audio import AudioClip
from ausculta.encoders import (
    EmbeddingStore,
    EncoderConfig,
    MelParams,
    MelTokenizer,
    Projection,
    RawTokenizer,
    load_external,
    log_mel_spectrogram,
    mel_filterbank,
    mel_to_hz,
)
from ausculta.errors import ConfigError, DataError
from ausculta.tensor import Tensor

from helpers import check_grads


def _clip(n_samples, valid=None, site="AV"):
    rng = np.random.default_rng(n_samples % 1000)
    valid = valid if valid is not None else n_samples
    wave = np.zeros(n_samples)
    wave[:valid] = rng.standard_normal(valid)
    return AudioClip(waveform=wave, valid_len=valid, site=site, patient_id="p")


def test_raw_30s_clip_gives_750_tokens():
    cfg = EncoderConfig(kind="raw", d_embed=8)
    tok = RawTokenizer(cfg, np.random.default_rng(0))
    seq = tok.tokenize(_clip(480_000))
    assert seq.n == 750
    assert seq.n_valid == 750
    assert seq.mask.all()


def test_raw_padded_clip_mask():
    # 1.01 s -> 16,160 valid samples padded to 16,640 = 26 patches
    cfg = EncoderConfig(kind="raw", d_embed=8)
    tok = RawTokenizer(cfg, np.random.default_rng(1))
    seq = tok.tokenize(_clip(16_640, valid=16_160))
    assert seq.n == 26
    # patch 25 starts at 16,000 < 16,160 so it still overlaps valid samples
    assert seq.mask.all()
    seq2 = tok.tokenize(_clip(16_640, valid=16_000))
    assert seq2.n_valid == 25
    assert not seq2.mask[25]


def test_raw_zero_everything_gives_zero_tokens():
    cfg = EncoderConfig(kind="raw", d_embed=4)
    tok = RawTokenizer(cfg, np.random.default_rng(2))
    tok.w_patch.data[:] = 0.0
    tok.pos.data[:] = 0.0
    clip = AudioClip(waveform=np.zeros(1280), valid_len=1280, site="AV")
    seq = tok.tokenize(clip)
    np.testing.assert_array_equal(seq.tokens.data, np.zeros((2, 4)))


def test_raw_positions_are_per_clip():
    cfg = EncoderConfig(kind="raw", d_embed=8)
    tok = RawTokenizer(cfg, np.random.default_rng(3))
    clip = _clip(1280)
    a = tok.tokenize(clip)
    b = tok.tokenize(clip)
    assert np.array_equal(a.tokens.data, b.tokens.data)


def test_raw_rejects_overlong_clip():
    cfg = EncoderConfig(kind="raw", d_embed=4, max_positions=10)
    tok = RawTokenizer(cfg, np.random.default_rng(4))
    with pytest.raises(DataError):
        tok.tokenize(_clip(640 * 11))


def test_mel_30s_clip_gives_750_tokens():
    cfg = EncoderConfig(kind="mel", d_embed=8)
    tok = MelTokenizer(cfg, np.random.default_rng(5))
    seq = tok.tokenize(_clip(480_000))
    # (480000 - 400)//160 + 1 = 2998 frames; two ceil-halvings -> 750
    assert seq.n == 750


def test_mel_silence_hits_log_floor():
    mp = MelParams()
    spec = log_mel_spectrogram(np.zeros(1600), mp)
    np.testing.assert_allclose(spec, np.log(mp.log_floor))


def test_mel_frame_count_formula():
    mp = MelParams()
    spec = log_mel_spectrogram(np.random.default_rng(6).standard_normal(16_000), mp)
    assert spec.shape == (80, (16_000 - 400) // 160 + 1)


def test_mel_1khz_sine_lands_in_right_bin():
    # oracle: the filter whose center frequency is nearest 1 kHz should win
    mp = MelParams()
    t = np.arange(16_000) / 16_000
    spec = log_mel_spectrogram(np.sin(2 * np.pi * 1000 * t), mp)
    mean_energy = spec.mean(axis=1)
    edges = np.linspace(0, 2595.0 * np.log10(1 + mp.fmax / 700.0), mp.n_mels + 2)
    centers = mel_to_hz(edges[1:-1])
    expected_bin = int(np.argmin(np.abs(centers - 1000.0)))
    assert abs(int(np.argmax(mean_energy)) - expected_bin) <= 1


def test_mel_too_short_clip_errors():
    mp = MelParams()
    with pytest.raises(DataError):
        log_mel_spectrogram(np.zeros(300), mp)


def test_mel_mask_tracks_valid_len():
    cfg = EncoderConfig(kind="mel", d_embed=8)
    tok = MelTokenizer(cfg, np.random.default_rng(7))
    seq = tok.tokenize(_clip(32_000, valid=16_000))
    # token t real iff 4*t*160 < 16000 -> t < 25
    assert seq.n_valid == 25
    assert seq.mask[:25].all() and not seq.mask[25:].any()


def test_mel_gradients_reach_conv_params():
    cfg = EncoderConfig(kind="mel", d_embed=3, max_positions=8, cnn_channels=2)
    tok = MelTokenizer(cfg, np.random.default_rng(8))
    clip = _clip(1920)
    w = np.random.default_rng(9).standard_normal((3, 3))

    def f():
        seq = tok.tokenize(clip)
        return T.sum_all(T.mul(seq.tokens, Tensor(w)))

    check_grads(f, list(tok.params().values()), tol=1e-4)


def test_embedding_store_roundtrip(tmp_path):
    store = EmbeddingStore(tmp_path / "emb")
    mat = np.random.default_rng(10).standard_normal((100, 768)).astype(np.float32)
    store.put("clip-1", mat)
    cfg = EncoderConfig(kind="external", d_embed=768)
    seq = load_external("clip-1", store, cfg, site="PV")
    assert seq.n == 100
    assert seq.mask.all()
    np.testing.assert_allclose(seq.tokens.data, mat.astype(np.float64))
    # survives reopening the index from disk
    seq2 = load_external("clip-1", EmbeddingStore(tmp_path / "emb"), cfg)
    np.testing.assert_array_equal(seq2.tokens.data, seq.tokens.data)


def test_embedding_store_width_mismatch(tmp_path):
    store = EmbeddingStore(tmp_path / "emb")
    store.put("c", np.zeros((4, 16), dtype=np.float32))
    with pytest.raises(ConfigError):
        load_external("c", store, EncoderConfig(kind="external", d_embed=32))


def test_embedding_store_missing_id(tmp_path):
    store = EmbeddingStore(tmp_path / "emb")
    with pytest.raises(DataError):
        store.get("absent")


def test_projection_zero_weights_give_zero_tokens():
    cfg = EncoderConfig(kind="raw", d_embed=6, d_proj=5)
    proj = Projection(cfg, np.random.default_rng(11))
    proj.w.data[:] = 0.0
    proj.b.data[:] = 0.0
    seq_in = _token_seq(cfg, 4)
    out = proj(seq_in)
    np.testing.assert_array_equal(out.data if hasattr(out, "data") else out.tokens.data, np.zeros((4, 5)))


def _token_seq(cfg, n):
    from ausculta.encoders import TokenSequence

    rng = np.random.default_rng(12)
    return TokenSequence(
        tokens=Tensor(rng.standard_normal((n, cfg.d_embed))),
        mask=np.ones(n, dtype=bool),
        site="AV",
        n_valid=n,
    )


def test_projection_matches_composed_ops():
    cfg = EncoderConfig(kind="raw", d_embed=6, d_proj=6)
    proj = Projection(cfg, np.random.default_rng(13))
    seq = _token_seq(cfg, 5)
    out = proj(seq)
    ref = T.gelu(
        T.add(T.matmul(T.layernorm(seq.tokens, proj.ln_g, proj.ln_b), proj.w), proj.b)
    )
    assert np.array_equal(out.tokens.data, ref.data)
    assert out.n_valid == seq.n_valid
    assert np.array_equal(out.mask, seq.mask)


def test_projection_gradient_through_chain():
    cfg = EncoderConfig(kind="raw", d_embed=5, d_proj=4, max_positions=4)
    rng = np.random.default_rng(14)
    tok = RawTokenizer(cfg, rng)
    proj = Projection(cfg, rng)
    clip = _clip(1920)
    w = rng.standard_normal((3, 4))
    params = list(tok.params().values()) + list(proj.params().values())

    def f():
        return T.sum_all(T.mul(proj(tok.tokenize(clip)).tokens, Tensor(w)))

    check_grads(f, params, tol=1e-4)


def test_projection_width_mismatch():
    cfg = EncoderConfig(kind="raw", d_embed=6, d_proj=5)
    proj = Projection(cfg, np.random.default_rng(15))
    bad = _token_seq(EncoderConfig(kind="raw", d_embed=7), 3)
    with pytest.raises(DataError):
        proj(bad)


def test_mel_filterbank_shape_and_coverage():
    mp = MelParams()
    fb = mel_filterbank(mp)
    assert fb.shape == (80, 257)
    assert np.all(fb >= 0)
    assert fb.sum(axis=1).min() > 0  # every filter covers some bins
