"""Acoustic front-ends: clips in, projected token sequences out.

Three interchangeable sources produce raw token sequences:

* ``RawTokenizer`` — non-overlapping 40 ms patches through a learned linear
  projection plus learned per-clip positional embeddings.
* ``MelTokenizer`` — log-mel spectrogram through two stride-2 GELU conv
  stages, average-pooled across frequency, plus positional embeddings.
* ``EmbeddingStore`` — precomputed matrices from an external encoder, loaded
  from disk verbatim (positions assumed baked in upstream).

All of them feed the shared ``Projection`` (layernorm -> linear -> GELU) that
maps tokens into the language model's width.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .audio import AudioClip
from .errors import ConfigError, DataError
from .tensor import Tensor


@dataclass
class MelParams:
    n_mels: int = 80
    win: int = 400
    hop: int = 160
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10
    n_fft: int = 512


@dataclass
class EncoderConfig:
    kind: str = "raw"  # raw | mel | external
    d_embed: int = 64
    d_proj: int = 128
    patch_samples: int = 640
    max_positions: int = 750  # 30 s of 40 ms patches
    cnn_channels: int = 32
    mel: MelParams = field(default_factory=MelParams)

    def __post_init__(self):
        if self.kind not in ("raw", "mel", "external"):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")


@dataclass
class TokenSequence:
    """Per-clip acoustic tokens with a validity mask."""

    tokens: Tensor  # (N, d)
    mask: np.ndarray  # (N,) bool, True = real token
    site: str
    n_valid: int

    def __post_init__(self):
        if self.mask.shape != (self.tokens.shape[0],):
            raise DataError("token/mask length mismatch")
        if self.mask[self.n_valid :].any():
            raise DataError("mask set beyond n_valid")

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


# ---------------------------------------------------------------------------
# raw waveform tokenizer
# ---------------------------------------------------------------------------


class RawTokenizer:
    """40 ms patch projection: token_n = W_patch @ patch_n + pos_n."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        p = cfg.patch_samples
        self.cfg = cfg
        self.w_patch = T.parameter(rng.standard_normal((cfg.d_embed, p)) / np.sqrt(p), "raw.w_patch")
        self.pos = T.parameter(rng.standard_normal((cfg.max_positions, cfg.d_embed)) * 0.02, "raw.pos")

    def params(self) -> dict[str, Tensor]:
        return {"raw.w_patch": self.w_patch, "raw.pos": self.pos}

    def tokenize(self, clip: AudioClip) -> TokenSequence:
        p = self.cfg.patch_samples
        n = len(clip.waveform) // p
        if n > self.pos.shape[0]:
            raise DataError(f"clip has {n} patches, positional table holds {self.pos.shape[0]}")
        x = Tensor(clip.waveform)
        tokens = T.add(T.conv1d_nonoverlap(x, self.w_patch, p), T.embedding(self.pos, np.arange(n)))
        # a patch is real if it overlaps at least one valid sample
        mask = (np.arange(n) * p) < clip.valid_len
        return TokenSequence(tokens=tokens, mask=mask, site=clip.site, n_valid=int(mask.sum()))


# ---------------------------------------------------------------------------
# log-mel spectrogram + 2-D CNN tokenizer
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(mp: MelParams, sample_rate: int = 16_000) -> np.ndarray:
    """Triangular mel filters, (n_mels, n_fft//2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(mp.fmin), hz_to_mel(mp.fmax), mp.n_mels + 2))
    freqs = np.arange(mp.n_fft // 2 + 1) * (sample_rate / mp.n_fft)
    fb = np.zeros((mp.n_mels, len(freqs)))
    for i in range(mp.n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (freqs - lo) / max(mid - lo, 1e-12)
        falling = (hi - freqs) / max(hi - mid, 1e-12)
        fb[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def log_mel_spectrogram(waveform: np.ndarray, mp: MelParams, sample_rate: int = 16_000) -> np.ndarray:
    """(n_mels, frames) natural-log mel power, floored at log_floor.

    Frames are strided without centering: floor((L - win)/hop) + 1 of them.
    """
    n = len(waveform)
    if n < mp.win:
        raise DataError(f"signal of {n} samples shorter than window {mp.win}")
    n_frames = (n - mp.win) // mp.hop + 1
    idx = np.arange(mp.win)[None, :] + mp.hop * np.arange(n_frames)[:, None]
    frames = waveform[idx] * _periodic_hann(mp.win)
    spec = np.abs(np.fft.rfft(frames, n=mp.n_fft, axis=1)) ** 2  # (frames, bins)
    mel = spec @ mel_filterbank(mp, sample_rate).T  # (frames, n_mels)
    return np.log(np.maximum(mel, mp.log_floor)).T


def _periodic_hann(win: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)


class MelTokenizer:
    """Two stride-2 conv stages over the log-mel image, pooled over frequency.

    "Same" padding keeps the time length at ceil(frames/4), so a 30 s clip
    lands at 750 tokens like the raw tokenizer.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.cnn_channels
        self.conv1_w = T.parameter(rng.standard_normal((9, c)) / 3.0, "mel.conv1_w")
        self.conv1_b = T.parameter(np.zeros(c), "mel.conv1_b")
        self.conv2_w = T.parameter(rng.standard_normal((c * 9, cfg.d_embed)) / np.sqrt(c * 9), "mel.conv2_w")
        self.conv2_b = T.parameter(np.zeros(cfg.d_embed), "mel.conv2_b")
        self.pos = T.parameter(rng.standard_normal((cfg.max_positions, cfg.d_embed)) * 0.02, "mel.pos")

    def params(self) -> dict[str, Tensor]:
        return {
            "mel.conv1_w": self.conv1_w,
            "mel.conv1_b": self.conv1_b,
            "mel.conv2_w": self.conv2_w,
            "mel.conv2_b": self.conv2_b,
            "mel.pos": self.pos,
        }

    @staticmethod
    def _conv_stage(x: Tensor, w: Tensor, b: Tensor):
        c, h, wd = x.shape
        h_out, w_out = -(-h // 2), -(-wd // 2)
        pad_h = max((h_out - 1) * 2 + 3 - h, 0)
        pad_w = max((w_out - 1) * 2 + 3 - wd, 0)
        patches = T.extract_patches2d(x, 3, 3, 2, 2, pad_h // 2, pad_w // 2)
        out = T.gelu(T.add(T.matmul(patches, w), b))  # (h_out*w_out, c_out)
        return out, h_out, w_out

    def tokenize(self, clip: AudioClip) -> TokenSequence:
        mp = self.cfg.mel
        spec = log_mel_spectrogram(clip.waveform, mp)
        x = Tensor(spec[None])  # (1, n_mels, frames)

        out1, f1, t1 = self._conv_stage(x, self.conv1_w, self.conv1_b)
        x1 = T.transpose(T.reshape(out1, (f1, t1, self.cfg.cnn_channels)), (2, 0, 1))
        out2, f2, t2 = self._conv_stage(x1, self.conv2_w, self.conv2_b)
        grid = T.reshape(out2, (f2, t2, self.cfg.d_embed))
        pooled = T.mean_axis0(grid)  # (t2, d_embed)

        if t2 > self.pos.shape[0]:
            raise DataError(f"clip has {t2} tokens, positional table holds {self.pos.shape[0]}")
        tokens = T.add(pooled, T.embedding(self.pos, np.arange(t2)))
        # token t spans frames [4t, 4t+4); frame f spans samples starting at f*hop
        mask = (np.arange(t2) * 4 * mp.hop) < clip.valid_len
        return TokenSequence(tokens=tokens, mask=mask, site=clip.site, n_valid=int(mask.sum()))


# ---------------------------------------------------------------------------
# external embedding store
# ---------------------------------------------------------------------------

_EMB_MAGIC = b"AEMB"


class EmbeddingStore:
    """One float32 matrix per clip id, plus an index file mapping id -> path."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "index.json"
        self._index: dict[str, str] = {}
        if self.index_path.exists():
            self._index = json.loads(self.index_path.read_text())

    def put(self, clip_id: str, matrix: np.ndarray) -> None:
        if matrix.ndim != 2:
            raise DataError("embedding matrix must be 2-D")
        fname = f"emb_{len(self._index):06d}.bin"
        n, d = matrix.shape
        with open(self.root / fname, "wb") as fh:
            fh.write(_EMB_MAGIC)
            fh.write(struct.pack("<II", n, d))
            fh.write(matrix.astype("<f4").tobytes())
        self._index[clip_id] = fname
        self.index_path.write_text(json.dumps(self._index, indent=0, sort_keys=True))

    def get(self, clip_id: str) -> np.ndarray:
        if clip_id not in self._index:
            raise DataError(f"no embedding stored for clip id {clip_id!r}")
        blob = (self.root / self._index[clip_id]).read_bytes()
        if blob[:4] != _EMB_MAGIC:
            raise DataError(f"bad embedding magic for {clip_id!r}")
        n, d = struct.unpack_from("<II", blob, 4)
        mat = np.frombuffer(blob, dtype="<f4", count=n * d, offset=12)
        if mat.size != n * d:
            raise DataError(f"truncated embedding payload for {clip_id!r}")
        return mat.reshape(n, d).astype(np.float64)


def load_external(clip_id: str, store: EmbeddingStore, cfg: EncoderConfig, site: str = "") -> TokenSequence:
    """Wrap a precomputed embedding matrix as a fully-valid token sequence."""
    mat = store.get(clip_id)
    if mat.shape[1] != cfg.d_embed:
        raise ConfigError(
            f"embedding width {mat.shape[1]} for {clip_id!r} does not match configured d_embed {cfg.d_embed}"
        )
    n = mat.shape[0]
    return TokenSequence(tokens=Tensor(mat), mask=np.ones(n, dtype=bool), site=site, n_valid=n)


# ---------------------------------------------------------------------------
# shared projection into the LM width
# ---------------------------------------------------------------------------


class Projection:
    """token -> GELU(layernorm(token) @ W + b), mask untouched."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d_in, d_out = cfg.d_embed, cfg.d_proj
        self.ln_g = T.parameter(np.ones(d_in), "proj.ln_g")
        self.ln_b = T.parameter(np.zeros(d_in), "proj.ln_b")
        self.w = T.parameter(rng.standard_normal((d_in, d_out)) / np.sqrt(d_in), "proj.w")
        self.b = T.parameter(np.zeros(d_out), "proj.b")

    def params(self) -> dict[str, Tensor]:
        return {"proj.ln_g": self.ln_g, "proj.ln_b": self.ln_b, "proj.w": self.w, "proj.b": self.b}

    def __call__(self, seq: TokenSequence) -> TokenSequence:
        if seq.width != self.w.shape[0]:
            raise DataError(f"token width {seq.width} does not match projection input {self.w.shape[0]}")
        out = T.gelu(T.add(T.matmul(T.layernorm(seq.tokens, self.ln_g, self.ln_b), self.w), self.b))
        return TokenSequence(tokens=out, mask=seq.mask, site=seq.site, n_valid=seq.n_valid)


def make_tokenizer(cfg: EncoderConfig, rng: np.random.Generator):
    if cfg.kind == "raw":
        return RawTokenizer(cfg, rng)
    if cfg.kind == "mel":
        return MelTokenizer(cfg, rng)
    raise ConfigError("external encoders are file-backed; use load_external with an EmbeddingStore")
