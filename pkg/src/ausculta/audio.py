"""Audio ingestion and preprocessing.

Every recording, whatever its source rate and channel count, is funnelled to
the same contract: 16 kHz mono float64, z-scored over its real samples,
truncated to at most 30 s, and zero-padded up to a whole number of 640-sample
(40 ms) patches. The result is an ``AudioClip``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.signal import upfirdn

from .errors import DataError, WavDecodeError

TARGET_RATE = 16_000
PATCH_SAMPLES = 640
MAX_SECONDS_DEFAULT = 30.0
NORM_EPS = 1e-8

_CLIP_MAGIC = b"ACLP"
_CLIP_VERSION = 1

# polyphase anti-alias filter: taps per phase and Kaiser shape
_TAPS_PER_PHASE = 64
_KAISER_BETA = 8.6


@dataclass
class RawRecording:
    """Decoded audio exactly as found on disk (channels x samples)."""

    samples: np.ndarray  # (channels, n) float64
    sample_rate: int
    source_path: str = ""

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclass
class AudioClip:
    """Preprocessed mono waveform: the unit every encoder consumes.

    ``waveform`` is 16 kHz float64, length a multiple of 640 and at most
    480,000; samples past ``valid_len`` are exactly zero.
    """

    waveform: np.ndarray
    valid_len: int
    site: str
    patient_id: str = ""

    def __post_init__(self):
        n = len(self.waveform)
        if n % PATCH_SAMPLES != 0:
            raise DataError(f"clip length {n} not a multiple of {PATCH_SAMPLES}")
        if not 0 < self.valid_len <= n:
            raise DataError(f"valid_len {self.valid_len} out of range for length {n}")

    @property
    def n_patches(self) -> int:
        return len(self.waveform) // PATCH_SAMPLES


# ---------------------------------------------------------------------------
# WAV decode / encode
# ---------------------------------------------------------------------------


def load_wav(path) -> RawRecording:
    """Decode a RIFF/WAVE file (PCM-16 or IEEE float32).

    PCM samples are scaled to [-1, 1] by 1/32768; float32 payloads are taken
    verbatim. Anything else raises WavDecodeError.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise WavDecodeError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        cid = blob[pos : pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = blob[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavDecodeError(f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            if size < 16:
                raise WavDecodeError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)

    if fmt is None or data is None:
        raise WavDecodeError(f"{path}: missing fmt or data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if channels < 1:
        raise WavDecodeError(f"{path}: channel count {channels}")
    if len(data) == 0:
        raise WavDecodeError(f"{path}: zero-length payload")

    if audio_format == 1 and bits == 16:
        flat = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        flat = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise WavDecodeError(f"{path}: unsupported codec (format={audio_format}, bits={bits})")

    if flat.size % channels != 0:
        raise WavDecodeError(f"{path}: payload not a whole number of frames")
    samples = flat.reshape(-1, channels).T.copy()
    return RawRecording(samples=samples, sample_rate=rate, source_path=str(path))


def write_wav_pcm16(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write a mono or multi-channel PCM-16 WAV. ``samples``: (channels, n)."""
    if samples.ndim == 1:
        samples = samples[None, :]
    channels, n = samples.shape
    ints = np.clip(np.round(samples.T * 32767.0), -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    block = channels * 2
    header = (
        b"RIFF"
        + struct.pack("<I", 36 + len(payload))
        + b"WAVEfmt "
        + struct.pack("<IHHIIHH", 16, 1, channels, sample_rate, sample_rate * block, block, 16)
        + b"data"
        + struct.pack("<I", len(payload))
    )
    with open(path, "wb") as fh:
        fh.write(header + payload)


def write_wav_float32(path, samples: np.ndarray, sample_rate: int) -> None:
    if samples.ndim == 1:
        samples = samples[None, :]
    channels = samples.shape[0]
    payload = samples.T.astype("<f4").tobytes()
    block = channels * 4
    header = (
        b"RIFF"
        + struct.pack("<I", 36 + len(payload))
        + b"WAVEfmt "
        + struct.pack("<IHHIIHH", 16, 3, channels, sample_rate, sample_rate * block, block, 32)
        + b"data"
        + struct.pack("<I", len(payload))
    )
    with open(path, "wb") as fh:
        fh.write(header + payload)


# ---------------------------------------------------------------------------
# preprocessing chain
# ---------------------------------------------------------------------------


def to_mono(rec: RawRecording) -> RawRecording:
    """Average channels down to one."""
    if rec.channels == 1:
        return rec
    mono = rec.samples.mean(axis=0, keepdims=True)
    return RawRecording(samples=mono, sample_rate=rec.sample_rate, source_path=rec.source_path)


def _design_lowpass(up: int, down: int) -> np.ndarray:
    """Windowed-sinc anti-alias filter for an up/down polyphase stage.

    64 taps per upsampling phase, Kaiser window, cutoff at the tighter of the
    two Nyquist limits, gain ``up`` to undo zero-stuffing attenuation.
    """
    half = (_TAPS_PER_PHASE * up) // 2
    n = np.arange(-half, half + 1)
    cutoff = min(1.0 / up, 1.0 / down)  # in units of pi rad/sample
    h = cutoff * np.sinc(cutoff * n)
    h *= np.kaiser(len(n), _KAISER_BETA)
    return h * up


def resample_16k(rec: RawRecording) -> RawRecording:
    """Band-limited resample of a mono recording to 16 kHz.

    Identity-rate input is returned bit-for-bit; otherwise a polyphase
    windowed-sinc stage runs at the rational rate ratio and the output is
    trimmed to round(n * 16000 / in_rate) samples.
    """
    if rec.channels != 1:
        raise DataError("resample_16k expects mono input")
    if rec.sample_rate <= 0:
        raise DataError(f"invalid sample rate {rec.sample_rate}")
    if rec.sample_rate == TARGET_RATE:
        return rec

    g = math.gcd(TARGET_RATE, rec.sample_rate)
    up, down = TARGET_RATE // g, rec.sample_rate // g
    h = _design_lowpass(up, down)
    y = upfirdn(h, rec.samples[0], up=up, down=down)
    # group delay of the symmetric filter, expressed in output samples
    delay = (len(h) - 1) // 2
    start = delay // down
    n_out = int(round(rec.n_samples * TARGET_RATE / rec.sample_rate))
    out = y[start : start + n_out]
    if len(out) < n_out:  # filter tail ran short; pad the edge
        out = np.concatenate([out, np.zeros(n_out - len(out))])
    return RawRecording(samples=out[None, :], sample_rate=TARGET_RATE, source_path=rec.source_path)


def normalize_pad(
    rec: RawRecording,
    max_seconds: float = MAX_SECONDS_DEFAULT,
    site: str = "",
    patient_id: str = "",
) -> AudioClip:
    """Truncate to ``max_seconds`` (head kept), z-score, pad to a patch multiple.

    Normalization statistics come from the retained real samples only, with a
    1e-8 variance floor, so a constant (zero-variance) signal becomes all
    zeros instead of erroring. Padding happens after normalization, making
    pad values exactly 0 in normalized space.
    """
    if rec.channels != 1 or rec.sample_rate != TARGET_RATE:
        raise DataError("normalize_pad expects 16 kHz mono input")
    x = rec.samples[0]
    if len(x) == 0:
        raise DataError("empty signal")
    limit = int(round(max_seconds * TARGET_RATE))
    x = x[:limit]
    valid_len = len(x)

    mu = x.mean()
    sd = math.sqrt(x.var() + NORM_EPS)
    x = (x - mu) / sd

    padded_len = -(-valid_len // PATCH_SAMPLES) * PATCH_SAMPLES
    out = np.zeros(padded_len, dtype=np.float64)
    out[:valid_len] = x
    return AudioClip(waveform=out, valid_len=valid_len, site=site, patient_id=patient_id)


def preprocess_wav(path, site: str, patient_id: str, max_seconds: float = MAX_SECONDS_DEFAULT) -> AudioClip:
    """Full chain: decode -> mono -> 16 kHz -> normalize/pad."""
    return normalize_pad(
        resample_16k(to_mono(load_wav(path))),
        max_seconds=max_seconds,
        site=site,
        patient_id=patient_id,
    )


def truncate_clip(clip: AudioClip, max_seconds: float) -> AudioClip:
    """Re-truncate a preprocessed clip to a shorter duration.

    z-scoring is invariant under the affine map already applied, so
    renormalizing the kept prefix reproduces what preprocessing the original
    recording at the shorter limit would have produced.
    """
    limit = int(round(max_seconds * TARGET_RATE))
    if clip.valid_len <= limit:
        return clip
    x = clip.waveform[:limit].copy()
    mu = x.mean()
    sd = math.sqrt(x.var() + NORM_EPS)
    x = (x - mu) / sd
    padded_len = -(-limit // PATCH_SAMPLES) * PATCH_SAMPLES
    out = np.zeros(padded_len, dtype=np.float64)
    out[:limit] = x
    return AudioClip(waveform=out, valid_len=limit, site=clip.site, patient_id=clip.patient_id)


# ---------------------------------------------------------------------------
# clip container: magic, version, valid_len, length, site, float64 samples
# ---------------------------------------------------------------------------


def write_clip(path, clip: AudioClip) -> None:
    site_bytes = clip.site.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CLIP_MAGIC)
        fh.write(struct.pack("<IQQI", _CLIP_VERSION, clip.valid_len, len(clip.waveform), len(site_bytes)))
        fh.write(site_bytes)
        fh.write(clip.waveform.astype("<f8").tobytes())


def read_clip(path, patient_id: str = "") -> AudioClip:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CLIP_MAGIC:
        raise DataError(f"{path}: bad clip magic")
    version, valid_len, length, site_len = struct.unpack_from("<IQQI", blob, 4)
    if version != _CLIP_VERSION:
        raise DataError(f"{path}: unsupported clip version {version}")
    off = 4 + struct.calcsize("<IQQI")
    site = blob[off : off + site_len].decode("utf-8")
    off += site_len
    wave = np.frombuffer(blob, dtype="<f8", count=length, offset=off).copy()
    if len(wave) != length:
        raise DataError(f"{path}: truncated sample payload")
    return AudioClip(waveform=wave, valid_len=valid_len, site=site, patient_id=patient_id)
