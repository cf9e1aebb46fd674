"""Synthetic auscultation corpora with plantable events and derivable answers.

Each patient gets a bag of recordings at named sites over a pink-ish noise
floor. Abnormal patients carry one event clip: a murmur (150-400 Hz
band-limited noise burst) or a crackle (damped impulse train), mixed at a
controlled SNR, with onset uniform over the clip. Every site also hums a
faint identifying carrier tone; without one, a clip-order-invariant latent
summary could never answer *which site* an event came from, since site labels
otherwise exist only in text.

Gold answers are filled from the event metadata, so the generator doubles as
its own labeling oracle.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import write_wav_pcm16
from .data import ClipEntry, PatientRecord, QAPair, write_manifest
from .errors import DataError

MURMUR_BAND = (150.0, 400.0)
SITE_NAMES = {"AV": "aortic", "PV": "pulmonic", "TV": "tricuspid", "MV": "mitral"}
_SITE_TONE_BASE_HZ = 500.0
_SITE_TONE_STEP_HZ = 200.0


@dataclass
class SynthSpec:
    n_patients: int = 50
    sites: list[str] = field(default_factory=lambda: ["AV", "PV", "TV", "MV"])
    clip_seconds: tuple[float, float] = (4.0, 8.0)
    clips_per_patient: tuple[int, int] = (3, 6)  # (1, 1) gives a single-recording corpus
    abnormal_rate: float = 0.5
    event_kinds: tuple[str, ...] = ("murmur", "crackle")
    event_seconds: float = 1.5
    snr_db: float = 10.0
    site_tone_db: float = -8.0
    sample_rates: tuple[int, ...] = (16_000, 22_050, 8_000)
    stereo_prob: float = 0.25
    dataset_tag: str = "synth"
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1:
            raise DataError("need at least one patient")
        if self.clips_per_patient[0] < 1:
            raise DataError("every bag needs at least one clip")
        if not 0.0 <= self.abnormal_rate <= 1.0:
            raise DataError("abnormal_rate must be a probability")


@dataclass
class ClipTruth:
    site: str
    event: str  # murmur | crackle | none
    onset: float  # seconds; meaningful only when event != none
    seconds: float


@dataclass
class GroundTruth:
    patient_id: str
    condition: str  # murmur | crackle | none
    event_site: str | None
    clips: list[ClipTruth]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def site_tone_hz(spec: SynthSpec, site: str) -> float:
    return _SITE_TONE_BASE_HZ + _SITE_TONE_STEP_HZ * spec.sites.index(site)


def _band_indices(n: int, rate: float, lo: float, hi: float) -> np.ndarray:
    freqs = np.fft.rfftfreq(n, d=1.0 / rate)
    return (freqs >= lo) & (freqs <= hi)


def band_power(x: np.ndarray, rate: float, lo: float, hi: float) -> float:
    """Mean squared magnitude of the spectrum inside [lo, hi] Hz."""
    spec = np.abs(np.fft.rfft(x)) ** 2
    sel = _band_indices(len(x), rate, lo, hi)
    return float(spec[sel].mean()) if sel.any() else 0.0


def _pink_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    white = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n)
    shaping = np.ones_like(freqs)
    nonzero = freqs > 0
    shaping[nonzero] = 1.0 / np.sqrt(freqs[nonzero] / freqs[nonzero].min())
    x = np.fft.irfft(white * shaping, n=n)
    return x / (x.std() + 1e-12)


def _murmur_burst(rng: np.random.Generator, n_total: int, rate: int, onset: float, seconds: float) -> np.ndarray:
    """Band-limited noise burst placed at ``onset``, zero elsewhere."""
    start = int(onset * rate)
    length = min(int(seconds * rate), n_total - start)
    if length <= 0:
        return np.zeros(n_total)
    noise = rng.standard_normal(length)
    spec = np.fft.rfft(noise)
    sel = _band_indices(length, rate, *MURMUR_BAND)
    spec[~sel] = 0.0
    burst = np.fft.irfft(spec, n=length)
    burst *= np.hanning(length)  # soften edges
    out = np.zeros(n_total)
    out[start : start + length] = burst
    return out


def _crackle_train(rng: np.random.Generator, n_total: int, rate: int, onset: float, seconds: float) -> np.ndarray:
    """Sparse damped clicks spread over the event window, zero elsewhere."""
    start = int(onset * rate)
    length = min(int(seconds * rate), n_total - start)
    if length <= 0:
        return np.zeros(n_total)
    out = np.zeros(n_total)
    click_len = int(0.005 * rate)
    decay = np.exp(-np.arange(click_len) / (0.001 * rate))
    n_clicks = max(4, int(seconds * 6))
    positions = np.sort(rng.integers(0, max(length - click_len, 1), size=n_clicks))
    for pos in positions:
        sign = 1.0 if rng.random() < 0.5 else -1.0
        seg = start + pos
        out[seg : seg + click_len] += sign * decay[: max(0, min(click_len, n_total - seg))]
    return out


def _scaled_to_snr(event: np.ndarray, background: np.ndarray, rate: int, snr_db: float, band=None) -> np.ndarray:
    """Scale the event so its (band) power sits snr_db above the background's."""
    if band is not None:
        p_event = band_power(event, rate, *band)
        p_bg = band_power(background, rate, *band)
    else:
        p_event = float(np.mean(event**2))
        p_bg = float(np.mean(background**2))
    if p_event <= 0:
        return event
    target = p_bg * 10.0 ** (snr_db / 10.0)
    return event * np.sqrt(target / p_event)


_WAV_GAIN = 0.12  # fixed; per-clip peak normalization would distort cross-file power ratios


def synthesize_clip(spec: SynthSpec, rng: np.random.Generator, truth: ClipTruth, rate: int) -> np.ndarray:
    n = int(truth.seconds * rate)
    x = _pink_noise(rng, n)

    tone_t = np.arange(n) / rate
    tone = np.sin(2 * np.pi * site_tone_hz(spec, truth.site) * tone_t + rng.uniform(0, 2 * np.pi))
    tone *= np.sqrt(np.mean(x**2) * 10.0 ** (spec.site_tone_db / 10.0)) * np.sqrt(2.0)
    x = x + tone

    if truth.event == "murmur":
        burst = _murmur_burst(rng, n, rate, truth.onset, spec.event_seconds)
        x = x + _scaled_to_snr(burst, x, rate, spec.snr_db, band=MURMUR_BAND)
    elif truth.event == "crackle":
        train = _crackle_train(rng, n, rate, truth.onset, spec.event_seconds)
        peak = np.max(np.abs(train))
        if peak > 0:
            # clicks sized by prominence over the noise floor, not total power
            target_peak = np.sqrt(np.mean(x**2)) * 10.0 ** (spec.snr_db / 20.0) * 1.5
            x = x + train * (target_peak / peak)

    return np.clip(x * _WAV_GAIN, -0.999, 0.999)


def plan_patient(spec: SynthSpec, index: int, rng: np.random.Generator) -> GroundTruth:
    """Draw one patient's condition, sites, and event placement."""
    pid = f"p{index:05d}"
    m = int(rng.integers(spec.clips_per_patient[0], spec.clips_per_patient[1] + 1))
    sites = [spec.sites[i % len(spec.sites)] for i in range(m)]
    rng.shuffle(sites)

    abnormal = rng.random() < spec.abnormal_rate
    condition = spec.event_kinds[int(rng.integers(len(spec.event_kinds)))] if abnormal else "none"
    event_clip = int(rng.integers(m)) if abnormal else -1

    clips = []
    for i in range(m):
        seconds = float(rng.uniform(*spec.clip_seconds))
        event = condition if i == event_clip else "none"
        onset = float(rng.uniform(0.0, seconds)) if event != "none" else 0.0
        clips.append(ClipTruth(site=sites[i], event=event, onset=onset, seconds=seconds))
    return GroundTruth(
        patient_id=pid,
        condition=condition,
        event_site=clips[event_clip].site if abnormal else None,
        clips=clips,
    )


def derive_qa(truth: GroundTruth) -> list[QAPair]:
    """Template-filled questions whose answers follow from the ground truth."""
    abnormal = truth.condition != "none"
    qa = [
        QAPair(
            question="is an abnormal sound present ?",
            answer="yes" if abnormal else "no",
            kind="binary",
        ),
        QAPair(
            question="what abnormal sound do you hear ?",
            answer=f"a {truth.condition}" if abnormal else "no abnormal sound",
            kind="open",
        ),
        QAPair(
            question="which site shows the abnormality ?",
            answer=f"the {SITE_NAMES.get(truth.event_site, str(truth.event_site).lower())} site"
            if abnormal
            else "no site",
            kind="open",
        ),
    ]
    return qa


def generate(spec: SynthSpec, out_dir) -> tuple[Path, list[GroundTruth]]:
    """Write WAVs, a patient manifest, and the ground-truth sidecar.

    Per-patient generators are spawned from one seed sequence, so outputs are
    byte-identical for a given spec regardless of generation order.
    """
    out = Path(out_dir)
    wav_dir = out / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)

    children = np.random.SeedSequence(spec.seed).spawn(spec.n_patients)
    records = []
    truths = []
    for idx in range(spec.n_patients):
        rng = np.random.default_rng(children[idx])
        truth = plan_patient(spec, idx, rng)
        truths.append(truth)
        entries = []
        for ci, clip_truth in enumerate(truth.clips):
            rate = int(spec.sample_rates[int(rng.integers(len(spec.sample_rates)))])
            x = synthesize_clip(spec, rng, clip_truth, rate)
            if rng.random() < spec.stereo_prob:
                jitter = 0.01 * rng.standard_normal(len(x))
                x = np.vstack([x, x + jitter])
            rel = f"wav/{truth.patient_id}_{ci}_{clip_truth.site}.wav"
            write_wav_pcm16(out / rel, x, rate)
            entries.append(ClipEntry(path=rel, site=clip_truth.site))
        records.append(
            PatientRecord(
                patient_id=truth.patient_id,
                dataset_tag=spec.dataset_tag,
                clips=entries,
                qa=derive_qa(truth),
            )
        )

    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    (out / "groundtruth.json").write_text(
        json.dumps([t.to_dict() for t in truths], indent=1)
    )
    return manifest, truths
