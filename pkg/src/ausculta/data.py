"""Patient records, bags, and the manifest format shared by synthetic and
real data.

A manifest is line-delimited JSON, one patient per line:
``{"patient_id", "dataset", "clips": [{"path", "site"}], "qa": [{"question",
"answer", "kind"}]}``. Clip paths are relative to the manifest's directory.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass
from pathlib import Path

from .audio import AudioClip, preprocess_wav, read_clip, truncate_clip, write_clip
from .errors import DataError
from .metrics import normalize_text


@dataclass
class QAPair:
    question: str
    answer: str
    kind: str  # binary | open

    def __post_init__(self):
        if self.kind not in ("binary", "open"):
            raise DataError(f"unknown qa kind {self.kind!r}")
        if self.kind == "binary" and normalize_text(self.answer) not in ("yes", "no"):
            raise DataError(f"binary answer {self.answer!r} does not normalize to yes/no")


@dataclass
class ClipEntry:
    path: str  # relative to the manifest directory
    site: str


@dataclass
class PatientRecord:
    patient_id: str
    dataset_tag: str
    clips: list[ClipEntry]
    qa: list[QAPair]

    def __post_init__(self):
        if not self.clips:
            raise DataError(f"patient {self.patient_id} has no clips")


@dataclass
class PatientBag:
    """A patient's loaded clips plus their question/answer pairs."""

    patient_id: str
    clips: list[AudioClip]
    qa_pairs: list[QAPair]
    dataset_tag: str
    clip_ids: list[str] | None = None  # manifest paths; key external embeddings

    def __post_init__(self):
        if not self.clips:
            raise DataError(f"bag for {self.patient_id} is empty")

    @property
    def sites(self) -> list[str]:
        return [c.site for c in self.clips]


def write_manifest(path, records: list[PatientRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "patient_id": r.patient_id,
                        "dataset": r.dataset_tag,
                        "clips": [{"path": c.path, "site": c.site} for c in r.clips],
                        "qa": [
                            {"question": q.question, "answer": q.answer, "kind": q.kind}
                            for q in r.qa
                        ],
                    }
                )
                + "\n"
            )


def read_manifest(path) -> list[PatientRecord]:
    records = []
    seen = set()
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                record = PatientRecord(
                    patient_id=rec["patient_id"],
                    dataset_tag=rec.get("dataset", "default"),
                    clips=[ClipEntry(path=c["path"], site=c["site"]) for c in rec["clips"]],
                    qa=[QAPair(q["question"], q["answer"], q["kind"]) for q in rec.get("qa", [])],
                )
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}:{line_no}: bad manifest record: {exc}") from exc
            if record.patient_id in seen:
                raise DataError(f"{path}:{line_no}: duplicate patient id {record.patient_id}")
            seen.add(record.patient_id)
            records.append(record)
    if not records:
        raise DataError(f"{path}: empty manifest")
    return records


@functools.lru_cache(maxsize=4096)
def _cached_clip(path_str: str, patient_id: str) -> AudioClip:
    return read_clip(path_str, patient_id=patient_id)


def load_bag(record: PatientRecord, root, max_seconds: float | None = None) -> PatientBag:
    """Materialize a record's preprocessed clips, optionally re-truncated."""
    root = Path(root)
    clips = []
    for entry in record.clips:
        clip = _cached_clip(str(root / entry.path), record.patient_id)
        if clip.site != entry.site:
            clip = AudioClip(clip.waveform, clip.valid_len, entry.site, record.patient_id)
        if max_seconds is not None:
            clip = truncate_clip(clip, max_seconds)
        clips.append(clip)
    return PatientBag(
        patient_id=record.patient_id,
        clips=clips,
        qa_pairs=record.qa,
        dataset_tag=record.dataset_tag,
        clip_ids=[entry.path for entry in record.clips],
    )


def preprocess_manifest(manifest_path, out_dir, max_seconds: float = 30.0) -> Path:
    """Run the audio chain over every WAV in a manifest.

    Writes one ``.clip`` file per recording plus a rewritten manifest whose
    clip paths point at them. Returns the new manifest path.
    """
    manifest_path = Path(manifest_path)
    records = read_manifest(manifest_path)
    src_root = manifest_path.parent
    out = Path(out_dir)
    clip_dir = out / "clips"
    clip_dir.mkdir(parents=True, exist_ok=True)

    rewritten = []
    for record in records:
        new_entries = []
        for i, entry in enumerate(record.clips):
            clip = preprocess_wav(
                src_root / entry.path, site=entry.site, patient_id=record.patient_id,
                max_seconds=max_seconds,
            )
            rel = f"clips/{record.patient_id}_{i}.clip"
            write_clip(out / rel, clip)
            new_entries.append(ClipEntry(path=rel, site=entry.site))
        rewritten.append(
            PatientRecord(
                patient_id=record.patient_id,
                dataset_tag=record.dataset_tag,
                clips=new_entries,
                qa=record.qa,
            )
        )
    new_manifest = out / "manifest.jsonl"
    write_manifest(new_manifest, rewritten)
    return new_manifest
