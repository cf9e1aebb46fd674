"""Fusion training: splits, balanced sampling, accumulation, checkpoints.

One training sample is a (patient, question) pair. Micro-batches of samples
are backpropagated with their losses scaled by 1/effective_batch, so
accumulating ``accum_steps`` micro-batches and stepping once is numerically
the mean-loss step over the whole effective batch. The language model group
is frozen throughout; only encoder and adapter groups move.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import params_sha
from .data import PatientRecord, load_bag
from .encoders import EncoderConfig, MelParams
from .errors import ConfigError, DataError, TrainingError
from .lm import INSTRUCTION, AUDIO_TOKEN, LMConfig, TextVocab, pretrain_text_lm
from .metrics import MetricReport, Prediction, evaluate, write_predictions_jsonl
from .model import FusionModel, ModelConfig, load_lm_checkpoint, save_lm_checkpoint
from .optim import AdamW, clip_grad_norm
from .resampler import ResamplerConfig


@dataclass
class LMSpec:
    """Decoder shape without the vocabulary size (fixed at pretrain time)."""

    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ffn: int = 512
    max_seq: int = 512
    cross_attn_every: int = 1


@dataclass
class PretrainSpec:
    epochs: int = 10
    lr: float = 3e-3
    min_freq: int = 2


@dataclass
class TrainConfig:
    lr_encoder: float = 5e-6
    lr_adapter: float = 1.5e-5
    lr_gates: float | None = None  # gate scalars; falls back to lr_adapter
    micro_batch: int = 4
    accum_steps: int = 4
    epochs: int = 5
    seed: int = 0
    max_seconds: float = 30.0
    balanced_sampling: bool = True
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    max_new_tokens: int = 12
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    resampler: ResamplerConfig = field(default_factory=ResamplerConfig)
    lm: LMSpec = field(default_factory=LMSpec)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accum_steps

    def __post_init__(self):
        if self.micro_batch < 1 or self.accum_steps < 1:
            raise ConfigError("micro_batch and accum_steps must be positive")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError("split ratios must sum to 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        if "encoder" in raw:
            enc = dict(raw["encoder"])
            if "mel" in enc:
                enc["mel"] = MelParams(**enc["mel"])
            raw["encoder"] = EncoderConfig(**enc)
        if "resampler" in raw:
            raw["resampler"] = ResamplerConfig(**raw["resampler"])
        if "lm" in raw:
            raw["lm"] = LMSpec(**raw["lm"])
        if "pretrain" in raw:
            raw["pretrain"] = PretrainSpec(**raw["pretrain"])
        if "split_ratios" in raw:
            raw["split_ratios"] = tuple(raw["split_ratios"])
        return cls(**raw)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SplitManifest:
    train: list[str]
    val: list[str]
    test: list[str]
    tags: dict[str, str]  # patient id -> dataset tag

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test, "tags": self.tags}

    @classmethod
    def from_dict(cls, raw: dict) -> "SplitManifest":
        return cls(train=raw["train"], val=raw["val"], test=raw["test"], tags=raw["tags"])


def make_splits(records: list[PatientRecord], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitManifest:
    """Patient-level split, stratified by dataset tag, deterministic in seed."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError("split ratios must sum to 1")
    by_tag: dict[str, list[str]] = {}
    tags = {}
    for r in records:
        by_tag.setdefault(r.dataset_tag, []).append(r.patient_id)
        tags[r.patient_id] = r.dataset_tag
    rng = np.random.default_rng(seed)
    train: list[str] = []
    val: list[str] = []
    test: list[str] = []
    n_parts = sum(1 for r in ratios if r > 0)
    for tag in sorted(by_tag):
        ids = sorted(by_tag[tag])
        if len(ids) < n_parts:
            raise DataError(f"dataset {tag!r} has {len(ids)} patients, fewer than {n_parts} splits")
        rng.shuffle(ids)
        n = len(ids)
        n_val = int(round(ratios[1] * n)) if ratios[1] > 0 else 0
        n_test = int(round(ratios[2] * n)) if ratios[2] > 0 else 0
        n_val = max(n_val, 1) if ratios[1] > 0 else 0
        n_test = max(n_test, 1) if ratios[2] > 0 else 0
        if n - n_val - n_test < (1 if ratios[0] > 0 else 0):
            raise DataError(f"dataset {tag!r} too small for ratios {ratios}")
        test.extend(ids[:n_test])
        val.extend(ids[n_test : n_test + n_val])
        train.extend(ids[n_test + n_val :])
    return SplitManifest(train=sorted(train), val=sorted(val), test=sorted(test), tags=tags)


class BalancedSampler:
    """Uniform over dataset tags, then uniform (shuffled cycle) within a tag.

    With a single tag, or with balancing off, this degrades to a plain
    reshuffled cycle over all patients.
    """

    def __init__(self, ids: list[str], tags: dict[str, str], seed, balanced: bool = True):
        if not ids:
            raise DataError("sampler got no patients")
        self.rng = np.random.default_rng(seed)
        if balanced:
            groups: dict[str, list[str]] = {}
            for pid in sorted(ids):
                groups.setdefault(tags[pid], []).append(pid)
            self.tag_names = sorted(groups)
            self.groups = [groups[t] for t in self.tag_names]
        else:
            self.tag_names = ["all"]
            self.groups = [sorted(ids)]
        self._queues: list[list[str]] = [[] for _ in self.groups]

    def draw(self) -> str:
        gi = int(self.rng.integers(len(self.groups))) if len(self.groups) > 1 else 0
        if not self._queues[gi]:
            order = list(self.groups[gi])
            self.rng.shuffle(order)
            self._queues[gi] = order
        return self._queues[gi].pop()


def build_transcript(record: PatientRecord, question: str, answer: str) -> str:
    parts = [INSTRUCTION]
    for clip in record.clips:
        parts.append(AUDIO_TOKEN)
        parts.append(clip.site.lower())
    parts.append(f"question: {question} answer: {answer}")
    return " ".join(parts)


def pretrain_lm_from_records(
    records: list[PatientRecord], cfg: TrainConfig, out_path
) -> tuple[Path, SplitManifest]:
    """Build vocab + pretrain the decoder on the train split's transcripts.

    Uses the same split procedure as fusion training (same seed) so the text
    prior never sees validation or test patients.
    """
    splits = make_splits(records, cfg.split_ratios, cfg.seed)
    train_ids = set(splits.train)
    transcripts = [
        build_transcript(r, qa.question, qa.answer)
        for r in records
        if r.patient_id in train_ids
        for qa in r.qa
    ]
    vocab = TextVocab.build(transcripts, min_freq=cfg.pretrain.min_freq)
    lm_cfg = LMConfig(vocab_size=len(vocab), **dataclasses.asdict(cfg.lm))
    lm = pretrain_text_lm(
        transcripts,
        lm_cfg,
        vocab,
        epochs=cfg.pretrain.epochs,
        lr=cfg.pretrain.lr,
        seed=cfg.seed,
        weight_decay=cfg.weight_decay,
    )
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_lm_checkpoint(out_path, lm, vocab, extra_meta={"pretrain_transcripts": len(transcripts)})
    return out_path, splits


@dataclass
class TrainResult:
    model: FusionModel
    out_dir: Path
    splits: SplitManifest
    history: list[dict]
    report: MetricReport
    best_ckpt: Path
    frozen_sha_before: str
    frozen_sha_after: str


def _mean_qa_loss(model: FusionModel, records: list[PatientRecord], root, max_seconds: float) -> float:
    total, count = 0.0, 0
    with T.no_grad():
        for record in records:
            bag = load_bag(record, root, max_seconds)
            for qa in record.qa:
                total += model.qa_loss(bag, qa.question, qa.answer).item()
                count += 1
    return total / max(count, 1)


def predictions_for(
    model: FusionModel,
    records: list[PatientRecord],
    root,
    max_seconds: float,
    max_new: int = 12,
    use_audio: bool = True,
) -> list[Prediction]:
    preds = []
    for record in records:
        bag = load_bag(record, root, max_seconds)
        for qa in record.qa:
            _, hyp = model.answer(bag, qa.question, max_new=max_new, use_audio=use_audio)
            preds.append(
                Prediction(
                    patient_id=record.patient_id,
                    question=qa.question,
                    gold=qa.answer,
                    hyp=hyp,
                    kind=qa.kind,
                    dataset_tag=record.dataset_tag,
                )
            )
    return preds


def train(
    cfg: TrainConfig,
    records: list[PatientRecord],
    root,
    lm_ckpt_path,
    out_dir,
    splits: SplitManifest | None = None,
) -> TrainResult:
    """Full fusion run: train on the train split, track val, report on test."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = splits or make_splits(records, cfg.split_ratios, cfg.seed)
    by_id = {r.patient_id: r for r in records}

    lm, vocab = load_lm_checkpoint(lm_ckpt_path)
    frozen_before = params_sha({n: t.data for n, t in lm.params().items()})

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    model = FusionModel(
        ModelConfig(encoder=cfg.encoder, resampler=cfg.resampler),
        lm,
        vocab,
        np.random.default_rng(seeds[0]),
    )
    groups = model.parameter_groups(cfg.lr_encoder, cfg.lr_adapter, cfg.lr_gates)
    opt = AdamW(groups, weight_decay=cfg.weight_decay)
    sampler = BalancedSampler(splits.train, splits.tags, seeds[1], cfg.balanced_sampling)
    qa_rng = np.random.default_rng(seeds[2])

    n_train_qa = sum(len(by_id[pid].qa) for pid in splits.train)
    steps_per_epoch = max(1, math.ceil(n_train_qa / cfg.effective_batch))
    eb = cfg.effective_batch

    history: list[dict] = []
    best_val = math.inf
    best_ckpt = out / "best.ckpt"
    lr_info = {
        "encoder": cfg.lr_encoder,
        "adapter": cfg.lr_adapter,
        "gates": cfg.lr_gates if cfg.lr_gates is not None else cfg.lr_adapter,
    }

    for epoch in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            batch_loss = 0.0
            for _ in range(cfg.accum_steps):
                for _ in range(cfg.micro_batch):
                    record = by_id[sampler.draw()]
                    qa = record.qa[int(qa_rng.integers(len(record.qa)))]
                    bag = load_bag(record, root, cfg.max_seconds)
                    loss = model.qa_loss(bag, qa.question, qa.answer)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise TrainingError(
                            f"non-finite loss on patient {record.patient_id!r}, question {qa.question!r}"
                        )
                    batch_loss += value
                    T.backward(T.mul(loss, 1.0 / eb))
            clip_grad_norm(groups, cfg.clip_norm)
            opt.step()
            opt.zero_grad()
            history.append(
                {
                    "step": opt.step_count,
                    "split": "train",
                    "loss": batch_loss / eb,
                    "lr": lr_info,
                    "gate_means": model.gates(),
                }
            )
        val_loss = _mean_qa_loss(model, [by_id[p] for p in splits.val], root, cfg.max_seconds)
        history.append(
            {
                "step": opt.step_count,
                "split": "val",
                "loss": val_loss,
                "lr": lr_info,
                "gate_means": model.gates(),
            }
        )
        if val_loss < best_val:
            best_val = val_loss
            model.save(best_ckpt, extra_meta={"epoch": epoch, "val_loss": val_loss})

    if not best_ckpt.exists():
        model.save(best_ckpt, extra_meta={"epoch": cfg.epochs - 1, "val_loss": best_val})
    model.save(out / "last.ckpt")

    frozen_after = params_sha({n: t.data for n, t in model.lm.params().items()})

    test_records = [by_id[p] for p in splits.test]
    preds = predictions_for(model, test_records, root, cfg.max_seconds, cfg.max_new_tokens)
    report = evaluate(preds)

    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    (out / "splits.json").write_text(json.dumps(splits.to_dict(), indent=2, sort_keys=True))
    with open(out / "metrics.jsonl", "w") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")
    write_predictions_jsonl(out / "test_preds.jsonl", preds)
    (out / "report.json").write_text(report.to_json())

    return TrainResult(
        model=model,
        out_dir=out,
        splits=splits,
        history=history,
        report=report,
        best_ckpt=best_ckpt,
        frozen_sha_before=frozen_before,
        frozen_sha_after=frozen_after,
    )


def _completed_run_matches(run_dir: Path, cfg: TrainConfig) -> bool:
    cfg_path = run_dir / "config.json"
    report_path = run_dir / "report.json"
    if not (cfg_path.exists() and report_path.exists()):
        return False
    try:
        stored = json.loads(cfg_path.read_text())
    except json.JSONDecodeError:
        return False
    return stored == json.loads(json.dumps(cfg.to_dict()))


def ablate_context(
    cfg: TrainConfig,
    records: list[PatientRecord],
    root,
    lm_ckpt_path,
    out_dir,
    seconds_list=(30.0, 20.0, 10.0),
    main_run: Path | None = None,
) -> dict[float, MetricReport]:
    """Retrain and evaluate at each maximum duration; rows keyed by seconds.

    A duration whose run directory already holds a completed, config-matching
    run is reused instead of retrained; ``main_run`` lets the primary training
    output stand in for its own duration.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports: dict[float, MetricReport] = {}
    for seconds in seconds_list:
        run_cfg = dataclasses.replace(cfg, max_seconds=float(seconds))
        run_dir = out / f"ctx{int(seconds)}s"
        reused = None
        for candidate in ([main_run] if main_run else []) + [run_dir]:
            if candidate and _completed_run_matches(Path(candidate), run_cfg):
                reused = Path(candidate)
                break
        if reused is not None:
            raw = json.loads((reused / "report.json").read_text())
            reports[float(seconds)] = MetricReport(
                overall=raw["overall"], per_dataset=raw["per_dataset"],
                counts=raw["counts"], flags=raw.get("flags", {}),
            )
            continue
        result = train(run_cfg, records, root, lm_ckpt_path, run_dir)
        reports[float(seconds)] = result.report

    summary = {
        f"{seconds:g}s": reports[float(seconds)].overall for seconds in seconds_list
    }
    (out / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return reports


def ablation_table(reports: dict[float, MetricReport]) -> str:
    metrics = sorted({m for r in reports.values() for m in r.overall})
    width = max(len(m) for m in metrics) + 2
    header = "context".ljust(10) + "".join(m.rjust(width) for m in metrics)
    lines = [header, "-" * len(header)]
    for seconds in sorted(reports, reverse=True):
        row = reports[seconds].overall
        cells = "".join(
            (f"{row[m]:.4f}" if m in row else "-").rjust(width) for m in metrics
        )
        lines.append(f"{seconds:g}s".ljust(10) + cells)
    return "\n".join(lines)
