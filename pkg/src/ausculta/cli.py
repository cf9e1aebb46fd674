"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/validation error. Every
command accepts --seed and --config; --seed overrides the config's seed.
The data directory may also come from the AUSCULTA_DATA_ROOT environment
variable when --data is omitted.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .data import preprocess_manifest, read_manifest
from .errors import AuscultaError
from .metrics import evaluate, read_predictions_jsonl, write_predictions_jsonl
from .model import FusionModel
from .synth import SynthSpec, generate
from .training import (
    SplitManifest,
    TrainConfig,
    ablate_context,
    ablation_table,
    predictions_for,
    pretrain_lm_from_records,
    train,
)

DATA_ROOT_ENV = "AUSCULTA_DATA_ROOT"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _add_common(p: _Parser) -> None:
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--config", type=Path, default=None, help="JSON training config")


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _data_dir(args) -> Path:
    if getattr(args, "data", None):
        return Path(args.data)
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    raise AuscultaError(f"no data directory: pass --data or set {DATA_ROOT_ENV}")


def build_parser() -> _Parser:
    parser = _Parser(prog="ausculta", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parser_class=_Parser, help="generate a synthetic corpus")
    p.add_argument("--patients", type=int, default=50)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sil", action="store_true", help="one clip per patient")
    p.add_argument("--clip-seconds", type=str, default="4,8", help="min,max seconds")
    p.add_argument("--clips-per-patient", type=str, default="3,6", help="min,max clips")
    p.add_argument("--abnormal-rate", type=float, default=0.5)
    p.add_argument("--snr-db", type=float, default=10.0)
    p.add_argument("--dataset-tag", type=str, default="synth")
    _add_common(p)

    p = sub.add_parser("preprocess", parser_class=_Parser, help="WAV manifest -> clip files")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--max-seconds", type=float, default=30.0)
    _add_common(p)

    p = sub.add_parser("pretrain-lm", parser_class=_Parser, help="train + freeze the text decoder")
    p.add_argument("--data", type=Path, default=None, help="preprocessed data dir")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path to write")
    _add_common(p)

    p = sub.add_parser("train", parser_class=_Parser, help="fusion training")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--lm", type=Path, required=True, help="frozen LM checkpoint")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    _add_common(p)

    p = sub.add_parser("infer", parser_class=_Parser, help="answer questions with a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--patient", type=str, default=None)
    p.add_argument("--question", type=str, default=None)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default=None,
                   help="batch mode: answer every manifest question in the split")
    p.add_argument("--splits-file", type=Path, default=None, help="splits.json from a run dir")
    p.add_argument("--out", type=Path, default=None, help="predictions JSONL (batch mode)")
    p.add_argument("--max-seconds", type=float, default=30.0)
    p.add_argument("--max-new", type=int, default=12)
    p.add_argument("--no-audio", action="store_true", help="gate-zero text-only baseline")
    _add_common(p)

    p = sub.add_parser("eval", parser_class=_Parser, help="score a predictions file")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="report JSON path")
    _add_common(p)

    p = sub.add_parser("ablate", parser_class=_Parser, help="temporal-context ablation")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--lm", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seconds", type=str, default="30,20,10")
    p.add_argument("--main-run", type=Path, default=None, help="reuse this run when configs match")
    _add_common(p)

    return parser


def _pair(text: str, cast) -> tuple:
    parts = text.split(",")
    if len(parts) != 2:
        raise AuscultaError(f"expected 'min,max', got {text!r}")
    return cast(parts[0]), cast(parts[1])


def _cmd_synth(args) -> int:
    clips = (1, 1) if args.sil else _pair(args.clips_per_patient, int)
    spec = SynthSpec(
        n_patients=args.patients,
        clip_seconds=_pair(args.clip_seconds, float),
        clips_per_patient=clips,
        abnormal_rate=args.abnormal_rate,
        snr_db=args.snr_db,
        dataset_tag=args.dataset_tag,
        seed=args.seed if args.seed is not None else 0,
    )
    manifest, truths = generate(spec, args.out)
    n_abnormal = sum(1 for t in truths if t.condition != "none")
    print(f"wrote {manifest} ({spec.n_patients} patients, {n_abnormal} abnormal)")
    return 0


def _cmd_preprocess(args) -> int:
    out = preprocess_manifest(args.manifest, args.out, max_seconds=args.max_seconds)
    print(f"wrote {out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    records = read_manifest(_data_dir(args) / "manifest.jsonl")
    path, splits = pretrain_lm_from_records(records, cfg, args.out)
    print(f"wrote {path} (train {len(splits.train)} / val {len(splits.val)} / test {len(splits.test)})")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    root = _data_dir(args)
    records = read_manifest(root / "manifest.jsonl")
    result = train(cfg, records, root, args.lm, args.out)
    print(f"best checkpoint: {result.best_ckpt}")
    print(result.report.to_table())
    return 0


def _cmd_infer(args) -> int:
    root = _data_dir(args)
    model = FusionModel.load(args.ckpt)
    records = read_manifest(root / "manifest.jsonl")

    if args.patient is not None or args.question is not None:
        if not (args.patient and args.question):
            raise AuscultaError("single mode needs both --patient and --question")
        matches = [r for r in records if r.patient_id == args.patient]
        if not matches:
            raise AuscultaError(f"patient {args.patient!r} not in manifest")
        from .data import load_bag

        bag = load_bag(matches[0], root, args.max_seconds)
        prompt, answer = model.answer(bag, args.question, args.max_new, use_audio=not args.no_audio)
        print(f"prompt: {prompt}")
        print(f"answer: {answer}")
        return 0

    split = args.split or "all"
    if split != "all":
        if args.splits_file is None:
            raise AuscultaError("--split needs --splits-file (a run's splits.json)")
        splits = SplitManifest.from_dict(json.loads(args.splits_file.read_text()))
        wanted = set(getattr(splits, split))
        records = [r for r in records if r.patient_id in wanted]
    if args.out is None:
        raise AuscultaError("batch mode needs --out for the predictions file")
    preds = predictions_for(model, records, root, args.max_seconds, args.max_new,
                            use_audio=not args.no_audio)
    write_predictions_jsonl(args.out, preds)
    print(f"wrote {args.out} ({len(preds)} predictions)")
    return 0


def _cmd_eval(args) -> int:
    preds = read_predictions_jsonl(args.pred)
    report = evaluate(preds)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(report.to_json())
    table_path = args.out.with_suffix(".txt")
    table_path.write_text(report.to_table() + "\n")
    print(report.to_table())
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args)
    root = _data_dir(args)
    records = read_manifest(root / "manifest.jsonl")
    seconds = [float(s) for s in args.seconds.split(",") if s]
    reports = ablate_context(cfg, records, root, args.lm, args.out, seconds, args.main_run)
    print(ablation_table(reports))
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "preprocess": _cmd_preprocess,
    "pretrain-lm": _cmd_pretrain,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except AuscultaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
