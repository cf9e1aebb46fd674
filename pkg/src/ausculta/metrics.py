"""QA evaluation: contains-match, ROUGE-L, METEOR, embedding F1, binary stats.

Open-ended predictions are scored with lexical and embedding similarity;
binary ones are mapped to yes/no by a first-match rule and scored with
confusion-matrix metrics. ``evaluate`` routes a mixed prediction list and
aggregates overall (pooled counts) plus per dataset tag.
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .porter import stem

METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5

_PUNCT_TABLE = str.maketrans({ch: " " for ch in string.punctuation})


@dataclass
class Prediction:
    patient_id: str
    question: str
    gold: str
    hyp: str
    kind: str  # binary | open
    dataset_tag: str = "default"

    def __post_init__(self):
        if self.kind not in ("binary", "open"):
            raise DataError(f"unknown prediction kind {self.kind!r}")


def normalize_text(s: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    return " ".join(s.lower().translate(_PUNCT_TABLE).split())


def contains_match(gold: str, hyp: str) -> bool:
    """True iff the normalized gold string occurs inside the normalized hyp."""
    g = normalize_text(gold)
    if not g:
        raise DataError("empty gold answer")
    return g in normalize_text(hyp)


def _lcs_len(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l_f1(gold: str, hyp: str) -> float:
    """Token-level LCS F1 with beta = 1."""
    g = normalize_text(gold).split()
    h = normalize_text(hyp).split()
    if not g or not h:
        return 0.0
    lcs = _lcs_len(g, h)
    if lcs == 0:
        return 0.0
    p = lcs / len(h)
    r = lcs / len(g)
    return 2 * p * r / (p + r)


def _align_unigrams(gold: list[str], hyp: list[str]) -> list[tuple[int, int]]:
    """One-to-one matches (hyp_idx, gold_idx): exact stage, then stems."""
    matches: list[tuple[int, int]] = []
    gold_used = [False] * len(gold)
    hyp_used = [False] * len(hyp)
    for hi, token in enumerate(hyp):
        for gi, ref in enumerate(gold):
            if not gold_used[gi] and ref == token:
                matches.append((hi, gi))
                gold_used[gi] = True
                hyp_used[hi] = True
                break
    hyp_stems = [stem(t) for t in hyp]
    gold_stems = [stem(t) for t in gold]
    for hi, token in enumerate(hyp_stems):
        if hyp_used[hi]:
            continue
        for gi, ref in enumerate(gold_stems):
            if not gold_used[gi] and ref == token:
                matches.append((hi, gi))
                gold_used[gi] = True
                hyp_used[hi] = True
                break
    return sorted(matches)


def _count_chunks(matches: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for hi, gi in matches:
        if prev is None or hi != prev[0] + 1 or gi != prev[1] + 1:
            chunks += 1
        prev = (hi, gi)
    return chunks


def meteor(gold: str, hyp: str) -> float:
    """Unigram METEOR with exact + stem matching.

    Fmean = P*R / (alpha*P + (1-alpha)*R), fragmentation penalty
    gamma * (chunks/matches)^beta, score = Fmean * (1 - penalty).
    """
    g = normalize_text(gold).split()
    h = normalize_text(hyp).split()
    if not g or not h:
        return 0.0
    matches = _align_unigrams(g, h)
    m = len(matches)
    if m == 0:
        return 0.0
    p = m / len(h)
    r = m / len(g)
    fmean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    penalty = METEOR_GAMMA * (_count_chunks(matches) / m) ** METEOR_BETA
    return fmean * (1.0 - penalty)


class HashEmbedder:
    """Deterministic toy token embeddings: seeded random unit vectors.

    Each token type gets a fixed vector drawn from a generator seeded by the
    token's SHA-256, so scores are stable across processes with no model
    files. Dimension 64 keeps random cross-token cosines small.
    """

    def __init__(self, dim: int = 64):
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            seed = int.from_bytes(hashlib.sha256(token.encode()).digest()[:8], "little")
            v = np.random.default_rng(seed).standard_normal(self.dim)
            vec = v / np.linalg.norm(v)
            self._cache[token] = vec
        return vec


def embed_score(gold: str, hyp: str, embedder=None) -> float:
    """Greedy max-cosine matching F1 over token embeddings."""
    if embedder is None:
        raise DataError("embed_score needs an embedder")
    g = normalize_text(gold).split()
    h = normalize_text(hyp).split()
    if not g or not h:
        return 0.0
    gm = np.stack([embedder(t) for t in g])
    hm = np.stack([embedder(t) for t in h])
    sims = gm @ hm.T  # embedder returns unit vectors
    recall = float(sims.max(axis=1).mean())
    precision = float(sims.max(axis=0).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def extract_yes_no(hyp: str) -> str | None:
    """First 'yes' or 'no' whole word in the normalized hypothesis, if any."""
    for token in normalize_text(hyp).split():
        if token in ("yes", "no"):
            return token
    return None


@dataclass
class BinaryMetrics:
    accuracy: float
    f1_macro: float
    sensitivity: float
    specificity: float
    zero_division: bool = False

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "f1_macro": self.f1_macro,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "zero_division": self.zero_division,
        }


def binary_metrics(preds: list[Prediction]) -> BinaryMetrics:
    """Confusion-matrix metrics with 'yes' as the positive class.

    Hypotheses with neither yes nor no count as wrong for accuracy and for
    the gold class's recall, and never enter a precision denominator.
    """
    if not preds:
        raise DataError("no binary predictions")
    n_gold = {"yes": 0, "no": 0}
    correct_by_class = {"yes": 0, "no": 0}
    predicted = {"yes": 0, "no": 0}
    flag = False
    for p in preds:
        if p.kind != "binary":
            raise DataError("binary_metrics got a non-binary prediction")
        gold = normalize_text(p.gold)
        if gold not in ("yes", "no"):
            raise DataError(f"binary gold must normalize to yes/no, got {p.gold!r}")
        n_gold[gold] += 1
        hyp = extract_yes_no(p.hyp)
        if hyp is not None:
            predicted[hyp] += 1
            if hyp == gold:
                correct_by_class[gold] += 1

    def rate(num, den):
        nonlocal flag
        if den == 0:
            flag = True
            return 0.0
        return num / den

    accuracy = (correct_by_class["yes"] + correct_by_class["no"]) / len(preds)
    sensitivity = rate(correct_by_class["yes"], n_gold["yes"])
    specificity = rate(correct_by_class["no"], n_gold["no"])
    f1 = {}
    for cls in ("yes", "no"):
        prec = rate(correct_by_class[cls], predicted[cls])
        rec = rate(correct_by_class[cls], n_gold[cls])
        f1[cls] = rate(2 * prec * rec, prec + rec) if prec + rec > 0 else 0.0
    return BinaryMetrics(
        accuracy=accuracy,
        f1_macro=(f1["yes"] + f1["no"]) / 2,
        sensitivity=sensitivity,
        specificity=specificity,
        zero_division=flag,
    )


@dataclass
class MetricReport:
    overall: dict[str, float]
    per_dataset: dict[str, dict[str, float]]
    counts: dict[str, int]
    flags: dict[str, bool] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "overall": self.overall,
                "per_dataset": self.per_dataset,
                "counts": self.counts,
                "flags": self.flags,
            },
            indent=2,
            sort_keys=True,
        )

    def to_table(self) -> str:
        metric_names = sorted(self.overall)
        width = max((len(m) for m in metric_names), default=6) + 2
        tags = sorted(self.per_dataset)
        header = "dataset".ljust(12) + "".join(m.rjust(width) for m in metric_names)
        lines = [header, "-" * len(header)]
        for tag in tags + ["OVERALL"]:
            row = self.overall if tag == "OVERALL" else self.per_dataset[tag]
            cells = "".join(
                (f"{row[m]:.4f}" if m in row else "-").rjust(width) for m in metric_names
            )
            lines.append(tag.ljust(12) + cells)
        return "\n".join(lines)


def _open_metrics(preds: list[Prediction], embedder) -> dict[str, float]:
    contains = [1.0 if contains_match(p.gold, p.hyp) else 0.0 for p in preds]
    rouge = [rouge_l_f1(p.gold, p.hyp) for p in preds]
    met = [meteor(p.gold, p.hyp) for p in preds]
    emb = [embed_score(p.gold, p.hyp, embedder) for p in preds]
    return {
        "contains_match": float(np.mean(contains)),
        "rouge_l": float(np.mean(rouge)),
        "meteor": float(np.mean(met)),
        "embed_f1": float(np.mean(emb)),
    }


def _subset_metrics(preds: list[Prediction], embedder) -> tuple[dict[str, float], bool]:
    binary = [p for p in preds if p.kind == "binary"]
    open_ = [p for p in preds if p.kind == "open"]
    out: dict[str, float] = {}
    flag = False
    if binary:
        bm = binary_metrics(binary)
        out.update(
            {
                "yes_no_accuracy": bm.accuracy,
                "yes_no_f1_macro": bm.f1_macro,
                "sensitivity": bm.sensitivity,
                "specificity": bm.specificity,
            }
        )
        flag = bm.zero_division
    if open_:
        out.update(_open_metrics(open_, embedder))
    return out, flag


def evaluate(preds: list[Prediction], embedder=None) -> MetricReport:
    """Score a mixed prediction list, overall and per dataset tag.

    Overall numbers are pooled over all predictions; the per-dataset tables
    recompute within each tag. Rates therefore aggregate by count, not by
    averaging the per-dataset rows.
    """
    if not preds:
        raise DataError("no predictions to evaluate")
    embedder = embedder or HashEmbedder()
    overall, flag = _subset_metrics(preds, embedder)
    per_dataset = {}
    for tag in sorted({p.dataset_tag for p in preds}):
        per_dataset[tag], f = _subset_metrics([p for p in preds if p.dataset_tag == tag], embedder)
        flag = flag or f
    counts = {
        "total": len(preds),
        "binary": sum(1 for p in preds if p.kind == "binary"),
        "open": sum(1 for p in preds if p.kind == "open"),
    }
    return MetricReport(overall=overall, per_dataset=per_dataset, counts=counts,
                        flags={"zero_division": flag})


def read_predictions_jsonl(path) -> list[Prediction]:
    """Line-delimited {patient_id, dataset, kind, question, gold, hyp}."""
    preds = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                preds.append(
                    Prediction(
                        patient_id=rec["patient_id"],
                        question=rec["question"],
                        gold=rec["gold"],
                        hyp=rec["hyp"],
                        kind=rec["kind"],
                        dataset_tag=rec.get("dataset", "default"),
                    )
                )
            except (KeyError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}:{line_no}: bad prediction record: {exc}") from exc
    return preds


def write_predictions_jsonl(path, preds: list[Prediction]) -> None:
    with open(path, "w") as fh:
        for p in preds:
            fh.write(
                json.dumps(
                    {
                        "patient_id": p.patient_id,
                        "dataset": p.dataset_tag,
                        "kind": p.kind,
                        "question": p.question,
                        "gold": p.gold,
                        "hyp": p.hyp,
                    }
                )
                + "\n"
            )
