"""Evaluation metrics against hand-computed fixtures and DP/closed-form oracles."""

import numpy as np
import pytest

from ausculta.errors import DataError
from ausculta.metrics import (
    BinaryMetrics,
    HashEmbedder,
    Prediction,
    binary_metrics,
    contains_match,
    embed_score,
    evaluate,
    extract_yes_no,
    meteor,
    normalize_text,
    read_predictions_jsonl,
    rouge_l_f1,
    write_predictions_jsonl,
    _lcs_len,
)
from ausculta.porter import stem


def test_normalize_punctuation_and_case():
    assert normalize_text("Yes, Murmur!") == "yes murmur"


def test_normalize_whitespace_collapse():
    assert normalize_text("  a   b ") == "a b"


def test_normalize_empty():
    assert normalize_text("") == ""


def test_contains_substring():
    assert contains_match("murmur present", "yes murmur present at av")


def test_contains_negative():
    assert not contains_match("crackles", "no wheeze")


def test_contains_normalization_only_differences():
    assert contains_match("Mitral Valve.", "the mitral valve, clearly")


def test_contains_empty_gold_errors():
    with pytest.raises(DataError):
        contains_match("  !", "anything")


def test_rouge_identical():
    assert rouge_l_f1("a small murmur", "a small murmur") == pytest.approx(1.0)


def test_rouge_disjoint():
    assert rouge_l_f1("alpha beta", "gamma delta") == 0.0


def test_rouge_hand_lcs():
    # LCS("the cat sat", "the cat ran") = 2 -> P = R = 2/3 -> F1 = 2/3
    assert rouge_l_f1("the cat sat", "the cat ran") == pytest.approx(2 / 3, rel=1e-12)


def test_rouge_empty_sides():
    assert rouge_l_f1("", "something") == 0.0
    assert rouge_l_f1("something", "") == 0.0


def test_lcs_against_full_dp_oracle():
    # independent O(n*m) table with explicit backward recurrence
    def oracle(a, b):
        n, m = len(a), len(b)
        dp = [[0] * (m + 1) for _ in range(n + 1)]
        for i in range(n - 1, -1, -1):
            for j in range(m - 1, -1, -1):
                if a[i] == b[j]:
                    dp[i][j] = dp[i + 1][j + 1] + 1
                else:
                    dp[i][j] = max(dp[i + 1][j], dp[i][j + 1])
        return dp[0][0]

    rng = np.random.default_rng(0)
    alphabet = list("abcde")
    for _ in range(200):
        a = [alphabet[i] for i in rng.integers(0, 5, size=rng.integers(0, 12))]
        b = [alphabet[i] for i in rng.integers(0, 5, size=rng.integers(0, 12))]
        assert _lcs_len(a, b) == oracle(a, b)


def test_meteor_identical_three_words():
    # matches=3, chunks=1 -> penalty = 0.5/27, Fmean = 1
    assert meteor("a b c", "a b c") == pytest.approx(1 - 0.5 / 27, rel=1e-12)
    assert meteor("a b c", "a b c") == pytest.approx(0.98148, abs=1e-5)


def test_meteor_no_overlap():
    assert meteor("alpha beta", "gamma delta") == 0.0


def test_meteor_single_identical_word():
    # chunks = matches = 1 -> penalty = gamma = 0.5, Fmean = 1
    assert meteor("murmur", "murmur") == pytest.approx(0.5, rel=1e-12)


def test_meteor_identity_closed_form():
    for text in ("a b", "one two three four", "q w e r t y u"):
        m = len(text.split())
        assert meteor(text, text) == pytest.approx(1 - 0.5 * (1 / m) ** 3, rel=1e-12)


def test_meteor_stem_stage_matches():
    # "running" and "runs" share no surface form but share the stem "run"
    assert meteor("running", "runs") == pytest.approx(0.5, rel=1e-12)


def test_meteor_fragmentation_penalty_orders():
    # same matches, more chunks -> lower score
    contiguous = meteor("a b c d", "a b c d")
    scrambled = meteor("a b c d", "c d a b")
    assert scrambled < contiguous


def test_porter_reference_pairs():
    # full-algorithm stems (all five steps), hand-traced
    cases = {
        "caresses": "caress", "ponies": "poni", "caress": "caress", "cats": "cat",
        "feed": "feed", "agreed": "agre", "plastered": "plaster", "bled": "bled",
        "motoring": "motor", "sing": "sing", "conflated": "conflat",
        "troubled": "troubl", "sized": "size", "hopping": "hop", "tanned": "tan",
        "falling": "fall", "hissing": "hiss", "fizzed": "fizz", "failing": "fail",
        "filing": "file", "happy": "happi", "sky": "sky", "relational": "relat",
        "conditional": "condit", "rational": "ration", "valenci": "valenc",
        "digitizer": "digit", "operator": "oper", "feudalism": "feudal",
        "decisiveness": "decis", "hopefulness": "hope", "formaliti": "formal",
        "triplicate": "triplic", "formative": "form", "formalize": "formal",
        "electriciti": "electr", "electrical": "electr", "hopeful": "hope",
        "goodness": "good", "revival": "reviv", "allowance": "allow",
        "inference": "infer", "airliner": "airlin", "adjustable": "adjust",
        "defensible": "defens", "replacement": "replac", "adjustment": "adjust",
        "dependent": "depend", "adoption": "adopt", "communism": "commun",
        "activate": "activ", "effective": "effect", "probate": "probat",
        "rate": "rate", "controll": "control", "roll": "roll",
    }
    for word, expected in cases.items():
        assert stem(word) == expected, f"{word}: {stem(word)} != {expected}"


def test_porter_idempotent_on_short_words():
    for w in ("a", "by", "is", ""):
        assert stem(w) == w


def test_embed_score_identical_is_one():
    emb = HashEmbedder()
    assert embed_score("soft systolic murmur", "soft systolic murmur", emb) == pytest.approx(1.0, rel=1e-12)


def test_embed_score_symmetric():
    emb = HashEmbedder()
    a, b = "crackles at base", "fine crackles heard"
    assert embed_score(a, b, emb) == pytest.approx(embed_score(b, a, emb), rel=1e-12)


def test_embed_score_disjoint_tokens_near_zero():
    emb = HashEmbedder(dim=64)
    score = embed_score("alpha beta gamma", "delta epsilon zeta", emb)
    assert abs(score) < 0.3


def test_embed_score_requires_embedder():
    with pytest.raises(DataError):
        embed_score("a", "b", None)


def test_extract_yes_no_first_match_wins():
    assert extract_yes_no("No, but maybe yes later") == "no"
    assert extract_yes_no("yes definitely") == "yes"
    assert extract_yes_no("unclear") is None
    assert extract_yes_no("notably") is None  # whole words only


def _bin(gold, hyp):
    return Prediction(patient_id="p", question="q", gold=gold, hyp=hyp, kind="binary")


def test_binary_all_correct():
    preds = [_bin("yes", "yes"), _bin("no", "no")]
    bm = binary_metrics(preds)
    assert bm.accuracy == 1.0
    assert bm.f1_macro == 1.0


def test_binary_hand_confusion_matrix():
    # gold [y,y,n,n], hyp [y,n,n,n]
    preds = [_bin("yes", "yes"), _bin("yes", "no"), _bin("no", "no"), _bin("no", "no")]
    bm = binary_metrics(preds)
    assert bm.accuracy == pytest.approx(0.75)
    assert bm.sensitivity == pytest.approx(0.5)
    assert bm.specificity == pytest.approx(1.0)
    # F1_yes = 2*(1*0.5)/1.5 = 2/3, F1_no = 2*(2/3*1)/(5/3) = 0.8
    assert bm.f1_macro == pytest.approx((2 / 3 + 0.8) / 2, rel=1e-12)


def test_binary_inverted_predictions():
    preds = [_bin("yes", "no"), _bin("no", "yes")]
    bm = binary_metrics(preds)
    assert bm.sensitivity == 0.0
    assert bm.specificity == 0.0


def test_binary_abstention_counts_wrong():
    preds = [_bin("yes", "hmm unclear"), _bin("yes", "yes")]
    bm = binary_metrics(preds)
    assert bm.accuracy == pytest.approx(0.5)
    assert bm.sensitivity == pytest.approx(0.5)


def test_binary_zero_division_flagged():
    bm = binary_metrics([_bin("yes", "yes")])  # no gold-no at all
    assert bm.zero_division
    assert bm.specificity == 0.0


def _open(gold, hyp, tag="d1"):
    return Prediction(patient_id="p", question="q", gold=gold, hyp=hyp, kind="open", dataset_tag=tag)


def test_evaluate_empty_errors():
    with pytest.raises(DataError):
        evaluate([])


def test_evaluate_single_dataset_matches_overall():
    preds = [_open("a b", "a b"), _open("c", "c d"), _bin("yes", "yes")]
    for p in preds:
        p.dataset_tag = "only"
    rep = evaluate(preds)
    assert rep.overall == rep.per_dataset["only"]
    assert rep.counts == {"total": 3, "binary": 1, "open": 2}


def test_evaluate_pools_counts_across_datasets():
    # d1: 2 contains-hits of 2; d2: 0 of 2 -> pooled 0.5 (not macro average of rows)
    preds = [
        _open("m", "m", "d1"), _open("m", "has m", "d1"),
        _open("x", "y", "d2"), _open("x", "z", "d2"),
    ]
    rep = evaluate(preds)
    assert rep.per_dataset["d1"]["contains_match"] == 1.0
    assert rep.per_dataset["d2"]["contains_match"] == 0.0
    assert rep.overall["contains_match"] == pytest.approx(0.5)


def test_evaluate_rates_in_unit_interval():
    rng = np.random.default_rng(1)
    words = ["murmur", "crackle", "clear", "soft", "loud"]
    preds = []
    for i in range(30):
        g = " ".join(rng.choice(words, size=rng.integers(1, 4)))
        h = " ".join(rng.choice(words, size=rng.integers(1, 5)))
        preds.append(_open(g, h, tag=f"d{i % 3}"))
    rep = evaluate(preds)
    for row in [rep.overall, *rep.per_dataset.values()]:
        for value in row.values():
            assert 0.0 <= value <= 1.0


def test_report_serialization_roundtrip(tmp_path):
    preds = [_open("a", "a"), _bin("yes", "no")]
    rep = evaluate(preds)
    blob = rep.to_json()
    assert '"overall"' in blob
    table = rep.to_table()
    assert "OVERALL" in table

    path = tmp_path / "preds.jsonl"
    write_predictions_jsonl(path, preds)
    back = read_predictions_jsonl(path)
    assert [p.gold for p in back] == [p.gold for p in preds]
    assert [p.kind for p in back] == ["open", "binary"]


def test_read_predictions_rejects_bad_lines(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"patient_id": "p"}\n')
    with pytest.raises(DataError):
        read_predictions_jsonl(path)
