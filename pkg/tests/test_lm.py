"""Vocabulary, prompts, gated decoder identities, loss and generation."""

import math

import numpy as np
import pytest

from ausculta import tensor as T
from ausculta.errors import DataError
from ausculta.lm import (
    AUDIO_ID,
    BOS_ID,
    EOS_ID,
    LMConfig,
    DecoderLM,
    GatedCrossBlock,
    TextVocab,
    answer_loss,
    assemble_prompt,
    greedy_generate,
    make_cross_blocks,
    perplexity,
    pretrain_text_lm,
    sequence_loss,
)
from ausculta.tensor import Tensor

from helpers import check_grads


def _vocab(extra="yes no murmur crackle av mv question: answer: is a the present"):
    corpus = [extra, extra]  # every token seen twice -> kept
    return TextVocab.build(corpus, min_freq=2)


def test_vocab_min_freq():
    v = TextVocab.build(["a a b"], min_freq=2)
    assert "a" in v.token_to_id
    assert "b" not in v.token_to_id


def test_vocab_rebuild_is_identical():
    corpus = ["the cat sat", "the cat ran", "a dog sat"]
    a = TextVocab.build(corpus)
    b = TextVocab.build(corpus)
    assert a.token_to_id == b.token_to_id


def test_vocab_audio_token_reserved():
    v = TextVocab.build(["<audio> <audio> x x"], min_freq=2)
    ids = v.encode("<audio> x")
    assert ids[0] == AUDIO_ID
    assert ids[1] == v.token_to_id["x"]


def test_vocab_unk_for_oov():
    v = _vocab()
    assert v.encode("zzzz")[0] == 4


def test_vocab_roundtrip_dict():
    v = _vocab()
    again = TextVocab.from_dict(v.to_dict())
    assert again.token_to_id == v.token_to_id


def test_prompt_two_clips_audio_markers():
    v = _vocab()
    p = assemble_prompt(v, ["AV", "MV"], "is a murmur present")
    audio_positions = np.where(p.ids == AUDIO_ID)[0]
    assert len(audio_positions) == 2
    # each marker is followed by its site token, in clip order
    assert p.ids[audio_positions[0] + 1] == v.token_to_id["av"]
    assert p.ids[audio_positions[1] + 1] == v.token_to_id["mv"]
    assert p.ids[0] == BOS_ID


def test_prompt_empty_question_errors():
    with pytest.raises(DataError):
        assemble_prompt(_vocab(), ["AV"], "   ")


def test_prompt_answer_start_past_answer_marker():
    v = _vocab()
    p = assemble_prompt(v, ["AV"], "is a murmur present")
    assert p.answer_start == len(p.ids)
    assert p.ids[-1] == v.token_to_id["answer:"]


def test_prompt_too_long_errors():
    with pytest.raises(DataError):
        assemble_prompt(_vocab(), ["AV"] * 300, "is a murmur present", max_seq=64)


def _tiny_lm(vocab, seed=0, **kw):
    cfg = LMConfig(vocab_size=len(vocab), n_layers=2, d_model=16, n_heads=2, d_ffn=32, max_seq=64, **kw)
    return cfg, DecoderLM(cfg, np.random.default_rng(seed))


def test_gate_zero_logits_bit_identical():
    v = _vocab()
    cfg, lm = _tiny_lm(v)
    blocks = make_cross_blocks(cfg, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for trial in range(5):
        ids = rng.integers(0, len(v), size=rng.integers(3, 20))
        z = Tensor(rng.standard_normal((4, cfg.d_model)))
        plain = lm.forward(ids).data
        fused = lm.forward(ids, blocks, z).data
        assert np.array_equal(plain, fused)


def test_gate_zero_insensitive_to_latents():
    v = _vocab()
    cfg, lm = _tiny_lm(v)
    blocks = make_cross_blocks(cfg, np.random.default_rng(3))
    ids = np.array([BOS_ID, 5, 6, 7])
    rng = np.random.default_rng(4)
    a = lm.forward(ids, blocks, Tensor(rng.standard_normal((4, cfg.d_model)))).data
    b = lm.forward(ids, blocks, Tensor(rng.standard_normal((4, cfg.d_model)) * 100)).data
    assert np.array_equal(a, b)


def test_open_gate_changes_logits_and_grads_flow():
    v = _vocab()
    cfg, lm = _tiny_lm(v)
    blocks = make_cross_blocks(cfg, np.random.default_rng(5))
    for b in blocks:
        b.alpha.data = np.asarray(0.5)
    ids = np.array([BOS_ID, 5, 6, 7, 8])
    z = Tensor(np.random.default_rng(6).standard_normal((4, cfg.d_model)), requires_grad=True, name="z")
    plain = lm.forward(ids).data
    fused = lm.forward(ids, blocks, z)
    assert not np.array_equal(plain, fused.data)

    alphas = [b.alpha for b in blocks]
    check_grads(
        lambda: answer_loss(lm.forward(ids[:-1], blocks, z), ids, 3),
        alphas + [z],
        tol=1e-4,
    )


def test_causality():
    v = _vocab()
    cfg, lm = _tiny_lm(v)
    ids = np.array([BOS_ID, 5, 6, 7, 8, 9])
    base = lm.forward(ids).data
    mutated = ids.copy()
    mutated[4] = 10
    changed = lm.forward(mutated).data
    # positions before the edit are unaffected
    assert np.array_equal(base[:4], changed[:4])
    assert not np.array_equal(base[4:], changed[4:])


def test_cross_block_gate_bounded():
    blk = GatedCrossBlock(0, 8, 2, 16, np.random.default_rng(7))
    blk.alpha.data = np.asarray(1e6)
    assert -1.0 < blk.gate() <= 1.0
    blk.alpha.data = np.asarray(-1e6)
    assert -1.0 <= blk.gate() < 1.0


def test_loss_uniform_logits_is_ln_v():
    ids = np.array([BOS_ID, 5, 6, 7, EOS_ID])
    logits = Tensor(np.zeros((4, 11)))
    loss = answer_loss(logits, ids, answer_start=2)
    assert loss.item() == pytest.approx(math.log(11), rel=1e-12)


def test_loss_one_hot_correct_is_near_zero():
    ids = np.array([BOS_ID, 5, 6, EOS_ID])
    logits_data = np.zeros((3, 11))
    for t, target in enumerate(ids[1:]):
        logits_data[t, target] = 50.0
    loss = answer_loss(Tensor(logits_data), ids, answer_start=1)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_loss_hand_computed_two_token_answer():
    # answer spans the last two targets; hand-compute each position's CE
    ids = np.array([BOS_ID, 5, 6, 7])
    logits_data = np.array(
        [
            [0.0] * 8,          # predicts ids[1], masked out (prompt)
            [1.0, 0, 0, 0, 0, 0, 2.0, 0],  # predicts ids[2] = 6
            [0.0, 0, 0, 0, 0, 0, 0, 3.0],  # predicts ids[3] = 7
        ]
    )
    lse1 = math.log(sum(math.exp(x) for x in logits_data[1]))
    lse2 = math.log(sum(math.exp(x) for x in logits_data[2]))
    expected = ((lse1 - 2.0) + (lse2 - 3.0)) / 2
    loss = answer_loss(Tensor(logits_data), ids, answer_start=2)
    assert loss.item() == pytest.approx(expected, rel=1e-12)


def test_loss_masks_prompt_positions():
    rng = np.random.default_rng(8)
    ids = np.array([BOS_ID, 5, 6, 7, EOS_ID])
    logits = Tensor(rng.standard_normal((4, 11)), requires_grad=True, name="logits")
    loss = answer_loss(logits, ids, answer_start=3)
    T.backward(loss)
    # targets at positions 0,1 predict prompt tokens -> zero gradient there
    assert np.all(logits.grad[:2] == 0.0)
    assert np.any(logits.grad[2:] != 0.0)


def test_generate_zero_budget_is_empty():
    v = _vocab()
    cfg, lm = _tiny_lm(v)
    out = greedy_generate(lm, np.array([BOS_ID, 5]), v, max_new=0)
    assert out == ""


def test_generate_deterministic():
    v = _vocab()
    cfg, lm = _tiny_lm(v)
    ids = np.array([BOS_ID, 5, 6])
    a = greedy_generate(lm, ids, v, max_new=8)
    b = greedy_generate(lm, ids, v, max_new=8)
    assert a == b


def test_generate_gate_zero_matches_text_only():
    v = _vocab()
    cfg, lm = _tiny_lm(v)
    blocks = make_cross_blocks(cfg, np.random.default_rng(9))
    z = Tensor(np.random.default_rng(10).standard_normal((4, cfg.d_model)))
    ids = np.array([BOS_ID, 5, 6])
    assert greedy_generate(lm, ids, v, max_new=8) == greedy_generate(lm, ids, v, blocks, z, max_new=8)


def test_pretrain_reduces_perplexity_and_freezes():
    corpus = [
        "question: is a murmur present answer: yes",
        "question: is a murmur present answer: no",
        "question: is a crackle present answer: yes",
        "question: is a crackle present answer: no",
    ] * 4
    vocab = TextVocab.build(corpus)
    cfg = LMConfig(vocab_size=len(vocab), n_layers=1, d_model=16, n_heads=2, d_ffn=32, max_seq=32)
    heldout = [np.concatenate([[BOS_ID], vocab.encode(t), [EOS_ID]]) for t in corpus[:4]]

    fresh = DecoderLM(cfg, np.random.default_rng(0))
    before = perplexity(fresh, heldout)
    lm = pretrain_text_lm(corpus, cfg, vocab, epochs=3, lr=3e-3, seed=0)
    after = perplexity(lm, heldout)
    assert after < before
    assert lm.frozen
    for t in lm.params().values():
        assert not t.requires_grad


def test_full_fusion_gradients_match_finite_differences():
    # miniature fused forward: every trainable parameter against central FD
    v = _vocab()
    cfg = LMConfig(vocab_size=len(v), n_layers=2, d_model=8, n_heads=2, d_ffn=12, max_seq=32)
    lm = DecoderLM(cfg, np.random.default_rng(11))
    blocks = make_cross_blocks(cfg, np.random.default_rng(12), d_ffn=12)
    for b in blocks:
        b.alpha.data = np.asarray(0.3)
    z = Tensor(np.random.default_rng(13).standard_normal((3, cfg.d_model)), requires_grad=True, name="z")
    ids = np.array([BOS_ID, 5, 6, 7, 8, EOS_ID])

    params = [z]
    for b in blocks:
        params.extend(b.params().values())
    lm_params = list(lm.params().values())

    def f():
        return answer_loss(lm.forward(ids[:-1], blocks, z), ids, answer_start=3)

    check_grads(f, params + lm_params, tol=1e-4)
