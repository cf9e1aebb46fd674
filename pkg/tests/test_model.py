"""Fusion model assembly, checkpoint container, external encoder path."""

import numpy as np
import pytest

from ausculta.checkpoint import load_checkpoint, params_sha, save_checkpoint
from ausculta.data import PatientBag
from ausculta.audio import AudioClip
from ausculta.encoders import EmbeddingStore, EncoderConfig
from ausculta.errors import CheckpointError, ConfigError
from ausculta.lm import AUDIO_ID, LMConfig, DecoderLM, TextVocab, assemble_prompt
from ausculta.model import FusionModel, ModelConfig, load_lm_checkpoint, save_lm_checkpoint
from ausculta.resampler import ResamplerConfig


def _vocab():
    line = "is a murmur present yes no av mv question: answer: the site review patient recordings and answer question ."
    return TextVocab.build([line, line])


def _frozen_lm(vocab, d=16):
    cfg = LMConfig(vocab_size=len(vocab), n_layers=2, d_model=d, n_heads=2, d_ffn=24, max_seq=96)
    lm = DecoderLM(cfg, np.random.default_rng(0))
    lm.freeze()
    return lm


def _bag(n_clips=2, samples=1280, seed=1):
    rng = np.random.default_rng(seed)
    clips = [
        AudioClip(waveform=rng.standard_normal(samples), valid_len=samples,
                  site=["AV", "MV", "PV"][i % 3], patient_id="p0")
        for i in range(n_clips)
    ]
    from ausculta.data import QAPair

    return PatientBag(
        patient_id="p0",
        clips=clips,
        qa_pairs=[QAPair("is a murmur present ?", "yes", "binary")],
        dataset_tag="t",
        clip_ids=[f"clip{i}" for i in range(n_clips)],
    )


def _model(vocab, lm, kind="raw", store=None):
    cfg = ModelConfig(
        encoder=EncoderConfig(kind=kind, d_embed=8, d_proj=lm.cfg.d_model, max_positions=64),
        resampler=ResamplerConfig(n_latents=3, n_heads=2, d_model=lm.cfg.d_model, d_ffn_mult=2),
    )
    return FusionModel(cfg, lm, vocab, np.random.default_rng(2), embedding_store=store)


def test_model_requires_frozen_lm():
    vocab = _vocab()
    cfg = LMConfig(vocab_size=len(vocab), n_layers=1, d_model=8, n_heads=2, d_ffn=16)
    lm = DecoderLM(cfg, np.random.default_rng(0))  # not frozen
    with pytest.raises(ConfigError):
        _model(vocab, lm)


def test_model_width_mismatch_rejected():
    vocab = _vocab()
    lm = _frozen_lm(vocab)
    cfg = ModelConfig(
        encoder=EncoderConfig(kind="raw", d_embed=8, d_proj=lm.cfg.d_model + 2),
        resampler=ResamplerConfig(n_latents=3, n_heads=2, d_model=lm.cfg.d_model),
    )
    with pytest.raises(ConfigError):
        FusionModel(cfg, lm, vocab, np.random.default_rng(0))


def test_qa_loss_and_answer_run():
    vocab = _vocab()
    model = _model(vocab, _frozen_lm(vocab))
    bag = _bag()
    loss = model.qa_loss(bag, "is a murmur present ?", "yes")
    assert np.isfinite(loss.item())
    prompt, answer = model.answer(bag, "is a murmur present ?", max_new=4)
    assert prompt.count("<audio>") == 2
    assert isinstance(answer, str)


def test_parameter_groups_partition():
    vocab = _vocab()
    model = _model(vocab, _frozen_lm(vocab))
    groups = model.parameter_groups(1e-3, 2e-3)
    names = {g.name: g for g in groups}
    assert set(names) == {"encoder", "adapter", "gates", "lm"}
    assert names["lm"].frozen
    assert names["encoder"].learning_rate == 1e-3
    assert names["adapter"].learning_rate == 2e-3
    assert names["gates"].learning_rate == 2e-3  # defaults to the adapter rate
    all_names = [n for g in groups for n in g.tensors]
    assert len(all_names) == len(set(all_names))  # no tensor in two groups
    assert any(n.startswith("cross0.") for n in names["adapter"].tensors)
    assert all(n.endswith(".alpha") for n in names["gates"].tensors)
    assert any(n.startswith("raw.") for n in names["encoder"].tensors)


def test_gate_group_custom_lr():
    vocab = _vocab()
    model = _model(vocab, _frozen_lm(vocab))
    names = {g.name: g for g in model.parameter_groups(1e-3, 2e-3, lr_gates=0.1)}
    assert names["gates"].learning_rate == 0.1
    assert names["adapter"].learning_rate == 2e-3


def test_checkpoint_roundtrip_preserves_behavior(tmp_path):
    vocab = _vocab()
    model = _model(vocab, _frozen_lm(vocab))
    bag = _bag()
    before = model.qa_loss(bag, "is a murmur present ?", "yes").item()
    path = tmp_path / "m.ckpt"
    model.save(path)
    again = FusionModel.load(path)
    after = again.qa_loss(bag, "is a murmur present ?", "yes").item()
    assert before == after
    assert again.vocab.token_to_id == vocab.token_to_id


def test_checkpoint_hash_mismatch_rejected(tmp_path):
    vocab = _vocab()
    model = _model(vocab, _frozen_lm(vocab))
    path = tmp_path / "m.ckpt"
    model.save(path)
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0xFF  # flip a payload byte
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        FusionModel.load(path)


def test_checkpoint_container_raw_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    tensors = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal(4), "c": np.float64(1.5)}
    save_checkpoint(tmp_path / "c.ckpt", {"k": 1}, tensors, {"a": "g1", "b": "g1", "c": "g2"})
    ckpt = load_checkpoint(tmp_path / "c.ckpt")
    assert ckpt.meta == {"k": 1}
    assert ckpt.groups["c"] == "g2"
    for name, arr in tensors.items():
        np.testing.assert_array_equal(ckpt.tensors[name], np.asarray(arr))


def test_params_sha_order_insensitive_and_content_sensitive():
    a = {"x": np.ones(3), "y": np.zeros(2)}
    b = {"y": np.zeros(2), "x": np.ones(3)}
    assert params_sha(a) == params_sha(b)
    c = {"x": np.ones(3), "y": np.zeros(2) + 1e-12}
    assert params_sha(a) != params_sha(c)


def test_lm_checkpoint_roundtrip(tmp_path):
    vocab = _vocab()
    lm = _frozen_lm(vocab)
    save_lm_checkpoint(tmp_path / "lm.ckpt", lm, vocab)
    lm2, vocab2 = load_lm_checkpoint(tmp_path / "lm.ckpt")
    assert lm2.frozen
    assert vocab2.token_to_id == vocab.token_to_id
    ids = np.array([1, 5, 6])
    np.testing.assert_array_equal(lm.forward(ids).data, lm2.forward(ids).data)


def test_external_encoder_path(tmp_path):
    vocab = _vocab()
    lm = _frozen_lm(vocab)
    store = EmbeddingStore(tmp_path / "emb")
    bag = _bag(n_clips=2)
    rng = np.random.default_rng(4)
    for cid in bag.clip_ids:
        store.put(cid, rng.standard_normal((7, 8)).astype(np.float32))
    model = _model(vocab, lm, kind="external", store=store)
    assert model.tokenizer is None
    z = model.latents(bag)
    assert z.z.shape == (3, lm.cfg.d_model)
    loss = model.qa_loss(bag, "is a murmur present ?", "yes")
    assert np.isfinite(loss.item())
    # encoder group is just the projection in external mode
    groups = {g.name: g for g in model.parameter_groups(1e-3, 1e-3)}
    assert all(n.startswith("proj.") for n in groups["encoder"].tensors)


def test_external_without_store_rejected():
    vocab = _vocab()
    with pytest.raises(ConfigError):
        _model(vocab, _frozen_lm(vocab), kind="external", store=None)


def test_prompt_audio_marker_count_matches_bag():
    vocab = _vocab()
    bag = _bag(n_clips=3)
    prompt = assemble_prompt(vocab, bag.sites, "is a murmur present ?")
    assert int(np.sum(prompt.ids == AUDIO_ID)) == 3
