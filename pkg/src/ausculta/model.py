"""The assembled stack: tokenizer -> projection -> resampler -> gated decoder.

``FusionModel`` owns every component and exposes the three operations the
harness needs: a latent bundle per patient bag, a per-question training loss,
and greedy answer generation. Parameters are split into the ``encoder``
(tokenizer + projection), ``adapter`` (resampler + cross blocks) and frozen
``lm`` groups.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, params_sha, save_checkpoint
from .data import PatientBag
from .encoders import (
    EmbeddingStore,
    EncoderConfig,
    MelParams,
    Projection,
    TokenSequence,
    load_external,
    make_tokenizer,
)
from .errors import CheckpointError, ConfigError, DataError
from .lm import DecoderLM, LMConfig, TextVocab, answer_loss, assemble_prompt, greedy_generate, make_cross_blocks
from .optim import ParameterGroup
from .resampler import LatentBundle, PerceiverResampler, ResamplerConfig, assemble_bag
from .tensor import Tensor

EOS_ID = 2


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    resampler: ResamplerConfig = field(default_factory=ResamplerConfig)

    def validate_against(self, lm_cfg: LMConfig) -> None:
        if self.encoder.d_proj != lm_cfg.d_model:
            raise ConfigError(
                f"projection width {self.encoder.d_proj} must equal LM width {lm_cfg.d_model}"
            )
        if self.resampler.d_model != lm_cfg.d_model:
            raise ConfigError(
                f"resampler width {self.resampler.d_model} must equal LM width {lm_cfg.d_model}"
            )


class FusionModel:
    def __init__(
        self,
        cfg: ModelConfig,
        lm: DecoderLM,
        vocab: TextVocab,
        rng: np.random.Generator,
        embedding_store: EmbeddingStore | None = None,
    ):
        cfg.validate_against(lm.cfg)
        if not lm.frozen:
            raise ConfigError("fusion model requires a frozen language model")
        self.cfg = cfg
        self.lm = lm
        self.vocab = vocab
        self.store = embedding_store
        if cfg.encoder.kind == "external":
            if embedding_store is None:
                raise ConfigError("external encoder kind needs an embedding store")
            self.tokenizer = None
        else:
            self.tokenizer = make_tokenizer(cfg.encoder, rng)
        self.projection = Projection(cfg.encoder, rng)
        self.resampler = PerceiverResampler(cfg.resampler, rng)
        self.cross_blocks = make_cross_blocks(lm.cfg, rng)

    # -- parameters ---------------------------------------------------------

    def encoder_params(self) -> dict[str, Tensor]:
        out = {} if self.tokenizer is None else dict(self.tokenizer.params())
        out.update(self.projection.params())
        return out

    def adapter_params(self) -> dict[str, Tensor]:
        out = dict(self.resampler.params())
        for blk in self.cross_blocks:
            out.update({n: t for n, t in blk.params().items() if t is not blk.alpha})
        return out

    def gate_params(self) -> dict[str, Tensor]:
        return {blk.alpha.name: blk.alpha for blk in self.cross_blocks}

    def parameter_groups(
        self, lr_encoder: float, lr_adapter: float, lr_gates: float | None = None
    ) -> list[ParameterGroup]:
        """Encoder / adapter / gates / frozen-lm groups.

        The gate scalars sit in their own group: starting from tanh(0) they
        see only weak, noisy gradients, and need a faster rate than the
        adapter weights they switch on.
        """
        return [
            ParameterGroup("encoder", self.encoder_params(), lr_encoder),
            ParameterGroup("adapter", self.adapter_params(), lr_adapter),
            ParameterGroup("gates", self.gate_params(), lr_gates if lr_gates is not None else lr_adapter),
            ParameterGroup("lm", self.lm.params(), 0.0, frozen=True),
        ]

    def gates(self) -> list[float]:
        return [blk.gate() for blk in self.cross_blocks]

    # -- forward paths ------------------------------------------------------

    def clip_sequences(self, bag: PatientBag) -> list[TokenSequence]:
        if self.tokenizer is not None:
            seqs = [self.tokenizer.tokenize(clip) for clip in bag.clips]
        else:
            if bag.clip_ids is None:
                raise DataError(f"bag {bag.patient_id} has no clip ids for the embedding store")
            seqs = [
                load_external(cid, self.store, self.cfg.encoder, site=clip.site)
                for cid, clip in zip(bag.clip_ids, bag.clips)
            ]
        return [self.projection(s) for s in seqs]

    def latents(self, bag: PatientBag) -> LatentBundle:
        return self.resampler(assemble_bag(self.clip_sequences(bag)))

    def qa_loss(self, bag: PatientBag, question: str, answer: str) -> Tensor:
        z = self.latents(bag)
        prompt = assemble_prompt(self.vocab, bag.sites, question, self.lm.cfg.max_seq)
        answer_ids = self.vocab.encode(answer)
        if len(answer_ids) == 0:
            raise DataError("empty answer")
        full = np.concatenate([prompt.ids, answer_ids, [EOS_ID]])
        if len(full) > self.lm.cfg.max_seq:
            raise DataError("prompt plus answer exceeds max_seq")
        logits = self.lm.forward(full[:-1], self.cross_blocks, z.z)
        return answer_loss(logits, full, prompt.answer_start)

    def answer(self, bag: PatientBag, question: str, max_new: int = 12, use_audio: bool = True) -> tuple[str, str]:
        """Greedy answer; returns (rendered prompt, generated text)."""
        prompt = assemble_prompt(self.vocab, bag.sites, question, self.lm.cfg.max_seq)
        if use_audio:
            with T.no_grad():
                z = self.latents(bag)
            text = greedy_generate(self.lm, prompt.ids, self.vocab, self.cross_blocks, z.z, max_new)
        else:
            text = greedy_generate(self.lm, prompt.ids, self.vocab, max_new=max_new)
        return self.vocab.decode(prompt.ids), text

    # -- persistence --------------------------------------------------------

    def _all_tensors(self) -> tuple[dict[str, np.ndarray], dict[str, str]]:
        tensors: dict[str, np.ndarray] = {}
        groups: dict[str, str] = {}
        for gname, params in (
            ("encoder", self.encoder_params()),
            ("adapter", self.adapter_params()),
            ("lm", self.lm.params()),
        ):
            for name, t in params.items():
                tensors[name] = t.data
                groups[name] = gname
        return tensors, groups

    def save(self, path, extra_meta: dict | None = None) -> None:
        tensors, groups = self._all_tensors()
        meta = {
            "kind": "fusion",
            "lm_config": asdict(self.lm.cfg),
            "encoder_config": asdict(self.cfg.encoder),
            "resampler_config": asdict(self.cfg.resampler),
            "vocab": self.vocab.to_dict(),
            "frozen_lm_sha": params_sha({n: t.data for n, t in self.lm.params().items()}),
        }
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, meta, tensors, groups)

    @classmethod
    def load(cls, path, embedding_store: EmbeddingStore | None = None) -> "FusionModel":
        ckpt = load_checkpoint(path)
        if ckpt.meta.get("kind") != "fusion":
            raise CheckpointError(f"{path}: not a fusion checkpoint")
        enc_raw = dict(ckpt.meta["encoder_config"])
        enc_raw["mel"] = MelParams(**enc_raw["mel"])
        cfg = ModelConfig(
            encoder=EncoderConfig(**enc_raw),
            resampler=ResamplerConfig(**ckpt.meta["resampler_config"]),
        )
        vocab = TextVocab.from_dict(ckpt.meta["vocab"])
        lm = DecoderLM(LMConfig(**ckpt.meta["lm_config"]), np.random.default_rng(0))
        lm.freeze()
        model = cls(cfg, lm, vocab, np.random.default_rng(0), embedding_store)
        _restore(model, ckpt)
        return model


def _restore(model: FusionModel, ckpt: Checkpoint) -> None:
    tensors, _ = model._all_tensors()
    missing = set(tensors) - set(ckpt.tensors)
    extra = set(ckpt.tensors) - set(tensors)
    if missing or extra:
        raise CheckpointError(f"checkpoint tensors do not match model (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for gname, params in (
        ("encoder", model.encoder_params()),
        ("adapter", model.adapter_params()),
        ("lm", model.lm.params()),
    ):
        for name, t in params.items():
            arr = ckpt.tensors[name]
            if arr.shape != t.data.shape:
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()


def save_lm_checkpoint(path, lm: DecoderLM, vocab: TextVocab, extra_meta: dict | None = None) -> None:
    meta = {
        "kind": "lm",
        "lm_config": asdict(lm.cfg),
        "vocab": vocab.to_dict(),
        "frozen_lm_sha": params_sha({n: t.data for n, t in lm.params().items()}),
    }
    if extra_meta:
        meta.update(extra_meta)
    tensors = {n: t.data for n, t in lm.params().items()}
    save_checkpoint(path, meta, tensors, {n: "lm" for n in tensors})


def load_lm_checkpoint(path) -> tuple[DecoderLM, TextVocab]:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "lm":
        raise CheckpointError(f"{path}: not a language-model checkpoint")
    vocab = TextVocab.from_dict(ckpt.meta["vocab"])
    lm = DecoderLM(LMConfig(**ckpt.meta["lm_config"]), np.random.default_rng(0))
    for name, t in lm.params().items():
        arr = ckpt.tensors.get(name)
        if arr is None or arr.shape != t.data.shape:
            raise CheckpointError(f"{path}: bad or missing tensor {name}")
        t.data = arr.copy()
    lm.freeze()
    return lm, vocab
