"""Text side of the stack: vocabulary, prompts, and the gated decoder.

The decoder is a small pre-LN causal transformer trained on text transcripts
and then frozen. Audio enters through ``GatedCrossBlock`` adapters inserted
in front of frozen layers: each adapter adds tanh(alpha)-scaled cross
attention from the hidden states to the patient's latent bundle, plus a
tanh(alpha)-scaled feed-forward, with alpha starting at 0 so the fused model
is exactly the text model until training opens the gates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .tensor import Tensor

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
AUDIO_ID = 3
UNK_ID = 4

AUDIO_TOKEN = "<audio>"
_SPECIAL_TOKENS = {"<pad>": PAD_ID, "<bos>": BOS_ID, "<eos>": EOS_ID, AUDIO_TOKEN: AUDIO_ID, "<unk>": UNK_ID}

INSTRUCTION = "review the patient recordings and answer the question ."


class TextVocab:
    """Whitespace, lowercase vocabulary with five reserved ids."""

    def __init__(self, regular_tokens: list[str]):
        self.token_to_id = dict(_SPECIAL_TOKENS)
        for i, tok in enumerate(regular_tokens):
            if tok in self.token_to_id:
                raise DataError(f"token {tok!r} collides with a reserved id")
            self.token_to_id[tok] = 5 + i
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    def __len__(self) -> int:
        return len(self.token_to_id)

    @classmethod
    def build(cls, corpus: list[str], min_freq: int = 2) -> "TextVocab":
        """Count whitespace tokens, keep those seen >= min_freq times.

        Ordering is frequency-descending then lexicographic, so a rebuild
        from the same corpus reproduces the same ids.
        """
        if not corpus or not any(line.strip() for line in corpus):
            raise DataError("empty corpus")
        counts: dict[str, int] = {}
        for line in corpus:
            for tok in line.lower().split():
                if tok in _SPECIAL_TOKENS:
                    continue
                counts[tok] = counts.get(tok, 0) + 1
        kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
        return cls(kept)

    def encode(self, text: str) -> np.ndarray:
        ids = [self.token_to_id.get(tok, UNK_ID) for tok in text.lower().split()]
        return np.array(ids, dtype=np.int64)

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            words.append(self.id_to_token.get(i, "<unk>"))
        return " ".join(words)

    def to_dict(self) -> dict[str, int]:
        return dict(self.token_to_id)

    @classmethod
    def from_dict(cls, mapping: dict[str, int]) -> "TextVocab":
        regular = sorted((t for t, i in mapping.items() if i >= 5), key=lambda t: mapping[t])
        vocab = cls(regular)
        if vocab.token_to_id != {t: int(i) for t, i in mapping.items()}:
            raise DataError("vocabulary mapping is not contiguous")
        return vocab


@dataclass
class Prompt:
    """Token ids for one question plus the index where the answer starts."""

    ids: np.ndarray
    answer_start: int


def assemble_prompt(vocab: TextVocab, sites: list[str], question: str, max_seq: int = 512) -> Prompt:
    """BOS, instruction, one <audio> marker + site text per clip, question.

    The returned ``answer_start`` points just past "answer:", i.e. at the
    position where answer tokens (the training target) will be appended.
    """
    if not sites:
        raise DataError("prompt needs at least one clip")
    if not question.strip():
        raise DataError("empty question")
    ids: list[int] = [BOS_ID]
    ids.extend(vocab.encode(INSTRUCTION).tolist())
    for site in sites:
        ids.append(AUDIO_ID)
        ids.extend(vocab.encode(site).tolist())
    ids.extend(vocab.encode(f"question: {question} answer:").tolist())
    if len(ids) > max_seq:
        raise DataError(f"prompt of {len(ids)} tokens exceeds max_seq {max_seq}")
    return Prompt(ids=np.array(ids, dtype=np.int64), answer_start=len(ids))


@dataclass
class LMConfig:
    vocab_size: int
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ffn: int = 512
    max_seq: int = 512
    cross_attn_every: int = 1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.n_heads}")


def _split_heads(t: Tensor, rows: int, n_heads: int, dk: int) -> Tensor:
    return T.transpose(T.reshape(t, (rows, n_heads, dk)), (1, 0, 2))


def _merge_heads(t: Tensor, rows: int, d: int) -> Tensor:
    return T.reshape(T.transpose(t, (1, 0, 2)), (rows, d))


def _mh_attention(q_in: Tensor, kv_in: Tensor, wq, wk, wv, wo, n_heads: int, causal: bool) -> Tensor:
    tq, d = q_in.shape
    tk = kv_in.shape[0]
    dk = d // n_heads
    q = _split_heads(T.matmul(q_in, wq), tq, n_heads, dk)
    k = _split_heads(T.matmul(kv_in, wk), tk, n_heads, dk)
    v = _split_heads(T.matmul(kv_in, wv), tk, n_heads, dk)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), Tensor(1.0 / math.sqrt(dk)))
    if causal:
        allowed = np.tril(np.ones((tq, tk), dtype=bool))
        scores = T.mask_fill(scores, allowed[None], -np.inf)
    attn = T.softmax_lastdim(scores)
    return T.matmul(_merge_heads(T.matmul(attn, v), tq, d), wo)


def _ffn(h: Tensor, w1, b1, w2, b2) -> Tensor:
    return T.add(T.matmul(T.gelu(T.add(T.matmul(h, w1), b1)), w2), b2)


class DecoderLM:
    """Frozen-able causal decoder: token + position embeddings, pre-LN blocks."""

    def __init__(self, cfg: LMConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, v = cfg.d_model, cfg.vocab_size
        self.tok_emb = T.parameter(rng.standard_normal((v, d)) * 0.02, "lm.tok_emb")
        self.pos_emb = T.parameter(rng.standard_normal((cfg.max_seq, d)) * 0.02, "lm.pos_emb")
        self.layers = []
        s = 1.0 / math.sqrt(d)
        for i in range(cfg.n_layers):
            pre = f"lm.layer{i}."
            layer = {
                "ln1_g": T.parameter(np.ones(d), pre + "ln1_g"),
                "ln1_b": T.parameter(np.zeros(d), pre + "ln1_b"),
                "wq": T.parameter(rng.standard_normal((d, d)) * s, pre + "wq"),
                "wk": T.parameter(rng.standard_normal((d, d)) * s, pre + "wk"),
                "wv": T.parameter(rng.standard_normal((d, d)) * s, pre + "wv"),
                "wo": T.parameter(rng.standard_normal((d, d)) * s, pre + "wo"),
                "ln2_g": T.parameter(np.ones(d), pre + "ln2_g"),
                "ln2_b": T.parameter(np.zeros(d), pre + "ln2_b"),
                "w1": T.parameter(rng.standard_normal((d, cfg.d_ffn)) * s, pre + "w1"),
                "b1": T.parameter(np.zeros(cfg.d_ffn), pre + "b1"),
                "w2": T.parameter(rng.standard_normal((cfg.d_ffn, d)) / math.sqrt(cfg.d_ffn), pre + "w2"),
                "b2": T.parameter(np.zeros(d), pre + "b2"),
            }
            self.layers.append(layer)
        self.ln_f_g = T.parameter(np.ones(d), "lm.ln_f_g")
        self.ln_f_b = T.parameter(np.zeros(d), "lm.ln_f_b")
        self.unembed = T.parameter(rng.standard_normal((d, v)) * s, "lm.unembed")

    def params(self) -> dict[str, Tensor]:
        out = {"lm.tok_emb": self.tok_emb, "lm.pos_emb": self.pos_emb}
        for layer in self.layers:
            out.update({t.name: t for t in layer.values()})
        out.update({"lm.ln_f_g": self.ln_f_g, "lm.ln_f_b": self.ln_f_b, "lm.unembed": self.unembed})
        return out

    def freeze(self) -> None:
        for t in self.params().values():
            t.requires_grad = False

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.params().values())

    def forward(self, ids: np.ndarray, cross_blocks=None, z: Tensor | None = None) -> Tensor:
        """Next-token logits at every position, optionally audio-conditioned."""
        t_len = len(ids)
        if t_len > self.cfg.max_seq:
            raise DataError(f"sequence of {t_len} tokens exceeds max_seq {self.cfg.max_seq}")
        if t_len == 0:
            raise DataError("empty sequence")
        h = T.add(T.embedding(self.tok_emb, ids), T.embedding(self.pos_emb, np.arange(t_len)))
        ci = 0
        for i, layer in enumerate(self.layers):
            if cross_blocks is not None and i % self.cfg.cross_attn_every == 0:
                h = cross_blocks[ci](h, z)
                ci += 1
            attn_in = T.layernorm(h, layer["ln1_g"], layer["ln1_b"])
            h = T.add(h, _mh_attention(attn_in, attn_in, layer["wq"], layer["wk"], layer["wv"],
                                       layer["wo"], self.cfg.n_heads, causal=True))
            ffn_in = T.layernorm(h, layer["ln2_g"], layer["ln2_b"])
            h = T.add(h, _ffn(ffn_in, layer["w1"], layer["b1"], layer["w2"], layer["b2"]))
        h = T.layernorm(h, self.ln_f_g, self.ln_f_b)
        return T.matmul(h, self.unembed)


class GatedCrossBlock:
    """Residual adapter: h += tanh(a)*CrossAttn(ln(h), z); h += tanh(a)*FFN(ln(h)).

    One scalar gate scales both contributions; at a=0 the block is the
    identity map, bit for bit.
    """

    def __init__(self, index: int, d_model: int, n_heads: int, d_ffn: int, rng: np.random.Generator):
        pre = f"cross{index}."
        s = 1.0 / math.sqrt(d_model)
        self.n_heads = n_heads
        self.alpha = T.parameter(0.0, pre + "alpha")
        self.ln1_g = T.parameter(np.ones(d_model), pre + "ln1_g")
        self.ln1_b = T.parameter(np.zeros(d_model), pre + "ln1_b")
        self.wq = T.parameter(rng.standard_normal((d_model, d_model)) * s, pre + "wq")
        self.wk = T.parameter(rng.standard_normal((d_model, d_model)) * s, pre + "wk")
        self.wv = T.parameter(rng.standard_normal((d_model, d_model)) * s, pre + "wv")
        self.wo = T.parameter(rng.standard_normal((d_model, d_model)) * s, pre + "wo")
        self.ln2_g = T.parameter(np.ones(d_model), pre + "ln2_g")
        self.ln2_b = T.parameter(np.zeros(d_model), pre + "ln2_b")
        self.w1 = T.parameter(rng.standard_normal((d_model, d_ffn)) * s, pre + "w1")
        self.b1 = T.parameter(np.zeros(d_ffn), pre + "b1")
        self.w2 = T.parameter(rng.standard_normal((d_ffn, d_model)) / math.sqrt(d_ffn), pre + "w2")
        self.b2 = T.parameter(np.zeros(d_model), pre + "b2")

    def params(self) -> dict[str, Tensor]:
        return {
            t.name: t
            for t in (self.alpha, self.ln1_g, self.ln1_b, self.wq, self.wk, self.wv, self.wo,
                      self.ln2_g, self.ln2_b, self.w1, self.b1, self.w2, self.b2)
        }

    def gate(self) -> float:
        return float(np.tanh(self.alpha.data))

    def __call__(self, h: Tensor, z: Tensor) -> Tensor:
        if z is None:
            raise DataError("gated cross block called without latents")
        g = T.tanh(self.alpha)
        attn = _mh_attention(T.layernorm(h, self.ln1_g, self.ln1_b), z,
                             self.wq, self.wk, self.wv, self.wo, self.n_heads, causal=False)
        h = T.add(h, T.mul(g, attn))
        ff = _ffn(T.layernorm(h, self.ln2_g, self.ln2_b), self.w1, self.b1, self.w2, self.b2)
        return T.add(h, T.mul(g, ff))


def make_cross_blocks(cfg: LMConfig, rng: np.random.Generator, d_ffn: int | None = None) -> list[GatedCrossBlock]:
    n_blocks = -(-cfg.n_layers // cfg.cross_attn_every)
    d_ffn = d_ffn if d_ffn is not None else cfg.d_ffn
    return [GatedCrossBlock(i, cfg.d_model, cfg.n_heads, d_ffn, rng) for i in range(n_blocks)]


def answer_loss(logits: Tensor, full_ids: np.ndarray, answer_start: int) -> Tensor:
    """Mean cross-entropy over the answer span only.

    ``logits`` come from ``forward(full_ids[:-1])``; targets are the shifted
    ids, masked so that only predictions of answer tokens (and the closing
    EOS) contribute.
    """
    targets = full_ids[1:]
    mask = np.arange(len(targets)) >= answer_start - 1
    return T.cross_entropy_masked(logits, targets, mask)


def sequence_loss(logits: Tensor, full_ids: np.ndarray) -> Tensor:
    """Next-token cross-entropy over every position (pretraining objective)."""
    return T.cross_entropy_masked(logits, full_ids[1:], np.ones(len(full_ids) - 1, dtype=bool))


def greedy_generate(lm: DecoderLM, prompt_ids: np.ndarray, vocab: TextVocab,
                    cross_blocks=None, z: Tensor | None = None, max_new: int = 16) -> str:
    """Deterministic greedy decoding until EOS or ``max_new`` tokens."""
    ids = list(prompt_ids)
    out: list[int] = []
    with T.no_grad():
        for _ in range(max_new):
            logits = lm.forward(np.array(ids, dtype=np.int64), cross_blocks, z)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == EOS_ID:
                break
            ids.append(nxt)
            out.append(nxt)
    return vocab.decode(out)


def perplexity(lm: DecoderLM, sequences: list[np.ndarray]) -> float:
    """exp(mean next-token NLL) over whole sequences."""
    total, count = 0.0, 0
    with T.no_grad():
        for ids in sequences:
            if len(ids) < 2:
                continue
            logits = lm.forward(ids[:-1])
            nll = sequence_loss(logits, ids)
            total += nll.item() * (len(ids) - 1)
            count += len(ids) - 1
    return math.exp(total / max(count, 1))


def pretrain_text_lm(
    transcripts: list[str],
    cfg: LMConfig,
    vocab: TextVocab,
    epochs: int = 10,
    lr: float = 3e-3,
    seed: int = 0,
    weight_decay: float = 0.01,
) -> DecoderLM:
    """Train the decoder on text-only transcripts, then freeze it.

    Transcripts are full prompt+answer strings; the objective is plain
    next-token prediction so the model internalizes the template language
    before any audio conditioning exists.
    """
    from .optim import AdamW, ParameterGroup, clip_grad_norm

    if not transcripts:
        raise DataError("no transcripts to pretrain on")
    rng = np.random.default_rng(seed)
    lm = DecoderLM(cfg, rng)
    group = ParameterGroup("lm", lm.params(), learning_rate=lr)
    opt = AdamW([group], weight_decay=weight_decay)
    encoded = [np.concatenate([[BOS_ID], vocab.encode(t), [EOS_ID]]) for t in transcripts]
    order = np.arange(len(encoded))
    for _ in range(epochs):
        rng.shuffle(order)
        for idx in order:
            ids = encoded[idx]
            loss = sequence_loss(lm.forward(ids[:-1]), ids)
            T.backward(loss)
            clip_grad_norm([group], 1.0)
            opt.step()
            opt.zero_grad()
    lm.freeze()
    return lm
