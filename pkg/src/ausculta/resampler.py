"""Patient-level pooling: bag assembly and the latent-query resampler.

A patient's token sequences are padded to a common length, flattened into one
masked matrix, and compressed by cross-attention from K learnable latent
queries. Masked rows carry -inf attention scores and zeroed values, so the
output is exactly invariant to padding and to clip order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import TokenSequence
from .errors import DataError
from .tensor import Tensor


@dataclass
class ResamplerConfig:
    n_latents: int = 64
    n_heads: int = 4
    d_model: int = 128
    d_ffn_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise DataError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")


@dataclass
class BagMatrix:
    """All of a patient's tokens stacked into one masked matrix."""

    x: Tensor  # (M * N_max, d)
    mask: np.ndarray  # (M * N_max,) bool
    clip_offsets: list[int]

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]


@dataclass
class LatentBundle:
    """Fixed-size patient summary: K latent vectors."""

    z: Tensor  # (K, d)

    @property
    def k(self) -> int:
        return self.z.shape[0]


def assemble_bag(seqs: list[TokenSequence]) -> BagMatrix:
    """Pad each clip's tokens to the longest length and stack them.

    Rows whose mask is False are zeroed outright, so downstream invariance
    does not depend on what the tokenizer emitted for padding patches.
    """
    if not seqs:
        raise DataError("empty bag")
    widths = {s.width for s in seqs}
    if len(widths) != 1:
        raise DataError(f"mixed token widths in bag: {sorted(widths)}")
    n_max = max(s.n for s in seqs)
    blocks = []
    masks = []
    offsets = []
    for i, s in enumerate(seqs):
        offsets.append(i * n_max)
        zeroed = T.scale_rows(s.tokens, s.mask.astype(np.float64))
        blocks.append(T.pad_rows(zeroed, n_max))
        m = np.zeros(n_max, dtype=bool)
        m[: s.n] = s.mask
        masks.append(m)
    return BagMatrix(x=T.vstack(blocks), mask=np.concatenate(masks), clip_offsets=offsets)


class PerceiverResampler:
    """K latent queries attending over a bag matrix, then a residual FFN.

    ``resample`` is the bare multi-head cross-attention (scores from latent
    queries against all valid rows, heads concatenated, output projected).
    ``__call__`` wraps it with the feed-forward residual and returns the
    latent bundle the fusion model consumes.
    """

    def __init__(self, cfg: ResamplerConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.cfg = cfg
        s = 1.0 / np.sqrt(d)
        self.latents = T.parameter(rng.standard_normal((cfg.n_latents, d)) * s, "res.latents")
        self.w_q = T.parameter(rng.standard_normal((d, d)) * s, "res.w_q")
        self.w_k = T.parameter(rng.standard_normal((d, d)) * s, "res.w_k")
        self.w_v = T.parameter(rng.standard_normal((d, d)) * s, "res.w_v")
        self.w_o = T.parameter(rng.standard_normal((d, d)) * s, "res.w_o")
        d_ffn = d * cfg.d_ffn_mult
        self.ln_g = T.parameter(np.ones(d), "res.ln_g")
        self.ln_b = T.parameter(np.zeros(d), "res.ln_b")
        self.ffn_w1 = T.parameter(rng.standard_normal((d, d_ffn)) * s, "res.ffn_w1")
        self.ffn_b1 = T.parameter(np.zeros(d_ffn), "res.ffn_b1")
        self.ffn_w2 = T.parameter(rng.standard_normal((d_ffn, d)) / np.sqrt(d_ffn), "res.ffn_w2")
        self.ffn_b2 = T.parameter(np.zeros(d), "res.ffn_b2")

    def params(self) -> dict[str, Tensor]:
        return {
            t.name: t
            for t in (
                self.latents, self.w_q, self.w_k, self.w_v, self.w_o,
                self.ln_g, self.ln_b, self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2,
            )
        }

    def resample(self, bag: BagMatrix) -> Tensor:
        """Multi-head latent cross-attention over the bag's valid rows."""
        if not bag.mask.any():
            raise DataError("fully-masked bag")
        cfg = self.cfg
        k, d = cfg.n_latents, cfg.d_model
        h = cfg.n_heads
        dk = d // h
        n = bag.n_rows

        def split_heads(t: Tensor, rows: int) -> Tensor:
            return T.transpose(T.reshape(t, (rows, h, dk)), (1, 0, 2))  # (h, rows, dk)

        q = split_heads(T.matmul(self.latents, self.w_q), k)
        key = split_heads(T.matmul(bag.x, self.w_k), n)
        val = split_heads(T.matmul(bag.x, self.w_v), n)

        scores = T.mul(T.matmul(q, T.transpose(key, (0, 2, 1))), Tensor(1.0 / np.sqrt(dk)))
        scores = T.mask_fill(scores, bag.mask[None, None, :], -np.inf)
        attn = T.softmax_lastdim(scores)  # (h, K, n)
        heads = T.matmul(attn, val)  # (h, K, dk)
        merged = T.reshape(T.transpose(heads, (1, 0, 2)), (k, d))
        return T.matmul(merged, self.w_o)

    def __call__(self, bag: BagMatrix) -> LatentBundle:
        z = self.resample(bag)
        ff = T.matmul(T.gelu(T.add(T.matmul(T.layernorm(z, self.ln_g, self.ln_b), self.ffn_w1), self.ffn_b1)), self.ffn_w2)
        z = T.add(z, T.add(ff, self.ffn_b2))
        return LatentBundle(z=z)
