"""Patient-level auscultation QA: tokenizers, latent resampling, gated fusion.

The package is organized in layers:

* ``tensor`` / ``optim`` — float64 autodiff core and AdamW.
* ``audio`` — WAV decoding and the 16 kHz mono preprocessing contract.
* ``encoders`` — raw-patch and log-mel tokenizers, external embeddings,
  shared projection.
* ``resampler`` — multi-instance bag assembly and latent-query pooling.
* ``lm`` — vocabulary, prompts, frozen decoder, gated cross-attention.
* ``model`` — the assembled fusion stack and checkpointing.
* ``training`` / ``metrics`` — the run harness and QA scoring.
* ``synth`` — self-labeling synthetic corpora.
* ``cli`` — the ``ausculta`` command.
"""

from .audio import AudioClip, RawRecording, load_wav, normalize_pad, resample_16k, to_mono
from .data import PatientBag, PatientRecord, QAPair, load_bag, read_manifest
from .encoders import EncoderConfig, TokenSequence
from .lm import LMConfig, TextVocab, assemble_prompt
from .metrics import MetricReport, Prediction, evaluate
from .model import FusionModel, ModelConfig
from .optim import AdamW, ParameterGroup
from .resampler import LatentBundle, PerceiverResampler, ResamplerConfig, assemble_bag
from .synth import SynthSpec, generate
from .tensor import Tensor, backward, no_grad, zero_grads
from .training import TrainConfig, ablate_context, make_splits, pretrain_lm_from_records, train

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "AudioClip",
    "EncoderConfig",
    "FusionModel",
    "LMConfig",
    "LatentBundle",
    "MetricReport",
    "ModelConfig",
    "ParameterGroup",
    "PatientBag",
    "PatientRecord",
    "PerceiverResampler",
    "Prediction",
    "QAPair",
    "RawRecording",
    "ResamplerConfig",
    "SynthSpec",
    "Tensor",
    "TextVocab",
    "TokenSequence",
    "TrainConfig",
    "ablate_context",
    "assemble_bag",
    "assemble_prompt",
    "backward",
    "evaluate",
    "generate",
    "load_bag",
    "load_wav",
    "make_splits",
    "no_grad",
    "normalize_pad",
    "pretrain_lm_from_records",
    "read_manifest",
    "resample_16k",
    "to_mono",
    "train",
    "zero_grads",
]
