"""Embedding-space sequence-to-sequence diffusion text generation.

Core pieces: a linear noise schedule with the closed-form forward process,
a learned embedding table with deterministic and stochastic clamping, a
transformer encoder-decoder denoiser predicting clean latents, a training
loop with loss-aware timestep sampling, guided samplers (classifier-free
guidance schedules combined with clamping in either order), text metrics
(BLEU-4 / ROUGE-L / self-BLEU), and a sweep harness for the
quality-diversity trade-off.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetRecord, TextCodec, load_jsonl, load_records, make_synthetic_task
from .denoiser import DenoiserConfig, LatentBatch, Seq2SeqDenoiser, build_model
from .embedder import ClampSpec, EmbeddingTable, Vocabulary, WhitespaceTokenizer
from .inference import (
    GuidanceSpec,
    SamplerSpec,
    cfg_combine,
    guidance_scale_at,
    sample,
    sample_batch,
    sample_unconditional,
)
from .metrics import bleu4, corpus_bleu, evaluate_testset, rouge_l, self_bleu
from .schedule import NoiseSchedule, make_linear_schedule, sinusoidal_embedding
from .training import (
    ImportanceSampler,
    TrainConfig,
    fit,
    loss_anchor,
    loss_simple,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "ClampSpec",
    "DatasetRecord",
    "DenoiserConfig",
    "EmbeddingTable",
    "GuidanceSpec",
    "ImportanceSampler",
    "LatentBatch",
    "NoiseSchedule",
    "SamplerSpec",
    "Seq2SeqDenoiser",
    "TextCodec",
    "TrainConfig",
    "Vocabulary",
    "WhitespaceTokenizer",
    "bleu4",
    "build_model",
    "cfg_combine",
    "corpus_bleu",
    "evaluate_testset",
    "fit",
    "guidance_scale_at",
    "load_checkpoint",
    "load_jsonl",
    "load_records",
    "loss_anchor",
    "loss_simple",
    "make_linear_schedule",
    "make_synthetic_task",
    "rouge_l",
    "sample",
    "sample_batch",
    "sample_unconditional",
    "save_checkpoint",
    "self_bleu",
    "sinusoidal_embedding",
    "train_step",
    "__version__",
]
