"""Transformer encoder-decoder that predicts clean latents from noised ones.

The encoder consumes the clean condition embeddings once per sample (its
output can be cached and reused across all solver steps); the decoder
consumes the noised target latents plus sinusoidal position and timestep
features and predicts the clean latents directly. Decoding is
non-autoregressive: the decoder self-attention is full, not causal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .embedder import EmbeddingTable
from .schedule import NoiseSchedule, sinusoidal_embedding


@dataclass
class DenoiserConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 128
    embed_dim: int = 32
    max_len: int = 32
    ffn_dim: int | None = None  # defaults to 4 * model_dim
    dropout: float = 0.0
    cond_dropout_p: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by {self.heads} heads"
            )
        if not 0.0 <= self.cond_dropout_p <= 1.0:
            raise ValueError(f"cond_dropout_p must be in [0, 1], got {self.cond_dropout_p}")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.model_dim


@dataclass
class LatentBatch:
    """A padded batch of latent sequences at a common timestep.

    ``mask`` is True at real positions, False at padding. Padded positions
    are excluded from attention and losses and carry no gradient.
    """

    latents: torch.Tensor  # [batch, n, embed_dim]
    lengths: list[int]
    mask: torch.Tensor  # bool [batch, n]
    t: int = 0

    @classmethod
    def from_lengths(cls, latents_list: list[torch.Tensor], t: int = 0) -> "LatentBatch":
        lengths = [x.shape[0] for x in latents_list]
        n = max(lengths)
        dim = latents_list[0].shape[1]
        out = latents_list[0].new_zeros(len(latents_list), n, dim)
        mask = torch.zeros(len(latents_list), n, dtype=torch.bool)
        for i, x in enumerate(latents_list):
            out[i, : x.shape[0]] = x
            mask[i, : x.shape[0]] = True
        return cls(latents=out, lengths=lengths, mask=mask, t=t)


@dataclass
class EncoderMemory:
    """Cached encoder output for a batch of conditions."""

    states: torch.Tensor  # [batch, m, model_dim]
    mask: torch.Tensor  # bool [batch, m], True at real positions

    def __len__(self) -> int:
        return self.states.shape[1]


def pad_id_batch(
    id_lists: list[list[int]], fill_id: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad variable-length id lists into [batch, n] ids + validity mask."""
    n = max(len(ids) for ids in id_lists)
    out = torch.full((len(id_lists), n), fill_id, dtype=torch.long)
    mask = torch.zeros(len(id_lists), n, dtype=torch.bool)
    for i, ids in enumerate(id_lists):
        out[i, : len(ids)] = torch.as_tensor(ids, dtype=torch.long)
        mask[i, : len(ids)] = True
    return out, mask


class Seq2SeqDenoiser(nn.Module):
    """f(y_t, t, x) -> y0_hat over a shared embedding table.

    Holds the embedding table and the noise schedule so that checkpointing
    and sampling see one consistent artifact. Latents of width ``embed_dim``
    are projected to ``model_dim`` and back via single linear layers.
    """

    def __init__(self, config: DenoiserConfig, table: EmbeddingTable, schedule: NoiseSchedule):
        super().__init__()
        if table.dim != config.embed_dim:
            raise ValueError(
                f"table dim {table.dim} != config embed_dim {config.embed_dim}"
            )
        self.config = config
        self.table = table
        self.schedule = schedule

        self.proj_in = nn.Linear(config.embed_dim, config.model_dim)
        self.proj_out = nn.Linear(config.model_dim, config.embed_dim)

        enc_layer = nn.TransformerEncoderLayer(
            d_model=config.model_dim,
            nhead=config.heads,
            dim_feedforward=config.ffn_dim,
            dropout=config.dropout,
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            enc_layer, config.layers, enable_nested_tensor=False
        )
        dec_layer = nn.TransformerDecoderLayer(
            d_model=config.model_dim,
            nhead=config.heads,
            dim_feedforward=config.ffn_dim,
            dropout=config.dropout,
            batch_first=True,
            norm_first=True,
        )
        self.decoder = nn.TransformerDecoder(dec_layer, config.layers)

        pos = sinusoidal_embedding(torch.arange(config.max_len), config.model_dim)
        self.register_buffer("pos_features", pos, persistent=False)

    def encode_condition(
        self, x_ids: torch.Tensor, x_mask: torch.Tensor | None = None
    ) -> EncoderMemory:
        """Run the encoder once over condition token ids.

        ``x_ids`` is [batch, m]; ``x_mask`` marks real positions (None means
        all real). Deterministic in eval mode, so the result may be cached
        and reused for every solver step.
        """
        x_ids = torch.as_tensor(x_ids, dtype=torch.long)
        if x_ids.dim() != 2:
            raise ValueError(f"expected [batch, m] condition ids, got {tuple(x_ids.shape)}")
        m = x_ids.shape[1]
        if m > self.config.max_len:
            raise ValueError(f"condition length {m} exceeds max_len {self.config.max_len}")
        if x_mask is None:
            x_mask = torch.ones_like(x_ids, dtype=torch.bool)
        h = self.proj_in(self.table.embed(x_ids)) + self.pos_features[:m]
        states = self.encoder(h, src_key_padding_mask=~x_mask)
        return EncoderMemory(states=states, mask=x_mask)

    def predict_y0(
        self,
        y_t: torch.Tensor,
        t,
        memory: EncoderMemory,
        pad_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Predict clean latents from noised latents at timestep ``t``.

        ``y_t`` is [batch, n, embed_dim]; ``t`` is an int shared by the batch
        or a [batch] tensor. ``pad_mask`` is True at real positions.
        """
        if y_t.dim() != 3 or y_t.shape[-1] != self.config.embed_dim:
            raise ValueError(
                f"expected [batch, n, {self.config.embed_dim}] latents, got {tuple(y_t.shape)}"
            )
        n = y_t.shape[1]
        if n > self.config.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        t_tensor = torch.as_tensor(t, dtype=torch.long)
        if t_tensor.numel() > 0 and (
            t_tensor.min() < 1 or t_tensor.max() > self.schedule.T
        ):
            raise ValueError(f"timestep out of [1, {self.schedule.T}]")
        time_feat = sinusoidal_embedding(t_tensor.reshape(-1), self.config.model_dim)
        if t_tensor.dim() == 0:
            time_feat = time_feat.expand(y_t.shape[0], -1)
        elif t_tensor.shape[0] != y_t.shape[0]:
            raise ValueError("per-sample timesteps must match the batch size")

        h = self.proj_in(y_t) + self.pos_features[:n] + time_feat[:, None, :]
        key_pad = None if pad_mask is None else ~pad_mask
        out = self.decoder(
            h,
            memory.states,
            tgt_key_padding_mask=key_pad,
            memory_key_padding_mask=~memory.mask,
        )
        return self.proj_out(out)


def build_model(
    config: DenoiserConfig,
    vocab,
    schedule: NoiseSchedule,
    seed: int = 0,
) -> Seq2SeqDenoiser:
    """Fresh model with a seeded embedding table and seeded weight init."""
    table = EmbeddingTable(vocab, config.embed_dim, seed=seed)
    torch.manual_seed(seed)
    return Seq2SeqDenoiser(config, table, schedule)
