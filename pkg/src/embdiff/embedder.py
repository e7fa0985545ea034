"""Token vocabulary, learned embedding table, and latent-to-token clamping.

The embedding table is the only bridge between discrete tokens and the
continuous latent space: ``embed`` maps ids to rows, and the clamping
operations project latents back onto tokens, either deterministically
(nearest row) or stochastically (temperature softmax over negated
distances, so nearer tokens are more likely).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn as nn

MASK_TOKEN = "[MASK]"

CLAMP_MODES = ("none", "final_only", "every_step")


@dataclass(frozen=True)
class ClampSpec:
    """How and when latents are projected onto tokens during sampling.

    ``temperature == 0`` means deterministic nearest-token clamping.
    ``rng_seed=None`` derives the clamp randomness from the sampling seed.
    """

    mode: str = "final_only"
    temperature: float = 0.0
    rng_seed: int | None = None

    def __post_init__(self):
        if self.mode not in CLAMP_MODES:
            raise ValueError(f"clamp mode must be one of {CLAMP_MODES}, got {self.mode!r}")
        if self.temperature < 0:
            raise ValueError(f"clamp temperature must be >= 0, got {self.temperature}")


class WhitespaceTokenizer:
    """Splits on whitespace; the default for the synthetic word-token tasks."""

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def detokenize(self, tokens: Sequence[str]) -> str:
        return " ".join(tokens)


class PretrainedTokenizerAdapter:
    """Wraps a HuggingFace-style subword tokenizer behind the same interface.

    Optional: only needed for real-text datasets. The wrapped object must
    provide ``tokenize``, ``convert_tokens_to_string`` and ``get_vocab``.
    """

    def __init__(self, tokenizer=None, name: str | None = None):
        if tokenizer is None:
            if name is None:
                raise ValueError("pass a tokenizer object or a pretrained name")
            from transformers import AutoTokenizer  # heavyweight, import lazily

            tokenizer = AutoTokenizer.from_pretrained(name)
        self._tok = tokenizer

    def tokenize(self, text: str) -> list[str]:
        return self._tok.tokenize(text)

    def detokenize(self, tokens: Sequence[str]) -> str:
        return self._tok.convert_tokens_to_string(list(tokens))

    def vocabulary(self) -> "Vocabulary":
        vocab = self._tok.get_vocab()
        tokens = [tok for tok, _ in sorted(vocab.items(), key=lambda kv: kv[1])]
        return Vocabulary(tokens)


class Vocabulary:
    """Immutable token <-> id mapping. Id = position in the token list.

    Always contains the null-condition token ``[MASK]``; it is prepended
    when absent so synthetic vocabularies get id 0 for it.
    """

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if MASK_TOKEN not in tokens:
            tokens = [MASK_TOKEN] + tokens
        self._tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}
        if len(self._ids) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.mask_id = self._ids[MASK_TOKEN]

    @classmethod
    def build(cls, token_iter: Iterable[str]) -> "Vocabulary":
        seen = sorted(set(token_iter) - {MASK_TOKEN})
        return cls([MASK_TOKEN] + seen)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids[token]

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._ids[t] for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self._tokens[int(i)] for i in ids]

    def save(self, path) -> None:
        # one token per line, line number = id; tokens may not contain whitespace
        for tok in self._tokens:
            if any(ch.isspace() for ch in tok):
                raise ValueError(f"token {tok!r} contains whitespace, not serializable")
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln != ""])


class EmbeddingTable(nn.Module):
    """Learned token embeddings with a per-row normalization invariant.

    Every row is kept at mean 0 and standard deviation 1 across its
    components; the training loop calls ``renormalize_()`` after each
    optimizer step to restore the invariant.
    """

    def __init__(self, vocab: Vocabulary, dim: int, seed: int = 0):
        super().__init__()
        if dim < 2:
            raise ValueError(f"embedding dim must be >= 2, got {dim}")
        self.vocab = vocab
        self.dim = dim
        gen = torch.Generator().manual_seed(seed)
        weight = torch.randn(len(vocab), dim, generator=gen)
        self.weight = nn.Parameter(weight)
        self.renormalize_()

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        """Look up rows for a tensor of token ids (any shape)."""
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.numel() > 0 and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError(
                f"token ids must lie in [0, {self.vocab_size}), "
                f"got range [{int(ids.min())}, {int(ids.max())}]"
            )
        if ids.numel() == 0:
            return self.weight.new_empty(*ids.shape, self.dim)
        return self.weight[ids]

    def distance_logits(self, latents: torch.Tensor) -> torch.Tensor:
        """Negated Euclidean distances from latents to every embedding row.

        Shape ``[..., dim] -> [..., vocab_size]``; the nearest token has the
        largest (least negative) logit, and a latent sitting exactly on a row
        gets logit 0 there. Distances are computed by explicit expansion
        (chunked over rows) rather than a matmul identity, so that the
        self-distance is exactly zero.
        """
        if latents.shape[-1] != self.dim:
            raise ValueError(
                f"latent dim {latents.shape[-1]} != embedding dim {self.dim}"
            )
        flat = latents.reshape(-1, self.dim)
        n = flat.shape[0]
        # cap the [chunk, vocab, dim] expansion at ~2^24 elements
        chunk = max(1, (1 << 24) // max(1, self.vocab_size * self.dim))
        outs = []
        for i in range(0, n, chunk):
            diff = flat[i : i + chunk, None, :] - self.weight[None, :, :]
            outs.append(-diff.pow(2).sum(-1).sqrt())
        if not outs:
            out = self.weight.new_empty(0, self.vocab_size)
        else:
            out = torch.cat(outs, dim=0)
        return out.reshape(*latents.shape[:-1], self.vocab_size)

    def hard_clamp(self, latents: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Project each latent row to its nearest token.

        Returns ``(ids, embeddings)``. Ties break toward the lowest token id
        (argmax picks the first maximum).
        """
        logits = self.distance_logits(latents)
        ids = logits.argmax(dim=-1)
        return ids, self.embed(ids)

    def stochastic_clamp(
        self,
        latents: torch.Tensor,
        temperature: float,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Sample a token per row from softmax(-distance / temperature).

        ``temperature == 0`` is exactly ``hard_clamp`` (bit-identical, no RNG
        consumed). Higher temperatures flatten the distribution toward
        uniform over the vocabulary.
        """
        if temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {temperature}")
        if temperature == 0:
            return self.hard_clamp(latents)
        logits = self.distance_logits(latents) / temperature
        probs = torch.softmax(logits.reshape(-1, self.vocab_size), dim=-1)
        ids = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
        ids = ids.reshape(latents.shape[:-1])
        return ids, self.embed(ids)

    @torch.no_grad()
    def renormalize_(self) -> None:
        """Shift/scale each row in place to mean 0, population std 1."""
        w = self.weight
        mean = w.mean(dim=1, keepdim=True)
        std = w.std(dim=1, keepdim=True, unbiased=False)
        if (std == 0).any():
            raise ValueError("cannot normalize a constant embedding row")
        w.sub_(mean).div_(std)

    def assert_rows_distinct(self) -> None:
        """No two rows identical; required for clamping to be well defined."""
        uniq = torch.unique(self.weight, dim=0)
        if uniq.shape[0] != self.vocab_size:
            raise ValueError("embedding table contains identical rows")
