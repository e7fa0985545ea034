"""Dataset records, JSONL ingestion, synthetic tasks, and text encoding."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .embedder import Vocabulary, WhitespaceTokenizer

logger = logging.getLogger("embdiff")

SYNTHETIC_KINDS = ("copy", "reverse", "synonym_paraphrase")


@dataclass(frozen=True)
class DatasetRecord:
    src: str
    trg: str


def load_jsonl(path) -> Iterator[DatasetRecord]:
    """Stream records from a JSONL file of {"src": ..., "trg": ...} objects.

    Malformed lines are skipped with a warning and counted; if more than 10%
    of non-empty lines are malformed the stream aborts with ValueError at
    exhaustion. Order is the file order.
    """
    n_total = 0
    n_bad = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            n_total += 1
            try:
                obj = json.loads(line)
                src, trg = obj["src"], obj["trg"]
                if not isinstance(src, str) or not isinstance(trg, str):
                    raise TypeError("src/trg must be strings")
                if not src.split() or not trg.split():
                    raise ValueError("src/trg empty after tokenization")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                n_bad += 1
                logger.warning("%s:%d skipped malformed line (%s)", path, lineno, exc)
                continue
            yield DatasetRecord(src=src, trg=trg)
    if n_total == 0:
        logger.warning("%s contained no records", path)
    elif n_bad > 0.10 * n_total:
        raise ValueError(
            f"{path}: {n_bad}/{n_total} malformed lines exceeds the 10% tolerance"
        )


def load_records(path) -> list[DatasetRecord]:
    return list(load_jsonl(path))


def save_jsonl(records: Iterable[DatasetRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({"src": rec.src, "trg": rec.trg}) + "\n")


def records_digest(records: Iterable[DatasetRecord]) -> str:
    """Order-sensitive content hash, recorded with every results table."""
    h = hashlib.sha256()
    for rec in records:
        h.update(json.dumps({"src": rec.src, "trg": rec.trg}).encode())
        h.update(b"\n")
    return h.hexdigest()


def synonym_choices(token: str) -> tuple[str, str]:
    """The two valid output tokens for a source token of the synonym task."""
    return (f"a{token[1:]}", f"b{token[1:]}")


def make_synthetic_task(
    kind: str,
    vocab_size: int,
    n_pairs: int,
    length_range: tuple[int, int],
    seed: int,
    n_test: int | None = None,
) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    """Generate a (train, test) pair for a desk-scale task.

    copy: trg == src. reverse: trg is src reversed. synonym_paraphrase: each
    source token is mapped to one of its two synonym tokens, chosen at
    random per record, so even a perfect model faces irreducible output
    diversity. Source sequences are unique across the whole dataset, making
    the train/test split disjoint by construction.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown task {kind!r}; options: {SYNTHETIC_KINDS}")
    if vocab_size < 10:
        raise ValueError(f"vocab_size must be >= 10, got {vocab_size}")
    lo, hi = length_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad length range {length_range}")
    if n_test is None:
        n_test = max(32, min(512, n_pairs // 10))

    rng = np.random.Generator(np.random.PCG64(seed))
    tokens = [f"q{i}" for i in range(vocab_size)]
    seen: set[tuple[int, ...]] = set()
    records: list[DatasetRecord] = []
    attempts = 0
    target = n_pairs + n_test
    while len(records) < target:
        attempts += 1
        if attempts > 100 * target:
            raise ValueError(
                f"could not generate {target} unique sequences from the given space"
            )
        length = int(rng.integers(lo, hi + 1))
        ids = tuple(int(v) for v in rng.integers(0, vocab_size, size=length))
        if ids in seen:
            continue
        seen.add(ids)
        src_tokens = [tokens[i] for i in ids]
        if kind == "copy":
            trg_tokens = list(src_tokens)
        elif kind == "reverse":
            trg_tokens = list(reversed(src_tokens))
        else:
            trg_tokens = [synonym_choices(t)[int(rng.integers(0, 2))] for t in src_tokens]
        records.append(DatasetRecord(" ".join(src_tokens), " ".join(trg_tokens)))
    return records[:n_pairs], records[n_pairs:]


class TextCodec:
    """Tokenizer + vocabulary pair used to move between text and id lists."""

    def __init__(self, tokenizer, vocab: Vocabulary):
        self.tokenizer = tokenizer
        self.vocab = vocab

    @classmethod
    def from_records(
        cls, records: Iterable[DatasetRecord], tokenizer=None
    ) -> "TextCodec":
        tokenizer = tokenizer or WhitespaceTokenizer()
        tokens: set[str] = set()
        for rec in records:
            tokens.update(tokenizer.tokenize(rec.src))
            tokens.update(tokenizer.tokenize(rec.trg))
        return cls(tokenizer, Vocabulary.build(tokens))

    def encode(self, text: str) -> list[int]:
        return self.vocab.encode(self.tokenizer.tokenize(text))

    def decode(self, ids) -> str:
        return self.tokenizer.detokenize(self.vocab.decode(list(ids)))


def encode_pairs(
    records: Iterable[DatasetRecord], codec: TextCodec, max_len: int
) -> list[tuple[list[int], list[int]]]:
    """Encode records to (condition_ids, target_ids), dropping unusable ones.

    Records longer than ``max_len`` on either side, or containing tokens
    outside the codec vocabulary, are dropped with a logged count.
    """
    pairs = []
    n_dropped = 0
    for rec in records:
        try:
            x = codec.encode(rec.src)
            y = codec.encode(rec.trg)
        except KeyError:
            n_dropped += 1
            continue
        if not x or not y or len(x) > max_len or len(y) > max_len:
            n_dropped += 1
            continue
        pairs.append((x, y))
    if n_dropped:
        logger.warning("dropped %d records (too long, empty, or out-of-vocabulary)", n_dropped)
    return pairs
