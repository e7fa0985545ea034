"""Quality and diversity metrics: BLEU-4, ROUGE-L, self-BLEU, aggregation.

BLEU uses the mteval-13a tokenization, lowercasing, exponential smoothing
for zero n-gram counts, no effective-order shortening, and a brevity
penalty against the closest reference length. Self-BLEU of a sample set is
the mean corpus BLEU of each member against the others as references (the
member itself is never in its own reference set); higher self-BLEU means
less diverse. All metrics are pure functions of their text inputs.
"""

from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAX_NGRAM_ORDER = 4
_LOG_ZERO = -9999999999

_13A_RULES = [
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 - "),
]


def tokenize_13a(line: str) -> list[str]:
    """mteval-13a style tokenization: split out punctuation, keep numbers."""
    line = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = (
            line.replace("&quot;", '"')
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">")
        )
    line = f" {line} "
    for pattern, repl in _13A_RULES:
        line = pattern.sub(repl, line)
    return line.split()


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(hyp_len: int, ref_lens: Sequence[int]) -> int:
    # closest reference length; ties broken toward the shorter reference
    best_len, best_diff = None, None
    for rl in ref_lens:
        diff = abs(hyp_len - rl)
        if best_diff is None or diff < best_diff or (diff == best_diff and rl < best_len):
            best_len, best_diff = rl, diff
    return best_len


@dataclass
class BleuResult:
    score: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    counts: list[int]
    totals: list[int]


def corpus_bleu(
    hypotheses: Sequence[str],
    references: Sequence[Sequence[str]],
    lowercase: bool = True,
) -> BleuResult:
    """Corpus BLEU-4 with per-hypothesis reference sets.

    ``references[i]`` is the list of references for ``hypotheses[i]``;
    clipping uses the maximum n-gram count over the references.
    """
    if len(hypotheses) == 0:
        raise ValueError("empty corpus")
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references must align")
    counts = [0] * MAX_NGRAM_ORDER
    totals = [0] * MAX_NGRAM_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        if len(refs) == 0:
            raise ValueError("hypothesis without references")
        if lowercase:
            hyp = hyp.lower()
            refs = [r.lower() for r in refs]
        hyp_tokens = tokenize_13a(hyp)
        ref_tokens = [tokenize_13a(r) for r in refs]
        hyp_len += len(hyp_tokens)
        ref_len += _closest_ref_len(len(hyp_tokens), [len(r) for r in ref_tokens])
        for n in range(1, MAX_NGRAM_ORDER + 1):
            hyp_grams = _ngrams(hyp_tokens, n)
            totals[n - 1] += max(0, len(hyp_tokens) - n + 1)
            clip: dict = {}
            for rt in ref_tokens:
                for gram, c in _ngrams(rt, n).items():
                    if c > clip.get(gram, 0):
                        clip[gram] = c
            counts[n - 1] += sum(min(c, clip.get(g, 0)) for g, c in hyp_grams.items())

    precisions = [0.0] * MAX_NGRAM_ORDER
    smooth = 1.0
    for n in range(1, MAX_NGRAM_ORDER + 1):
        if totals[n - 1] == 0:
            break
        if counts[n - 1] == 0:
            smooth *= 2.0
            precisions[n - 1] = 100.0 / (smooth * totals[n - 1])
        else:
            precisions[n - 1] = 100.0 * counts[n - 1] / totals[n - 1]

    if hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len) if hyp_len > 0 else 0.0
    else:
        bp = 1.0
    log_sum = sum(math.log(p) if p > 0 else _LOG_ZERO for p in precisions)
    score = bp * math.exp(log_sum / MAX_NGRAM_ORDER)
    return BleuResult(
        score=score,
        precisions=precisions,
        brevity_penalty=bp,
        hyp_len=hyp_len,
        ref_len=ref_len,
        counts=counts,
        totals=totals,
    )


def bleu4(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """Single-reference corpus BLEU-4 in [0, 100]."""
    if len(hypotheses) == 0 or len(references) == 0:
        raise ValueError("empty corpus")
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references must align")
    return corpus_bleu(hypotheses, [[r] for r in references]).score


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis: str, reference: str, lowercase: bool = True) -> float:
    """Longest-common-subsequence F-score over whitespace tokens, in [0, 100].

    Uses the beta = P/R weighting (with its small stabilizing epsilons), so
    equal precision and recall give the plain harmonic mean.
    """
    if not hypothesis.strip() or not reference.strip():
        raise ValueError("empty input text")
    if lowercase:
        hypothesis, reference = hypothesis.lower(), reference.lower()
    hyp = hypothesis.split()
    ref = reference.split()
    lcs = _lcs_len(hyp, ref)
    recall = lcs / len(ref)
    precision = lcs / len(hyp)
    beta = precision / (recall + 1e-12)
    num = (1.0 + beta**2) * recall * precision
    denom = recall + beta**2 * precision
    return 100.0 * num / (denom + 1e-8)


def self_bleu(samples: Sequence[str]) -> float:
    """Mean leave-one-out corpus BLEU over a sample set (|S| >= 2)."""
    if len(samples) < 2:
        raise ValueError(f"self-BLEU needs at least 2 samples, got {len(samples)}")
    scores = []
    for i, s in enumerate(samples):
        others = [r for j, r in enumerate(samples) if j != i]
        scores.append(corpus_bleu([s], [others]).score)
    return float(np.mean(scores))


@dataclass
class GenerationRecord:
    """One generated hypothesis for (condition, seed)."""

    condition_id: str
    seed: int
    hypothesis: str
    reference: str


@dataclass
class EvalSummary:
    bleu4_mean: float
    bleu4_std: float
    rouge_l_mean: float
    rouge_l_std: float
    self_bleu: float
    n_conditions: int
    n_seeds: int
    bertscore: float | None = None  # reserved for external injection
    per_seed_bleu4: list[float] = field(default_factory=list)
    per_seed_rouge_l: list[float] = field(default_factory=list)


def evaluate_testset(
    records: Iterable[GenerationRecord], n_seeds: int | None = None
) -> tuple[EvalSummary, list[dict]]:
    """Aggregate quality (per seed) and diversity (per condition).

    Every condition must carry the same seed set (of size ``n_seeds`` when
    given); gaps raise with the missing (condition, seed) pairs listed.
    Quality is corpus BLEU-4 and mean ROUGE-L per seed, reported with the
    across-seed standard deviation; diversity is mean self-BLEU over the
    per-condition hypothesis sets.
    """
    by_condition: dict[str, dict[int, GenerationRecord]] = {}
    for rec in records:
        slot = by_condition.setdefault(str(rec.condition_id), {})
        if rec.seed in slot:
            raise ValueError(f"duplicate (condition={rec.condition_id}, seed={rec.seed})")
        slot[rec.seed] = rec
    if not by_condition:
        raise ValueError("no records to evaluate")

    all_seeds = sorted({s for slot in by_condition.values() for s in slot})
    if n_seeds is not None and len(all_seeds) != n_seeds:
        raise ValueError(f"expected {n_seeds} seeds, found {len(all_seeds)}: {all_seeds}")
    gaps = [
        (cid, s)
        for cid, slot in sorted(by_condition.items())
        for s in all_seeds
        if s not in slot
    ]
    if gaps:
        raise ValueError(f"missing (condition, seed) pairs: {gaps}")
    for cid, slot in by_condition.items():
        refs = {r.reference for r in slot.values()}
        if len(refs) != 1:
            raise ValueError(f"condition {cid} has inconsistent references")

    cids = sorted(by_condition)
    per_seed_bleu, per_seed_rouge = [], []
    for seed in all_seeds:
        hyps = [by_condition[c][seed].hypothesis for c in cids]
        refs = [by_condition[c][seed].reference for c in cids]
        per_seed_bleu.append(bleu4(hyps, refs))
        per_seed_rouge.append(float(np.mean([rouge_l(h, r) for h, r in zip(hyps, refs)])))

    per_condition = []
    for cid in cids:
        slot = by_condition[cid]
        hyps = [slot[s].hypothesis for s in all_seeds]
        ref = slot[all_seeds[0]].reference
        row = {
            "condition_id": cid,
            "reference": ref,
            "n_seeds": len(all_seeds),
            "self_bleu": self_bleu(hyps) if len(hyps) >= 2 else "",
            "rouge_l_mean": float(np.mean([rouge_l(h, ref) for h in hyps])),
        }
        per_condition.append(row)

    self_vals = [r["self_bleu"] for r in per_condition if r["self_bleu"] != ""]
    summary = EvalSummary(
        bleu4_mean=float(np.mean(per_seed_bleu)),
        bleu4_std=float(np.std(per_seed_bleu)),
        rouge_l_mean=float(np.mean(per_seed_rouge)),
        rouge_l_std=float(np.std(per_seed_rouge)),
        self_bleu=float(np.mean(self_vals)) if self_vals else float("nan"),
        n_conditions=len(cids),
        n_seeds=len(all_seeds),
        per_seed_bleu4=per_seed_bleu,
        per_seed_rouge_l=per_seed_rouge,
    )
    return summary, per_condition


def read_generation_jsonl(path) -> list[GenerationRecord]:
    """Read {condition_id, seed, hypothesis, reference} objects, one per line."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(
                    GenerationRecord(
                        condition_id=str(obj["condition_id"]),
                        seed=int(obj["seed"]),
                        hypothesis=str(obj["hypothesis"]),
                        reference=str(obj["reference"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return records


def write_eval_csvs(summary: EvalSummary, per_condition: list[dict], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "summary.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["bleu4", "bleu4_std", "rouge_l", "rouge_l_std", "self_bleu",
             "n_conditions", "n_seeds", "bertscore"]
        )
        writer.writerow(
            [summary.bleu4_mean, summary.bleu4_std, summary.rouge_l_mean,
             summary.rouge_l_std, summary.self_bleu, summary.n_conditions,
             summary.n_seeds, "" if summary.bertscore is None else summary.bertscore]
        )
    with (out_dir / "per_condition.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["condition_id", "reference", "n_seeds", "self_bleu", "rouge_l_mean"]
        )
        writer.writeheader()
        writer.writerows(per_condition)
