"""Quality-diversity sweep runner: CSV results, trade-off plots, Pareto fronts.

Each grid point is one inference configuration (guidance scale, clamp
temperature, guidance schedule, clamp/cfg order, solver steps). Every
(point, seed) pair yields one CSV row with quality metrics; a per-point
aggregate row (seed column ``all``) adds the across-seed self-BLEU. Rows
are deterministic given the seed, so interrupted sweeps can resume from
the rows and output files already on disk.
"""

from __future__ import annotations

import csv
import itertools
import json
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .data import DatasetRecord, TextCodec, records_digest
from .embedder import ClampSpec
from .inference import GuidanceSpec, SamplerSpec, sample_batch
from .metrics import bleu4, rouge_l, self_bleu

CSV_COLUMNS = [
    "method", "s", "tau", "schedule", "order", "steps", "seed",
    "bleu4", "rouge_l", "self_bleu", "mean_len", "wall_time",
]
AGGREGATE_SEED = "all"


@dataclass(frozen=True)
class SweepPoint:
    s: float
    tau: float
    schedule: str
    order: str
    steps: int

    @property
    def method(self) -> str:
        return self.order

    def key(self) -> str:
        return f"{self.order}_s{self.s:g}_tau{self.tau:g}_{self.schedule}_steps{self.steps}"

    def specs(self) -> tuple[GuidanceSpec, ClampSpec]:
        guidance = GuidanceSpec(scale=self.s, schedule=self.schedule, order=self.order)
        mode = "every_step" if guidance.uses_clamp else "final_only"
        return guidance, ClampSpec(mode=mode, temperature=self.tau)


@dataclass
class SweepRecord:
    method: str
    s: float
    tau: float
    schedule: str
    order: str
    steps: int
    seed: int | str
    bleu4: float
    rouge_l: float
    self_bleu: float | None
    mean_len: float
    wall_time: float

    def to_row(self) -> list:
        return [
            self.method, self.s, self.tau, self.schedule, self.order, self.steps,
            self.seed, self.bleu4, self.rouge_l,
            "" if self.self_bleu is None else self.self_bleu,
            self.mean_len, self.wall_time,
        ]


def expand_grid(
    s_values, tau_values, schedules, orders, steps_values
) -> list[SweepPoint]:
    return [
        SweepPoint(s=float(s), tau=float(tau), schedule=sch, order=order, steps=int(st))
        for s, tau, sch, order, st in itertools.product(
            s_values, tau_values, schedules, orders, steps_values
        )
    ]


def generate_outputs(
    model,
    conditions: list[list[int]],
    lengths: list[int],
    sampler: SamplerSpec,
    guidance: GuidanceSpec | None = None,
    clamp: ClampSpec | None = None,
    seed: int | None = None,
    batch_size: int = 64,
) -> list[list[int]]:
    """Chunked generation over a whole test set; invariant to batch size."""
    outputs: list[list[int]] = []
    for lo in range(0, len(conditions), batch_size):
        outs, _ = sample_batch(
            model,
            conditions[lo : lo + batch_size],
            lengths[lo : lo + batch_size],
            sampler,
            guidance,
            clamp,
            seed=seed,
            first_index=lo,
        )
        outputs.extend(outs)
    return outputs


def token_accuracy(outputs: list[list[int]], references: list[list[int]]) -> float:
    """Position-wise token match rate over equal-length output/reference pairs."""
    hits, total = 0, 0
    for out, ref in zip(outputs, references):
        for a, b in zip(out, ref):
            hits += int(a == b)
            total += 1
    return hits / max(1, total)


def _aggregate(point: SweepPoint, rows: list[SweepRecord], texts_by_seed: dict) -> SweepRecord:
    seeds = sorted(texts_by_seed)
    n_conditions = len(next(iter(texts_by_seed.values())))
    per_condition = []
    for i in range(n_conditions):
        hyps = [texts_by_seed[s][i] for s in seeds]
        if len(hyps) >= 2:
            per_condition.append(self_bleu(hyps))
    return SweepRecord(
        method=point.method, s=point.s, tau=point.tau, schedule=point.schedule,
        order=point.order, steps=point.steps, seed=AGGREGATE_SEED,
        bleu4=float(np.mean([r.bleu4 for r in rows])),
        rouge_l=float(np.mean([r.rouge_l for r in rows])),
        self_bleu=float(np.mean(per_condition)) if per_condition else None,
        mean_len=float(np.mean([r.mean_len for r in rows])),
        wall_time=float(np.sum([r.wall_time for r in rows])),
    )


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_rows(path, records: list[SweepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow(rec.to_row())


def run_sweep(
    model,
    test_records: list[DatasetRecord],
    codec: TextCodec,
    grid: list[SweepPoint],
    seeds: list[int],
    out_dir,
    length_mode: str = "reference",
    max_conditions: int | None = None,
    batch_size: int = 64,
    sampler_kind: str = "fewstep",
    solver_order: int = 1,
    workers: int = 1,
    resume: bool = False,
) -> list[SweepRecord]:
    """Run the grid, write results.csv, plots, Pareto fronts, and a manifest.

    Output lengths default to the reference lengths; ``length_mode="source"``
    uses the condition length instead, and the choice is recorded in the
    sweep manifest (the scores are not comparable across modes). With
    ``resume=True``, (point, seed) pairs whose row and output file already
    exist are not regenerated; the final table is identical to an
    uninterrupted run's, wall times aside.
    """
    if length_mode not in ("reference", "source"):
        raise ValueError(f"length_mode must be reference|source, got {length_mode!r}")
    out_dir = Path(out_dir)
    outputs_dir = out_dir / "outputs"
    outputs_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / "results.csv"

    conditions, lengths, refs = [], [], []
    max_len = model.config.max_len
    for rec in test_records:
        x = codec.encode(rec.src)
        y = codec.encode(rec.trg)
        if not x or not y or len(x) > max_len or len(y) > max_len:
            continue
        conditions.append(x)
        lengths.append(len(y) if length_mode == "reference" else min(len(x), max_len))
        refs.append(rec.trg)
        if max_conditions is not None and len(conditions) >= max_conditions:
            break
    if not conditions:
        raise ValueError("no usable test records")

    existing: dict[tuple[str, str], dict] = {}
    if resume and results_path.exists():
        for row in read_results_csv(results_path):
            point_key = SweepPoint(
                s=float(row["s"]), tau=float(row["tau"]), schedule=row["schedule"],
                order=row["order"], steps=int(row["steps"]),
            ).key()
            existing[(point_key, row["seed"])] = row

    def outputs_file(point: SweepPoint, seed: int) -> Path:
        return outputs_dir / f"{point.key()}_seed{seed}.jsonl"

    def run_job(point: SweepPoint, seed: int) -> tuple[SweepPoint, int, SweepRecord, list[str]]:
        path = outputs_file(point, seed)
        key = (point.key(), str(seed))
        if resume and key in existing and path.exists():
            texts = [json.loads(ln)["hypothesis"] for ln in path.read_text().splitlines()]
            row = existing[key]
            rec = SweepRecord(
                method=row["method"], s=float(row["s"]), tau=float(row["tau"]),
                schedule=row["schedule"], order=row["order"], steps=int(row["steps"]),
                seed=seed, bleu4=float(row["bleu4"]), rouge_l=float(row["rouge_l"]),
                self_bleu=None, mean_len=float(row["mean_len"]),
                wall_time=float(row["wall_time"]),
            )
            return point, seed, rec, texts
        guidance, clamp = point.specs()
        sampler = SamplerSpec(
            kind=sampler_kind, steps=point.steps, seed=seed, solver_order=solver_order
        )
        start = time.monotonic()
        out_ids = generate_outputs(
            model, conditions, lengths, sampler, guidance, clamp,
            seed=seed, batch_size=batch_size,
        )
        wall = time.monotonic() - start
        texts = [codec.decode(ids) for ids in out_ids]
        rec = SweepRecord(
            method=point.method, s=point.s, tau=point.tau, schedule=point.schedule,
            order=point.order, steps=point.steps, seed=seed,
            bleu4=bleu4(texts, refs),
            rouge_l=float(np.mean([rouge_l(h, r) for h, r in zip(texts, refs)])),
            self_bleu=None,
            mean_len=float(np.mean([len(ids) for ids in out_ids])),
            wall_time=wall,
        )
        with path.open("w", encoding="utf-8") as fh:
            for i, (hyp, ref) in enumerate(zip(texts, refs)):
                fh.write(json.dumps(
                    {"condition_id": i, "seed": seed, "hypothesis": hyp, "reference": ref}
                ) + "\n")
        return point, seed, rec, texts

    jobs = [(point, seed) for point in grid for seed in seeds]
    per_point_rows: dict[SweepPoint, dict[int, SweepRecord]] = {p: {} for p in grid}
    per_point_texts: dict[SweepPoint, dict[int, list[str]]] = {p: {} for p in grid}

    # progressive log doubles as the resume manifest; the single writer is
    # this thread, workers only compute
    with results_path.open("a" if resume and results_path.exists() else "w", newline="") as fh:
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(CSV_COLUMNS)
        if workers <= 1:
            completed = map(lambda job: run_job(*job), jobs)
            for point, seed, rec, texts in completed:
                per_point_rows[point][seed] = rec
                per_point_texts[point][seed] = texts
                if (point.key(), str(seed)) not in existing:
                    writer.writerow(rec.to_row())
                    fh.flush()
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = {pool.submit(run_job, p, s): (p, s) for p, s in jobs}
                for fut in as_completed(futures):
                    point, seed, rec, texts = fut.result()
                    per_point_rows[point][seed] = rec
                    per_point_texts[point][seed] = texts
                    if (point.key(), str(seed)) not in existing:
                        writer.writerow(rec.to_row())
                        fh.flush()

    final: list[SweepRecord] = []
    for point in grid:
        rows = [per_point_rows[point][s] for s in sorted(per_point_rows[point])]
        final.extend(rows)
        final.append(_aggregate(point, rows, per_point_texts[point]))
    _write_rows(results_path, final)

    manifest = {
        "grid": [point.key() for point in grid],
        "seeds": list(seeds),
        "length_mode": length_mode,
        "n_conditions": len(conditions),
        "split_hash": records_digest(test_records),
        "sampler_kind": sampler_kind,
        "solver_order": solver_order,
    }
    (out_dir / "sweep_manifest.json").write_text(json.dumps(manifest, indent=2))

    plots_from_csv(results_path, out_dir)
    write_pareto_reports(results_path, out_dir)
    return final


def _aggregate_rows(rows: list[dict]) -> list[dict]:
    return [r for r in rows if r["seed"] == AGGREGATE_SEED and r["self_bleu"] != ""]


def plots_from_csv(csv_path, out_dir) -> list[Path]:
    """Regenerate the quality-vs-self-BLEU scatter plots from a results CSV."""
    rows = read_results_csv(csv_path)
    agg = _aggregate_rows(rows)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for metric, label in (("bleu4", "BLEU-4"), ("rouge_l", "ROUGE-L")):
        fig, ax = plt.subplots(figsize=(6, 4.5))
        for method in sorted({r["method"] for r in agg}):
            pts = [r for r in agg if r["method"] == method]
            xs = [float(r["self_bleu"]) for r in pts]
            ys = [float(r[metric]) for r in pts]
            errs = []
            for r in pts:
                seed_rows = [
                    q for q in rows
                    if q["seed"] != AGGREGATE_SEED
                    and (q["method"], q["s"], q["tau"], q["schedule"], q["order"], q["steps"])
                    == (r["method"], r["s"], r["tau"], r["schedule"], r["order"], r["steps"])
                ]
                errs.append(float(np.std([float(q[metric]) for q in seed_rows])))
            ax.errorbar(xs, ys, yerr=errs, fmt="o", capsize=3, label=method)
            for r, x, y in zip(pts, xs, ys):
                ax.annotate(
                    f"s={float(r['s']):g},τ={float(r['tau']):g}",
                    (x, y), fontsize=7, xytext=(3, 3), textcoords="offset points",
                )
        ax.set_xlabel("self-BLEU (lower = more diverse)")
        ax.set_ylabel(label)
        ax.legend(fontsize=8)
        ax.set_title(f"{label} vs self-BLEU")
        fig.tight_layout()
        path = out_dir / f"tradeoff_{metric}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def pareto_front(rows: list[dict], metric: str) -> list[dict]:
    """Rows not strictly dominated (quality up, self-BLEU down is better)."""

    def dominates(a, b):
        aq, ad = float(a[metric]), float(a["self_bleu"])
        bq, bd = float(b[metric]), float(b["self_bleu"])
        return aq >= bq and ad <= bd and (aq > bq or ad < bd)

    return [r for r in rows if not any(dominates(o, r) for o in rows if o is not r)]


def write_pareto_reports(csv_path, out_dir) -> list[Path]:
    rows = read_results_csv(csv_path)
    agg = _aggregate_rows(rows)
    out_dir = Path(out_dir)
    paths = []
    for metric in ("bleu4", "rouge_l"):
        front = pareto_front(agg, metric)
        path = out_dir / f"pareto_{metric}.csv"
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(front)
        paths.append(path)
    return paths
