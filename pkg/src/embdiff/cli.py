"""Command-line interface: make-data, train, sample, eval, sweep.

Paths are resolved under $EMBDIFF_ROOT when given as relative paths. Exit
codes: 0 success, 1 usage error, 2 runtime failure. Flag values may also be
supplied via ``--config`` as flat ``key = value`` lines (command-line flags
win over file values).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    TextCodec,
    encode_pairs,
    load_records,
    make_synthetic_task,
    save_jsonl,
)
from .denoiser import DenoiserConfig, build_model
from .embedder import ClampSpec, WhitespaceTokenizer
from .inference import GuidanceSpec, SamplerSpec, sample_batch
from .metrics import evaluate_testset, read_generation_jsonl, write_eval_csvs
from .schedule import make_linear_schedule
from .sweep import expand_grid, plots_from_csv, run_sweep, write_pareto_reports
from .training import TrainConfig, TrainingDiverged, fit

_ORDER_FLAGS = {
    "none": "none",
    "cfg-only": "cfg_only",
    "clamp-only": "clamp_only",
    "cfg-before-clamp": "cfg_before_clamp",
    "clamp-before-cfg": "clamp_before_cfg",
}
_SCHEDULE_FLAGS = {
    "constant": "constant",
    "linear": "linear",
    "linear-interp": "linear_interp",
    "stddev": "std_dev",
    "stddev-scaled": "std_dev_scaled",
}


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1; runtime failures exit 2 (argparse defaults to 2)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _root() -> Path:
    return Path(os.environ.get("EMBDIFF_ROOT", "."))


def _resolve(path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    return p if p.is_absolute() else _root() / p


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip() != ""]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip() != ""]


def _read_config_file(path: Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        values[key.strip()] = raw.strip()
    return values


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser, argv: list[str]):
    """Fill flags from the config file unless given explicitly on the CLI."""
    if not getattr(args, "config", None):
        return args
    values = _read_config_file(_resolve(args.config))
    actions = {a.dest: a for a in parser._actions}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest == "config":
            raise ValueError(f"unknown config key {key!r}")
        if any(opt in argv for opt in action.option_strings):
            continue
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            value = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            value = action.type(raw)
        else:
            value = raw
        setattr(args, dest, value)
    return args


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--model-dim", type=int, default=128)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--max-seq-len", type=int, default=32)
    p.add_argument("--ffn-dim", type=int, default=None)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--timesteps", type=int, default=1000, help="diffusion steps T")


def build_parser() -> _Parser:
    parser = _Parser(prog="embdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", parents=[], help="generate a synthetic task")
    p.add_argument("--task", required=True, choices=["copy", "reverse", "synonym_paraphrase"])
    p.add_argument("--vocab-size", type=int, default=100)
    p.add_argument("--n-pairs", type=int, default=20000)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_make_data)

    p = sub.add_parser("train", help="train a model on a JSONL dataset")
    p.add_argument("--data", required=True, help="directory containing train.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="flat key = value defaults file")
    _add_model_flags(p)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--warmup", type=int, default=2000)
    p.add_argument("--cond-dropout", type=float, default=0.1)
    p.add_argument("--is-history", type=int, default=10)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="generate text from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", action="append", default=[], help="condition text (repeatable)")
    p.add_argument("--input-file", default=None, help="file with one condition per line")
    p.add_argument("--length", default="src", help="output token count, or 'src'")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--sampler", choices=["ancestral", "fewstep"], default="fewstep")
    p.add_argument("--solver-order", type=int, choices=[1, 2], default=1)
    p.add_argument("--cfg-scale", type=float, default=1.0)
    p.add_argument("--cfg-schedule", choices=sorted(_SCHEDULE_FLAGS), default="constant")
    p.add_argument("--order", choices=sorted(_ORDER_FLAGS), default="none")
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--diagnostics-csv", default=None)
    p.add_argument("--out", default=None, help="write outputs here instead of stdout")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("eval", help="score a generations JSONL file")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", type=int, default=None, help="expected seed count")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="quality-diversity sweep over inference configs")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None, help="test JSONL file")
    p.add_argument("--out", required=True)
    p.add_argument("--s-grid", type=_float_list, default=[1.0])
    p.add_argument("--tau-grid", type=_float_list, default=[0.0])
    p.add_argument("--schedules", default="constant",
                   help="comma list of " + ",".join(sorted(_SCHEDULE_FLAGS)))
    p.add_argument("--orders", default="none",
                   help="comma list of " + ",".join(sorted(_ORDER_FLAGS)))
    p.add_argument("--steps-grid", type=_int_list, default=[20])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--length-mode", choices=["reference", "source"], default="reference")
    p.add_argument("--max-conditions", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--sampler", choices=["ancestral", "fewstep"], default="fewstep")
    p.add_argument("--solver-order", type=int, choices=[1, 2], default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--plots-only", action="store_true",
                   help="rebuild plots and Pareto reports from existing results.csv")
    p.set_defaults(func=_cmd_sweep)

    return parser


def _cmd_make_data(args) -> int:
    train, test = make_synthetic_task(
        args.task, args.vocab_size, args.n_pairs,
        (args.min_len, args.max_len), args.seed, n_test=args.n_test,
    )
    out = _resolve(args.out)
    save_jsonl(train, out / "train.jsonl")
    save_jsonl(test, out / "test.jsonl")
    print(f"wrote {len(train)} train / {len(test)} test records to {out}")
    return 0


def _cmd_train(args) -> int:
    data_dir = _resolve(args.data)
    records = load_records(data_dir / "train.jsonl")
    if not records:
        raise ValueError(f"no training records in {data_dir}")
    codec = TextCodec.from_records(records)
    config = DenoiserConfig(
        layers=args.layers, heads=args.heads, model_dim=args.model_dim,
        embed_dim=args.embed_dim, max_len=args.max_seq_len, ffn_dim=args.ffn_dim,
        dropout=args.dropout, cond_dropout_p=args.cond_dropout,
    )
    schedule = make_linear_schedule(args.timesteps)
    model = build_model(config, codec.vocab, schedule, seed=args.seed)
    pairs = encode_pairs(records, codec, config.max_len)
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        warmup_steps=args.warmup, cond_dropout_p=args.cond_dropout,
        is_history=args.is_history, seed=args.seed, max_steps=args.max_steps,
        checkpoint_every=args.checkpoint_every,
    )
    out = _resolve(args.out)
    history = fit(model, pairs, cfg, out_dir=out, verbose=not args.quiet)
    last = history[-1]
    print(
        f"trained {last.step} steps; final loss_simple={last.loss_simple:.4f} "
        f"loss_anchor={last.loss_anchor:.4f}; checkpoint at {out / 'checkpoint'}"
    )
    return 0


def _load_model(checkpoint_arg):
    path = _resolve(checkpoint_arg)
    if path is None or not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return load_checkpoint(path).model


def _cmd_sample(args) -> int:
    model = _load_model(args.checkpoint)
    codec = TextCodec(WhitespaceTokenizer(), model.table.vocab)
    texts = list(args.text)
    if args.input_file:
        texts += [ln for ln in _resolve(args.input_file).read_text().splitlines() if ln.strip()]
    if not texts:
        raise ValueError("no inputs: pass --text or --input-file")
    try:
        conditions = [codec.encode(t) for t in texts]
    except KeyError as exc:
        raise ValueError(f"input token not in the checkpoint vocabulary: {exc}") from exc
    if args.length == "src":
        lengths = [min(len(c), model.config.max_len) for c in conditions]
    else:
        lengths = [int(args.length)] * len(conditions)
    guidance = GuidanceSpec(
        scale=args.cfg_scale,
        schedule=_SCHEDULE_FLAGS[args.cfg_schedule],
        order=_ORDER_FLAGS[args.order],
    )
    clamp_mode = "every_step" if guidance.uses_clamp else "final_only"
    clamp = ClampSpec(mode=clamp_mode, temperature=args.tau)
    sampler = SamplerSpec(
        kind=args.sampler, steps=args.steps, seed=args.seed, solver_order=args.solver_order
    )
    outputs, diag = sample_batch(model, conditions, lengths, sampler, guidance, clamp)
    lines = [codec.decode(ids) for ids in outputs]
    if args.out:
        _resolve(args.out).write_text("\n".join(lines) + "\n")
    else:
        for line in lines:
            print(line)
    if args.diagnostics_csv:
        with _resolve(args.diagnostics_csv).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "t", "mean_nn_distance"])
            for step in diag.steps:
                writer.writerow([step.step, step.t, step.mean_nn_distance])
    return 0


def _cmd_eval(args) -> int:
    records = read_generation_jsonl(_resolve(args.input))
    summary, per_condition = evaluate_testset(records, n_seeds=args.seeds)
    out_dir = _resolve(args.out_dir)
    write_eval_csvs(summary, per_condition, out_dir)
    print(
        f"bleu4={summary.bleu4_mean:.2f}±{summary.bleu4_std:.2f} "
        f"rouge_l={summary.rouge_l_mean:.2f}±{summary.rouge_l_std:.2f} "
        f"self_bleu={summary.self_bleu:.2f} "
        f"({summary.n_conditions} conditions × {summary.n_seeds} seeds)"
    )
    return 0


def _cmd_sweep(args) -> int:
    out = _resolve(args.out)
    if args.plots_only:
        results = out / "results.csv"
        if not results.exists():
            raise ValueError(f"no results.csv under {out}")
        plots_from_csv(results, out)
        write_pareto_reports(results, out)
        print(f"rebuilt plots and Pareto reports in {out}")
        return 0
    if not args.checkpoint or not args.data:
        raise ValueError("sweep needs --checkpoint and --data (or --plots-only)")
    model = _load_model(args.checkpoint)
    test_records = load_records(_resolve(args.data))
    codec = TextCodec(WhitespaceTokenizer(), model.table.vocab)
    grid = expand_grid(
        args.s_grid,
        args.tau_grid,
        [_SCHEDULE_FLAGS[s.strip()] for s in args.schedules.split(",")],
        [_ORDER_FLAGS[o.strip()] for o in args.orders.split(",")],
        args.steps_grid,
    )
    rows = run_sweep(
        model, test_records, codec, grid, args.seeds, out,
        length_mode=args.length_mode, max_conditions=args.max_conditions,
        batch_size=args.batch_size, sampler_kind=args.sampler,
        solver_order=args.solver_order, workers=args.workers, resume=args.resume,
    )
    print(f"wrote {len(rows)} rows to {out / 'results.csv'}")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        sub = None
        for action in parser._actions:
            if isinstance(action, argparse._SubParsersAction):
                sub = action.choices[args.command]
        args = _apply_config(args, sub, argv)
        return args.func(args)
    except SystemExit:
        raise
    except (ValueError, OSError, CheckpointError, TrainingDiverged) as exc:
        print(f"embdiff: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
