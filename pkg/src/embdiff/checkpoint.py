"""Checkpoint persistence: manifest, weights, embedding table, vocabulary.

A checkpoint is a directory holding a JSON manifest (configs, schedule
parameters, format version, component checksums) next to the component
files. Loading reconstructs a model whose outputs are bit-identical to the
saved one given the same seed; corrupted or missing components fail the
checksum gate and unsupported manifest versions raise an explicit
incompatibility error.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .denoiser import DenoiserConfig, Seq2SeqDenoiser
from .embedder import EmbeddingTable, Vocabulary
from .schedule import NoiseSchedule
from .training import TrainConfig

FORMAT_VERSION = 1

DENOISER_FILE = "denoiser.pt"
EMBEDDINGS_FILE = "embeddings.pt"
VOCAB_FILE = "vocab.txt"
TRAIN_STATE_FILE = "train_state.pt"
MANIFEST_FILE = "manifest.json"


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    """Manifest written by an unsupported format version."""


class CheckpointIntegrityError(CheckpointError):
    """Missing component or checksum mismatch."""


@dataclass
class LoadedCheckpoint:
    model: Seq2SeqDenoiser
    manifest: dict
    train_config: TrainConfig | None = None
    train_state: dict | None = None


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(
    directory,
    model: Seq2SeqDenoiser,
    train_config: TrainConfig | None = None,
    train_state: dict | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    model.table.assert_rows_distinct()

    core_state = {
        k: v for k, v in model.state_dict().items() if not k.startswith("table.")
    }
    torch.save(core_state, directory / DENOISER_FILE)
    torch.save(model.table.weight.detach().clone(), directory / EMBEDDINGS_FILE)
    model.table.vocab.save(directory / VOCAB_FILE)
    files = [DENOISER_FILE, EMBEDDINGS_FILE, VOCAB_FILE]
    if train_state is not None:
        torch.save(train_state, directory / TRAIN_STATE_FILE)
        files.append(TRAIN_STATE_FILE)

    schedule = model.schedule
    manifest = {
        "format_version": FORMAT_VERSION,
        "torch_version": torch.__version__,
        "schedule": {
            "kind": "linear",
            "T": schedule.T,
            "beta_start": float(schedule.beta[0]),
            "beta_end": float(schedule.beta[-1]),
        },
        "denoiser_config": dataclasses.asdict(model.config),
        "train_config": dataclasses.asdict(train_config) if train_config else None,
        "vocab_size": model.table.vocab_size,
        "components": {name: _sha256(directory / name) for name in files},
    }
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2))
    return directory


def load_checkpoint(directory) -> LoadedCheckpoint:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE
    if not manifest_path.exists():
        raise CheckpointIntegrityError(f"missing {MANIFEST_FILE} in {directory}")
    manifest = json.loads(manifest_path.read_text())

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {version} unsupported (expected {FORMAT_VERSION})"
        )
    for name, digest in manifest["components"].items():
        path = directory / name
        if not path.exists():
            raise CheckpointIntegrityError(f"missing component {name}")
        actual = _sha256(path)
        if actual != digest:
            raise CheckpointIntegrityError(
                f"checksum mismatch for {name}: expected {digest}, got {actual}"
            )

    sched_info = manifest["schedule"]
    beta = np.linspace(
        sched_info["beta_start"], sched_info["beta_end"], sched_info["T"], dtype=np.float64
    )
    alpha = 1.0 - beta
    schedule = NoiseSchedule(
        T=sched_info["T"], beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha)
    )

    config = DenoiserConfig(**manifest["denoiser_config"])
    vocab = Vocabulary.load(directory / VOCAB_FILE)
    table = EmbeddingTable(vocab, config.embed_dim)
    with torch.no_grad():
        table.weight.copy_(torch.load(directory / EMBEDDINGS_FILE, weights_only=True))
    model = Seq2SeqDenoiser(config, table, schedule)
    core_state = torch.load(directory / DENOISER_FILE, weights_only=True)
    missing, unexpected = model.load_state_dict(core_state, strict=False)
    unexpected = [k for k in unexpected if not k.startswith("table.")]
    missing = [k for k in missing if not k.startswith("table.")]
    if missing or unexpected:
        raise CheckpointIntegrityError(
            f"state dict mismatch (missing={missing}, unexpected={unexpected})"
        )
    model.eval()

    train_config = None
    if manifest.get("train_config"):
        raw = dict(manifest["train_config"])
        raw["betas"] = tuple(raw["betas"])
        train_config = TrainConfig(**raw)
    train_state = None
    if TRAIN_STATE_FILE in manifest["components"]:
        train_state = torch.load(directory / TRAIN_STATE_FILE, weights_only=True)
    return LoadedCheckpoint(
        model=model, manifest=manifest, train_config=train_config, train_state=train_state
    )
