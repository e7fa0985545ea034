"""Losses, loss-aware timestep sampling, and the optimization loop.

The training objective is the sum of a squared-error term on predicted
latents and an NLL ("anchor") term whose logits are negated distances from
predicted latents to the embedding rows; the anchor term keeps rows spread
apart. Timesteps are drawn from a loss-aware distribution with
inverse-probability reweighting, so the weighted loss stays an unbiased
estimate of the uniform-timestep loss.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import Seq2SeqDenoiser, pad_id_batch
from .embedder import EmbeddingTable


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; the message carries diagnostics."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-4
    warmup_steps: int = 2000
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    cond_dropout_p: float = 0.1
    is_history: int = 10  # per-timestep loss observations kept for sampling
    seed: int = 0
    max_steps: int | None = None
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if not 0.0 <= self.cond_dropout_p <= 1.0:
            raise ValueError("cond_dropout_p must be in [0, 1]")
        if self.is_history < 1:
            raise ValueError("is_history must be >= 1")


def loss_simple(y0: torch.Tensor, y0_hat: torch.Tensor, mask: torch.Tensor | None = None):
    """Mean squared error over non-padding positions and all latent dims."""
    if y0.shape != y0_hat.shape:
        raise ValueError(f"shape mismatch {tuple(y0.shape)} vs {tuple(y0_hat.shape)}")
    if mask is None:
        mask = torch.ones(y0.shape[:-1], dtype=torch.bool)
    if int(mask.sum()) == 0:
        raise ValueError("loss over an all-padding batch is undefined")
    sq = (y0_hat - y0).pow(2) * mask[..., None]
    return sq.sum() / (mask.sum() * y0.shape[-1])


def loss_anchor(
    y0_hat: torch.Tensor,
    tokens: torch.Tensor,
    table: EmbeddingTable,
    mask: torch.Tensor | None = None,
):
    """Mean NLL of the true tokens under softmax over negated distances.

    Averaged over non-padding positions; gradients flow into both the
    predicted latents and the embedding table.
    """
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tuple(tokens.shape) != tuple(y0_hat.shape[:-1]):
        raise ValueError(
            f"token shape {tuple(tokens.shape)} does not match latents {tuple(y0_hat.shape)}"
        )
    if mask is None:
        mask = torch.ones_like(tokens, dtype=torch.bool)
    if int(mask.sum()) == 0:
        raise ValueError("loss over an all-padding batch is undefined")
    logp = torch.log_softmax(table.distance_logits(y0_hat), dim=-1)
    nll = -logp.gather(-1, tokens.unsqueeze(-1)).squeeze(-1)
    return (nll * mask).sum() / mask.sum()


class ImportanceSampler:
    """Loss-aware timestep distribution with unbiasedness weights.

    Keeps the last ``k`` squared loss values per timestep. Sampling is
    uniform over [1, T] until every timestep has a full history ("warm");
    once warm, p(t) is proportional to the root of the mean stored squared
    loss at t, and each draw carries weight 1 / (T * p(t)).
    """

    def __init__(self, T: int, k: int = 10):
        if T < 1 or k < 1:
            raise ValueError("T and k must be positive")
        self.T = T
        self.k = k
        self._hist: list[deque] = [deque(maxlen=k) for _ in range(T)]
        self._n_full = 0
        self._cache: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def warm(self) -> bool:
        return self._n_full == self.T

    def record(self, t: int, squared_loss: float) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        d = self._hist[t - 1]
        was_full = len(d) == self.k
        d.append(float(squared_loss))
        if not was_full and len(d) == self.k:
            self._n_full += 1
        self._cache = None

    def probabilities(self) -> np.ndarray:
        """The distribution the next draw uses (uniform until warm)."""
        if not self.warm:
            return np.full(self.T, 1.0 / self.T)
        raw = np.array([math.sqrt(np.mean(d)) for d in self._hist])
        total = raw.sum()
        if total == 0:
            return np.full(self.T, 1.0 / self.T)
        p = raw / total
        if (p == 0).any():
            # keep every timestep reachable
            eps = 1e-12
            p = (p + eps) / (1.0 + self.T * eps)
        return p

    def weight_at(self, t: int) -> float:
        p = self.probabilities()
        return 1.0 / (self.T * p[t - 1])

    def _dist(self) -> tuple[np.ndarray, np.ndarray]:
        if self._cache is None:
            p = self.probabilities()
            self._cache = (p, np.cumsum(p))
        return self._cache

    def sample(self, rng: np.random.Generator) -> tuple[int, float]:
        """Draw (timestep, importance weight)."""
        if not self.warm:
            return int(rng.integers(1, self.T + 1)), 1.0
        p, cum = self._dist()
        idx = int(np.searchsorted(cum, rng.random(), side="right"))
        idx = min(idx, self.T - 1)
        return idx + 1, 1.0 / (self.T * p[idx])

    def to_state(self) -> dict:
        return {"T": self.T, "k": self.k, "history": [list(d) for d in self._hist]}

    @classmethod
    def from_state(cls, state: dict) -> "ImportanceSampler":
        s = cls(state["T"], state["k"])
        for t, values in enumerate(state["history"], start=1):
            for v in values:
                s.record(t, v)
        return s


def lr_at(step: int, peak: float, warmup: int, total_steps: int) -> float:
    """Linear warmup from 0 to ``peak`` then cosine decay to 0."""
    if warmup > 0 and step <= warmup:
        return peak * step / warmup
    if total_steps <= warmup:
        return peak
    progress = min(1.0, (step - warmup) / (total_steps - warmup))
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class StepReport:
    step: int
    t: int
    weight: float
    lr: float
    loss_simple: float
    loss_anchor: float

    @property
    def loss_total(self) -> float:
        # reported total is the unweighted sum; the weight only scales gradients
        return self.loss_simple + self.loss_anchor


@dataclass
class TrainState:
    cfg: TrainConfig
    optimizer: torch.optim.Optimizer
    sampler: ImportanceSampler
    total_steps: int
    step: int = 0
    noise_gen: torch.Generator = field(default=None)
    shuffle_rng: np.random.Generator = field(default=None)
    dropout_rng: np.random.Generator = field(default=None)
    is_rng: np.random.Generator = field(default=None)


def init_train_state(
    model: Seq2SeqDenoiser, cfg: TrainConfig, total_steps: int
) -> TrainState:
    opt = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.lr,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    gen = torch.Generator().manual_seed(int(seeds[0].generate_state(1, np.uint64)[0]))
    return TrainState(
        cfg=cfg,
        optimizer=opt,
        sampler=ImportanceSampler(model.schedule.T, cfg.is_history),
        total_steps=total_steps,
        noise_gen=gen,
        shuffle_rng=np.random.Generator(np.random.PCG64(seeds[1])),
        dropout_rng=np.random.Generator(np.random.PCG64(seeds[2])),
        is_rng=np.random.Generator(np.random.PCG64(seeds[3])),
    )


def train_step(
    model: Seq2SeqDenoiser,
    batch: tuple[list[list[int]], list[list[int]]],
    state: TrainState,
) -> StepReport:
    """One optimization step over a batch of (condition, target) id lists.

    Per sample, the condition is replaced by the single null token with
    probability ``cond_dropout_p``; one timestep is drawn for the batch;
    targets are embedded, corrupted in closed form, denoised, and the
    weighted loss is backpropagated through the model and the table. After
    the optimizer step every embedding row is renormalized and the sampler
    history is updated with the squared unweighted loss.
    """
    cfg = state.cfg
    mask_id = model.table.vocab.mask_id
    x_lists, y_lists = batch
    x_used = [
        [mask_id] if state.dropout_rng.random() < cfg.cond_dropout_p else list(x)
        for x in x_lists
    ]
    x_ids, x_mask = pad_id_batch(x_used, mask_id)
    y_ids, y_mask = pad_id_batch([list(y) for y in y_lists], mask_id)

    t, weight = state.sampler.sample(state.is_rng)
    y0 = model.table.embed(y_ids) * y_mask[..., None]
    noise = torch.randn(y0.shape, generator=state.noise_gen)
    y_t = model.schedule.q_sample(y0, t, noise)

    memory = model.encode_condition(x_ids, x_mask)
    y0_hat = model.predict_y0(y_t, t, memory, pad_mask=y_mask)
    ls = loss_simple(y0, y0_hat, y_mask)
    la = loss_anchor(y0_hat, y_ids, model.table, y_mask)
    total = weight * (ls + la)

    lr = lr_at(state.step + 1, cfg.lr, cfg.warmup_steps, state.total_steps)
    if not torch.isfinite(total):
        raise TrainingDiverged(
            f"non-finite loss at step {state.step + 1} (t={t}, lr={lr:.3e}, "
            f"loss_simple={float(ls)}, loss_anchor={float(la)})"
        )

    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    model.table.renormalize_()

    ls_f, la_f = float(ls.detach()), float(la.detach())
    state.sampler.record(t, (ls_f + la_f) ** 2)
    state.step += 1
    return StepReport(
        step=state.step, t=t, weight=weight, lr=lr, loss_simple=ls_f, loss_anchor=la_f
    )


def fit(
    model: Seq2SeqDenoiser,
    pairs: list[tuple[list[int], list[int]]],
    cfg: TrainConfig,
    out_dir=None,
    step_callback=None,
    verbose: bool = False,
) -> list[StepReport]:
    """Run the full training loop over encoded (condition, target) pairs.

    When ``out_dir`` is given, writes a metrics CSV
    (step,lr,loss_simple,loss_anchor,wall_time), periodic checkpoints with a
    modal-collapse statistic per checkpoint, and a final checkpoint.
    Deterministic given the config seed.
    """
    if not pairs:
        raise ValueError("empty training set")
    steps_per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    total_steps = cfg.max_steps or cfg.epochs * steps_per_epoch
    state = init_train_state(model, cfg, total_steps)

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = (out_dir / "metrics.csv").open("w")
        metrics_file.write("step,lr,loss_simple,loss_anchor,wall_time\n")

    history: list[StepReport] = []
    start = time.monotonic()
    model.train()
    try:
        done = False
        while not done:
            order = state.shuffle_rng.permutation(len(pairs))
            for lo in range(0, len(pairs), cfg.batch_size):
                if state.step >= total_steps:
                    done = True
                    break
                idx = order[lo : lo + cfg.batch_size]
                batch = ([pairs[i][0] for i in idx], [pairs[i][1] for i in idx])
                report = train_step(model, batch, state)
                history.append(report)
                if metrics_file is not None:
                    metrics_file.write(
                        f"{report.step},{report.lr},{report.loss_simple},"
                        f"{report.loss_anchor},{time.monotonic() - start}\n"
                    )
                if step_callback is not None:
                    step_callback(model, report)
                if verbose and report.step % 100 == 0:
                    print(
                        f"step {report.step}/{total_steps} "
                        f"loss {report.loss_total:.4f} lr {report.lr:.2e}"
                    )
                if (
                    out_dir is not None
                    and cfg.checkpoint_every
                    and report.step % cfg.checkpoint_every == 0
                ):
                    _save_checkpoint(model, cfg, state, out_dir, report.step)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    model.eval()
    if out_dir is not None:
        _save_checkpoint(model, cfg, state, out_dir, state.step, final=True)
    return history


def _save_checkpoint(model, cfg, state, out_dir: Path, step: int, final: bool = False):
    from .checkpoint import save_checkpoint  # avoid a module cycle

    name = "checkpoint" if final else f"checkpoint_step{step}"
    save_checkpoint(
        out_dir / name,
        model,
        train_config=cfg,
        train_state={
            "step": state.step,
            "optimizer": state.optimizer.state_dict(),
            "sampler": state.sampler.to_state(),
            "torch_rng": state.noise_gen.get_state(),
        },
    )
    freq = max_token_frequency(model, seed=cfg.seed)
    stats = out_dir / "sample_stats.csv"
    if not stats.exists():
        stats.write_text("step,max_token_freq\n")
    with stats.open("a") as fh:
        fh.write(f"{step},{freq}\n")


def max_token_frequency(
    model: Seq2SeqDenoiser, n_samples: int = 8, length: int = 8, seed: int = 0
) -> float:
    """Share of the most common token in a few unconditional samples.

    Values near 1.0 flag modal collapse (the model emitting one token
    everywhere); recorded at every checkpoint.
    """
    from .inference import SamplerSpec, sample_unconditional

    steps = min(5, model.schedule.T)
    counts: dict[int, int] = {}
    total = 0
    for i in range(n_samples):
        toks, _ = sample_unconditional(
            model, length, SamplerSpec(kind="fewstep", steps=steps, seed=seed + i)
        )
        for tok in toks.tolist():
            counts[tok] = counts.get(tok, 0) + 1
            total += 1
    return max(counts.values()) / total


@torch.no_grad()
def evaluate_loss(
    model: Seq2SeqDenoiser,
    pairs: list[tuple[list[int], list[int]]],
    t: int,
    batch_size: int = 64,
    seed: int = 0,
) -> float:
    """Held-out ``loss_simple`` at a fixed timestep (no condition dropout)."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    mask_id = model.table.vocab.mask_id
    total, weight_sum = 0.0, 0
    for lo in range(0, len(pairs), batch_size):
        chunk = pairs[lo : lo + batch_size]
        x_ids, x_mask = pad_id_batch([list(x) for x, _ in chunk], mask_id)
        y_ids, y_mask = pad_id_batch([list(y) for _, y in chunk], mask_id)
        y0 = model.table.embed(y_ids) * y_mask[..., None]
        noise = torch.randn(y0.shape, generator=gen)
        y_t = model.schedule.q_sample(y0, t, noise)
        memory = model.encode_condition(x_ids, x_mask)
        y0_hat = model.predict_y0(y_t, t, memory, pad_mask=y_mask)
        n = int(y_mask.sum())
        total += float(loss_simple(y0, y0_hat, y_mask)) * n
        weight_sum += n
    return total / weight_sum
