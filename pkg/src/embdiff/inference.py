"""Guided sampling: solver loops, guidance schedules, clamping, length control.

Classifier-free guidance extrapolates from the unconditional prediction
toward the conditional one by a (possibly timestep-dependent) scale; the
clamping stages project predictions onto token embeddings either at every
solver step or only when tokens are finally emitted. The ancestral sampler
at ``steps == T`` is the reference chain; the few-step solver covers the
practical 5/20-step regime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .denoiser import EncoderMemory, Seq2SeqDenoiser, pad_id_batch
from .embedder import ClampSpec

GUIDANCE_ORDERS = ("none", "cfg_only", "clamp_only", "cfg_before_clamp", "clamp_before_cfg")
GUIDANCE_SCHEDULES = ("constant", "linear", "linear_interp", "std_dev", "std_dev_scaled")
SAMPLER_KINDS = ("ancestral", "fewstep")

_CFG_ORDERS = frozenset({"cfg_only", "cfg_before_clamp", "clamp_before_cfg"})
_CLAMP_ORDERS = frozenset({"clamp_only", "cfg_before_clamp", "clamp_before_cfg"})


@dataclass(frozen=True)
class GuidanceSpec:
    """Guidance scale, its per-timestep schedule, and the clamp/cfg order.

    ``order="none"`` is baseline sampling. ``constant`` with scale 1 and
    ``order="cfg_only"`` is bit-identical to the baseline path.
    """

    scale: float = 1.0
    schedule: str = "constant"
    order: str = "none"

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.scale}")
        if self.schedule not in GUIDANCE_SCHEDULES:
            raise ValueError(
                f"unknown guidance schedule {self.schedule!r}; options: {GUIDANCE_SCHEDULES}"
            )
        if self.order not in GUIDANCE_ORDERS:
            raise ValueError(f"unknown order {self.order!r}; options: {GUIDANCE_ORDERS}")

    @property
    def uses_cfg(self) -> bool:
        return self.order in _CFG_ORDERS

    @property
    def uses_clamp(self) -> bool:
        return self.order in _CLAMP_ORDERS


@dataclass(frozen=True)
class SamplerSpec:
    """Solver choice: reference ancestral chain or the few-step solver.

    ``solver_order=2`` switches the few-step solver to a second-order
    multistep update (the last step to t=0 stays first-order for
    stability).
    """

    kind: str = "fewstep"
    steps: int = 20
    seed: int = 0
    solver_order: int = 1

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}; options: {SAMPLER_KINDS}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.solver_order not in (1, 2):
            raise ValueError(f"solver_order must be 1 or 2, got {self.solver_order}")


@dataclass
class StepDiag:
    step: int
    t: int
    mean_nn_distance: float


@dataclass
class SampleDiagnostics:
    """Per-step mean nearest-token distance plus the model-evaluation count."""

    steps: list[StepDiag] = field(default_factory=list)
    model_evals: int = 0


def cfg_combine(y0_uncond: torch.Tensor, y0_cond: torch.Tensor, s_t: float) -> torch.Tensor:
    """Guided prediction ``u + s_t * (c - u)``.

    ``s_t == 1`` returns the conditional tensor and ``s_t == 0`` the
    unconditional one exactly (no floating-point round trip), which keeps
    the scale-1 path bit-identical to unguided sampling.
    """
    if y0_uncond.shape != y0_cond.shape:
        raise ValueError(
            f"shape mismatch {tuple(y0_uncond.shape)} vs {tuple(y0_cond.shape)}"
        )
    if s_t == 1.0:
        return y0_cond
    if s_t == 0.0:
        return y0_uncond
    return y0_uncond + s_t * (y0_cond - y0_uncond)


def guidance_scale_at(spec: GuidanceSpec, t: int, schedule) -> float:
    """Effective guidance scale at timestep ``t`` (t=0 is the clean endpoint)."""
    if not 0 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T}]")
    kind = spec.schedule
    if kind == "constant":
        return spec.scale
    if kind == "linear":
        return (t / schedule.T) * spec.scale
    if kind == "linear_interp":
        return 1.0 + (t / schedule.T) * (spec.scale - 1.0)
    if kind == "std_dev":
        return math.sqrt(1.0 - schedule.alpha_bar_at(t))
    if kind == "std_dev_scaled":
        return spec.scale * math.sqrt(1.0 - schedule.alpha_bar_at(t))
    raise ValueError(f"unknown guidance schedule {kind!r}")


def _derive_generators(seed: int, count: int, first_index: int = 0) -> list[torch.Generator]:
    # one independent stream per sample so results do not depend on batching
    gens = []
    for i in range(count):
        state = np.random.SeedSequence([int(seed), first_index + i]).generate_state(
            1, np.uint64
        )[0]
        gens.append(torch.Generator().manual_seed(int(state)))
    return gens


def _clamp_batch(table, latents, mask, temperature, generators):
    """Stochastically clamp the valid rows of a padded batch in place-order.

    Each sample consumes only its own generator, so the RNG stream is
    independent of how samples are batched together.
    """
    if temperature == 0:
        _, emb = table.hard_clamp(latents)
        return torch.where(mask[..., None], emb, latents)
    out = latents.clone()
    for i in range(latents.shape[0]):
        rows = latents[i, mask[i]]
        if rows.shape[0] == 0:
            continue
        _, emb = table.stochastic_clamp(rows, temperature, generators[i])
        out[i, mask[i]] = emb
    return out


def _mean_nn_distance(table, latents, mask) -> float:
    logits = table.distance_logits(latents)
    min_dist = -logits.max(dim=-1).values
    return float((min_dist * mask).sum() / mask.sum())


def guided_prediction(
    model: Seq2SeqDenoiser,
    y_t: torch.Tensor,
    t: int,
    memory_cond: EncoderMemory,
    memory_null: EncoderMemory | None,
    guidance: GuidanceSpec,
    clamp: ClampSpec,
    clamp_generators: list[torch.Generator] | None = None,
    pad_mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor, int]:
    """One composed model evaluation at timestep ``t``.

    Applies the clamp/guidance composition selected by ``guidance.order``;
    in-loop clamping only activates when ``clamp.mode == "every_step"``.
    Returns ``(prediction, diagnostic_latents, n_model_evals)`` where the
    diagnostic latents are the value after the guidance stage but before
    any trailing clamp (the quantity whose nearest-token distance the
    sampler records).
    """
    if pad_mask is None:
        pad_mask = torch.ones(y_t.shape[:-1], dtype=torch.bool)
    cond = model.predict_y0(y_t, t, memory_cond, pad_mask=pad_mask)
    n_evals = 1
    order = guidance.order
    if guidance.uses_cfg:
        if memory_null is None:
            raise ValueError(f"order {order!r} needs the null-condition memory")
        uncond = model.predict_y0(y_t, t, memory_null, pad_mask=pad_mask)
        n_evals = 2
        s_t = guidance_scale_at(guidance, t, model.schedule)

    in_loop = clamp.mode == "every_step"

    def clamp_stage(x):
        return _clamp_batch(model.table, x, pad_mask, clamp.temperature, clamp_generators)

    if order == "none":
        return cond, cond, n_evals
    if order == "cfg_only":
        pred = cfg_combine(uncond, cond, s_t)
        return pred, pred, n_evals
    if order == "clamp_only":
        return (clamp_stage(cond) if in_loop else cond), cond, n_evals
    if order == "cfg_before_clamp":
        guided = cfg_combine(uncond, cond, s_t)
        return (clamp_stage(guided) if in_loop else guided), guided, n_evals
    if order == "clamp_before_cfg":
        if in_loop:
            # fixed consumption order: unconditional first, then conditional
            pred = cfg_combine(clamp_stage(uncond), clamp_stage(cond), s_t)
        else:
            pred = cfg_combine(uncond, cond, s_t)
        return pred, pred, n_evals
    raise ValueError(f"unknown order {order!r}")


def respaced_timesteps(T: int, steps: int) -> list[int]:
    """``steps + 1`` uniformly spaced timesteps from T down to 0."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    ts = [int(round(v)) for v in np.linspace(T, 0, steps + 1)]
    if any(a <= b for a, b in zip(ts, ts[1:])):
        raise ValueError(f"degenerate timestep spacing for T={T}, steps={steps}")
    return ts


@torch.no_grad()
def sample_batch(
    model: Seq2SeqDenoiser,
    conditions: list[list[int]],
    out_lengths: list[int],
    sampler: SamplerSpec,
    guidance: GuidanceSpec | None = None,
    clamp: ClampSpec | None = None,
    seed: int | None = None,
    first_index: int = 0,
) -> tuple[list[list[int]], SampleDiagnostics]:
    """Generate one token sequence per condition at the requested lengths.

    Initial latents are unit Gaussian per sample; the encoder memory (and
    the null memory when guidance needs it) is computed once and reused at
    every step. The final clamp always runs: stochastic at the clamp spec's
    temperature, deterministic nearest-token when the temperature is 0.
    Deterministic given (weights, seed, batching); sample ``i`` owns the RNG
    stream derived from (seed, first_index + i), so noise does not depend on
    how a workload is split into batches (latents may still differ at float
    rounding level when batch padding differs).
    """
    guidance = guidance or GuidanceSpec()
    clamp = clamp or ClampSpec()
    if len(conditions) != len(out_lengths):
        raise ValueError("conditions and out_lengths must align")
    cfg_max = model.config.max_len
    for length in out_lengths:
        if not 1 <= length <= cfg_max:
            raise ValueError(f"output length {length} outside [1, {cfg_max}]")
    schedule = model.schedule
    ts = respaced_timesteps(schedule.T, sampler.steps)

    model.eval()
    mask_id = model.table.vocab.mask_id
    B = len(conditions)
    dim = model.config.embed_dim
    seed = sampler.seed if seed is None else seed
    noise_gens = _derive_generators(seed, B, first_index)
    clamp_gens = (
        noise_gens
        if clamp.rng_seed is None
        else _derive_generators(clamp.rng_seed, B, first_index)
    )

    x_ids, x_mask = pad_id_batch([list(c) for c in conditions], mask_id)
    memory_cond = model.encode_condition(x_ids, x_mask)
    memory_null = None
    if guidance.uses_cfg:
        if all(len(c) == 1 and c[0] == mask_id for c in conditions):
            memory_null = memory_cond  # conditions already are the null condition
        else:
            null_ids, null_mask = pad_id_batch([[mask_id]] * B, mask_id)
            memory_null = model.encode_condition(null_ids, null_mask)

    n = max(out_lengths)
    y = torch.zeros(B, n, dim)
    pad_mask = torch.zeros(B, n, dtype=torch.bool)
    for i, length in enumerate(out_lengths):
        y[i, :length] = torch.randn(length, dim, generator=noise_gens[i])
        pad_mask[i, :length] = True

    diag = SampleDiagnostics()
    prev_pred: torch.Tensor | None = None
    prev_lam: float | None = None

    for i in range(sampler.steps):
        t_cur, t_nxt = ts[i], ts[i + 1]
        pred, diag_latents, n_evals = guided_prediction(
            model, y, t_cur, memory_cond, memory_null, guidance, clamp,
            clamp_generators=clamp_gens, pad_mask=pad_mask,
        )
        diag.model_evals += n_evals
        diag.steps.append(
            StepDiag(step=i, t=t_cur, mean_nn_distance=_mean_nn_distance(model.table, diag_latents, pad_mask))
        )

        ab_cur = schedule.alpha_bar_at(t_cur)
        ab_nxt = schedule.alpha_bar_at(t_nxt)
        if sampler.kind == "ancestral":
            beta_eff = 1.0 - ab_cur / ab_nxt
            coef_pred = math.sqrt(ab_nxt) * beta_eff / (1.0 - ab_cur)
            coef_y = math.sqrt(ab_cur / ab_nxt) * (1.0 - ab_nxt) / (1.0 - ab_cur)
            y = coef_pred * pred + coef_y * y
            if t_nxt > 0:
                noise = torch.zeros_like(y)
                for b, length in enumerate(out_lengths):
                    noise[b, :length] = torch.randn(length, dim, generator=noise_gens[b])
                y = y + math.sqrt(beta_eff) * noise
        else:
            if t_nxt == 0:
                y = pred
            elif sampler.solver_order == 2:
                a_c, s_c = math.sqrt(ab_cur), math.sqrt(1.0 - ab_cur)
                a_n, s_n = math.sqrt(ab_nxt), math.sqrt(1.0 - ab_nxt)
                lam_c = math.log(a_c / s_c)
                lam_n = math.log(a_n / s_n)
                h = lam_n - lam_c
                if prev_pred is not None:
                    r = (lam_c - prev_lam) / h
                    data = (1.0 + 1.0 / (2.0 * r)) * pred - (1.0 / (2.0 * r)) * prev_pred
                else:
                    data = pred
                y = (s_n / s_c) * y - a_n * math.expm1(-h) * data
                prev_pred, prev_lam = pred, lam_c
            else:
                y = math.sqrt(ab_nxt) * pred + math.sqrt(
                    (1.0 - ab_nxt) / (1.0 - ab_cur)
                ) * (y - math.sqrt(ab_cur) * pred)

    final_tau = clamp.temperature if clamp.mode != "none" else 0.0
    outputs: list[list[int]] = []
    for i, length in enumerate(out_lengths):
        ids, _ = model.table.stochastic_clamp(y[i, :length], final_tau, clamp_gens[i])
        outputs.append(ids.tolist())
    return outputs, diag


def sample(
    model: Seq2SeqDenoiser,
    x_tokens: list[int],
    out_length: int,
    sampler: SamplerSpec,
    guidance: GuidanceSpec | None = None,
    clamp: ClampSpec | None = None,
    seed: int | None = None,
) -> tuple[torch.Tensor, SampleDiagnostics]:
    """Single-condition convenience wrapper around :func:`sample_batch`."""
    outs, diag = sample_batch(
        model, [list(x_tokens)], [out_length], sampler, guidance, clamp, seed=seed
    )
    return torch.as_tensor(outs[0], dtype=torch.long), diag


def sample_unconditional(
    model: Seq2SeqDenoiser,
    out_length: int,
    sampler: SamplerSpec,
    seed: int | None = None,
) -> tuple[torch.Tensor, SampleDiagnostics]:
    """Free generation: the null condition with guidance scale 0."""
    mask_id = model.table.vocab.mask_id
    guidance = GuidanceSpec(scale=0.0, schedule="constant", order="cfg_only")
    return sample(model, [mask_id], out_length, sampler, guidance, seed=seed)
