"""DDPM ancestral sampling with optional known-region inpainting."""

from __future__ import annotations

import torch

from ..adapters import AdapterContext
from .model import Denoiser
from .schedule import NoiseSchedule, forward_diffuse

_INPAINT_SALT = 0x5EED_1A7


@torch.no_grad()
def sample(model: Denoiser, cond: torch.Tensor, schedule: NoiseSchedule, generator: torch.Generator, *,
           first_frame: torch.Tensor | None = None, inpaint_ref: torch.Tensor | None = None,
           inpaint_mask: torch.Tensor | None = None, token_mask: torch.Tensor | None = None,
           phase: str = "infer", clip_denoised: bool = True, frames: int | None = None) -> torch.Tensor:
    """Draw ``len(cond)`` samples in [-1, 1].

    With ``inpaint_ref``/``inpaint_mask`` (mask 1 = known) the known region is
    overwritten after every step by the reference diffused to the next step's
    noise level, so it equals the reference exactly at the end. The known-region
    noise comes from a separate stream derived from ``generator``'s seed, which
    keeps the main stream identical to unconditional sampling.

    In clip mode frame 0 of the result is set to ``first_frame``; ``frames``
    may shorten the clip below the model's trained length.
    """
    spec = model.spec
    n = cond.shape[0]
    dtype = next(model.parameters()).dtype
    if spec.kind == "clip":
        if first_frame is None:
            raise ValueError("clip sampling needs a first frame")
        F = spec.frames if frames is None else frames
        if not 1 <= F <= spec.frames:
            raise ValueError(f"frames must lie in [1, {spec.frames}]")
        shape = (n, F, spec.channels, spec.size, spec.size)
    else:
        shape = (n, spec.channels, spec.size, spec.size)
    known = None
    if inpaint_ref is not None:
        if inpaint_mask is None or inpaint_ref.shape != shape:
            raise ValueError(f"inpaint reference must have shape {shape} and come with a mask")
        known = inpaint_mask.to(torch.bool)
        if known.shape != shape:
            known = known.reshape(n, *([1] * (len(shape) - known.ndim)), *known.shape[1:]).expand(shape)
        inpaint_ref = inpaint_ref.to(dtype)
        known_gen = torch.Generator().manual_seed(generator.initial_seed() ^ _INPAINT_SALT)

    model.eval()
    ctx = AdapterContext(token_mask=token_mask, phase=phase, training=False)
    ab = schedule.alpha_bars
    x = torch.randn(shape, generator=generator, dtype=dtype)
    for t in range(schedule.T, 0, -1):
        tt = torch.full((n,), t, dtype=torch.long)
        eps = model(x, tt, cond, first_frame, ctx)
        a_t, ab_t, ab_prev, b_t = schedule.alphas[t], ab[t], ab[t - 1], schedule.betas[t]
        if clip_denoised:
            x0 = ((x - (1 - ab_t).sqrt() * eps) / ab_t.sqrt()).clamp(-1, 1)
            mean = (b_t * ab_prev.sqrt() / (1 - ab_t)) * x0 + ((1 - ab_prev) * a_t.sqrt() / (1 - ab_t)) * x
        else:
            mean = (x - b_t / (1 - ab_t).sqrt() * eps) / a_t.sqrt()
        if t > 1:
            var = b_t * (1 - ab_prev) / (1 - ab_t)
            x = mean + var.sqrt() * torch.randn(shape, generator=generator, dtype=dtype)
        else:
            x = mean
        x = x.to(dtype)
        if known is not None:
            noise = torch.randn(shape, generator=known_gen, dtype=dtype)
            x = torch.where(known, forward_diffuse(inpaint_ref, t - 1, noise, schedule, allow_zero=True), x)
    x = x.clamp(-1, 1)
    if spec.kind == "clip":
        x[:, 0] = first_frame
    return x
