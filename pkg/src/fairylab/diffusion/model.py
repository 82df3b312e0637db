"""Small patch-token denoiser for images and short clips.

Images are cut into ``patch x patch`` tokens. Each block mixes tokens
spatially with a depthwise convolution over the token grid, temporally (clip
mode) with a depthwise convolution over frames followed by a token-wise
linear, then applies a timestep/condition-modulated token MLP. Every linear
layer is an ``AdaptedLinear`` with a stable site id; ``token_wise`` sites act
on the token axis and accept token-masked adapters.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..adapters import AdaptedLinear, AdapterBank, AdapterContext, AdapterError
from ..corpus import BACKGROUNDS, MOTIONS, TEXTURES
from .schedule import NoiseSchedule


def default_vocabulary() -> list[str]:
    words = ["<pad>", "character", "childlike", "whimsical", "style", "thin", "medium", "bold",
             "red", "orange", "yellow", "green", "teal", "blue", "purple", "pink", "dark", "gray",
             *TEXTURES, *MOTIONS, *BACKGROUNDS]
    seen = []
    for w in words:
        if w not in seen:
            seen.append(w)
    return seen


class Vocabulary:
    """Closed word vocabulary; index 0 is padding."""

    def __init__(self, words: Sequence[str] | None = None, max_tokens: int = 10):
        self.words = list(words or default_vocabulary())
        self.index = {w: i for i, w in enumerate(self.words)}
        self.max_tokens = max_tokens

    def __len__(self):
        return len(self.words)

    def encode(self, words: Sequence[str]) -> torch.Tensor:
        unknown = [w for w in words if w not in self.index]
        if unknown:
            raise KeyError(f"words outside the vocabulary: {unknown}")
        ids = [self.index[w] for w in words][: self.max_tokens]
        return torch.tensor(ids + [0] * (self.max_tokens - len(ids)), dtype=torch.long)

    def encode_batch(self, phrases: Sequence[Sequence[str]]) -> torch.Tensor:
        return torch.stack([self.encode(p) for p in phrases])


@dataclass
class DenoiserSpec:
    kind: str = "image"  # image | clip
    channels: int = 3
    size: int = 64
    frames: int = 8
    patch: int = 4
    width: int = 48
    depth: int = 4
    mlp_ratio: int = 2
    kernel: int = 5
    vocab_size: int = len(default_vocabulary())
    data_std: float | None = 0.5  # None disables output preconditioning

    def __post_init__(self):
        if self.kind not in ("image", "clip"):
            raise ValueError(f"kind must be image or clip, got {self.kind!r}")
        if self.size % self.patch:
            raise ValueError("size must be divisible by patch")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.size // self.patch
        return (g, g)

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int, T: int = 1000) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    args = (t.to(torch.float64) * (1000.0 / T))[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Block(nn.Module):
    def __init__(self, i: int, spec: DenoiserSpec):
        super().__init__()
        w = spec.width
        self.spec = spec
        self.norm1 = nn.LayerNorm(w, elementwise_affine=False)
        self.spatial = nn.Conv2d(w, w, spec.kernel, padding=spec.kernel // 2, groups=w)
        if spec.kind == "clip":
            self.norm_t = nn.LayerNorm(w, elementwise_affine=False)
            self.temporal_conv = nn.Conv1d(w, w, 3, padding=1, groups=w)
            self.temporal = AdaptedLinear(w, w, f"blocks.{i}.temporal", token_wise=True)
        self.norm2 = nn.LayerNorm(w, elementwise_affine=False)
        self.mod = AdaptedLinear(w, 3 * w, f"blocks.{i}.mod", token_wise=False)
        self.mlp_in = AdaptedLinear(w, w * spec.mlp_ratio, f"blocks.{i}.mlp_in", token_wise=True)
        self.mlp_out = AdaptedLinear(w * spec.mlp_ratio, w, f"blocks.{i}.mlp_out", token_wise=True)

    def forward(self, h, emb, frames, ctx):
        N, L, C = h.shape
        gh, gw = self.spec.grid
        x = self.norm1(h).reshape(N * frames, gh, gw, C).permute(0, 3, 1, 2)
        h = h + self.spatial(x).permute(0, 2, 3, 1).reshape(N, L, C)
        if self.spec.kind == "clip":
            x = self.norm_t(h).reshape(N, frames, gh * gw, C).permute(0, 2, 3, 1).reshape(N * gh * gw, C, frames)
            x = self.temporal_conv(x).reshape(N, gh * gw, C, frames).permute(0, 3, 1, 2).reshape(N, L, C)
            h = h + self.temporal(x, ctx)
        shift, scale, gate = self.mod(emb, ctx).chunk(3, dim=-1)
        x = self.norm2(h) * (1 + scale[:, None]) + shift[:, None]
        return h + gate[:, None] * self.mlp_out(F.silu(self.mlp_in(x, ctx)), ctx)


class Denoiser(nn.Module):
    """Noise predictor ``eps_theta(x_t, c, t)``.

    Image mode takes ``x_t`` as (N, C, H, W). Clip mode takes (N, F, C, H, W)
    plus the clean first frame (N, C, H, W), concatenated channel-wise to
    every noisy frame.

    With ``spec.data_std`` set, the output is ``c_skip(t) x_t + c_out(t) F``:
    ``c_skip x_t`` is the best linear noise estimate for data of that standard
    deviation and ``c_out`` scales the network's residual to unit variance.
    Without it the network has to copy high-noise inputs through every layer,
    and any leak in that copy is amplified by ``sigma_t / sqrt(abar_t)`` in
    the sampler's clean-image estimate.
    """

    def __init__(self, spec: DenoiserSpec, schedule: NoiseSchedule):
        super().__init__()
        self.spec = spec
        self.T = schedule.T
        self.register_buffer("alpha_bars", schedule.alpha_bars.clone(), persistent=False)
        w, p, c = spec.width, spec.patch, spec.channels
        in_ch = 2 * c if spec.kind == "clip" else c
        gh, gw = spec.grid
        self.patch_embed = AdaptedLinear(in_ch * p * p, w, "patch_embed", token_wise=True)
        self.pos = nn.Parameter(torch.randn(gh * gw, w) * 0.02)
        if spec.kind == "clip":
            self.frame_pos = nn.Parameter(torch.randn(spec.frames, w) * 0.02)
        self.time_in = AdaptedLinear(w, w, "time_mlp.in", token_wise=False)
        self.time_out = AdaptedLinear(w, w, "time_mlp.out", token_wise=False)
        self.cond_embed = nn.Embedding(spec.vocab_size, w, padding_idx=0)
        self.cond_proj = AdaptedLinear(w, w, "cond_proj", token_wise=False)
        self.blocks = nn.ModuleList(Block(i, spec) for i in range(spec.depth))
        self.norm_out = nn.LayerNorm(w, elementwise_affine=False)
        self.final_mod = AdaptedLinear(w, 2 * w, "final.mod", token_wise=False)
        self.head = AdaptedLinear(w, c * p * p, "head", token_wise=True)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def sites(self) -> dict[str, AdaptedLinear]:
        out = {}
        for m in self.modules():
            if isinstance(m, AdaptedLinear):
                if m.site_id in out:
                    raise RuntimeError(f"duplicate site id {m.site_id}")
                out[m.site_id] = m
        return out

    def token_sites(self) -> list[str]:
        return [k for k, m in self.sites().items() if m.token_wise]

    def install(self, bank: AdapterBank | None):
        """Attach ``bank`` to every site (``None`` detaches)."""
        sites = self.sites()
        if bank is not None:
            for site_id, entries in bank.entries.items():
                if site_id not in sites:
                    raise AdapterError(f"unknown insertion site {site_id!r}")
                site = sites[site_id]
                for e in entries:
                    a = e.adapter
                    if a.A.shape[0] != site.out_features or a.B.shape[1] != site.in_features:
                        raise AdapterError(f"adapter shape does not fit site {site_id}")
                    if a.masked and not site.token_wise:
                        raise AdapterError(f"site {site_id} is not token-wise; masked adapters cannot be installed")
        for m in sites.values():
            m.bank = bank

    def _patchify(self, x):
        N, C, H, W = x.shape
        p = self.spec.patch
        x = x.reshape(N, C, H // p, p, W // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(N, (H // p) * (W // p), C * p * p)

    def _unpatchify(self, tokens, n):
        p, c = self.spec.patch, self.spec.channels
        gh, gw = self.spec.grid
        x = tokens.reshape(n, gh, gw, c, p, p).permute(0, 3, 1, 4, 2, 5)
        return x.reshape(n, c, gh * p, gw * p)

    def embed(self, t, cond_ids, ctx=None):
        dtype = self.pos.dtype
        te = timestep_embedding(t, self.spec.width, self.T).to(dtype)
        emb = self.time_out(F.silu(self.time_in(te, ctx)), ctx)
        mask = (cond_ids != 0).to(dtype)
        bag = (self.cond_embed(cond_ids) * mask[..., None]).sum(1) / mask.sum(1, keepdim=True).clamp_min(1.0)
        return emb + self.cond_proj(bag, ctx)

    def forward(self, x_t, t, cond_ids, first_frame=None, ctx: AdapterContext | None = None):
        spec = self.spec
        N = x_t.shape[0]
        if t.ndim == 0:
            t = t.expand(N)
        if spec.kind == "clip":
            if first_frame is None:
                raise ValueError("clip mode needs the first frame")
            frames = x_t.shape[1]
            cond = first_frame[:, None].expand(-1, frames, -1, -1, -1)
            x = torch.cat([x_t, cond], dim=2).flatten(0, 1)
        else:
            frames = 1
            x = x_t
        tokens = self._patchify(x)  # (N*F, hw, d)
        hw = tokens.shape[1]
        h = self.patch_embed(tokens.reshape(N, frames * hw, -1), ctx)
        pos = self.pos[None]
        if spec.kind == "clip":
            pos = (self.pos[None] + self.frame_pos[:frames, None]).reshape(1, frames * hw, -1)
        h = h + pos
        if ctx is not None and ctx.token_mask is not None and frames > 1 and ctx.token_mask.shape[-1] == hw:
            ctx = AdapterContext(ctx.token_mask.repeat(1, frames), ctx.phase, ctx.training, ctx.generator)
        emb = self.embed(t, cond_ids, ctx)
        for block in self.blocks:
            h = block(h, emb, frames, ctx)
        shift, scale = self.final_mod(emb, ctx).chunk(2, dim=-1)
        h = self.norm_out(h) * (1 + scale[:, None]) + shift[:, None]
        out = self.head(h, ctx).reshape(N * frames, hw, -1)
        out = self._unpatchify(out, N * frames)
        if spec.kind == "clip":
            out = out.reshape(N, frames, *out.shape[1:])
        if spec.data_std is not None:
            ab = self.alpha_bars[t.long()].to(out.dtype).reshape(-1, *([1] * (out.ndim - 1)))
            var_d = spec.data_std ** 2
            total = ab * var_d + (1 - ab)
            out = (1 - ab).sqrt() / total * x_t + (ab * var_d / total).sqrt() * out
        return out
