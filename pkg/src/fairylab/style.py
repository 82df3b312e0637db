"""Style propagation: learn a character's style from its foreground tokens
and paint it into an inpainted background.

The propagation adapter sees only foreground tokens while training and only
background tokens while generating. Backgrounds are inpainted by re-noising
the known character region inside the DDPM sampler, so the character is
returned untouched.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .adapters import AdapterBank, AdapterError, LowRankAdapter, downsample_mask
from .corpus import BACKGROUNDS, CorpusConfig, SpriteFrame, StyleSpec, build_clips, describe_style, \
    generate_motion_clip, MOTIONS, random_style, render_background
from .diffusion import (Checkpoint, Denoiser, DenoiserSpec, Example, FitConfig, NoiseSchedule, Vocabulary, fit,
                        sample)
from .evalkit import KeywordClassifier, style_align, text_align, write_metrics_csv
from .frames import grid, image_to_tensor, quantize, save_png, tensor_to_image
from .timesteps import TimestepSampler

log = logging.getLogger(__name__)

VARIANTS = {
    # name: (adapter variant, token-masked)
    "lora": ("lora", False),
    "dora": ("dora", False),
    "propagation": ("dora", True),
    "propagation-lora": ("lora", True),
}
METRIC_COLUMNS = ("variant", "style_align", "text_align", "seed")


@dataclass
class ImageBaseConfig:
    """Pre-training of the image base on a mixed procedural corpus."""

    n_styles: int = 8
    clips_per_style: int = 4
    style_offset: int = 100
    backgrounds_per_keyword: int = 24
    size: int = 64
    T: int = 200
    rescale_betas: bool = True  # stretch betas by 1000/T so sampling starts from near-pure noise
    width: int = 48
    depth: int = 4
    steps: int = 1500
    lr: float = 2e-3
    batch_size: int = 16
    seed: int = 0


@dataclass
class StyleAdapterConfig:
    variant: str = "propagation"
    rank: int = 4
    dropout_p: float = 0.0
    steps: int = 300
    lr: float = 1e-2
    batch_size: int = 8
    include_sites: list[str] | None = None  # None = every token-wise site
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown style variant {self.variant!r}; expected one of {sorted(VARIANTS)}")


def character_prompt(style: StyleSpec) -> list[str]:
    return describe_style(style) + ["character"]


def pretrain_image_base(cfg: ImageBaseConfig, checkpoint_dir=None) -> Checkpoint:
    vocab = Vocabulary()
    schedule = NoiseSchedule.rescaled(cfg.T) if cfg.rescale_betas else NoiseSchedule(T=cfg.T)
    clips = build_clips(cfg.n_styles, cfg.clips_per_style, CorpusConfig(frames=8, size=cfg.size, seed=cfg.seed),
                        style_offset=cfg.style_offset)
    data = []
    for clip in clips:
        cond = vocab.encode(character_prompt(clip.style))
        data += [Example(image_to_tensor(f.image), cond) for f in clip.frames]
    for k, kw in enumerate(BACKGROUNDS):
        cond = vocab.encode([kw])
        for i in range(cfg.backgrounds_per_keyword):
            bg = render_background(kw, (cfg.size, cfg.size), cfg.seed * 7919 + k * 1000 + i)
            data.append(Example(image_to_tensor(bg), cond))
    torch.manual_seed(cfg.seed)
    model = Denoiser(DenoiserSpec(kind="image", size=cfg.size, width=cfg.width, depth=cfg.depth,
                                  vocab_size=len(vocab)), schedule)
    ckpt = fit(model, data, TimestepSampler.uniform(cfg.T), "base", cfg.steps,
               FitConfig(lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed), schedule=schedule)
    ckpt.extra["base_config"] = asdict(cfg)
    if checkpoint_dir is not None:
        ckpt.save(checkpoint_dir)
    return ckpt


def make_style_bank(model: Denoiser, cfg: StyleAdapterConfig) -> AdapterBank:
    variant, masked = VARIANTS[cfg.variant]
    sites = model.sites()
    chosen = cfg.include_sites if cfg.include_sites is not None else model.token_sites()
    gen = torch.Generator().manual_seed(cfg.seed + 17)
    bank = AdapterBank()
    for site_id in chosen:
        if site_id not in sites:
            raise AdapterError(f"unknown insertion site {site_id!r}")
        if masked and not sites[site_id].token_wise:
            raise AdapterError(f"site {site_id} is not token-wise; propagation adapters cannot be installed")
        W = sites[site_id].weight
        rank = min(cfg.rank, min(W.shape) - 1)
        bank.add(LowRankAdapter.create(site_id, W.detach(), rank, variant=variant, dropout_p=cfg.dropout_p,
                                       masked=masked, generator=gen), "style")
    return bank


def train_style_adapter(frames: Sequence[SpriteFrame], base: Checkpoint, cfg: StyleAdapterConfig,
                        prompt: Sequence[str], checkpoint_dir=None) -> AdapterBank:
    """Fit style factors on character frames; base weights stay frozen."""
    if not frames:
        raise ValueError("no training frames")
    for i, f in enumerate(frames):
        if getattr(f, "mask", None) is None:
            raise ValueError(f"frame {i} has no foreground mask")
        if f.mask.sum() == 0:
            raise ValueError(f"frame {i} has an empty foreground mask")
    vocab = Vocabulary()
    cond = vocab.encode(list(prompt))
    model = base.build_model()
    bank = make_style_bank(model, cfg)
    data = [Example(image_to_tensor(f.image), cond, torch.from_numpy(f.mask.astype(np.float32))) for f in frames]
    fit(model, data, TimestepSampler.uniform(base.schedule.T), bank.keys(roles={"style"}), cfg.steps,
        FitConfig(lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed), schedule=base.schedule, bank=bank,
        checkpoint_dir=checkpoint_dir)
    return bank


def synthesize_scenes(frames: Sequence[SpriteFrame], backgrounds: Sequence[str], bank: AdapterBank | None,
                      base: Checkpoint | Denoiser, seed: int, prompt: Sequence[str] = (),
                      phase: str = "infer", schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Inpaint a background behind each character; returns N x H x W x 3 on the 8-bit grid."""
    if len(frames) != len(backgrounds):
        raise ValueError("one background keyword per frame")
    if isinstance(base, Checkpoint):
        model, schedule = base.build_model(), base.schedule
    else:
        model = base
        if schedule is None:
            raise ValueError("pass the schedule together with a bare model")
    size = model.spec.size
    for f in frames:
        if f.image.shape[:2] != (size, size) or f.mask.shape != f.image.shape[:2]:
            raise ValueError(f"frame/mask must be {size}x{size}")
    vocab = Vocabulary()
    cond = vocab.encode_batch([[kw, *prompt] for kw in backgrounds])
    ref = torch.stack([image_to_tensor(quantize(f.image)) for f in frames])
    masks = torch.stack([torch.from_numpy(f.mask.astype(np.float32)) for f in frames])
    token_mask = downsample_mask(masks, model.spec.grid).values
    model.install(bank)
    gen = torch.Generator().manual_seed(seed)
    out = sample(model, cond, schedule, gen, inpaint_ref=ref, inpaint_mask=masks[:, None].expand_as(ref),
                 token_mask=token_mask, phase=phase)
    model.install(None)
    return tensor_to_image(out)


def synthesize_scene(frame: SpriteFrame, background: str, bank: AdapterBank | None, base, seed: int,
                     prompt: Sequence[str] = (), phase: str = "infer", schedule=None) -> np.ndarray:
    return synthesize_scenes([frame], [background], bank, base, seed, prompt, phase, schedule)[0]


def background_style_score(scene: np.ndarray, scene_mask: np.ndarray, reference: SpriteFrame) -> float:
    """Style alignment of a scene's background with the reference character."""
    bg = 1 - np.asarray(scene_mask)
    if bg.sum() == 0:
        raise ValueError("scene has no background pixels")
    return style_align(scene, reference.image, bg, reference.mask)


@dataclass
class StyleHarnessConfig:
    adapter: StyleAdapterConfig = field(default_factory=StyleAdapterConfig)
    train_clips: int = 4
    samples: int = 16
    seed: int = 0


def style_frames(style: StyleSpec, n_clips: int, seed: int, size: int = 64) -> list[SpriteFrame]:
    frames = []
    for j in range(n_clips):
        clip = generate_motion_clip(style, MOTIONS[j % len(MOTIONS)], 8, (size, size), seed * 101 + j,
                                    clip_id=f"style{style.style_id}_{j}")
        frames += clip.frames
    return frames


def compare_adapter_variants(style: StyleSpec, variants: Sequence[str], cfg: StyleHarnessConfig, base: Checkpoint,
                             classifier: KeywordClassifier, out_dir=None, include_baseline: bool = True):
    """Train each variant with identical seeds and steps, then score generated scenes.

    Returns (rows, per_sample) where rows hold the mean metrics per variant and
    per_sample maps variant -> list of per-scene style scores.
    """
    size = base.spec.size
    train = style_frames(style, cfg.train_clips, cfg.seed, size)
    test = style_frames(style, (cfg.samples + 7) // 8, cfg.seed + 5000, size)[: cfg.samples]
    keywords = [BACKGROUNDS[i % len(BACKGROUNDS)] for i in range(len(test))]
    prompt = describe_style(style)
    reference = train[0]
    names = (["none"] if include_baseline else []) + list(variants)
    rows, per_sample, scenes = [], {}, {}
    for name in names:
        bank = None
        if name != "none":
            acfg = StyleAdapterConfig(**{**asdict(cfg.adapter), "variant": name})
            bank = train_style_adapter(train, base, acfg, prompt)
        imgs = synthesize_scenes(test, keywords, bank, base, cfg.seed, prompt)
        s_scores = [background_style_score(im, f.mask, reference) for im, f in zip(imgs, test)]
        t_scores = [text_align(im, [kw], classifier) for im, kw in zip(imgs, keywords)]
        per_sample[name] = s_scores
        scenes[name] = imgs
        rows.append({"variant": name, "style_align": float(np.mean(s_scores)),
                     "text_align": float(np.mean(t_scores)), "seed": cfg.seed})
        log.info("style %d variant %s style_align %.4f", style.style_id, name, rows[-1]["style_align"])
    if out_dir is not None:
        out = Path(out_dir)
        write_metrics_csv(out / "metrics.csv", rows, METRIC_COLUMNS)
        save_png(out / "grid.png", grid([[reference.image] + list(scenes[n][:8]) for n in names]))
    return rows, per_sample
