"""Two-stage identity/motion adapters for the clip model, plus the timestep-shift
ablation.

Stage 1 trains identity factors ``A_id, B_id`` on frame-shuffled clips so no
temporal order can be learned. Stage 2 freezes them and trains a residual
``B_motion`` that reuses ``A_id`` by reference, on ordered clips, with
training timesteps drawn from a (possibly shifted) sampler.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .adapters import AdapterBank, AdapterError, LowRankAdapter
from .archive import checksum
from .corpus import CorpusConfig, SpriteClip, StyleSpec, build_clips, generate_motion_clip
from .diffusion import Checkpoint, Denoiser, DenoiserSpec, Example, FitConfig, NoiseSchedule, Vocabulary, fit, sample
from .evalkit import motion_smoothness, subject_consistency, write_metrics_csv
from .frames import image_to_tensor, quantize, tensor_to_image
from .timesteps import TimestepSampler, sample_timestep

log = logging.getLogger(__name__)

ABLATION_COLUMNS = ("mu_or_uniform", "recon_mse", "smoothness", "consistency", "seed")

__all__ = [
    "ClipBaseConfig", "MotionAdapterConfig", "TwoStagePlan", "TimestepSampler", "sample_timestep",
    "pretrain_clip_base", "train_stage1_identity", "train_stage2_motion", "train_direct", "animate_shot",
    "animate", "ablate_mu", "MotionHarnessConfig", "run_motion_seed",
]


@dataclass
class ClipBaseConfig:
    n_styles: int = 8
    clips_per_style: int = 8
    style_offset: int = 100
    size: int = 32
    frames: int = 8
    T: int = 200
    rescale_betas: bool = True  # stretch betas by 1000/T so sampling starts from near-pure noise
    width: int = 48
    depth: int = 4
    steps: int = 2000
    lr: float = 2e-3
    batch_size: int = 8
    seed: int = 0


@dataclass
class MotionAdapterConfig:
    rank: int = 8
    lr: float = 1e-2
    batch_size: int = 8
    include_sites: list[str] | None = None  # None = every token-wise site
    seed: int = 0


@dataclass
class StageConfig:
    steps: int = 200
    dropout_p: float = 0.1
    shuffle: bool = True


@dataclass
class TwoStagePlan:
    stage1: StageConfig = field(default_factory=lambda: StageConfig(200, 0.1, True))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(300, 0.1, False))
    sampler: TimestepSampler = field(default_factory=lambda: TimestepSampler.shifted(200, 4.0, 1.0))

    def __post_init__(self):
        if self.stage2.shuffle:
            raise ValueError("stage 2 trains on temporally ordered clips; shuffle must be false")
        if not self.stage1.shuffle:
            raise ValueError("stage 1 trains on shuffled frames; shuffle must be true")


def clip_prompt(motion_id: str) -> list[str]:
    return [motion_id, "character"]


def clip_examples(clips: Sequence[SpriteClip], vocab: Vocabulary | None = None) -> list[Example]:
    vocab = vocab or Vocabulary()
    out = []
    for clip in clips:
        if len(clip.frames) < 2:
            raise ValueError(f"clip {clip.clip_id} is shorter than 2 frames")
        x0 = torch.stack([image_to_tensor(f.image) for f in clip.frames])
        out.append(Example(x0, vocab.encode(clip_prompt(clip.motion_id))))
    return out


def pretrain_clip_base(cfg: ClipBaseConfig, checkpoint_dir=None) -> Checkpoint:
    clips = build_clips(cfg.n_styles, cfg.clips_per_style,
                        CorpusConfig(frames=cfg.frames, size=cfg.size, seed=cfg.seed), style_offset=cfg.style_offset)
    vocab = Vocabulary()
    schedule = NoiseSchedule.rescaled(cfg.T) if cfg.rescale_betas else NoiseSchedule(T=cfg.T)
    torch.manual_seed(cfg.seed)
    model = Denoiser(DenoiserSpec(kind="clip", size=cfg.size, frames=cfg.frames, width=cfg.width, depth=cfg.depth,
                                  vocab_size=len(vocab)), schedule)
    ckpt = fit(model, clip_examples(clips, vocab), TimestepSampler.uniform(cfg.T), "base", cfg.steps,
               FitConfig(lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed), schedule=schedule)
    ckpt.extra["base_config"] = asdict(cfg)
    if checkpoint_dir is not None:
        ckpt.save(checkpoint_dir)
    return ckpt


def make_identity_bank(model: Denoiser, cfg: MotionAdapterConfig, dropout_p: float) -> AdapterBank:
    sites = model.sites()
    chosen = cfg.include_sites if cfg.include_sites is not None else model.token_sites()
    gen = torch.Generator().manual_seed(cfg.seed + 31)
    bank = AdapterBank()
    for site_id in chosen:
        if site_id not in sites:
            raise AdapterError(f"unknown insertion site {site_id!r}")
        W = sites[site_id].weight.detach()
        bank.add(LowRankAdapter.create(site_id, W, min(cfg.rank, min(W.shape) - 1), dropout_p=dropout_p,
                                       generator=gen), "identity")
    return bank


def add_motion_adapters(bank: AdapterBank, dropout_p: float) -> AdapterBank:
    """Attach a zero-initialised ``B_motion`` next to every identity adapter, sharing its ``A``."""
    for site_id in list(bank.entries):
        ident = bank.get(site_id, "identity")
        W_shape = (ident.A.shape[0], ident.B.shape[1])
        motion = LowRankAdapter(site_id, ident.A, torch.zeros(ident.rank, W_shape[1], dtype=ident.B.dtype),
                                dropout_p=dropout_p)
        bank.add(motion, "motion")
    return bank


def shuffle_frames(example: Example, generator: torch.Generator) -> Example:
    """Fresh frame permutation; the conditioning frame is the new first frame."""
    perm = torch.randperm(example.x0.shape[0], generator=generator)
    x0 = example.x0[perm]
    return Example(x0, example.cond, first_frame=x0[0])


def train_stage1_identity(clips: Sequence[SpriteClip], base: Checkpoint, cfg: MotionAdapterConfig,
                          stage: StageConfig | None = None, checkpoint_dir=None) -> AdapterBank:
    stage = stage or TwoStagePlan().stage1
    if not clips:
        raise ValueError("stage 1 needs at least one clip")
    if not 0.0 <= stage.dropout_p < 1.0:
        raise ValueError("dropout_p must lie in [0, 1)")
    if not stage.shuffle:
        raise ValueError("stage 1 trains on shuffled frames; shuffle must be true")
    data = clip_examples(clips)
    model = base.build_model()
    bank = make_identity_bank(model, cfg, stage.dropout_p)
    fit(model, data, TimestepSampler.uniform(base.schedule.T), bank.keys(roles={"identity"}), stage.steps,
        FitConfig(lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed), schedule=base.schedule, bank=bank,
        transform=shuffle_frames, checkpoint_dir=checkpoint_dir)
    return bank


def train_stage2_motion(clips: Sequence[SpriteClip], stage1_bank: AdapterBank | None, base: Checkpoint,
                        sampler: TimestepSampler, cfg: MotionAdapterConfig, stage: StageConfig | None = None,
                        checkpoint_dir=None, losses: list | None = None) -> AdapterBank:
    """Train ``B_motion`` on ordered clips; identity factors are frozen.

    The stage-1 bank is copied (aliasing kept), so one stage-1 run can feed
    several stage-2 runs. Per-step losses are appended to ``losses`` if given.
    """
    stage = stage or TwoStagePlan().stage2
    if stage1_bank is None or "identity" not in stage1_bank.roles():
        raise ValueError("stage 2 needs a trained stage-1 identity bank")
    if stage.shuffle:
        raise ValueError("stage 2 trains on temporally ordered clips; shuffle must be false")
    if sampler.T != base.schedule.T:
        raise ValueError("sampler T does not match the base schedule")
    bank = stage1_bank.clone()
    if "motion" not in bank.roles():
        add_motion_adapters(bank, stage.dropout_p)
    frozen = {k: checksum(t) for k, t in bank.named_tensors().items() if "/identity/" in k}
    model = base.build_model()
    fit(model, clip_examples(clips), sampler, bank.keys(roles={"motion"}, factors={"B"}), stage.steps,
        FitConfig(lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed + 1), schedule=base.schedule, bank=bank,
        checkpoint_dir=checkpoint_dir, on_step=None if losses is None else (lambda _, loss: losses.append(loss)))
    after = {k: checksum(t) for k, t in bank.named_tensors().items() if "/identity/" in k}
    if after != frozen:
        raise RuntimeError("identity factors changed during stage 2")
    return bank


def train_direct(clips: Sequence[SpriteClip], base: Checkpoint, cfg: MotionAdapterConfig, steps: int,
                 dropout_p: float = 0.1, sampler: TimestepSampler | None = None) -> AdapterBank:
    """Single-stage baseline: one LoRA pair trained on ordered clips."""
    model = base.build_model()
    bank = make_identity_bank(model, cfg, dropout_p)
    fit(model, clip_examples(clips), sampler or TimestepSampler.uniform(base.schedule.T),
        bank.keys(roles={"identity"}), steps, FitConfig(lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed),
        schedule=base.schedule, bank=bank)
    return bank


def animate(first_frames: np.ndarray, keywords: Sequence[Sequence[str]], bank: AdapterBank | None,
            base: Checkpoint | Denoiser, seed: int, schedule: NoiseSchedule | None = None,
            frames: int | None = None) -> np.ndarray:
    """Batch image-to-video sampling; returns N x F x H x W x 3 on the 8-bit grid."""
    if isinstance(base, Checkpoint):
        model, schedule = base.build_model(), base.schedule
    else:
        model = base
        if schedule is None:
            raise ValueError("pass the schedule together with a bare model")
    spec = model.spec
    first_frames = np.asarray(first_frames)
    if first_frames.shape[1:3] != (spec.size, spec.size):
        raise ValueError(f"scene is {first_frames.shape[1]}x{first_frames.shape[2]}, "
                         f"clip model expects {spec.size}x{spec.size}")
    F = frames or spec.frames
    if not 2 <= F <= spec.frames:
        raise ValueError(f"frame count must be in [2, {spec.frames}]")
    vocab = Vocabulary()
    cond = vocab.encode_batch(keywords)
    first = torch.stack([image_to_tensor(quantize(f)) for f in first_frames])
    model.install(bank)
    out = sample(model, cond, schedule, torch.Generator().manual_seed(seed), first_frame=first, frames=F)
    model.install(None)
    return tensor_to_image(out)


def animate_shot(scene: np.ndarray, keywords: Sequence[str], bank: AdapterBank | None, base, F: int, seed: int,
                 schedule: NoiseSchedule | None = None) -> np.ndarray:
    return animate(np.asarray(scene)[None], [list(keywords)], bank, base, seed, schedule, F)[0]


# ---------------------------------------------------------------- ablation harness

@dataclass
class MotionHarnessConfig:
    """One character, a few training clips per motion, held-out clips for scoring."""

    style_id: int = 0
    style_seed: int = 0
    motions: tuple[str, ...] = ("walk-cycle", "wave")
    train_clips_per_motion: int = 2
    eval_clips_per_motion: int = 4
    adapter: MotionAdapterConfig = field(default_factory=MotionAdapterConfig)
    plan: TwoStagePlan = field(default_factory=TwoStagePlan)
    mus: tuple[float, ...] = (2.0, 4.0, 6.0)
    sigma: float = 1.0
    run_direct: bool = True


def harness_clips(style: StyleSpec, cfg: MotionHarnessConfig, size: int, frames: int, seed: int):
    train, held = [], []
    for k, motion in enumerate(cfg.motions):
        for j in range(cfg.train_clips_per_motion):
            train.append(generate_motion_clip(style, motion, frames, (size, size), seed * 7919 + k * 100 + j))
        for j in range(cfg.eval_clips_per_motion):
            held.append(generate_motion_clip(style, motion, frames, (size, size), 10_000 + seed * 7919 + k * 100 + j))
    return train, held


def score_bank(bank: AdapterBank | None, held: Sequence[SpriteClip], base: Checkpoint, seed: int) -> dict:
    first = np.stack([c.frames[0].image for c in held])
    gen = animate(first, [clip_prompt(c.motion_id) for c in held], bank, base, seed)
    truth = np.stack([quantize(c.images()) for c in held])
    recon = float(np.mean((gen - truth) ** 2))
    smooth = float(np.mean([motion_smoothness(g) for g in gen]))
    cons = []
    for g in gen:
        try:
            cons.append(subject_consistency(g))
        except ValueError:
            cons.append(0.0)  # a frame with no detectable subject counts as inconsistent
    return {"recon_mse": recon, "smoothness": smooth, "consistency": float(np.mean(cons))}


def run_motion_seed(seed: int, base: Checkpoint, cfg: MotionHarnessConfig) -> dict[str, dict]:
    """Stage 1 once, stage 2 per sampler, plus the direct baseline; all scored on held-out clips."""
    from .corpus import random_style

    style = random_style(cfg.style_id, cfg.style_seed)
    spec = base.spec
    train, held = harness_clips(style, cfg, spec.size, spec.frames, seed)
    acfg = MotionAdapterConfig(**{**asdict(cfg.adapter), "seed": seed})
    T = base.schedule.T
    results = {}
    stage1 = train_stage1_identity(train, base, acfg, cfg.plan.stage1)
    results["stage1"] = score_bank(stage1, held, base, seed)
    samplers = [TimestepSampler.uniform(T)] + [TimestepSampler.shifted(T, mu, cfg.sigma) for mu in cfg.mus]
    for s in samplers:
        losses: list[float] = []
        bank = train_stage2_motion(train, stage1, base, s, acfg, cfg.plan.stage2, losses=losses)
        results[s.label] = {**score_bank(bank, held, base, seed), "loss_history": losses}
        log.info("seed %d %s %s", seed, s.label, results[s.label])
    if cfg.run_direct:
        direct = train_direct(train, base, acfg, cfg.plan.stage1.steps + cfg.plan.stage2.steps,
                              cfg.plan.stage2.dropout_p)
        results["direct"] = score_bank(direct, held, base, seed)
        log.info("seed %d direct %s", seed, results["direct"])
        # step-matched baseline for the stage-1 bank on its own
        direct_s1 = train_direct(train, base, acfg, cfg.plan.stage1.steps, cfg.plan.stage1.dropout_p)
        results["direct_stage1"] = score_bank(direct_s1, held, base, seed)
    return results


def ablate_mu(values: Sequence[float], base: Checkpoint, cfg: MotionHarnessConfig, seeds: Sequence[int],
              out_dir=None, per_seed: dict[int, dict] | None = None):
    """One stage-2 run per mu plus the uniform baseline, averaged over seeds.

    Returns (rows, per_seed_results). ``per_seed`` may carry results that
    were already computed with the same config.
    """
    cfg = MotionHarnessConfig(**{**asdict(cfg), "mus": tuple(values), "plan": cfg.plan, "adapter": cfg.adapter})
    per_seed = dict(per_seed or {})
    for s in seeds:
        if s not in per_seed:
            per_seed[s] = run_motion_seed(s, base, cfg)
    labels = ["uniform"] + [TimestepSampler.shifted(base.schedule.T, mu, cfg.sigma).label for mu in values]
    rows = []
    for label in labels:
        vals = [per_seed[s][label] for s in seeds]
        rows.append({"mu_or_uniform": label,
                     **{k: float(np.mean([v[k] for v in vals])) for k in ("recon_mse", "smoothness", "consistency")},
                     "seed": seeds[0]})
    if out_dir is not None:
        out = Path(out_dir)
        write_metrics_csv(out / "ablation_mu.csv", rows, ABLATION_COLUMNS)
        detail = [{"mu_or_uniform": label, **per_seed[s][label], "seed": s} for s in seeds for label in labels]
        write_metrics_csv(out / "ablation_mu_seeds.csv", detail, ABLATION_COLUMNS)
        plot_mu_curve(rows, out / "ablation_mu.png")
        curves = {label: np.mean([per_seed[s][label]["loss_history"] for s in seeds], axis=0).round(6).tolist()
                  for label in labels if all("loss_history" in per_seed[s][label] for s in seeds)}
        (out / "ablation_mu_losses.json").write_text(json.dumps(curves, sort_keys=True) + "\n")
    return rows, per_seed


def plot_mu_curve(rows: Sequence[dict], path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    labels = [r["mu_or_uniform"] for r in rows]
    ax.bar(range(len(rows)), [r["recon_mse"] for r in rows], color=["gray"] + ["tab:blue"] * (len(rows) - 1))
    ax.set_xticks(range(len(rows)), labels)
    ax.set_ylabel("held-out recon MSE")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
