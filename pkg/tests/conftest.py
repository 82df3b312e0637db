"""Shared fixtures.

Pretrained bases and the long ablation runs are session-scoped so unit tests
and the acceptance suite share them. Set ``FAIRYLAB_TEST_CACHE`` to a
directory to keep the two pretrained bases between pytest sessions; by
default everything is rebuilt from scratch.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import pytest
import torch

from fairylab.diffusion import Checkpoint, Denoiser, DenoiserSpec, NoiseSchedule

REPO = Path(__file__).resolve().parents[1]
ACCEPTANCE_OUT = Path(os.environ.get("FAIRYLAB_ACCEPTANCE_OUT", REPO / "artifacts" / "acceptance"))

_verdicts: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str):
    """Remember a criterion verdict for the terminal summary and echo it."""
    _verdicts[number] = (passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        passed, detail = _verdicts[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def _cached(kind: str, cfg, build) -> Checkpoint:
    root = os.environ.get("FAIRYLAB_TEST_CACHE")
    if not root:
        return build(cfg, None)
    key = hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()[:12]
    d = Path(root) / f"{kind}-{key}"
    if (d / "manifest.json").exists():
        return Checkpoint.load(d)
    return build(cfg, d)


@pytest.fixture(scope="session")
def image_base() -> Checkpoint:
    from fairylab.style import ImageBaseConfig, pretrain_image_base

    return _cached("image", ImageBaseConfig(), pretrain_image_base)


@pytest.fixture(scope="session")
def clip_base() -> Checkpoint:
    from fairylab.motion import ClipBaseConfig, pretrain_clip_base

    return _cached("clip", ClipBaseConfig(), pretrain_clip_base)


@pytest.fixture(scope="session")
def keyword_classifier():
    from fairylab.evalkit import train_keyword_classifier

    return train_keyword_classifier()


@pytest.fixture(scope="session")
def style_ablation(image_base, keyword_classifier):
    """Four styles x {none, propagation, lora, dora}; tables archived under ACCEPTANCE_OUT."""
    from fairylab.corpus import random_style
    from fairylab.style import StyleHarnessConfig, compare_adapter_variants

    cfg = StyleHarnessConfig()
    results = {}
    for style_id in range(4):
        rows, per_sample = compare_adapter_variants(
            random_style(style_id, 0), ["propagation", "lora", "dora"], cfg, image_base, keyword_classifier,
            out_dir=ACCEPTANCE_OUT / "style" / f"style_{style_id}")
        results[style_id] = {"rows": rows, "per_sample": per_sample}
    return results


@pytest.fixture(scope="session")
def motion_ablation(clip_base):
    """Eight seeds of stage 1, stage 2 per sampler and the direct baseline."""
    from fairylab.motion import MotionHarnessConfig, ablate_mu

    cfg = MotionHarnessConfig()
    seeds = list(range(8))
    out = ACCEPTANCE_OUT / "ablate_mu"
    rows, per_seed = ablate_mu(cfg.mus, clip_base, cfg, seeds, out_dir=out)
    manifest = {"command": "ablate mu", "seeds": seeds, "config": json.loads(json.dumps(asdict(cfg), default=str)),
                "artifacts": sorted(p.name for p in out.iterdir())}
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return {"rows": rows, "per_seed": per_seed, "seeds": seeds, "out": out}


# ---------------------------------------------------------------- tiny models for fast unit tests

TINY_T = 20


@pytest.fixture
def tiny_schedule() -> NoiseSchedule:
    return NoiseSchedule.rescaled(TINY_T)


def tiny_image_spec(**kw) -> DenoiserSpec:
    base = dict(kind="image", size=8, patch=2, width=8, depth=1, kernel=3)
    return DenoiserSpec(**{**base, **kw})


def tiny_clip_spec(**kw) -> DenoiserSpec:
    base = dict(kind="clip", size=8, frames=4, patch=2, width=8, depth=1, kernel=3)
    return DenoiserSpec(**{**base, **kw})


@pytest.fixture
def tiny_image_model(tiny_schedule) -> Denoiser:
    torch.manual_seed(0)
    return Denoiser(tiny_image_spec(), tiny_schedule)


@pytest.fixture
def tiny_clip_model(tiny_schedule) -> Denoiser:
    torch.manual_seed(0)
    return Denoiser(tiny_clip_spec(), tiny_schedule)


def randomize(model: torch.nn.Module, seed: int = 0, scale: float = 0.3):
    """Give every parameter (including the zero-initialised head) random values."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


def tiny_checkpoint(kind: str, seed: int = 0, T: int = 10) -> Checkpoint:
    """Untrained 32-pixel checkpoint with small random weights: fast to sample, not a real model."""
    schedule = NoiseSchedule.rescaled(T)
    spec = DenoiserSpec(kind=kind, size=32, frames=4, patch=4, width=8, depth=1, kernel=3)
    torch.manual_seed(seed)
    model = randomize(Denoiser(spec, schedule), seed, scale=0.05)
    return Checkpoint(spec, schedule, {k: v.detach().clone() for k, v in model.state_dict().items()})


@pytest.fixture
def tiny_assets():
    from fairylab.corpus import describe_style, random_style
    from fairylab.motion import MotionAdapterConfig, add_motion_adapters, make_identity_bank
    from fairylab.storyboard import CharacterAssets
    from fairylab.style import StyleAdapterConfig, make_style_bank

    image_base, clip_base = tiny_checkpoint("image", 1), tiny_checkpoint("clip", 2)
    style_bank = make_style_bank(image_base.build_model(), StyleAdapterConfig(rank=2))
    motion_bank = add_motion_adapters(make_identity_bank(clip_base.build_model(), MotionAdapterConfig(rank=2), 0.1),
                                      0.1)
    g = torch.Generator().manual_seed(3)
    for bank in (style_bank, motion_bank):
        for key, t in bank.named_tensors().items():
            if key.endswith("/A"):
                t.copy_(torch.randn(t.shape, generator=g) * 0.05)
    style = random_style(0, 0)
    return CharacterAssets(style, image_base, clip_base, style_bank, motion_bank, describe_style(style))
