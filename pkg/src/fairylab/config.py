"""Run configuration: one YAML document plus ``--set dotted.key=value`` overrides."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))
        self.problems = problems


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CorpusSection(_Strict):
    n_styles: int = Field(4, ge=1)
    clips_per_style: int = Field(4, ge=1)
    frames: int = Field(8, ge=4, le=16)
    size: Literal[32, 64] = 32
    style_offset: int = Field(0, ge=0)


class BaseSection(_Strict):
    """Unset fields fall back to the per-kind defaults of the pretraining recipes."""

    kind: Literal["image", "clip"] = "image"
    n_styles: int | None = Field(None, ge=1)
    clips_per_style: int | None = Field(None, ge=1)
    steps: int | None = Field(None, ge=1)
    lr: float | None = Field(None, gt=0)
    batch_size: int | None = Field(None, ge=1)
    width: int | None = Field(None, ge=4)
    depth: int | None = Field(None, ge=1)
    T: int = Field(200, ge=2)
    rescale_betas: bool = True


class StyleSection(_Strict):
    style_id: int = 0
    style_seed: int = 0
    variant: Literal["lora", "dora", "propagation", "propagation-lora"] = "propagation"
    variants: list[Literal["lora", "dora", "propagation", "propagation-lora"]] = ["propagation", "lora", "dora"]
    rank: int = Field(4, ge=1)
    steps: int = Field(300, ge=1)
    lr: float = Field(1e-2, gt=0)
    dropout_p: float = Field(0.0, ge=0, lt=1)
    train_clips: int = Field(4, ge=1)
    samples: int = Field(16, ge=1)
    backgrounds: list[str] = ["meadow", "night", "forest", "beach", "room"]


class MotionSection(_Strict):
    style_id: int = 0
    style_seed: int = 0
    motions: list[Literal["idle-bob", "walk-cycle", "wave", "spin"]] = ["walk-cycle", "wave"]
    train_clips_per_motion: int = Field(2, ge=1)
    eval_clips_per_motion: int = Field(4, ge=1)
    rank: int = Field(8, ge=1)
    lr: float = Field(1e-2, gt=0)
    stage1_steps: int = Field(200, ge=1)
    stage2_steps: int = Field(300, ge=1)
    dropout_p: float = Field(0.1, ge=0, lt=1)
    mu: float | None = 4.0  # None = uniform sampler
    sigma: float = Field(1.0, gt=0)


class AblateSection(_Strict):
    mus: list[float] = [2.0, 4.0, 6.0]
    seeds: int = Field(8, ge=1)


class StorySection(_Strict):
    description: str = "a childlike whimsical character"
    n_shots: int = Field(3, ge=1)
    frames: int = Field(8, ge=2)
    planner: Literal["stub", "http"] = "stub"
    storyboard: str | None = None  # path to a planned storyboard.json
    parallel: bool = False
    close_up_factor: float = Field(1.4, gt=1)
    medium_factor: float = Field(2.0, gt=1)


class ReportSection(_Strict):
    runs: list[str] = []  # run directories; empty = every run under RUN_DIR
    out: str | None = None


class RunConfig(_Strict):
    seed: int = 0
    inputs: dict[str, str] = {}  # named upstream run dirs, e.g. image_base, clip_base, style, stage1
    corpus: CorpusSection = CorpusSection()
    base: BaseSection = BaseSection()
    style: StyleSection = StyleSection()
    motion: MotionSection = MotionSection()
    ablate: AblateSection = AblateSection()
    story: StorySection = StorySection()
    report: ReportSection = ReportSection()

    def digest(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:10]


def _parse_value(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    problems = []
    for item in overrides:
        if "=" not in item:
            problems.append(f"override {item!r} is not of the form key=value")
            continue
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                problems.append(f"override {key!r}: {p!r} is not a section")
                break
        else:
            node[parts[-1]] = _parse_value(value)
    if problems:
        raise ConfigError(problems)
    return doc


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Validate the merged document; every violation is reported at once."""
    doc: dict = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
        if not isinstance(doc, dict):
            raise ConfigError(["config file must hold a mapping"])
    doc = apply_overrides(doc, list(overrides or []))
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"])
            msg = "unknown key" if err["type"] == "extra_forbidden" else err["msg"]
            problems.append(f"{loc}: {msg}")
        raise ConfigError(problems) from exc
