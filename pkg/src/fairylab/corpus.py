"""Procedural sprite characters, motion clips and an on-disk corpus.

Characters are stick/blob composites (torso, head, two arms, two legs) drawn
with PIL without anti-aliasing, so the foreground mask is exactly the set of
pixels touched by a drawing primitive. Everything outside the mask is pure
white.

Pose vector layout (``POSE_FIELDS``) and the accepted range of each entry is
given by ``POSE_RANGES``; ``render_character`` rejects anything outside.
"""

from __future__ import annotations

import colorsys
import json
import math
import shutil
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

MOTIONS = ("idle-bob", "walk-cycle", "wave", "spin")
TEXTURES = ("flat", "hatched", "dotted")
SIZES = (32, 64)
BACKGROUNDS = ("meadow", "night", "forest", "beach", "room")

POSE_FIELDS = (
    "cx",  # horizontal centre offset, fraction of width
    "cy",  # vertical offset, fraction of height
    "scale",  # overall figure size
    "arm_l",  # arm angle, 0 = hanging down, pi = straight up
    "arm_r",
    "leg_l",  # leg angle from vertical
    "leg_r",
    "head_tilt",
    "turn",  # signed width factor; negative draws the figure mirrored
    "limb",  # limb length factor
)
POSE_RANGES = {
    "cx": (-0.15, 0.15),
    "cy": (-0.12, 0.12),
    "scale": (0.8, 1.15),
    "arm_l": (-0.6, 3.0),
    "arm_r": (-0.6, 3.0),
    "leg_l": (-0.7, 0.7),
    "leg_r": (-0.7, 0.7),
    "head_tilt": (-0.4, 0.4),
    "turn": (-1.0, 1.0),
    "limb": (0.6, 1.3),
}
MIN_TURN = 0.3

# Largest change of any pose entry between consecutive frames for F >= 4.
# Angles in radians, offsets as fractions of the frame size.
MAX_POSE_DELTA = {
    "cx": 0.0,
    "cy": 0.045,
    "scale": 0.0,
    "arm_l": 0.71,
    "arm_r": 0.71,
    "leg_l": 0.64,
    "leg_r": 0.64,
    "head_tilt": 0.22,
    "turn": 1.4,
    "limb": 0.0,
}

NEUTRAL_POSE = np.array([0.0, 0.0, 1.0, 0.35, 0.35, 0.18, 0.18, 0.0, 1.0, 1.0])

PERSPECTIVE_TURN = {"front": 1.0, "three_quarter": 0.7, "side": 0.4}


class PoseError(ValueError):
    pass


@dataclass(frozen=True)
class StyleSpec:
    style_id: int
    palette: tuple[tuple[int, int, int], ...]
    stroke_width: int
    texture: str
    outline_color: tuple[int, int, int]

    def __post_init__(self):
        if not 3 <= len(self.palette) <= 5:
            raise ValueError("palette must hold 3-5 colours")
        if len(set(self.palette)) != len(self.palette):
            raise ValueError("palette colours must be pairwise distinct")
        for c in (*self.palette, self.outline_color):
            if len(c) != 3 or not all(0 <= v <= 255 for v in c):
                raise ValueError(f"bad RGB colour {c}")
        if not 1 <= self.stroke_width <= 3:
            raise ValueError("stroke_width must be in [1, 3]")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")

    def to_dict(self) -> dict:
        return {
            "style_id": self.style_id,
            "palette": [list(c) for c in self.palette],
            "stroke_width": self.stroke_width,
            "texture": self.texture,
            "outline_color": list(self.outline_color),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StyleSpec":
        return cls(
            style_id=int(d["style_id"]),
            palette=tuple(tuple(int(v) for v in c) for c in d["palette"]),
            stroke_width=int(d["stroke_width"]),
            texture=d["texture"],
            outline_color=tuple(int(v) for v in d["outline_color"]),
        )


@dataclass
class SpriteFrame:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    mask: np.ndarray  # H x W uint8, 1 = foreground

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError("image must be H x W x 3")
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError("mask shape does not match image")
        if not np.all(np.isfinite(self.image)):
            raise ValueError("image has non-finite values")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask must be strictly binary")


@dataclass
class SpriteClip:
    frames: list[SpriteFrame]
    style: StyleSpec
    motion_id: str
    clip_id: str
    seed: int = 0
    poses: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError("a clip needs at least two frames")
        shape = self.frames[0].image.shape
        for f in self.frames:
            if f.image.shape != shape:
                raise ValueError("all frames must share one size")
            if f.mask.sum() == 0:
                raise ValueError(f"empty mask in clip {self.clip_id}")

    @property
    def size(self) -> tuple[int, int]:
        return self.frames[0].image.shape[:2]

    def images(self) -> np.ndarray:
        return np.stack([f.image for f in self.frames])

    def masks(self) -> np.ndarray:
        return np.stack([f.mask for f in self.frames])


def _hsv(h, s, v):
    r, g, b = colorsys.hsv_to_rgb(h % 1.0, s, v)
    return (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


def random_style(style_id: int, seed: int) -> StyleSpec:
    """Draw a style with a saturated palette around a random base hue.

    Palette colours never approach white so that foreground and the white
    background stay distinguishable.
    """
    rng = np.random.default_rng([seed, style_id, 7919])
    n = int(rng.integers(3, 6))
    base = rng.random()
    spread = rng.uniform(0.04, 0.14)
    palette = []
    for i in range(n):
        h = base + spread * (i - (n - 1) / 2) + rng.normal(0, 0.01)
        palette.append(_hsv(h, rng.uniform(0.55, 0.95), rng.uniform(0.45, 0.9)))
    # collisions after rounding are vanishingly rare but must not slip through
    while len(set(palette)) < n:
        palette[-1] = (palette[-1][0], palette[-1][1], (palette[-1][2] + 17) % 200)
    outline = _hsv(base + 0.5, rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.3))
    return StyleSpec(
        style_id=style_id,
        palette=tuple(palette),
        stroke_width=int(rng.integers(1, 4)),
        texture=TEXTURES[int(rng.integers(0, len(TEXTURES)))],
        outline_color=outline,
    )


_HUE_WORDS = (
    (0.04, "red"), (0.11, "orange"), (0.18, "yellow"), (0.42, "green"),
    (0.53, "teal"), (0.70, "blue"), (0.80, "purple"), (0.93, "pink"), (1.01, "red"),
)


def hue_word(rgb: Sequence[int]) -> str:
    r, g, b = (v / 255 for v in rgb)
    h, s, v = colorsys.rgb_to_hsv(r, g, b)
    if v < 0.2:
        return "dark"
    if s < 0.2:
        return "gray"
    for edge, word in _HUE_WORDS:
        if h < edge:
            return word
    return "red"


def describe_style(style: StyleSpec) -> list[str]:
    """Descriptive prompt words for a style (stands in for a captioning model)."""
    hues = []
    for c in style.palette:
        w = hue_word(c)
        if w not in hues:
            hues.append(w)
    stroke = {1: "thin", 2: "medium", 3: "bold"}[style.stroke_width]
    return ["childlike", "whimsical", *hues[:2], style.texture, stroke, "style"]


def validate_pose(pose: Sequence[float]) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (len(POSE_FIELDS),):
        raise PoseError(f"pose must have {len(POSE_FIELDS)} entries, got shape {pose.shape}")
    problems = []
    for name, v in zip(POSE_FIELDS, pose):
        lo, hi = POSE_RANGES[name]
        if not (math.isfinite(v) and lo <= v <= hi):
            problems.append(f"{name}={v} outside [{lo}, {hi}]")
    if abs(pose[8]) < MIN_TURN:
        problems.append(f"|turn|={abs(pose[8])} below {MIN_TURN}")
    if problems:
        raise PoseError("; ".join(problems))
    return pose


def _pattern(texture: str, h: int, w: int, phase: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if texture == "hatched":
        return ((xx + yy + phase) % 4) == 0
    if texture == "dotted":
        return ((xx + phase) % 4 == 1) & ((yy + phase) % 4 == 1)
    return np.zeros((h, w), dtype=bool)


def _shade(c, k):
    return tuple(int(round(v * k)) for v in c)


def render_character(style: StyleSpec, pose_params, size=(64, 64), rng_seed: int = 0) -> SpriteFrame:
    """Draw one character frame; deterministic in all arguments."""
    H, W = size
    if H not in SIZES or W not in SIZES:
        raise ValueError(f"size must be drawn from {SIZES}, got {size}")
    p = dict(zip(POSE_FIELDS, validate_pose(pose_params)))
    rng = np.random.default_rng([rng_seed, style.style_id])

    u = min(H, W) / 64 * p["scale"]
    turn = p["turn"]
    mirror = turn < 0
    wf = abs(turn)
    x0 = W / 2 + p["cx"] * W
    hip = H * 0.66 + p["cy"] * H
    lw = max(2, int(round(3.2 * u)))
    sw = style.stroke_width if min(H, W) >= 64 else max(1, style.stroke_width - 1)
    pal = style.palette
    oc = style.outline_color

    canvas = Image.new("RGBA", (W, H), (0, 0, 0, 0))
    d = ImageDraw.Draw(canvas)

    def limb(ax, ay, angle, length, side, colour):
        dx = side * math.sin(angle) * length * max(wf, 0.5)
        dy = math.cos(angle) * length
        bx, by = ax + dx, ay + dy
        d.line([(ax, ay), (bx, by)], fill=oc + (255,), width=lw + 2 * sw)
        d.line([(ax, ay), (bx, by)], fill=colour + (255,), width=lw)
        r = lw * 0.9
        d.ellipse([bx - r, by - r, bx + r, by + r], fill=pal[3 % len(pal)] + (255,), outline=oc + (255,), width=sw)

    leg_len = 12 * u * p["limb"]
    arm_len = 11 * u * p["limb"]
    sides = (-1, 1) if not mirror else (1, -1)
    # back limbs first so the torso overlaps them
    for side, key in zip(sides, ("leg_l", "leg_r")):
        limb(x0 + side * 3.5 * u * wf, hip - 2 * u, p[key], leg_len, side, _shade(pal[2], 0.85))
    rx, ry = max(2.0, 7 * u * wf), 10.5 * u
    tcy = hip - 9 * u
    d.ellipse([x0 - rx, tcy - ry, x0 + rx, tcy + ry], fill=pal[0] + (255,), outline=oc + (255,), width=sw)
    for side, key in zip(sides, ("arm_l", "arm_r")):
        limb(x0 + side * 6 * u * wf, tcy - 6 * u, p[key], arm_len, side, pal[2])
    hr = 6.5 * u
    hcx = x0 + math.sin(p["head_tilt"]) * 4 * u
    hcy = tcy - ry - hr + 2 * u
    hrx = hr * (0.65 + 0.35 * wf)
    d.ellipse([hcx - hrx, hcy - hr, hcx + hrx, hcy + hr], fill=pal[1] + (255,), outline=oc + (255,), width=sw)
    # eyes face the viewer only when turned towards them
    if wf > 0.5 and hr >= 4:
        ex = hrx * 0.4
        ec = pal[-1] if len(pal) > 3 else oc
        for s in (-1, 1):
            d.point((int(hcx + s * ex), int(hcy - hr * 0.1)), fill=ec + (255,))

    arr = np.asarray(canvas)
    mask = (arr[..., 3] > 0).astype(np.uint8)
    rgb = arr[..., :3].astype(np.float32) / 255.0
    pat = _pattern(style.texture, H, W, int(rng.integers(0, 4))) & mask.astype(bool)
    if pat.any():
        rgb[pat] = rgb[pat] * 0.6
    image = np.where(mask[..., None] == 1, rgb, 1.0).astype(np.float32)
    if mask.sum() == 0:
        raise PoseError("pose renders no foreground pixels")
    return SpriteFrame(image=image, mask=mask)


def base_pose(rng: np.random.Generator, perspective: str = "front") -> np.ndarray:
    pose = NEUTRAL_POSE.copy()
    pose[0] = rng.uniform(-0.06, 0.06)
    pose[1] = rng.uniform(-0.04, 0.04)
    pose[2] = rng.uniform(0.88, 1.05)
    pose[9] = rng.uniform(0.9, 1.1)
    pose[8] = PERSPECTIVE_TURN[perspective]
    return pose


def motion_trajectory(motion_id: str, pose0: np.ndarray, F: int) -> np.ndarray:
    """Per-frame pose vectors, one full motion period over ``F`` frames."""
    if motion_id not in MOTIONS:
        raise ValueError(f"unknown motion_id {motion_id!r}; expected one of {MOTIONS}")
    poses = np.repeat(pose0[None], F, axis=0)
    phi = 2 * np.pi * np.arange(F) / F
    if motion_id == "idle-bob":
        poses[:, 1] = pose0[1] + (2 / 64) * np.sin(phi)
    elif motion_id == "walk-cycle":
        swing = 0.45 * np.sin(phi)
        poses[:, 5] = swing
        poses[:, 6] = -swing
        poses[:, 3] = 0.35 - 0.35 * np.sin(phi)
        poses[:, 4] = 0.35 + 0.35 * np.sin(phi)
        poses[:, 1] = pose0[1] - (1 / 64) * np.abs(np.sin(phi))
    elif motion_id == "wave":
        # partial motion: only the raised arm and the head move
        poses[:, 4] = 2.3 + 0.5 * np.sin(phi)
        poses[:, 7] = 0.15 * np.sin(phi)
    elif motion_id == "spin":
        c = np.cos(phi) * abs(pose0[8])
        poses[:, 8] = np.sign(c + 1e-12) * np.maximum(np.abs(c), MIN_TURN)
    return poses


def _derive_seed(master: int, key: str) -> int:
    ss = np.random.SeedSequence([master & 0xFFFFFFFF, zlib.crc32(key.encode())])
    return int(ss.generate_state(1)[0])


def generate_motion_clip(style: StyleSpec, motion_id: str, F: int = 8, size=(32, 32), rng_seed: int = 0,
                         clip_id: str | None = None, perspective: str = "front") -> SpriteClip:
    if not 4 <= F <= 16:
        raise ValueError(f"frame count must be in [4, 16], got {F}")
    if motion_id not in MOTIONS:
        raise ValueError(f"unknown motion_id {motion_id!r}; expected one of {MOTIONS}")
    rng = np.random.default_rng(rng_seed)
    poses = motion_trajectory(motion_id, base_pose(rng, perspective), F)
    frames = [render_character(style, pose, size, rng_seed) for pose in poses]
    return SpriteClip(frames=frames, style=style, motion_id=motion_id,
                      clip_id=clip_id or f"s{style.style_id:02d}_{motion_id}_{rng_seed}",
                      seed=rng_seed, poses=poses)


def render_background(keyword: str, size=(64, 64), rng_seed: int = 0) -> np.ndarray:
    """Neutral grey scene layout for a background keyword (H x W x 3 in [0, 1])."""
    if keyword not in BACKGROUNDS:
        raise ValueError(f"unknown background keyword {keyword!r}")
    H, W = size
    rng = np.random.default_rng([rng_seed, BACKGROUNDS.index(keyword)])
    yy, xx = np.mgrid[0:H, 0:W] / np.array([H, W])[:, None, None]
    horizon = 0.6 + rng.uniform(-0.06, 0.06)
    if keyword == "meadow":
        g = np.where(yy > horizon, 0.55 + 0.05 * np.sin(xx * 40), 0.88)
    elif keyword == "night":
        g = np.full((H, W), 0.18)
        stars = rng.random((H, W)) < 0.03
        g = np.where(stars & (yy < horizon), 0.85, g)
    elif keyword == "forest":
        period = rng.uniform(0.16, 0.22)
        trunks = ((xx + rng.random()) % period) < period * 0.3
        g = np.where(trunks, 0.35, 0.7)
        g = np.where(yy > 0.85, 0.45, g)
    elif keyword == "beach":
        line = horizon + 0.25 * (xx - 0.5)
        g = np.where(yy > line, 0.78, 0.45 + 0.1 * np.sin(yy * 60))
    else:  # room
        g = np.full((H, W), 0.62)
        g = np.where((np.abs(xx - 0.5) < 0.18) & (np.abs(yy - 0.3) < 0.14), 0.92, g)
        g = np.where(yy > 0.8, 0.4, g)
    g = np.clip(g + rng.normal(0, 0.02, (H, W)), 0, 1)
    return np.repeat(g[..., None], 3, axis=2).astype(np.float32)


@dataclass
class CorpusConfig:
    frames: int = 8
    size: int = 32
    motions: tuple[str, ...] = MOTIONS
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["motions"] = list(self.motions)
        return d


def build_clips(n_styles: int, clips_per_style: int, config: CorpusConfig, style_offset: int = 0) -> list[SpriteClip]:
    """In-memory corpus; clip ``j`` of a style uses motion ``j mod len(motions)``."""
    if n_styles < 1:
        raise ValueError("n_styles must be >= 1")
    clips = []
    for s in range(style_offset, style_offset + n_styles):
        style = random_style(s, config.seed)
        for j in range(clips_per_style):
            clip_id = f"s{s:03d}_c{j:03d}"
            seed = _derive_seed(config.seed, clip_id)
            motion = config.motions[j % len(config.motions)]
            clips.append(generate_motion_clip(style, motion, config.frames, (config.size, config.size),
                                              seed, clip_id=clip_id))
    return clips


def _save_png(path: Path, arr: np.ndarray, mode: str):
    if mode == "RGB":
        data = np.clip(np.round(arr * 255), 0, 255).astype(np.uint8)
    else:
        data = (arr.astype(np.uint8) * 255)
    Image.fromarray(data, mode=mode).save(path, optimize=False)


def write_clip(clip: SpriteClip, clip_dir: Path):
    clip_dir.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(clip.frames):
        _save_png(clip_dir / f"frame_{i:03d}.png", f.image, "RGB")
        _save_png(clip_dir / f"mask_{i:03d}.png", f.mask, "L")


def generate_corpus(out_dir, n_styles: int, clips_per_style: int, config: CorpusConfig | None = None,
                    overwrite: bool = False) -> Path:
    """Write ``corpus/<style_id>/<clip_id>/frame_%03d.png`` + masks + index.json."""
    config = config or CorpusConfig()
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{out} already exists; pass overwrite=True to replace it")
        shutil.rmtree(out)
    clips = build_clips(n_styles, clips_per_style, config)
    entries = []
    styles = {}
    for clip in clips:
        styles[clip.style.style_id] = clip.style.to_dict()
        write_clip(clip, out / str(clip.style.style_id) / clip.clip_id)
        H, W = clip.size
        entries.append({"clip_id": clip.clip_id, "style_id": clip.style.style_id, "motion_id": clip.motion_id,
                        "F": len(clip.frames), "H": H, "W": W, "seed": clip.seed})
    index = {"version": 1, "config": config.to_dict(), "styles": [styles[k] for k in sorted(styles)],
             "clips": entries}
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return out


def _load_png(path: Path, mode: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert(mode))
    if mode == "RGB":
        return arr.astype(np.float32) / 255.0
    return (arr > 127).astype(np.uint8)


def load_corpus(corpus_dir) -> list[SpriteClip]:
    """Read a corpus written by ``generate_corpus`` or laid out the same way by hand."""
    root = Path(corpus_dir)
    index = json.loads((root / "index.json").read_text())
    styles = {s["style_id"]: StyleSpec.from_dict(s) for s in index.get("styles", [])}
    clips = []
    for e in index["clips"]:
        cdir = root / str(e["style_id"]) / e["clip_id"]
        frames = [SpriteFrame(_load_png(cdir / f"frame_{i:03d}.png", "RGB"), _load_png(cdir / f"mask_{i:03d}.png", "L"))
                  for i in range(e["F"])]
        style = styles.get(e["style_id"]) or random_style(e["style_id"], 0)
        clips.append(SpriteClip(frames=frames, style=style, motion_id=e["motion_id"], clip_id=e["clip_id"],
                                seed=e.get("seed", 0)))
    return clips
