"""Storyboard planning, shot-crop geometry and end-to-end story rendering.

A planner client returns one JSON document per request. ``plan_storyboard``
validates it, repairs missing or unknown shot enums to medium / front /
full_body (logging a warning) and maps each shot's action text onto the
procedural motion library.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .adapters import AdapterBank
from .corpus import BACKGROUNDS, MOTIONS, PERSPECTIVE_TURN, NEUTRAL_POSE, StyleSpec, render_character
from .diffusion import Checkpoint
from .frames import crop_resize, save_clip, save_png

log = logging.getLogger(__name__)

SHOT_TYPES = ("wide", "medium", "close_up")
PERSPECTIVES = ("front", "three_quarter", "side")
FOCAL_REGIONS = ("full_body", "upper_body", "head")
ENUM_DEFAULTS = {"shot_type": "medium", "perspective": "front", "focal_region": "full_body"}
ENUM_VALUES = {"shot_type": SHOT_TYPES, "perspective": PERSPECTIVES, "focal_region": FOCAL_REGIONS}

CLOSE_UP_FACTOR = 1.4
MEDIUM_FACTOR = 2.0
MANIFEST_VERSION = 1

PROMPT_TEMPLATE = """You plan short animated stories for a single hand-drawn character.
Character: {description}
Return ONE JSON object, no prose, with exactly this structure:
{{"global": {{"character": str, "background_context": str, "main_event": str}},
  "shots": [{{"background": str, "action": str,
             "shot_type": "wide" | "medium" | "close_up",
             "perspective": "front" | "three_quarter" | "side",
             "focal_region": "full_body" | "upper_body" | "head"}}, ...]}}
Produce exactly {n_shots} shots. Backgrounds should mention one of: {backgrounds}.
Actions should be short verb phrases (walking, waving, spinning, standing)."""


class StoryboardError(ValueError):
    """Planner output that cannot be turned into a valid storyboard."""


class PlannerError(RuntimeError):
    """The planner client failed (transport, HTTP status, empty reply)."""


class StoryRenderError(RuntimeError):
    def __init__(self, msg: str, manifest_path: Path):
        super().__init__(msg)
        self.manifest_path = manifest_path


# ---------------------------------------------------------------- schema

class GlobalPlan(BaseModel):
    model_config = ConfigDict(extra="forbid")

    character: str
    background_context: str
    main_event: str


class Shot(BaseModel):
    model_config = ConfigDict(extra="forbid")

    background: str
    action: str
    shot_type: Literal["wide", "medium", "close_up"] = "medium"
    perspective: Literal["front", "three_quarter", "side"] = "front"
    focal_region: Literal["full_body", "upper_body", "head"] = "full_body"
    motion_id: str | None = None
    crop_box: tuple[float, float, float, float] | None = None


class Storyboard(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    global_plan: GlobalPlan = Field(alias="global")
    shots: list[Shot] = Field(min_length=1)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(by_alias=True), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- action / background mapping

ACTION_SYNONYMS = {
    "idle-bob": ("idle", "idle-bob", "bob", "bobs", "bobbing", "stand", "stands", "standing", "wait", "waits",
                 "waiting", "rest", "rests", "resting", "breathe", "breathes", "breathing", "pause", "pauses"),
    "walk-cycle": ("walk", "walks", "walking", "walk-cycle", "stroll", "strolls", "strolling", "march", "marches",
                   "marching", "step", "steps", "wander", "wanders", "wandering", "go", "goes"),
    "wave": ("wave", "waves", "waving", "greet", "greets", "greeting", "hello", "hi", "salute", "salutes",
             "beckon", "beckons"),
    "spin": ("spin", "spins", "spinning", "turn", "turns", "turning", "twirl", "twirls", "twirling", "pirouette",
             "rotate", "rotates", "dance", "dances", "dancing"),
}
ACTION_VOCABULARY = {word: motion for motion, words in ACTION_SYNONYMS.items() for word in words}

BACKGROUND_SYNONYMS = {
    "meadow": ("meadow", "field", "grass", "grassland", "hill", "hills", "garden", "park"),
    "night": ("night", "dark", "stars", "starry", "moon", "evening", "midnight"),
    "forest": ("forest", "woods", "wood", "trees", "tree", "jungle", "grove"),
    "beach": ("beach", "sea", "ocean", "shore", "sand", "coast", "waves"),
    "room": ("room", "house", "home", "bedroom", "kitchen", "indoors", "inside", "hall"),
}
BACKGROUND_VOCABULARY = {w: kw for kw, words in BACKGROUND_SYNONYMS.items() for w in words}


def _words(text: str) -> list[str]:
    return [w.strip(".,;:!?\"'()") for w in text.lower().split()]


def map_action_keyword(keyword: str) -> str:
    """Map free action text onto a motion id; unknown text falls back to idle-bob."""
    text = keyword.strip().lower()
    if text in MOTIONS:
        return text
    for w in _words(text):
        if w in ACTION_VOCABULARY:
            return ACTION_VOCABULARY[w]
    log.warning("no motion matches action %r; using idle-bob", keyword)
    return "idle-bob"


def map_background_keyword(text: str) -> str:
    for w in _words(text):
        if w in BACKGROUND_VOCABULARY:
            return BACKGROUND_VOCABULARY[w]
    log.warning("no background keyword in %r; using meadow", text)
    return "meadow"


# ---------------------------------------------------------------- planner clients

@dataclass(frozen=True)
class PlanRequest:
    description: str
    n_shots: int

    def prompt(self) -> str:
        return PROMPT_TEMPLATE.format(description=self.description, n_shots=self.n_shots,
                                      backgrounds=", ".join(BACKGROUNDS))


class PlannerClient(Protocol):
    def generate(self, request: PlanRequest) -> str: ...


_STUB_ACTIONS = ("walks across the scene", "waves hello", "spins with joy", "stands and breathes",
                 "strolls along", "greets a friend", "twirls around", "waits patiently")
_STUB_EVENTS = ("meets a new friend", "goes on a small adventure", "celebrates a sunny day", "finds a lost toy")


@dataclass(frozen=True)
class StubPlanner:
    """Offline planner: a pure function of (seed, description, n_shots)."""

    seed: int = 0

    def generate(self, request: PlanRequest) -> str:
        digest = hashlib.sha256(f"{self.seed}\x00{request.description}\x00{request.n_shots}".encode()).digest()
        rng = random.Random(int.from_bytes(digest[:8], "little"))
        shots = []
        for i in range(request.n_shots):
            bg = rng.choice(BACKGROUNDS)
            shots.append({
                "background": f"a quiet {bg}",
                "action": rng.choice(_STUB_ACTIONS),
                "shot_type": SHOT_TYPES[i % 3] if i < 3 else rng.choice(SHOT_TYPES),
                "perspective": rng.choice(PERSPECTIVES),
                "focal_region": rng.choice(FOCAL_REGIONS),
            })
        doc = {"global": {"character": request.description,
                          "background_context": shots[0]["background"] if shots else "",
                          "main_event": f"the character {rng.choice(_STUB_EVENTS)}"},
               "shots": shots}
        return json.dumps(doc, sort_keys=True)


@dataclass
class HttpPlanner:
    """Chat-completions style endpoint; URL and key default to ``PLANNER_URL`` / ``PLANNER_KEY``."""

    url: str | None = None
    key: str | None = None
    model: str = "default"
    timeout: float = 60.0

    def __post_init__(self):
        self.url = self.url or os.environ.get("PLANNER_URL")
        self.key = self.key or os.environ.get("PLANNER_KEY")
        if not self.url:
            raise PlannerError("no planner endpoint: set PLANNER_URL or pass url")

    def generate(self, request: PlanRequest) -> str:
        body = json.dumps({"model": self.model, "temperature": 0,
                           "messages": [{"role": "user", "content": request.prompt()}]}).encode()
        headers = {"Content-Type": "application/json"}
        if self.key:
            headers["Authorization"] = f"Bearer {self.key}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                reply = json.loads(resp.read().decode())
        except (urllib.error.URLError, TimeoutError, json.JSONDecodeError) as exc:
            raise PlannerError(f"planner request failed: {exc}") from exc
        try:
            return reply["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise PlannerError("planner reply has no message content") from exc


# ---------------------------------------------------------------- validation

def _strip_fences(text: str) -> str:
    text = text.strip()
    if text.startswith("```"):
        text = text.split("\n", 1)[1] if "\n" in text else ""
        text = text.rsplit("```", 1)[0]
    return text


def parse_storyboard(text: str, n_shots: int | None = None) -> Storyboard:
    """Validate planner text; repairs only missing or unknown shot enums."""
    try:
        doc = json.loads(_strip_fences(text))
    except json.JSONDecodeError as exc:
        raise StoryboardError(f"planner output is not JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("shots"), list):
        raise StoryboardError("planner output must be an object with a 'shots' list")
    for i, shot in enumerate(doc["shots"]):
        if not isinstance(shot, dict):
            raise StoryboardError(f"shot {i} is not an object")
        for name, allowed in ENUM_VALUES.items():
            if shot.get(name) not in allowed:
                log.warning("shot %d: %s=%r repaired to %r", i, name, shot.get(name), ENUM_DEFAULTS[name])
                shot[name] = ENUM_DEFAULTS[name]
    try:
        board = Storyboard.model_validate(doc)
    except ValidationError as exc:
        raise StoryboardError(f"storyboard schema violation:\n{exc}") from exc
    if n_shots is not None and len(board.shots) != n_shots:
        raise StoryboardError(f"expected {n_shots} shots, planner returned {len(board.shots)}")
    for shot in board.shots:
        shot.motion_id = map_action_keyword(shot.action)
    return board


def plan_storyboard(description: str, n_shots: int, client: PlannerClient, retries: int = 3,
                    backoff: float = 0.5) -> Storyboard:
    if n_shots < 1:
        raise ValueError("n_shots must be at least 1")
    request = PlanRequest(description, n_shots)
    last: Exception | None = None
    for attempt in range(retries):
        try:
            text = client.generate(request)
            break
        except PlannerError as exc:
            last = exc
            log.warning("planner attempt %d/%d failed: %s", attempt + 1, retries, exc)
            if attempt + 1 < retries:
                time.sleep(backoff * 2 ** attempt)
    else:
        raise PlannerError(f"planner failed after {retries} attempts") from last
    return parse_storyboard(text, n_shots)


# ---------------------------------------------------------------- crop geometry

def focal_box(focal_region: str, bbox) -> tuple[float, float, float, float]:
    x, y, w, h = bbox
    if focal_region == "full_body":
        return (x, y, w, h)
    if focal_region == "upper_body":
        return (x, y, w, h / 2)
    if focal_region == "head":
        return (x, y, w, h / 3)
    raise ValueError(f"unknown focal region {focal_region!r}")


def _square_in_frame(x0, y0, x1, y1):
    """Smallest square (in normalised units) centred on the box, shifted into the unit frame."""
    side = min(1.0, max(x1 - x0, y1 - y0))
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2

    def place(c):
        lo = min(max(c - side / 2, 0.0), 1.0 - side)
        return lo

    return (place(cx), place(cy), side, side)


def _expand(box, factor):
    x, y, w, h = box
    cx, cy = x + w / 2, y + h / 2
    return (cx - w * factor / 2, cy - h * factor / 2, cx + w * factor / 2, cy + h * factor / 2)


def compute_crop(shot_type: str, focal_region: str, bbox, close_up_factor: float = CLOSE_UP_FACTOR,
                 medium_factor: float = MEDIUM_FACTOR) -> tuple[float, float, float, float]:
    """Normalised (x, y, w, h) crop for a square render.

    close_up frames the focal sub-box grown by ``close_up_factor``; medium
    frames the character grown by ``medium_factor`` and always encloses the
    close-up crop; wide is the full frame. Crops are squared by symmetric
    growth, then shifted (never shrunk) to stay inside the frame.
    """
    x, y, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise ValueError("character bbox has zero area")
    if x < 0 or y < 0 or x + w > 1 + 1e-12 or y + h > 1 + 1e-12:
        raise ValueError("character bbox must lie inside the unit square")
    if shot_type == "wide":
        return (0.0, 0.0, 1.0, 1.0)
    close = _square_in_frame(*_expand(focal_box(focal_region, (x, y, w, h)), close_up_factor))
    if shot_type == "close_up":
        return close
    if shot_type == "medium":
        mx0, my0, mx1, my1 = _expand((x, y, w, h), medium_factor)
        cx, cy, cs, _ = close
        return _square_in_frame(min(mx0, cx), min(my0, cy), max(mx1, cx + cs), max(my1, cy + cs))
    raise ValueError(f"unknown shot type {shot_type!r}")


def mask_bbox(mask: np.ndarray) -> tuple[float, float, float, float]:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise ValueError("empty mask")
    H, W = mask.shape
    return (xs.min() / W, ys.min() / H, (xs.max() + 1 - xs.min()) / W, (ys.max() + 1 - ys.min()) / H)


# ---------------------------------------------------------------- rendering

@dataclass
class CharacterAssets:
    """Everything needed to film one character."""

    style: StyleSpec
    image_base: Checkpoint
    clip_base: Checkpoint
    style_bank: AdapterBank | None
    motion_bank: AdapterBank | None
    style_prompt: list[str] = field(default_factory=list)


def shot_character(style: StyleSpec, perspective: str, size: int, seed: int):
    pose = NEUTRAL_POSE.copy()
    pose[8] = PERSPECTIVE_TURN[perspective]
    return render_character(style, pose, (size, size), rng_seed=seed)


def render_shot(index: int, shot: Shot, assets: CharacterAssets, out_dir: Path, seed: int, frames: int,
                crop_factors: tuple[float, float] = (CLOSE_UP_FACTOR, MEDIUM_FACTOR)) -> dict:
    from .motion import animate_shot, clip_prompt
    from .style import synthesize_scene

    shot_seed = seed * 1000 + index
    size = assets.image_base.spec.size
    character = shot_character(assets.style, shot.perspective, size, shot_seed)
    keyword = map_background_keyword(shot.background)
    motion_id = shot.motion_id or map_action_keyword(shot.action)
    scene = synthesize_scene(character, keyword, assets.style_bank, assets.image_base, shot_seed,
                             assets.style_prompt)
    box = compute_crop(shot.shot_type, shot.focal_region, mask_bbox(character.mask), *crop_factors)
    first = crop_resize(scene, box, assets.clip_base.spec.size)
    clip = animate_shot(first, clip_prompt(motion_id), assets.motion_bank, assets.clip_base, frames, shot_seed)
    d = out_dir / f"shot_{index:02d}"
    save_png(d / "scene.png", scene)
    paths = save_clip(d, clip)
    return {"index": index, "dir": d.name, "status": "complete", "background_keyword": keyword,
            "motion_id": motion_id, "crop_box": [round(v, 6) for v in box], "frames": frames,
            "files": sorted(p.relative_to(out_dir).as_posix() for p in paths + [d / "scene.png"])}


def _write_manifest(path: Path, board: Storyboard, seed: int, frames: int, shots: list[dict], failed=None):
    doc = {"version": MANIFEST_VERSION, "seed": seed, "frames": frames,
           "storyboard": board.model_dump(by_alias=True, mode="json"),
           "shots": sorted(shots, key=lambda s: s["index"]), "complete": failed is None}
    if failed is not None:
        doc["failed"] = failed
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def render_story(board: Storyboard, assets: CharacterAssets, out_dir, seed: int, frames: int = 8,
                 parallel: bool = False, workers: int = 2,
                 crop_factors: tuple[float, float] = (CLOSE_UP_FACTOR, MEDIUM_FACTOR)) -> Path:
    """Render every shot to ``shot_XX/`` and write ``story_manifest.json``.

    A failing shot stops the run; the manifest then lists the completed
    shots and the failure before the error is re-raised.
    """
    if assets.style_bank is None or assets.motion_bank is None:
        raise ValueError("render_story needs trained style and motion banks")
    if not 2 <= frames <= assets.clip_base.spec.frames:
        raise ValueError(f"frames must lie in [2, {assets.clip_base.spec.frames}]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "story_manifest.json"
    for i, shot in enumerate(board.shots):
        shot.motion_id = shot.motion_id or map_action_keyword(shot.action)
        shot.crop_box = None
    done: list[dict] = []
    jobs = list(enumerate(board.shots))
    try:
        if parallel:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [(i, pool.submit(render_shot, i, s, assets, out, seed, frames, crop_factors)) for i, s in jobs]
                failure = None
                for i, fut in futures:
                    try:
                        done.append(fut.result())
                    except Exception as exc:  # keep collecting finished shots
                        failure = failure or (i, exc)
                if failure:
                    raise failure[1]
        else:
            for i, shot in jobs:
                done.append(render_shot(i, shot, assets, out, seed, frames, crop_factors))
    except Exception as exc:
        completed = {s["index"] for s in done}
        failed_index = next(i for i, _ in jobs if i not in completed)
        _write_manifest(manifest, board, seed, frames, done, {"index": failed_index, "error": repr(exc)})
        raise StoryRenderError(f"shot {failed_index} failed: {exc}", manifest) from exc
    for s in done:
        board.shots[s["index"]].crop_box = tuple(s["crop_box"])
    _write_manifest(manifest, board, seed, frames, done)
    return manifest
