"""Desk-scale stand-ins for style/text alignment and video quality metrics.

These are comparative instruments for ablations on the procedural corpus;
their absolute values mean nothing outside it.

Style descriptor: an 8x8x8 Lab colour histogram (L over [0, 100], a and b
over [-128, 128)) and a 16-bin unsigned edge-orientation histogram from Sobel
gradients above magnitude 0.05, each normalised to unit sum, concatenated and
L2-normalised. A region without edges gets ``EDGE_EPS`` in every orientation
bin instead of zeros.
"""

from __future__ import annotations

import csv
import itertools
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab
from skimage.filters import threshold_otsu

from .corpus import BACKGROUNDS, MOTIONS, build_clips, CorpusConfig, render_background

COLOR_BINS = 8
EDGE_BINS = 16
EDGE_THRESHOLD = 0.05
EDGE_EPS = 1e-3
SMOOTH_EPS = 1e-8


class MetricError(ValueError):
    pass


def _as_float_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise MetricError("expected an H x W x 3 image")
    return np.clip(img, 0.0, 1.0)


def color_histogram(image, mask=None) -> np.ndarray:
    lab = rgb2lab(_as_float_image(image))
    sel = np.ones(lab.shape[:2], bool) if mask is None else np.asarray(mask).astype(bool)
    px = lab[sel]
    if len(px) == 0:
        raise MetricError("empty region")
    L = np.clip((px[:, 0] / 100.0 * COLOR_BINS).astype(int), 0, COLOR_BINS - 1)
    a = np.clip(((px[:, 1] + 128) / 256.0 * COLOR_BINS).astype(int), 0, COLOR_BINS - 1)
    b = np.clip(((px[:, 2] + 128) / 256.0 * COLOR_BINS).astype(int), 0, COLOR_BINS - 1)
    hist = np.bincount((L * COLOR_BINS + a) * COLOR_BINS + b, minlength=COLOR_BINS ** 3).astype(np.float64)
    return hist / hist.sum()


def edge_histogram(image, mask=None) -> np.ndarray:
    gray = _as_float_image(image) @ np.array([0.2125, 0.7154, 0.0721])
    gx = ndimage.sobel(gray, axis=1, mode="nearest") / 4.0
    gy = ndimage.sobel(gray, axis=0, mode="nearest") / 4.0
    mag = np.hypot(gx, gy)
    sel = mag > EDGE_THRESHOLD
    if mask is not None:
        sel &= np.asarray(mask).astype(bool)
    if not sel.any():
        return np.full(EDGE_BINS, EDGE_EPS)
    theta = np.mod(np.arctan2(gy[sel], gx[sel]), np.pi)
    idx = np.minimum((theta / np.pi * EDGE_BINS).astype(int), EDGE_BINS - 1)
    hist = np.bincount(idx, weights=mag[sel], minlength=EDGE_BINS)
    return hist / hist.sum()


def style_descriptor(image, mask=None) -> np.ndarray:
    v = np.concatenate([color_histogram(image, mask), edge_histogram(image, mask)])
    return v / np.linalg.norm(v)


def style_align(image, reference, image_mask=None, reference_mask=None) -> float:
    """Cosine between style descriptors, optionally over masked regions."""
    return float(style_descriptor(image, image_mask) @ style_descriptor(reference, reference_mask))


def motion_smoothness(clip) -> float:
    """``1 - mean|f[t+1] - 2 f[t] + f[t-1]| / (2 mean|f[t+1] - f[t]| + eps)``, clamped to [0, 1]."""
    f = np.asarray(clip, dtype=np.float64)
    if f.shape[0] < 3:
        raise MetricError("motion smoothness needs at least 3 frames")
    first = np.abs(np.diff(f, axis=0)).mean()
    second = np.abs(f[2:] - 2 * f[1:-1] + f[:-2]).mean()
    return float(np.clip(1.0 - second / (2.0 * first + SMOOTH_EPS), 0.0, 1.0))


def saliency_mask(image) -> np.ndarray:
    """Foreground guess for generated frames: distance from the median border
    colour, thresholded with Otsu's method."""
    img = _as_float_image(image)
    border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])
    bg = np.median(border, axis=0)
    sal = np.linalg.norm(img - bg, axis=2)
    if np.ptp(sal) < 1e-6:
        return np.zeros(sal.shape, np.uint8)
    return (sal > threshold_otsu(sal)).astype(np.uint8)


def subject_consistency(clip, masks=None) -> float:
    """Mean pairwise cosine of per-frame foreground style descriptors."""
    frames = np.asarray(clip)
    if masks is None:
        masks = [saliency_mask(f) for f in frames]
    if any(np.asarray(m).sum() == 0 for m in masks):
        raise MetricError("empty foreground mask in some frame")
    desc = [style_descriptor(f, m) for f, m in zip(frames, masks)]
    pairs = list(itertools.combinations(range(len(desc)), 2))
    if not pairs:
        raise MetricError("need at least two frames")
    return float(np.mean([desc[i] @ desc[j] for i, j in pairs]))


# ---------------------------------------------------------------- text alignment

KEYWORD_GROUPS = {"background": BACKGROUNDS, "motion": MOTIONS}


def layout_features(image) -> np.ndarray:
    img = _as_float_image(image)
    gray = img @ np.array([0.2125, 0.7154, 0.0721])
    H, W = gray.shape
    k = H // 8
    small = gray[: k * 8, : (W // 8) * 8].reshape(8, k, 8, W // 8).mean(axis=(1, 3)).ravel()
    col = img.reshape(-1, 3).std(axis=0)
    return np.concatenate([small, edge_histogram(img), col])


class KeywordClassifier:
    """Per-group softmax regressors over ``layout_features``.

    Parameters are plain arrays so a trained classifier is frozen, saveable
    and bit-deterministic at inference.
    """

    def __init__(self, params: dict):
        self.params = params

    @classmethod
    def train(cls, samples: dict[str, list[tuple[np.ndarray, str]]], C: float = 1.0) -> "KeywordClassifier":
        from sklearn.linear_model import LogisticRegression

        params = {}
        for group, items in samples.items():
            X = np.stack([layout_features(img) for img, _ in items])
            y = [lab for _, lab in items]
            mean, scale = X.mean(0), X.std(0) + 1e-6
            clf = LogisticRegression(C=C, max_iter=2000)
            clf.fit((X - mean) / scale, y)
            params[group] = {"classes": list(clf.classes_), "coef": clf.coef_.tolist(),
                             "intercept": clf.intercept_.tolist(), "mean": mean.tolist(), "scale": scale.tolist()}
        return cls(params)

    def group_of(self, keyword: str) -> str:
        for g, p in self.params.items():
            if keyword in p["classes"]:
                return g
        raise MetricError(f"unknown keyword {keyword!r}")

    def proba(self, image, group: str) -> dict[str, float]:
        p = self.params[group]
        x = (layout_features(image) - np.array(p["mean"])) / np.array(p["scale"])
        logits = np.array(p["coef"]) @ x + np.array(p["intercept"])
        if logits.size == 1:  # binary sklearn layout
            logits = np.array([-logits[0], logits[0]])
        e = np.exp(logits - logits.max())
        return dict(zip(p["classes"], e / e.sum()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.params, sort_keys=True))

    @classmethod
    def load(cls, path) -> "KeywordClassifier":
        return cls(json.loads(Path(path).read_text()))


def composite(frame_image, mask, background) -> np.ndarray:
    return np.where(np.asarray(mask)[..., None] == 1, frame_image, background).astype(np.float32)


def train_keyword_classifier(seed: int = 0, size: int = 64, n_per_class: int = 24) -> KeywordClassifier:
    """Fit the classifier on procedural scenes (characters over backgrounds)
    and character frames labelled by motion."""
    clips = build_clips(6, 8, CorpusConfig(frames=8, size=size, seed=seed + 1000), style_offset=200)
    rng = np.random.default_rng(seed)
    bg_items, motion_items = [], []
    for k, kw in enumerate(BACKGROUNDS):
        for i in range(n_per_class):
            clip = clips[rng.integers(len(clips))]
            f = clip.frames[rng.integers(len(clip.frames))]
            bg = render_background(kw, (size, size), seed * 1000 + k * 100 + i)
            bg_items.append((composite(f.image, f.mask, bg) if i % 2 else bg, kw))
    for clip in clips:
        for f in clip.frames[::2]:
            motion_items.append((f.image, clip.motion_id))
    return KeywordClassifier.train({"background": bg_items, "motion": motion_items})


def text_align(image, keywords: Iterable[str], classifier: KeywordClassifier) -> float:
    """Mean predicted probability of the target keywords."""
    keywords = list(keywords)
    if not keywords:
        raise MetricError("empty keyword set")
    probs = [classifier.proba(image, classifier.group_of(k))[k] for k in keywords]
    return float(np.mean(probs))


def chance_level(keyword: str, classifier: KeywordClassifier) -> float:
    return 1.0 / len(classifier.params[classifier.group_of(keyword)]["classes"])


def write_metrics_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> Path:
    """Write rows with a fixed column order; floats at 6 decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return path


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))
