"""Synthetic "organ" corpus and episodic sampling.

Each class is a shape family; instances vary in position, size, rotation and
a smooth random deformation. Images are piecewise smooth (a gentle intensity
ramp inside and outside the shape) with additive Gaussian noise.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import ensure_dir, read_lmt, write_lmt
from .proto import Episode

SHAPE_FAMILIES = ("ellipse", "two_lobe", "ring", "crescent", "blob_union", "notched_rect")
MARGIN = 2


@dataclass(frozen=True)
class SyntheticCorpusConfig:
    size: int = 64
    n_classes: int = 6
    instances_per_class: int = 12
    contrast: float = 1.0
    noise_sigma: float = 0.1
    deformation: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.size % 4:
            raise ValueError("image size must be divisible by 4")
        if self.instances_per_class < 2:
            raise ValueError("need at least two instances per class")
        if not 1 <= self.n_classes <= len(SHAPE_FAMILIES):
            raise ValueError(f"n_classes must be in 1..{len(SHAPE_FAMILIES)}")
        if self.noise_sigma < 0 or self.contrast <= 0 or self.deformation < 0:
            raise ValueError("noise, contrast and deformation must be non-negative")


@dataclass(frozen=True)
class SplitSpec:
    train: tuple = (0, 1, 2, 3)
    test: tuple = (4, 5)

    def __post_init__(self):
        if not self.train or not self.test:
            raise ValueError("train and test class lists must be nonempty")
        if set(self.train) & set(self.test):
            raise ValueError("train and test classes must be disjoint")

    def classes(self, phase: str) -> tuple:
        if phase not in ("train", "test"):
            raise ValueError(f"unknown phase {phase!r}")
        return self.train if phase == "train" else self.test


@dataclass
class Corpus:
    images: list
    masks: list
    class_ids: list
    config: SyntheticCorpusConfig = field(default_factory=SyntheticCorpusConfig)

    def by_class(self) -> dict:
        out = {}
        for i, c in enumerate(self.class_ids):
            out.setdefault(c, []).append(i)
        return out

    def __len__(self):
        return len(self.images)


# -- shape families ---------------------------------------------------------------

def _shape(family: str, X, Y, rng) -> np.ndarray:
    """Boolean shape on normalised coordinates (X, Y roughly in [-1, 1])."""
    if family == "ellipse":
        a, b = rng.uniform(0.55, 0.8), rng.uniform(0.3, 0.5)
        return (X / a) ** 2 + (Y / b) ** 2 <= 1.0
    if family == "two_lobe":
        r = rng.uniform(0.3, 0.38)
        sep = rng.uniform(0.35, 0.45)
        lobes = ((X - sep) ** 2 + Y ** 2 <= r ** 2) | ((X + sep) ** 2 + Y ** 2 <= r ** 2)
        bridge = (np.abs(X) <= sep) & (np.abs(Y) <= 0.45 * r)
        return lobes | bridge
    if family == "ring":
        ro = rng.uniform(0.6, 0.8)
        ri = ro - rng.uniform(0.28, 0.36)
        d2 = X ** 2 + Y ** 2
        return (d2 <= ro ** 2) & (d2 >= ri ** 2)
    if family == "crescent":
        ro = rng.uniform(0.6, 0.8)
        shift = rng.uniform(0.3, 0.4)
        return (X ** 2 + Y ** 2 <= ro ** 2) & ((X - shift) ** 2 + Y ** 2 >= (0.85 * ro) ** 2)
    if family == "blob_union":
        out = np.zeros(X.shape, dtype=bool)
        for _ in range(3):
            cx, cy = rng.uniform(-0.35, 0.35, size=2)
            r = rng.uniform(0.25, 0.38)
            out |= (X - cx) ** 2 + (Y - cy) ** 2 <= r ** 2
        return out
    if family == "notched_rect":
        a, b = rng.uniform(0.55, 0.75), rng.uniform(0.4, 0.55)
        rect = (np.abs(X) <= a) & (np.abs(Y) <= b)
        nw = rng.uniform(0.18, 0.28)
        notch = (np.abs(X) <= nw) & (Y >= b - rng.uniform(0.3, 0.45))
        return rect & ~notch
    raise ValueError(f"unknown shape family {family!r}")


def _smooth_field(rng, size, n_terms=3):
    """Low-frequency random field with values roughly in [-1, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((size, size))
    for _ in range(n_terms):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    return out / n_terms


def make_instance(family: str, cfg: SyntheticCorpusConfig, rng):
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    for _ in range(100):
        # elastic-style warp of the sampling grid
        dx = cfg.deformation * _smooth_field(rng, n)
        dy = cfg.deformation * _smooth_field(rng, n)
        scale = rng.uniform(0.26, 0.34) * n
        cx, cy = rng.uniform(0.38, 0.62, size=2) * n
        theta = rng.uniform(0, 2 * np.pi)
        px, py = (xx + dx - cx) / scale, (yy + dy - cy) / scale
        X = np.cos(theta) * px + np.sin(theta) * py
        Y = -np.sin(theta) * px + np.cos(theta) * py
        mask = _shape(family, X, Y, rng)
        border = np.ones_like(mask)
        border[MARGIN:-MARGIN, MARGIN:-MARGIN] = False
        if mask.sum() >= 16 * 4 and not (mask & border).any():
            break
    else:
        raise RuntimeError(f"could not place a {family} inside the margin")
    mask = mask.astype(np.uint8)
    half = 0.25 * cfg.contrast
    bg = 0.5 - half + 0.2 * half * _smooth_field(rng, n)
    fg = 0.5 + half + 0.2 * half * _smooth_field(rng, n)
    image = np.where(mask == 1, fg, bg)
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0), mask


def generate_corpus(cfg: SyntheticCorpusConfig) -> Corpus:
    rng = np.random.default_rng(cfg.seed)
    images, masks, ids = [], [], []
    for c in range(cfg.n_classes):
        for _ in range(cfg.instances_per_class):
            img, m = make_instance(SHAPE_FAMILIES[c], cfg, rng)
            images.append(img)
            masks.append(m)
            ids.append(c)
    return Corpus(images, masks, ids, cfg)


def gen_corpus(cfg: SyntheticCorpusConfig, out_dir) -> Corpus:
    """Generate the corpus and write it as LMT1 files plus an index.json."""
    corpus = generate_corpus(cfg)
    save_corpus(corpus, out_dir)
    return corpus


def save_corpus(corpus: Corpus, out_dir) -> None:
    try:
        ensure_dir(out_dir)
    except OSError as exc:
        raise OSError(f"cannot write corpus to {out_dir}: {exc}") from exc
    entries = []
    for i, (img, m, c) in enumerate(zip(corpus.images, corpus.masks, corpus.class_ids)):
        stem = f"c{c}_{i:04d}"
        write_lmt(os.path.join(out_dir, f"{stem}_image.lmt"), img)
        write_lmt(os.path.join(out_dir, f"{stem}_mask.lmt"), m)
        entries.append({"image": f"{stem}_image.lmt", "mask": f"{stem}_mask.lmt", "class_id": int(c)})
    index = {"config": asdict(corpus.config), "families": list(SHAPE_FAMILIES[:corpus.config.n_classes]),
             "instances": entries}
    with open(os.path.join(out_dir, "index.json"), "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)


def load_corpus(path) -> Corpus:
    with open(os.path.join(path, "index.json")) as fh:
        index = json.load(fh)
    images, masks, ids = [], [], []
    for e in index["instances"]:
        images.append(read_lmt(os.path.join(path, e["image"])))
        masks.append(read_lmt(os.path.join(path, e["mask"])).astype(np.uint8))
        ids.append(int(e["class_id"]))
    return Corpus(images, masks, ids, SyntheticCorpusConfig(**index["config"]))


def sample_episode(corpus: Corpus, split: SplitSpec, phase: str, rng) -> Episode:
    """Uniform class from the phase's list, then two distinct instances of it."""
    classes = split.classes(phase)
    members = corpus.by_class()
    c = classes[int(rng.integers(len(classes)))]
    idx = members.get(c, [])
    if len(idx) < 2:
        raise ValueError(f"class {c} has fewer than two instances")
    s, q = rng.choice(len(idx), size=2, replace=False)
    s, q = idx[int(s)], idx[int(q)]
    return Episode(corpus.images[s], corpus.masks[s], corpus.images[q], corpus.masks[q], int(c))
