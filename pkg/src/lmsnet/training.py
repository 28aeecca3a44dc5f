"""Unfolded LMS network: assembly, losses and the episodic SGD loop."""
from __future__ import annotations

import csv
import functools
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .core import binarize, downsample_mask, ensure_dir
from .data import Corpus, SplitSpec, sample_episode
from .neural import (MaskDenoiser, MDWeights, MUTWeights, ParamStore, feature_extract, init_backbone,
                     init_md, init_mut, mut_forward)
from .proto import Episode, VanishingMaskError, init_mask, representative_prototypes, \
    support_prototypes, voronoi_partition
from .solver import PrototypePair, SolverConfig, StageParams, data_consistency, dual_update, \
    map_pool, softplus_inverse

log = logging.getLogger(__name__)

LOSS_CLAMP = 1e-6
MAP_FALLBACK_MASS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    stages: int = 2
    flms_mode: bool = False
    pdnet: bool = True
    md_variant: str = "c"
    alpha: float = 20.0
    n_p: int = 12
    channels: int = 32
    backbone_channels: tuple = (16, 32)
    md_hidden: int = 32
    md_zero_init: bool = True
    mut_heads: int = 4
    mut_mlp_ratio: int = 4
    share_mut: bool = False
    delta_init: float = 1.0
    loss_resolution: str = "feature"
    voronoi_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be at least 1")
        if self.md_variant not in ("a", "b", "c"):
            raise ValueError("md_variant must be one of a, b, c")
        if self.loss_resolution not in ("feature", "image"):
            raise ValueError("loss_resolution must be 'feature' or 'image'")
        if self.channels % self.mut_heads:
            raise ValueError("channels must be divisible by mut_heads")

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(alpha=self.alpha)


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 2000
    learning_rate: float = 1e-3
    decay_factor: float = 0.98
    decay_every: int = 1000
    batch_size: int = 1
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if min(self.total_iterations, self.decay_every, self.batch_size) < 1:
            raise ValueError("iteration counts and batch size must be positive")
        if not (self.learning_rate > 0 and self.decay_factor > 0):
            raise ValueError("learning rate and decay factor must be positive")


def init_params(cfg: ModelConfig) -> ParamStore:
    rng = np.random.default_rng(cfg.seed)
    store = ParamStore()
    init_backbone(store, rng, tuple(cfg.backbone_channels) + (cfg.channels,))
    for k in range(cfg.stages):
        store.add(f"stage{k}.delta_raw", np.array(softplus_inverse(cfg.delta_init)), "stage")
        if cfg.pdnet:
            init_md(store, rng, f"stage{k}.md", cfg.md_hidden, zero_last=cfg.md_zero_init)
        if not cfg.flms_mode and (k == 0 or not cfg.share_mut):
            prefix = "mut" if cfg.share_mut else f"stage{k}.mut"
            init_mut(store, rng, prefix, cfg.channels, cfg.mut_heads, cfg.mut_mlp_ratio)
    return store


@dataclass
class StageTrace:
    l: PrototypePair
    u: object
    v: object
    p: object = None


@dataclass
class ForwardResult:
    u: object
    u0: object
    l0: PrototypePair
    stages: list
    F_s: object
    F_q: object
    p0: object = None


@functools.lru_cache(maxsize=4096)
def _cached_partition(mask_bytes, shape, n_regions, seed):
    mask = np.frombuffer(mask_bytes, dtype=np.uint8).reshape(shape)
    n = min(n_regions, int(mask.sum()))
    return voronoi_partition(mask, n, seed)


def _partition(mask, n_regions, seed):
    mask = np.ascontiguousarray(np.asarray(mask, dtype=np.uint8))
    return _cached_partition(mask.tobytes(), mask.shape, n_regions, seed)


def _pool_or_keep(F, weights, previous):
    if float(np.sum(ad.as_tensor(weights).data)) < MAP_FALLBACK_MASS:
        return previous
    return map_pool(F, weights, 1.0)


def lms_forward(episode: Episode, params: ParamStore, cfg: ModelConfig) -> ForwardResult:
    """Initialisation module followed by ``cfg.stages`` LMS blocks."""
    scfg = cfg.solver
    feats = feature_extract(np.stack([episode.support_image, episode.query_image]), params)
    F_s, F_q = feats[0], feats[1]
    l0 = support_prototypes(F_s, episode.support_mask)
    u0 = init_mask(F_q, l0, scfg)

    p = None
    if not cfg.flms_mode:
        labels = _partition(episode.support_mask, cfg.n_p, cfg.voronoi_seed)
        try:
            p = representative_prototypes(F_s, labels)
        except VanishingMaskError:
            p = ad.reshape(l0.fg, (1, -1))
    p0 = p

    l, u, stages = l0, u0, []
    zero = np.zeros(F_q.shape[:2] + (2,))
    for k in range(cfg.stages):
        if not cfg.flms_mode:
            l = PrototypePair(_pool_or_keep(F_q, u[..., 0], l.fg),
                              _pool_or_keep(F_q, u[..., 1], l.bg))
            prefix = "mut" if cfg.share_mut else f"stage{k}.mut"
            p, l = mut_forward(p, l.fg, MUTWeights.from_store(params, prefix, cfg.mut_heads))
        u = data_consistency(F_q, l, zero, scfg)
        if cfg.pdnet:
            md = MaskDenoiser(MDWeights.from_store(params, f"stage{k}.md", cfg.md_variant))
            stage = StageParams(params[f"stage{k}.delta_raw"], md)
            v = dual_update(u, zero, stage)
            u = data_consistency(F_q, l, v, scfg)
        else:
            v = ad.as_tensor(zero)
        stages.append(StageTrace(l, u, v, p))
    return ForwardResult(u, u0, l0, stages, F_s, F_q, p0)


# -- losses ---------------------------------------------------------------------

def _upsample(u, factor):
    u = ad.as_tensor(u)
    h, w, c = u.shape
    x = ad.reshape(u, (h, 1, w, 1, c)) * np.ones((1, factor, 1, factor, 1))
    return ad.reshape(x, (h * factor, w * factor, c))


def ce_loss(u, gt, resolution: str = "feature"):
    """Mean pixelwise cross-entropy -sum_i g_i ln u_i against a binary mask.

    With ``resolution="feature"`` the mask is area-downsampled to the grid of
    ``u``; with ``"image"`` ``u`` is nearest-upsampled to the mask instead.
    """
    ut = ad.as_tensor(u)
    gt = np.asarray(gt)
    if resolution == "image" and gt.shape != ut.shape[:2]:
        ut = _upsample(ut, gt.shape[0] // ut.shape[0])
        g = (gt >= 0.5).astype(np.float64)
        if g.shape != ut.shape[:2]:
            raise ValueError(f"shape mismatch: {g.shape} vs {ut.shape[:2]}")
    else:
        try:
            g = downsample_mask(gt, ut.shape[:2]).astype(np.float64)
        except ValueError as exc:
            raise ValueError(f"shape mismatch: {exc}") from exc
    target = np.stack([g, 1.0 - g], axis=-1)
    logu = ad.log(ad.clip(ut, LOSS_CLAMP, 1.0 - LOSS_CLAMP))
    out = -ad.tsum(logu * target) * (1.0 / (g.size))
    return ad.plain(out, u)


def par_loss(episode: Episode, F_s, F_q, u_query, cfg: ModelConfig):
    """Reverse segmentation: prototypes from the predicted query mask segment
    the support image, scored against the support mask.

    Returns 0 when the binarised query prediction is empty.
    """
    ut = ad.as_tensor(u_query)
    pred = binarize(ut.data).astype(np.float64)
    if not pred.any():
        return ad.Tensor(0.0)
    l1 = map_pool(F_q, pred, 1.0)
    l2 = map_pool(F_q, 1.0 - pred, 1.0) if (1.0 - pred).any() else -l1
    u_s = data_consistency(F_s, PrototypePair(l1, l2), np.zeros(pred.shape + (2,)), cfg.solver)
    return ce_loss(u_s, episode.support_mask, cfg.loss_resolution)


@dataclass
class LossParts:
    total: object
    ce: float
    par: float
    forward: ForwardResult


def total_loss(episode: Episode, params: ParamStore, cfg: ModelConfig) -> LossParts:
    if episode.query_gt is None:
        raise ValueError("episode has no query ground truth")
    fwd = lms_forward(episode, params, cfg)
    ce = ce_loss(fwd.u, episode.query_gt, cfg.loss_resolution)
    par = par_loss(episode, fwd.F_s, fwd.F_q, fwd.u, cfg)
    total = ce + par
    return LossParts(total, float(ce.data), float(par.data), fwd)


# -- optimisation ---------------------------------------------------------------

class TrainingDiverged(FloatingPointError):
    def __init__(self, step, msg="non-finite loss"):
        super().__init__(f"{msg} at step {step}")
        self.step = step


def lr_at(step: int, cfg: TrainConfig) -> float:
    return cfg.learning_rate * cfg.decay_factor ** (step // cfg.decay_every)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, step, lr, ce, par, total):
        self.rows.append((step, lr, ce, par, total))

    def column(self, name) -> np.ndarray:
        i = ("step", "lr", "ce", "par", "total").index(name)
        return np.array([r[i] for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "ce", "par", "total"])
            for step, lr, ce, par, total in self.rows:
                w.writerow([step, repr(lr), repr(ce), repr(par), repr(total)])


def sgd_train(corpus: Corpus, split: SplitSpec, params: ParamStore, model_cfg: ModelConfig,
              train_cfg: TrainConfig, checkpoint_dir: Optional[str] = None,
              progress: bool = False) -> tuple:
    """Plain SGD, one episode per step, step-decayed learning rate.

    ``params`` is updated in place and also returned with the loss log.
    """
    if len(corpus) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(train_cfg.seed)
    tlog = TrainLog()
    for step in range(train_cfg.total_iterations):
        lr = lr_at(step, train_cfg)
        grads = None
        ce = par = tot = 0.0
        for _ in range(train_cfg.batch_size):
            ep = sample_episode(corpus, split, "train", rng)
            parts = total_loss(ep, params, model_cfg)
            if not np.isfinite(parts.total.data):
                raise TrainingDiverged(step)
            try:
                g = ad.backward(parts.total, dict(params.items()))
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
            ce += parts.ce
            par += parts.par
            tot += float(parts.total.data)
        scale = 1.0 / train_cfg.batch_size
        for name, t in params.items():
            t.data -= lr * scale * grads[name]
        tlog.append(step, lr, ce * scale, par * scale, tot * scale)
        if progress and step % 100 == 0:
            log.info("step %d lr %.3g ce %.4f par %.4f", step, lr, ce * scale, par * scale)
        if checkpoint_dir and train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0:
            params.save(os.path.join(ensure_dir(checkpoint_dir), f"step{step + 1:06d}"))
    return params, tlog
