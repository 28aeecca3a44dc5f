"""Few-shot initialisation: support prototypes, the initial query mask,
Voronoi partitioning of the support foreground and representative
prototypes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .core import downsample_mask
from .solver import EmptyRegionError, PrototypePair, SolverConfig, data_consistency, map_pool


class VanishingMaskError(ValueError):
    pass


@dataclass(frozen=True)
class Episode:
    support_image: np.ndarray
    support_mask: np.ndarray
    query_image: np.ndarray
    query_gt: Optional[np.ndarray] = None
    class_id: int = 0

    def __post_init__(self):
        shape = np.shape(self.support_image)
        others = [self.support_mask, self.query_image]
        if self.query_gt is not None:
            others.append(self.query_gt)
        if any(np.shape(a) != shape for a in others):
            raise ValueError("episode images and masks must share one shape")
        if not np.any(self.support_mask):
            raise ValueError("support mask is empty")


def support_prototypes(F_s, u_s) -> PrototypePair:
    """Foreground prototype of the support image, paired with its negation."""
    shape = ad.as_tensor(F_s).shape[:2]
    fg = downsample_mask(u_s, shape)
    if not fg.any():
        raise VanishingMaskError("support mask vanishes at feature scale")
    l1 = map_pool(F_s, fg.astype(np.float64), 1.0)
    return PrototypePair(l1, -l1)


def init_mask(F_q, l0: PrototypePair, cfg: SolverConfig = SolverConfig()):
    zero = np.zeros(ad.as_tensor(F_q).shape[:2] + (2,))
    return data_consistency(F_q, l0, zero, cfg)


def voronoi_partition(mask, n_regions: int, rng_seed: int = 0) -> np.ndarray:
    """Split the foreground into ``n_regions`` Euclidean Voronoi cells.

    Seeds come from farthest-point sampling, starting at the foreground pixel
    closest to the centroid; ties between equally far candidates are broken
    by a generator seeded with ``rng_seed``. Background pixels get -1.
    """
    mask = np.asarray(mask).astype(bool)
    if n_regions < 1:
        raise ValueError("n_regions must be at least 1")
    pts = np.argwhere(mask).astype(np.float64)
    if len(pts) < n_regions:
        raise ValueError("too few pixels")
    rng = np.random.default_rng(rng_seed)

    def pick(scores, best):
        cands = np.flatnonzero(np.abs(scores - best) <= 1e-9)
        return int(cands[0]) if len(cands) == 1 else int(rng.choice(cands))

    d_centroid = ((pts - pts.mean(axis=0)) ** 2).sum(axis=1)
    seeds = [pick(d_centroid, d_centroid.min())]
    nearest = ((pts - pts[seeds[0]]) ** 2).sum(axis=1)
    while len(seeds) < n_regions:
        seeds.append(pick(nearest, nearest.max()))
        nearest = np.minimum(nearest, ((pts - pts[seeds[-1]]) ** 2).sum(axis=1))

    d = ((pts[:, None, :] - pts[None, seeds, :]) ** 2).sum(axis=2)
    labels = np.full(mask.shape, -1, dtype=np.int64)
    labels[mask] = d.argmin(axis=1)
    return labels


def representative_prototypes(F_s, labels):
    """One MAP prototype per Voronoi region, stacked into an (N_p, C) bank.

    Labels at image resolution are downsampled per region to the feature
    grid; regions that vanish there are dropped.
    """
    F = ad.as_tensor(F_s)
    labels = np.asarray(labels)
    rows = []
    for j in range(int(labels.max()) + 1):
        region = downsample_mask(labels == j, F.shape[:2])
        if not region.any():
            continue
        try:
            rows.append(map_pool(F, region.astype(np.float64), 1.0))
        except EmptyRegionError:
            continue
    if not rows:
        raise VanishingMaskError("every region vanishes at feature scale")
    return ad.plain(ad.stack(rows, axis=0), F_s)
