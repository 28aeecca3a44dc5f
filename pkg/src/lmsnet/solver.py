"""Variational core: cosine fidelity, the closed-form mask update, the dual
update with a pluggable denoiser, energy evaluation, a TV proximal operator
and a handcrafted-prior Potts solver built from those pieces.

Functions accept numpy arrays or autodiff Tensors. Plain arrays in give plain
arrays out; any Tensor input makes the result a Tensor on the graph.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from .core import binarize, entropy_map, ensure_dir, validate_simplex, write_lmt, write_pgm


class DegeneratePrototypeError(ValueError):
    pass


class EmptyRegionError(ValueError):
    pass


class PrototypePair(NamedTuple):
    fg: object
    bg: object

    @classmethod
    def from_foreground(cls, l1):
        """Pair a foreground prototype with its negation as background."""
        return cls(l1, -l1)


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 20.0
    beta: tuple = (1.0, 1.0)
    cosine_eps: float = 1e-8

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if len(self.beta) != 2 or min(self.beta) <= 0:
            raise ValueError("beta must be a pair of positive reals")


# Denoiser: callable mapping a (H, W, 2) field to a field of the same shape.
Denoiser = Callable[[object], object]


def identity_denoiser(z):
    return z


class TVDenoiser:
    """prox of weight * TV, applied to each channel separately.

    With ``warm_start`` the dual fields of the previous call seed the next
    one; such an instance then belongs to a single solve and must not be
    shared between threads.
    """

    def __init__(self, weight: float, iters: int = 100, warm_start: bool = False):
        self.weight = weight
        self.iters = iters
        self.warm_start = warm_start
        self._duals = None

    def __call__(self, z):
        z = np.asarray(z, dtype=np.float64)
        nch = z.shape[-1]
        duals = self._duals if self.warm_start and self._duals else [None] * nch
        outs, new = [], []
        for i in range(nch):
            x, d = tv_prox_dual(z[..., i], self.weight, self.iters, duals[i])
            outs.append(x)
            new.append(d)
        if self.warm_start:
            self._duals = new
        return np.stack(outs, axis=-1)


def softplus_inverse(y: float) -> float:
    return y + math.log(-math.expm1(-y))


@dataclass
class StageParams:
    """Per-stage step size and prox surrogate. The step is softplus(delta_raw)."""
    delta_raw: object = field(default_factory=lambda: softplus_inverse(1.0))
    denoiser: Denoiser = identity_denoiser

    @classmethod
    def with_delta(cls, delta: float, denoiser: Denoiser = identity_denoiser):
        return cls(softplus_inverse(delta), denoiser)

    def delta(self):
        if ad.is_tensor(self.delta_raw):
            return ad.softplus(self.delta_raw)
        return float(np.logaddexp(0.0, self.delta_raw))


# -- fidelity and mask update -------------------------------------------------

def rho(F, l, eps: float = 1e-8):
    """Negative cosine similarity between every feature vector and ``l``."""
    Ft, lt = ad.as_tensor(F), ad.as_tensor(l)
    if Ft.shape[-1] != lt.shape[-1]:
        raise ValueError(f"feature channels {Ft.shape[-1]} != prototype dim {lt.shape[-1]}")
    l_norm = float(np.linalg.norm(lt.data))
    if not l_norm > 0:
        raise DegeneratePrototypeError("degenerate prototype")
    f_norm = ad.maximum(ad.sqrt(ad.tsum(Ft * Ft, axis=-1)), eps)
    lnorm = ad.sqrt(ad.tsum(lt * lt))
    out = -ad.tsum(Ft * lt, axis=-1) / (f_norm * lnorm)
    return ad.plain(out, F, l)


def data_consistency(F, l: PrototypePair, v, cfg: SolverConfig = SolverConfig()):
    """u = softmax(alpha * (-rho(l, x) - v(x))) over the two classes."""
    Ft = ad.as_tensor(F)
    r = ad.stack([rho(Ft, l.fg, cfg.cosine_eps), rho(Ft, l.bg, cfg.cosine_eps)], axis=-1)
    logits = (-r - ad.as_tensor(v)) * cfg.alpha
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("non-finite logits in data consistency")
    out = ad.softmax(logits, axis=-1)
    return ad.plain(out, F, l.fg, l.bg, v)


def map_pool(F, u_channel, beta: float = 1.0):
    """Masked average pooling: beta * sum_x F(x) u(x) / sum_x u(x)."""
    Ft, ut = ad.as_tensor(F), ad.as_tensor(u_channel)
    if np.any(ut.data < 0):
        raise ValueError("pooling weights must be non-negative")
    mass = float(ut.data.sum())
    if mass <= 1e-12:
        raise EmptyRegionError("empty region")
    num = ad.tsum(Ft * ad.reshape(ut, ut.shape + (1,)), axis=(0, 1))
    out = num / ad.tsum(ut) * beta
    return ad.plain(out, F, u_channel)


def dual_update(u, v_prev, stage: StageParams):
    """v = delta*u + v_prev - delta * D(u + v_prev / delta), per channel."""
    ut, vt = ad.as_tensor(u), ad.as_tensor(v_prev)
    if ut.shape != vt.shape:
        raise ValueError(f"shape mismatch: {ut.shape} vs {vt.shape}")
    delta = stage.delta()
    raw = stage.denoiser(ut + vt / delta)
    denoised = ad.as_tensor(raw)
    if denoised.shape != ut.shape:
        raise ValueError("denoiser changed the field shape")
    out = delta * ut + vt - delta * denoised
    if denoised.requires_grad:
        return out
    return ad.plain(out, u, v_prev, stage.delta_raw)


# -- energy ---------------------------------------------------------------------

def tv_anisotropic(z) -> float:
    """Sum of absolute forward differences; Neumann boundary (last difference 0)."""
    z = np.asarray(z, dtype=np.float64)
    return float(np.abs(np.diff(z, axis=0)).sum() + np.abs(np.diff(z, axis=1)).sum())


def lms_energy(F, u, l: PrototypePair, cfg: SolverConfig = SolverConfig(),
               tv_weight: float = 0.0) -> float:
    if not validate_simplex(u):
        raise ValueError("u is not a valid soft mask")
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
    F = np.asarray(F, dtype=np.float64)
    r = np.stack([rho(F, np.asarray(l.fg), cfg.cosine_eps),
                  rho(F, np.asarray(l.bg), cfg.cosine_eps)], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ulogu = np.where(u > 0, u * np.log(u), 0.0)
    total = float((u * r).sum() + ulogu.sum() / cfg.alpha)
    if tv_weight:
        total += tv_weight * (tv_anisotropic(u[..., 0]) + tv_anisotropic(u[..., 1]))
    return total


# -- TV proximal operator -------------------------------------------------------

def _grad(x):
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    gx[:-1, :] = x[1:, :] - x[:-1, :]
    gy[:, :-1] = x[:, 1:] - x[:, :-1]
    return gx, gy


def _div(px, py):
    # negative adjoint of _grad
    d = np.zeros_like(px)
    d[:-1, :] += px[:-1, :]
    d[1:, :] -= px[:-1, :]
    d[:, :-1] += py[:, :-1]
    d[:, 1:] -= py[:, :-1]
    return d


def tv_prox(z, weight: float, iters: int = 100):
    """argmin_x 0.5 ||x - z||^2 + weight * TV(x), anisotropic TV.

    Chambolle-style projected iteration on the dual field p with the box
    constraint |p_x|, |p_y| <= 1; x = z + weight * div(p).
    """
    return tv_prox_dual(z, weight, iters)[0]


def tv_prox_dual(z, weight: float, iters: int = 100, dual=None):
    """``tv_prox`` that also returns the dual field, optionally warm-started."""
    z = np.asarray(z, dtype=np.float64)
    if weight < 0:
        raise ValueError("weight must be non-negative")
    if iters < 1:
        raise ValueError("iters must be at least 1")
    if weight == 0:
        return z.copy(), (np.zeros_like(z), np.zeros_like(z))
    tau = 0.125  # 1 / ||div||^2 for 2-D forward differences
    if dual is None:
        px, py = np.zeros_like(z), np.zeros_like(z)
    else:
        px, py = dual
    # accelerated (FISTA) projected steps on the dual
    qx, qy, t = px, py, 1.0
    for _ in range(iters):
        gx, gy = _grad(_div(qx, qy) + z / weight)
        nx = np.clip(qx + tau * gx, -1.0, 1.0)
        ny = np.clip(qy + tau * gy, -1.0, 1.0)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        mom = (t - 1.0) / t_next
        qx = nx + mom * (nx - px)
        qy = ny + mom * (ny - py)
        px, py, t = nx, ny, t_next
    return z + weight * _div(px, py), (px, py)


# -- reference solver -----------------------------------------------------------

@dataclass
class PottsResult:
    u: np.ndarray
    energy_trace: list
    iterates: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.energy_trace)


def reference_potts_solve(F, l: PrototypePair, cfg: SolverConfig = SolverConfig(),
                          tv_weight: float = 0.5, outer_iters: int = 50,
                          delta: float | None = None, tol: float = 1e-5,
                          prox_iters: int = 100, keep_iterates: bool = False) -> PottsResult:
    """Alternate the closed-form mask update with a TV-prox dual update.

    ``delta`` defaults to 1/alpha, inside the step bound for which the dual
    iteration is a convergent proximal-gradient ascent.
    """
    if outer_iters < 1:
        raise ValueError("outer_iters must be at least 1")
    F = np.asarray(F, dtype=np.float64)
    l = PrototypePair(np.asarray(l.fg, dtype=np.float64), np.asarray(l.bg, dtype=np.float64))
    delta = 1.0 / cfg.alpha if delta is None else delta
    if tv_weight > 0:
        stage = StageParams.with_delta(delta, TVDenoiser(tv_weight / delta, prox_iters, warm_start=True))
    else:
        stage = StageParams.with_delta(delta)
    v = np.zeros(F.shape[:2] + (2,))
    u_prev = None
    trace, iterates = [], []
    for _ in range(outer_iters):
        u = data_consistency(F, l, v, cfg)
        trace.append(lms_energy(F, u, l, cfg, tv_weight))
        v = dual_update(u, v, stage)
        if keep_iterates:
            iterates.append((u, v))
        if u_prev is not None and np.max(np.abs(u - u_prev)) < tol:
            break
        u_prev = u
    return PottsResult(u, trace, iterates)


def intensity_features(image, center: float, softness: float = 0.05):
    """Two-channel embedding (I - center, softness) for classical solves.

    With the prototypes from ``intensity_prototypes`` the cosine fidelity is
    a smooth sign of I - center.
    """
    image = np.asarray(image, dtype=np.float64)
    return np.stack([image - center, np.full_like(image, softness)], axis=-1)


def intensity_threshold(image, mask=None) -> tuple:
    """(center, sign) separating foreground from background intensities.

    With a mask the center is the midpoint of the two region means and the sign
    says whether the foreground is the brighter side; without one it is Otsu's
    threshold with a bright foreground.
    """
    image = np.asarray(image, dtype=np.float64)
    if mask is None:
        from skimage.filters import threshold_otsu
        return float(threshold_otsu(image)), 1.0
    m = np.asarray(mask).astype(bool)
    fg = image[m].mean()
    bg = image[~m].mean() if (~m).any() else 0.0
    return float(0.5 * (fg + bg)), (1.0 if fg >= bg else -1.0)


def intensity_prototypes(image, mask=None, softness: float = 0.05, threshold=None):
    """Features and a fixed prototype pair for a greyscale image.

    ``threshold`` is a (center, sign) pair, by default taken from
    ``intensity_threshold(image, mask)``.
    """
    center, sign = intensity_threshold(image, mask) if threshold is None else threshold
    l1 = np.array([sign, 0.0])
    return intensity_features(image, center, softness), PrototypePair(l1, -l1)


# -- exports --------------------------------------------------------------------

def write_energy_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "energy"])
        for i, e in enumerate(trace):
            w.writerow([i, repr(float(e))])


def dump_iterates(out_dir, iterates) -> list:
    """Write u^k, v^k and E(u^k) for each iterate as LMT1 plus PGM previews."""
    ensure_dir(out_dir)
    written = []
    for k, (u, v) in enumerate(iterates):
        u, v = np.asarray(u), np.asarray(v)
        ent = entropy_map(u)
        files = {
            f"u_{k:03d}.lmt": u, f"v_{k:03d}.lmt": v, f"entropy_{k:03d}.lmt": ent,
        }
        for name, arr in files.items():
            write_lmt(os.path.join(out_dir, name), arr)
        write_pgm(os.path.join(out_dir, f"u1_{k:03d}.pgm"), binarize(u))
        write_pgm(os.path.join(out_dir, f"v1_{k:03d}.pgm"), minmax(v[..., 0]))
        write_pgm(os.path.join(out_dir, f"entropy_{k:03d}.pgm"), ent / math.log(2.0))
        written.extend(files)
    return written


def minmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    span = x.max() - x.min()
    if span <= 0:
        return np.zeros_like(x)
    return (x - x.min()) / span
