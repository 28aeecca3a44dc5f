"""Episode benchmark, DSC tables, iterate dumps and the invariant self-check."""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .core import binarize, dice, downsample_mask, ensure_dir, entropy_map, write_lmt, write_pgm
from .data import Corpus, SplitSpec
from .neural import ParamStore
from .proto import Episode
from .solver import SolverConfig, intensity_prototypes, intensity_threshold, minmax, \
    reference_potts_solve
from .training import ModelConfig, lms_forward

# -- episode sets ---------------------------------------------------------------


def episode_set(corpus: Corpus, split: SplitSpec, episodes_per_class: int, seed: int = 0) -> list:
    """Fixed episode list: for each test class, ``episodes_per_class`` ordered
    (support, query) pairs of distinct instances drawn from a per-class stream."""
    members = corpus.by_class()
    out = []
    for c in split.test:
        idx = members.get(c, [])
        if len(idx) < 2:
            raise ValueError(f"class {c} has fewer than two instances")
        rng = np.random.default_rng([seed, c])
        for _ in range(episodes_per_class):
            s, q = rng.choice(len(idx), size=2, replace=False)
            s, q = idx[int(s)], idx[int(q)]
            out.append(Episode(corpus.images[s], corpus.masks[s], corpus.images[q],
                               corpus.masks[q], int(c)))
    return out


def _feature_dice(u, gt) -> float:
    pred = binarize(u)
    return dice(pred, downsample_mask(gt, pred.shape))


def model_episode_dsc(ep: Episode, params: ParamStore, cfg: ModelConfig) -> tuple:
    """(model DSC, prototype-baseline DSC) at feature resolution."""
    fwd = lms_forward(ep, params, cfg)
    return _feature_dice(np.asarray(fwd.u), ep.query_gt), _feature_dice(np.asarray(fwd.u0), ep.query_gt)


def potts_episode_dsc(ep: Episode, tv_weight: float = 0.5, alpha: float = 20.0,
                      outer_iters: int = 50) -> float:
    """Classical baseline: intensity threshold from the support pair, reference
    solver on the query image, scored at the network's feature resolution."""
    thr = intensity_threshold(ep.support_image, ep.support_mask)
    F, l = intensity_prototypes(ep.query_image, threshold=thr)
    res = reference_potts_solve(F, l, SolverConfig(alpha=alpha), tv_weight, outer_iters, prox_iters=30)
    h, w = ep.query_gt.shape
    pred = downsample_mask(binarize(res.u), (h // 4, w // 4))
    return dice(pred, downsample_mask(ep.query_gt, pred.shape))


# -- tables ---------------------------------------------------------------------

@dataclass
class DSCTable:
    """Rows of per-class mean DSC (in percent) plus the Mean column."""
    classes: tuple
    rows: list = field(default_factory=list)  # (name, {class: dsc}, mean)

    def add(self, name: str, per_episode: list, class_ids: list):
        per_class = {}
        for c in self.classes:
            vals = [d for d, k in zip(per_episode, class_ids) if k == c]
            per_class[c] = 100.0 * float(np.mean(vals))
        mean = float(np.mean(list(per_class.values())))
        self.rows.append((name, per_class, mean))

    def row(self, name) -> tuple:
        for r in self.rows:
            if r[0] == name:
                return r
        raise KeyError(name)

    def mean(self, name) -> float:
        return self.row(name)[2]

    def header(self) -> list:
        return ["method"] + [f"class{c}" for c in self.classes] + ["Mean"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for name, per_class, mean in self.rows:
            w.writerow([name] + [f"{per_class[c]:.4f}" for c in self.classes] + [f"{mean:.4f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def pretty(self) -> str:
        head = self.header()
        body = [[name] + [f"{pc[c]:.2f}" for c in self.classes] + [f"{m:.2f}"]
                for name, pc, m in self.rows]
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
        fmt = lambda r: "  ".join(x.ljust(wd) if i == 0 else x.rjust(wd)
                                  for i, (x, wd) in enumerate(zip(r, widths)))
        lines = [fmt(head), "-" * len(fmt(head))] + [fmt(r) for r in body]
        return "\n".join(lines)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))  # preserves input order


def evaluate(corpus: Corpus, split: SplitSpec, params: ParamStore, model_cfg: ModelConfig,
             episodes_per_class: int = 20, seed: int = 0, workers: int = 1,
             name: str = "LMS-Net", include_baselines: bool = True,
             potts_tv_weight: float = 0.5) -> DSCTable:
    """Per-test-class mean DSC over a seeded episode set.

    Rows: the classical Potts baseline, the prototype baseline (init_mask with
    the model's own features) and the model. Forward passes are pure, so the
    episodes may be spread over threads without changing the result.
    """
    eps = episode_set(corpus, split, episodes_per_class, seed)
    ids = [e.class_id for e in eps]
    table = DSCTable(tuple(split.test))
    scores = _map(lambda e: model_episode_dsc(e, params, model_cfg), eps, workers)
    if include_baselines:
        potts = _map(lambda e: potts_episode_dsc(e, potts_tv_weight, model_cfg.alpha), eps, workers)
        table.add("Potts (classical)", potts, ids)
        table.add("Prototype (init)", [s[1] for s in scores], ids)
    table.add(name, [s[0] for s in scores], ids)
    return table


# -- iterate dumps ----------------------------------------------------------------

def segment_dump(episode: Episode, params: ParamStore, model_cfg: ModelConfig, out_dir) -> dict:
    """Write per-stage mask, dual field and entropy images.

    Stage 0 is the initialisation (zero dual field). Files per stage k:
    ``stage{k}_mask.pgm``, ``stage{k}_v1.lmt``, ``stage{k}_v1.pgm`` (min-max
    scaled), ``stage{k}_entropy.pgm`` (255 at ln 2). Also ``final_mask.pgm``
    and ``summary.json`` with the DSC when ground truth is present.
    """
    ensure_dir(out_dir)
    fwd = lms_forward(episode, params, model_cfg)
    u0 = np.asarray(fwd.u0)
    iterates = [(u0, np.zeros_like(u0))]
    iterates += [(np.asarray(s.u), np.asarray(s.v)) for s in fwd.stages]
    files = []
    for k, (u, v) in enumerate(iterates):
        paths = {
            "mask": os.path.join(out_dir, f"stage{k}_mask.pgm"),
            "v1_lmt": os.path.join(out_dir, f"stage{k}_v1.lmt"),
            "v1": os.path.join(out_dir, f"stage{k}_v1.pgm"),
            "entropy": os.path.join(out_dir, f"stage{k}_entropy.pgm"),
        }
        write_pgm(paths["mask"], binarize(u).astype(np.float64))
        write_lmt(paths["v1_lmt"], v[..., 0])
        write_pgm(paths["v1"], minmax(v[..., 0]))
        write_pgm(paths["entropy"], entropy_map(u) / np.log(2.0))
        files.append(paths)
    final = binarize(iterates[-1][0])
    write_pgm(os.path.join(out_dir, "final_mask.pgm"), final.astype(np.float64))
    summary = {"stages": len(iterates) - 1, "files": files}
    if episode.query_gt is not None:
        summary["dsc"] = dice(final, downsample_mask(episode.query_gt, final.shape))
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary


# -- MD variant ablation ------------------------------------------------------------

def md_ablation(corpus: Corpus, split: SplitSpec, model_cfg: ModelConfig, train_cfg,
                episodes_per_class: int = 20, seed: int = 0, workers: int = 1,
                trained: dict | None = None) -> DSCTable:
    """Train and evaluate one model per MD variant (a, b, c).

    ``trained`` may map a variant to already-trained params to skip its run.
    """
    from .training import init_params, sgd_train

    trained = dict(trained or {})
    table = None
    labels = {"a": "(a) CNN", "b": "(b) CNN+Sigmoid", "c": "(c) CNN+logit skip+Sigmoid"}
    for variant in ("a", "b", "c"):
        cfg = replace(model_cfg, md_variant=variant)
        if variant not in trained:
            params, _ = sgd_train(corpus, split, init_params(cfg), cfg, train_cfg)
            trained[variant] = params
        t = evaluate(corpus, split, trained[variant], cfg, episodes_per_class, seed, workers,
                     name=labels[variant], include_baselines=False)
        if table is None:
            table = t
        else:
            table.rows.extend(t.rows)
    return table


# -- self-check ---------------------------------------------------------------------

@dataclass
class Check:
    name: str
    tolerance: float
    observed: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<44s} tol={self.tolerance:.1e}  observed={self.observed:.3e}"


def _dc_grid_error(rng, n_pixels=100, alphas=(1.0, 5.0, 20.0), step=1e-3) -> float:
    """Worst gap between the closed-form mask update and a grid search of the
    per-pixel objective u.c + (1/alpha) u ln u over the two-class simplex."""
    from .solver import PrototypePair, data_consistency, rho

    grid = np.arange(0.0, 1.0 + step / 2, step)
    U = np.stack([grid, 1.0 - grid], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(U > 0, U * np.log(U), 0.0).sum(-1)
    worst = 0.0
    for alpha in alphas:
        F = rng.normal(size=(1, n_pixels, 4))
        l = PrototypePair(rng.normal(size=4), rng.normal(size=4))
        v = 0.3 * rng.normal(size=(1, n_pixels, 2))
        u = data_consistency(F, l, v, SolverConfig(alpha=alpha))[0]
        c = np.stack([rho(F, l.fg)[0], rho(F, l.bg)[0]], -1) + v[0]
        for x in range(n_pixels):
            obj = U @ c[x] + ent / alpha
            worst = max(worst, abs(grid[int(np.argmin(obj))] - u[x, 0]))
    return worst


def selfcheck(seed: int = 0, grad_perturb: float = 0.0, quick: bool = False) -> list:
    """Run the invariant suite; returns a list of Check records."""
    from .core import validate_simplex
    from .gradcheck import grad_check
    from .solver import PrototypePair, StageParams, data_consistency, dual_update
    from .data import SyntheticCorpusConfig, make_instance

    rng = np.random.default_rng(seed)
    checks = []

    # simplex
    worst = 0.0
    for _ in range(20):
        F = rng.normal(size=(6, 6, 5))
        u = data_consistency(F, PrototypePair(rng.normal(size=5), rng.normal(size=5)),
                             rng.normal(size=(6, 6, 2)), SolverConfig(alpha=float(rng.uniform(1, 50))))
        ok = validate_simplex(u)
        worst = max(worst, float(np.max(np.abs(u.sum(-1) - 1.0))) if ok else np.inf)
    checks.append(Check("DC output on the simplex", 1e-9, worst, worst <= 1e-9))

    err = _dc_grid_error(rng, 30 if quick else 100)
    checks.append(Check("DC vs grid-search minimiser", 1e-3, err, err <= 1e-3))

    worst = 0.0
    for _ in range(50):
        u1 = rng.uniform(size=(5, 5))
        u = np.stack([u1, 1 - u1], -1)
        v = dual_update(u, rng.normal(size=(5, 5, 2)), StageParams.with_delta(float(rng.uniform(0.1, 5))))
        worst = max(worst, float(np.max(np.abs(v))))
    checks.append(Check("identity denoiser gives zero dual", 1e-12, worst, worst <= 1e-12))

    worst_up = 0.0
    cfg = SyntheticCorpusConfig(noise_sigma=0.15)
    for i in range(3 if quick else 10):
        img, _ = make_instance("ellipse", cfg, rng)
        F, l = intensity_prototypes(img)
        tr = np.array(reference_potts_solve(F, l, SolverConfig(), 0.5, 60, prox_iters=30, tol=0).energy_trace)
        worst_up = max(worst_up, float(np.max(np.diff(tr[2:]), initial=0.0)))
    checks.append(Check("Potts energy non-increasing", 1e-6, worst_up, worst_up <= 1e-6))

    ops = ["data_consistency", "map_pool", "md_forward", "dual_update", "mut_forward",
           "feature_extract", "par_loss", "total_loss", "total_loss_flms"]
    for op in ops:
        trials = 1 if quick or op.startswith(("total", "par")) else 3
        e = grad_check(op, trials, seed, perturb=grad_perturb)
        checks.append(Check(f"grad check {op}", 1e-4, e, e <= 1e-4))
    return checks


def format_report(checks: list) -> str:
    n_fail = sum(not c.passed for c in checks)
    lines = [c.line() for c in checks]
    lines.append(f"{len(checks) - n_fail}/{len(checks)} checks passed")
    return "\n".join(lines)
