"""Analytic-vs-central-difference gradient checks for the trainable ops."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .neural import (MaskDenoiser, MDWeights, MUTWeights, ParamStore, feature_extract, init_backbone,
                     init_md, init_mut, md_forward, mut_forward)
from .proto import Episode
from .solver import PrototypePair, SolverConfig, StageParams, data_consistency, dual_update, \
    map_pool, rho, softplus_inverse

FD_STEP = 1e-5
# a ReLU pre-activation closer to zero than the step makes the difference
# straddle a kink; such entries are re-measured with a smaller step
KINK_REFINE = 10.0
MAX_ENTRIES_PER_TENSOR = 6


@dataclass
class Problem:
    """Scalar objective over named leaves; ``build`` maps leaves to a loss Tensor."""
    leaves: ParamStore
    build: object


class _Readout:
    """Fixed random linear functional turning an array-valued op into a scalar.

    Weights are regenerated from the same seed on every call, so repeated
    builds of a problem see the same functional.
    """

    def __init__(self, rng):
        self.seed = int(rng.integers(1 << 31))

    def __call__(self, out, salt=0):
        out = ad.as_tensor(out)
        weights = np.random.default_rng((self.seed, salt)).normal(size=out.shape)
        return ad.tsum(out * weights)


def _leaves(**arrays) -> ParamStore:
    store = ParamStore()
    for k, v in arrays.items():
        store.add(k, v)
    return store


def _rho_problem(rng):
    L = _leaves(F=rng.normal(size=(4, 5, 6)), l=rng.normal(size=6))
    ro = _Readout(rng)
    return Problem(L, lambda P: ro(rho(P["F"], P["l"])))


def _dc_problem(rng):
    L = _leaves(F=rng.normal(size=(4, 4, 5)), l1=rng.normal(size=5), l2=rng.normal(size=5),
                v=0.1 * rng.normal(size=(4, 4, 2)))
    cfg = SolverConfig(alpha=float(rng.uniform(1.0, 5.0)))
    ro = _Readout(rng)
    return Problem(L, lambda P: ro(data_consistency(P["F"], PrototypePair(P["l1"], P["l2"]), P["v"], cfg)))


def _map_problem(rng):
    L = _leaves(F=rng.normal(size=(4, 4, 3)), u=rng.uniform(0.1, 1.0, size=(4, 4)))
    ro = _Readout(rng)
    return Problem(L, lambda P: ro(map_pool(P["F"], P["u"], 1.0)))


def _jitter_biases(store, rng, scale=0.1):
    """Zero-initialised biases put ReLU inputs exactly on the kink wherever a
    receptive field is all-dead; random biases move the check to a generic point."""
    for name, t in store.items():
        if name.endswith((".b", ".bq", ".bv", ".bo", ".b1", ".b2")):
            t.data[:] = scale * rng.normal(size=t.shape)


def _md_weights(rng, store, prefix="md", variant="c", hidden=6):
    init_md(store, rng, prefix, hidden, zero_last=False)
    _jitter_biases(store, rng)
    return MDWeights.from_store(store, prefix, variant)


def _md_problem(rng, variant="c"):
    store = ParamStore()
    store.add("u", rng.uniform(0.05, 0.95, size=(6, 6)))
    w = _md_weights(rng, store, variant=variant)
    ro = _Readout(rng)
    return Problem(store, lambda P: ro(md_forward(P["u"], w)))


def _dual_problem(rng):
    store = ParamStore()
    store.add("u", rng.uniform(0.05, 0.95, size=(5, 5, 2)))
    store.add("v_prev", 0.1 * rng.normal(size=(5, 5, 2)))
    store.add("delta_raw", np.array(softplus_inverse(float(rng.uniform(0.5, 2.0)))))
    w = _md_weights(rng, store)
    ro = _Readout(rng)

    def build(P):
        stage = StageParams(P["delta_raw"], MaskDenoiser(w))
        return ro(dual_update(P["u"], P["v_prev"], stage))

    return Problem(store, build)


def _mut_problem(rng):
    store = ParamStore()
    C = 8
    store.add("p", rng.normal(size=(5, C)))
    store.add("l1", rng.normal(size=C))
    init_mut(store, rng, "mut", C, heads=2)
    _jitter_biases(store, rng)
    for i in (1, 2, 3):
        store[f"mut.ln{i}.g"].data[:] = rng.uniform(0.5, 1.5, C)
    ro = _Readout(rng)

    def build(P):
        p, l = mut_forward(P["p"], P["l1"], MUTWeights.from_store(P, "mut", heads=2))
        return ro(p) + ro(l.fg, salt=1)

    return Problem(store, build)


def _feature_problem(rng):
    store = ParamStore()
    init_backbone(store, rng, (4, 6, 5))
    _jitter_biases(store, rng)
    img = rng.uniform(size=(8, 8))
    ro = _Readout(rng)
    return Problem(store, lambda P: ro(feature_extract(img, P)))


def _tiny_episode(rng, size=16):
    yy, xx = np.mgrid[0:size, 0:size]

    def blob():
        cy, cx = rng.uniform(0.4, 0.6, size=2) * size
        r = rng.uniform(0.28, 0.35) * size
        m = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8)
        img = np.clip(0.25 + 0.5 * m + 0.1 * rng.normal(size=m.shape), 0, 1)
        return img, m

    (si, sm), (qi, qm) = blob(), blob()
    return Episode(si, sm, qi, qm, 0)


def _model_problem(rng, which="total", flms=False):
    from .training import ModelConfig, ce_loss, init_params, lms_forward, par_loss, total_loss

    cfg = ModelConfig(stages=2, flms_mode=flms, n_p=3, channels=4, backbone_channels=(3, 4),
                      md_hidden=3, mut_heads=2, mut_mlp_ratio=2, md_zero_init=False, alpha=4.0,
                      seed=int(rng.integers(1 << 31)))
    params = init_params(cfg)
    _jitter_biases(params, rng, 0.05)
    for name, t in params.items():
        if name.endswith("md.conv5.w"):
            t.data *= 0.3
    ep = _tiny_episode(rng)

    def build(P):
        if which == "total":
            return total_loss(ep, P, cfg).total
        fwd = lms_forward(ep, P, cfg)
        if which == "ce":
            return ce_loss(fwd.u, ep.query_gt)
        return par_loss(ep, fwd.F_s, fwd.F_q, fwd.u, cfg)

    return Problem(params, build)


REGISTRY = {
    "rho": _rho_problem,
    "data_consistency": _dc_problem,
    "map_pool": _map_problem,
    "md_forward": _md_problem,
    "md_forward_a": lambda rng: _md_problem(rng, "a"),
    "md_forward_b": lambda rng: _md_problem(rng, "b"),
    "dual_update": _dual_problem,
    "mut_forward": _mut_problem,
    "feature_extract": _feature_problem,
    "ce_loss": lambda rng: _model_problem(rng, "ce"),
    "par_loss": lambda rng: _model_problem(rng, "par"),
    "total_loss": lambda rng: _model_problem(rng, "total"),
    "total_loss_flms": lambda rng: _model_problem(rng, "total", flms=True),
}


def relative_error(a, n) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def central_difference(problem: Problem, flat, i, step: float = FD_STEP,
                       extended: bool = True) -> float:
    """(L(w + h e_i) - L(w - h e_i)) / 2h for one entry of a leaf.

    With ``extended`` the two forward passes run in long double so that
    rounding in the loss does not swamp small gradient entries; the analytic
    side is always float64.
    """
    orig = flat[i]
    ctx = ad.extended_precision() if extended else contextlib.nullcontext()
    with ctx:
        flat[i] = orig + step
        up = problem.build(problem.leaves).data
        flat[i] = orig - step
        down = problem.build(problem.leaves).data
    flat[i] = orig
    hp = np.longdouble(orig + step) - np.longdouble(orig - step)
    return float((up - down) / hp)


def check_problem(problem: Problem, rng, perturb: float = 0.0,
                  max_entries: int = MAX_ENTRIES_PER_TENSOR, step: float = FD_STEP,
                  extended: bool = True) -> float:
    """Worst relative error over sampled entries of every leaf tensor.

    An entry that misses at ``step`` is measured again at ``step / KINK_REFINE``
    and keeps the better of the two.
    """
    P = problem.leaves
    loss = problem.build(P)
    grads = ad.backward(loss, dict(P.items()))
    worst = 0.0
    for name, t in P.items():
        flat = t.data.reshape(-1)
        g = grads[name].reshape(-1) + perturb
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            err = relative_error(g[i], central_difference(problem, flat, i, step, extended))
            if err > 1e-6:
                # a wrong gradient is wrong at every step; a kink crossing is not
                fine = central_difference(problem, flat, i, step / KINK_REFINE, extended)
                err = min(err, relative_error(g[i], fine))
            worst = max(worst, err)
    return worst


def grad_check(op_name: str, trial_count: int = 3, seed: int = 0, perturb: float = 0.0,
               max_entries: int = MAX_ENTRIES_PER_TENSOR, extended: bool = True) -> float:
    """Worst relative error of analytic vs central-difference gradients.

    ``perturb`` is added to every analytic gradient entry; it exists so the
    check itself can be shown to catch a wrong gradient. ``max_entries`` caps
    the entries compared per parameter tensor (drawn at random); None compares
    every entry.
    """
    if op_name not in REGISTRY:
        raise KeyError(f"unknown op {op_name!r}; known: {sorted(REGISTRY)}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trial_count):
        worst = max(worst, check_problem(REGISTRY[op_name](rng), rng, perturb, max_entries,
                                         extended=extended))
    return worst
