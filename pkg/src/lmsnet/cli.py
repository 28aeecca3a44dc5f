"""Command-line entry point: ``lmsnet <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime or numeric error,
3 self-check failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("lmsnet")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage errors here exit with 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- configuration ----------------------------------------------------------------

def _build(cls, section: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise UsageError(f"unknown {where} config keys: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {where} config: {exc}") from exc


def load_config(path, seed=None) -> dict:
    """Parse the JSON config into ModelConfig, TrainConfig, corpus config and split.

    ``seed``, when given, overrides the seed of every section.
    """
    from .data import SplitSpec, SyntheticCorpusConfig
    from .training import ModelConfig, TrainConfig

    raw = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict) or set(raw) - {"model", "train", "data"}:
            raise UsageError('config must be an object with sections "model", "train", "data"')
    data = dict(raw.get("data", {}))
    split_kw = {k: data.pop(k) for k in ("train", "test") if k in data}
    model = dict(raw.get("model", {}))
    train = dict(raw.get("train", {}))
    if seed is not None:
        model["seed"] = train["seed"] = data["seed"] = seed
    return {
        "model": _build(ModelConfig, model, "model"),
        "train": _build(TrainConfig, train, "train"),
        "data": _build(SyntheticCorpusConfig, data, "data"),
        "split": _build(SplitSpec, split_kw, "split"),
    }


def _corpus(args, cfg):
    from .data import generate_corpus, load_corpus

    if getattr(args, "data", None):
        if not os.path.exists(os.path.join(args.data, "index.json")):
            raise UsageError(f"no corpus at {args.data} (run `gen` first)")
        return load_corpus(args.data)
    return generate_corpus(cfg["data"])


def _load_model(path, cfg):
    """Params plus the ModelConfig stored next to them (falls back to ``cfg``)."""
    from .neural import ParamStore
    from .training import ModelConfig

    params_dir = os.path.join(path, "params") if os.path.isdir(os.path.join(path, "params")) else path
    if not os.path.exists(os.path.join(params_dir, "manifest.json")):
        raise UsageError(f"no parameters at {path}")
    model_cfg = cfg["model"]
    meta = os.path.join(path, "config.json")
    if os.path.exists(meta):
        with open(meta) as fh:
            model_cfg = _build(ModelConfig, json.load(fh)["model"], "model")
    return ParamStore.load(params_dir), model_cfg


def _dump_config(path, cfg):
    out = {"model": asdict(cfg["model"]), "train": asdict(cfg["train"]),
           "data": dict(asdict(cfg["data"]), **asdict(cfg["split"]))}
    with open(path, "w") as fh:
        json.dump(out, fh, indent=1, sort_keys=True)


# -- commands -------------------------------------------------------------------------

def cmd_gen(args, cfg):
    from .data import gen_corpus

    corpus = gen_corpus(cfg["data"], args.out)
    print(f"wrote {len(corpus)} instances to {args.out}")
    return EXIT_OK


def cmd_train(args, cfg):
    from .core import ensure_dir
    from .training import init_params, sgd_train

    corpus = _corpus(args, cfg)
    model_cfg, train_cfg = cfg["model"], cfg["train"]
    if args.steps is not None:
        train_cfg = replace(train_cfg, total_iterations=args.steps)
        cfg = dict(cfg, train=train_cfg)
    out = ensure_dir(args.out)
    params, tlog = sgd_train(corpus, cfg["split"], init_params(model_cfg), model_cfg, train_cfg,
                             checkpoint_dir=os.path.join(out, "checkpoints"), progress=True)
    params.save(os.path.join(out, "params"))
    tlog.write_csv(os.path.join(out, "train_log.csv"))
    _dump_config(os.path.join(out, "config.json"), cfg)
    ce = tlog.column("ce")
    tail = ce[-min(100, len(ce)):]
    print(f"trained {len(ce)} steps; mean CE over the last {len(tail)} steps {tail.mean():.4f}")
    return EXIT_OK


def cmd_eval(args, cfg):
    from .core import ensure_dir
    from .evaluation import evaluate

    corpus = _corpus(args, cfg)
    params, model_cfg = _load_model(args.params, cfg)
    seed = 0 if args.seed is None else args.seed
    table = evaluate(corpus, cfg["split"], params, model_cfg, args.episodes, seed, args.workers,
                     name=args.name)
    ensure_dir(args.out)
    table.write_csv(os.path.join(args.out, "dsc.csv"))
    with open(os.path.join(args.out, "dsc.txt"), "w") as fh:
        fh.write(table.pretty() + "\n")
    print(table.pretty())
    return EXIT_OK


def cmd_segment(args, cfg):
    from .evaluation import episode_set, segment_dump

    corpus = _corpus(args, cfg)
    params, model_cfg = _load_model(args.params, cfg)
    seed = 0 if args.seed is None else args.seed
    eps = episode_set(corpus, cfg["split"], args.index + 1, seed)
    per_class = [e for e in eps if e.class_id == (args.class_id if args.class_id is not None
                                                   else cfg["split"].test[0])]
    if not per_class:
        raise UsageError(f"class {args.class_id} is not a test class")
    summary = segment_dump(per_class[args.index], params, model_cfg, args.out)
    print(f"wrote {summary['stages'] + 1} stage dumps to {args.out}"
          + (f"; DSC {summary['dsc']:.4f}" if "dsc" in summary else ""))
    return EXIT_OK


def cmd_selfcheck(args, cfg):
    from .evaluation import format_report, selfcheck

    seed = 0 if args.seed is None else args.seed
    checks = selfcheck(seed, grad_perturb=args.perturb_grad, quick=args.quick)
    report = format_report(checks)
    print(report)
    if args.out:
        from .core import ensure_dir
        ensure_dir(args.out)
        with open(os.path.join(args.out, "selfcheck.txt"), "w") as fh:
            fh.write(report + "\n")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_CHECK


def cmd_grad_check(args, cfg):
    from .gradcheck import REGISTRY, grad_check

    ops = sorted(REGISTRY) if args.op == "all" else [args.op]
    for op in ops:
        if op not in REGISTRY:
            raise UsageError(f"unknown op {op!r}; choose from {sorted(REGISTRY)} or 'all'")
    seed = 0 if args.seed is None else args.seed
    failed = False
    for op in ops:
        err = grad_check(op, args.trials, seed, perturb=args.perturb_grad)
        ok = err <= args.tol
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'}  {op:<20s} max rel err {err:.3e} (tol {args.tol:.0e})")
    return EXIT_CHECK if failed else EXIT_OK


def _read_image(path):
    from .core import read_lmt, read_pgm

    if path.endswith(".pgm"):
        return read_pgm(path)
    return read_lmt(path)


def cmd_potts(args, cfg):
    from .core import binarize, dice, ensure_dir, write_pgm
    from .data import SHAPE_FAMILIES, make_instance
    from .solver import SolverConfig, dump_iterates, intensity_prototypes, reference_potts_solve, \
        write_energy_csv

    gt = None
    if args.image:
        image = _read_image(args.image)
        if image.ndim != 2:
            raise UsageError("potts expects a 2-D image")
    else:
        seed = 0 if args.seed is None else args.seed
        family = args.family or SHAPE_FAMILIES[0]
        if family not in SHAPE_FAMILIES:
            raise UsageError(f"unknown family {family!r}; choose from {SHAPE_FAMILIES}")
        data_cfg = replace(cfg["data"], noise_sigma=args.noise) if args.noise is not None else cfg["data"]
        image, gt = make_instance(family, data_cfg, np.random.default_rng(seed))
    # synthetic instances use the labelled means (as a support pair would give);
    # external images fall back to Otsu
    F, l = intensity_prototypes(image, gt)
    res = reference_potts_solve(F, l, SolverConfig(alpha=args.alpha), args.tv_weight, args.iters,
                                keep_iterates=args.dump_iterates)
    out = ensure_dir(args.out)
    write_energy_csv(os.path.join(out, "energy.csv"), res.energy_trace)
    mask = binarize(res.u)
    write_pgm(os.path.join(out, "mask.pgm"), mask.astype(np.float64))
    write_pgm(os.path.join(out, "image.pgm"), image)
    if args.dump_iterates:
        dump_iterates(os.path.join(out, "iterates"), res.iterates)
    msg = f"{res.iterations} iterations, final energy {res.energy_trace[-1]:.6f}"
    if gt is not None:
        msg += f", DSC {dice(mask, gt):.4f}"
    print(msg)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="JSON with optional sections model, train, data")
    common.add_argument("--seed", type=int, help="seed for all randomness (overrides the config)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = Parser(prog="lmsnet", description="Learned Mumford-Shah few-shot segmentation on synthetic data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    sp = sub.add_parser("gen", parents=[common], help="generate the synthetic corpus into --out")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", parents=[common], help="episodic SGD training")
    sp.add_argument("--data", help="corpus directory (default: generate from the config)")
    sp.add_argument("--steps", type=int, help="override train.total_iterations")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", parents=[common], help="DSC table on the test classes")
    sp.add_argument("--params", required=True, help="training output directory or params directory")
    sp.add_argument("--data")
    sp.add_argument("--episodes", type=int, default=20, help="episodes per test class")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--name", default="LMS-Net", help="row label for the model")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("segment", parents=[common], help="dump per-stage iterates for one episode")
    sp.add_argument("--params", required=True)
    sp.add_argument("--data")
    sp.add_argument("--class-id", type=int, dest="class_id")
    sp.add_argument("--index", type=int, default=0, help="episode index within the class")
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("selfcheck", parents=[common], help="run the invariant suite")
    sp.add_argument("--quick", action="store_true")
    sp.add_argument("--perturb-grad", type=float, default=0.0, dest="perturb_grad",
                    help="add this to every analytic gradient (mutation test)")
    sp.set_defaults(func=cmd_selfcheck, out=None)

    sp = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    sp.add_argument("--op", default="all")
    sp.add_argument("--trials", type=int, default=3)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--perturb-grad", type=float, default=0.0, dest="perturb_grad")
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("potts", parents=[common], help="reference TV-Potts solver on one image")
    sp.add_argument("--image", help="LMT1 or PGM image (default: a synthetic instance)")
    sp.add_argument("--family", help="shape family for the synthetic instance")
    sp.add_argument("--noise", type=float, help="noise sigma for the synthetic instance")
    sp.add_argument("--alpha", type=float, default=20.0)
    sp.add_argument("--tv-weight", type=float, default=0.5, dest="tv_weight")
    sp.add_argument("--iters", type=int, default=50)
    sp.add_argument("--dump-iterates", action="store_true", dest="dump_iterates")
    sp.set_defaults(func=cmd_potts)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"lmsnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, FloatingPointError, RuntimeError, KeyError) as exc:
        print(f"lmsnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
