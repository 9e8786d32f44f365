"""Command-line driver.

    crossmas phantom  --out DIR [--config phantom.json] [--seed N]
    crossmas register --config pipeline.json --out DIR [--jobs N] [--lambda F]
    crossmas train-sim --config train_pipeline.json --out DIR
    crossmas fuse     --config pipeline.json --out DIR --fusion METHOD [--model PATH] [--patch R]
    crossmas eval     --pred PRED.mvol --gold GOLD.mvol --out DIR
    crossmas sweep    --config pipeline.json --out DIR --fusion METHOD [--n 1,2,3]

Exit codes: 0 success, 1 bad input or I/O failure, 3 a registration diverged
(outputs of the other jobs are kept).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .io import atomic_write_text, read_volume
from .metrics import evaluate_segmentation
from .phantom import PhantomConfig
from .registration import RegistrationConfig

log = logging.getLogger("crossmas")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 3


def _load_json(path):
    return json.loads(Path(path).read_text()) if path else {}


def _pipeline(args):
    model = getattr(args, "model", None)
    # command-line paths are relative to the working directory, config paths to the config file
    overrides = {"jobs": args.jobs, "fusion": getattr(args, "fusion", None),
                 "model": str(Path(model).absolute()) if model else None, "patch": getattr(args, "patch", None)}
    cfg = pipeline.PipelineConfig.load(args.config, **overrides)
    if args.lam is not None or args.seed is not None:
        reg = cfg.registration
        cfg.registration = replace(reg, lam=reg.lam if args.lam is None else args.lam,
                                   seed=reg.seed if args.seed is None else args.seed)
    return cfg


def cmd_phantom(args):
    d = _load_json(args.config)
    phantom = PhantomConfig.from_dict(d.get("phantom", {}))
    seed = args.seed if args.seed is not None else d.get("seed", 0)
    reg = RegistrationConfig.from_dict(d.get("registration", {}))
    if args.lam is not None:
        reg = replace(reg, lam=args.lam)
    counts = {"n_atlases": d.get("n_atlases", 10), "n_targets": d.get("n_targets", 1),
              "n_train_targets": d.get("n_train_targets", 0)}
    seeds = pipeline.make_cohort(args.out, phantom, seed=seed, registration=reg, **counts)
    config = {"phantom": phantom.to_dict(), "seed": seed, "registration": reg.to_dict(), **counts}
    pipeline.write_manifest(args.out, "phantom", config, seeds)
    log.info("wrote %d subjects to %s", len(seeds), args.out)
    return EXIT_OK


def cmd_register(args):
    cfg = _pipeline(args)
    rows, n_diverged = pipeline.run_registration(cfg, args.out)
    pipeline.write_manifest(args.out, "register", cfg.to_dict(), [cfg.registration.seed])
    for r in rows:
        if r["status"] != "ok":
            log.error("%s -> %s diverged at iteration %s", r["atlas"], r["target"], r["iteration"])
    return EXIT_DIVERGED if n_diverged else EXIT_OK


def cmd_train_sim(args):
    cfg = _pipeline(args)
    result = pipeline.run_training(cfg, args.out)
    pipeline.write_manifest(args.out, "train-sim", cfg.to_dict(), [cfg.registration.seed])
    log.info("cross-entropy %.6f -> %.6f", result.trace[0], result.trace[-1])
    return EXIT_OK


def cmd_fuse(args):
    cfg = _pipeline(args)
    report = pipeline.run_fusion(cfg, args.out)
    pipeline.write_manifest(args.out, f"fuse_{cfg.fusion}", cfg.to_dict(), [cfg.registration.seed])
    log.info("%s mean DS %.3f", cfg.fusion, report.mean("ds"))
    return EXIT_OK


def cmd_sweep(args):
    cfg = _pipeline(args)
    n_list = [int(v) for v in args.n.split(",")] if args.n else list(range(1, len(cfg.atlases) + 1))
    rows = pipeline.run_sweep(cfg, args.out, n_list)
    pipeline.write_manifest(args.out, f"sweep_{cfg.fusion}", dict(cfg.to_dict(), n_list=n_list),
                            [cfg.registration.seed])
    for n, mean, std in rows:
        log.info("n=%d DS %.3f +- %.3f", n, mean, std)
    return EXIT_OK


def cmd_eval(args):
    pred, gold = read_volume(args.pred), read_volume(args.gold)
    report = evaluate_segmentation(pred, gold, case=Path(args.pred).stem)
    out = Path(args.out)
    atomic_write_text(out / "report.csv", report.to_csv())
    atomic_write_text(out / "report.json", report.to_json())
    pipeline.write_manifest(out, "eval", {"pred": Path(args.pred).name, "gold": Path(args.gold).name}, [])
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="crossmas", description="Cross-modality multi-atlas segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=None, help="parallel registration jobs")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--lambda", dest="lam", type=float, default=None,
                       help="consistency weight (default 0.1)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("phantom", help="generate a phantom cohort"), needs_config=False) \
        .set_defaults(func=cmd_phantom)
    common(sub.add_parser("register", help="register every atlas to every target")).set_defaults(func=cmd_register)
    common(sub.add_parser("train-sim", help="train the similarity model")).set_defaults(func=cmd_train_sim)
    for name, func in (("fuse", cmd_fuse), ("sweep", cmd_sweep)):
        p = common(sub.add_parser(name))
        p.add_argument("--fusion", choices=pipeline.FUSION_METHODS, default=None)
        p.add_argument("--model", default=None, help="similarity model JSON (lwf-learned)")
        p.add_argument("--patch", type=int, default=None, help="patch radius for oracle weights (1 -> 3^3)")
        p.set_defaults(func=func)
        if name == "sweep":
            p.add_argument("--n", default=None, help="comma-separated atlas counts (default 1..N)")
    p = sub.add_parser("eval", help="evaluate a segmentation against a gold label")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
