"""Command-line interface: each pipeline stage independently invokable.

Verbs: phantom, init, partition, classify, stitch, run, report. Exit codes:
0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import kfda, phantom, pipeline, stitch, volume as vol_io
from .partition import partition as build_partition

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

VERBS = ("phantom", "init", "partition", "classify", "stitch", "run", "report")


def _add_common(sub, suppress=True):
    default = argparse.SUPPRESS if suppress else None
    sub.add_argument("--config", type=str, default=default,
                     help="pipeline config JSON")
    sub.add_argument("--out", type=str, default=default,
                     help="output directory (overrides config)")
    sub.add_argument("--workers", type=int, default=default,
                     help="worker pool size (overrides config)")
    sub.add_argument("--seed", type=int, default=default,
                     help="root RNG seed (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kfdaseg",
        description="Local semi-supervised tissue classification pipeline")
    parser.add_argument("--stage", choices=VERBS,
                        help="alternative to the positional verb")
    _add_common(parser, suppress=False)
    parser.add_argument("--plots", action="store_true", default=False)
    sub = parser.add_subparsers(dest="verb")

    p = sub.add_parser("phantom", help="generate a synthetic volume + ground truth")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dims", type=int, nargs=3, default=(64, 64, 64))
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--bias", type=float, default=0.1)
    p.add_argument("--blur", type=float, default=1.0)
    p.add_argument("--geometry", choices=("shells", "blocks"), default="shells")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("init", help="k-means initial labels for a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True, help="output label file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-boundary", type=float, default=0.0,
                   help="fraction of boundary voxels to corrupt")

    for verb in ("partition", "classify", "stitch", "run", "report"):
        p = sub.add_parser(verb)
        _add_common(p)
        if verb == "report":
            p.add_argument("--plots", action="store_true", default=argparse.SUPPRESS)

    return parser


def _load_config(args) -> pipeline.PipelineConfig:
    if args.config:
        cfg = pipeline.PipelineConfig.from_json(args.config)
    else:
        cfg = pipeline.PipelineConfig()
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def cmd_phantom(args) -> int:
    out = Path(args.out)
    spec = phantom.PhantomSpec(dims=tuple(args.dims), noise_sigma=args.noise,
                               bias_amplitude=args.bias, pv_blur=args.blur,
                               geometry=args.geometry, seed=args.seed)
    vol, truth = phantom.generate_phantom(spec)
    vol_io.save_volume(vol, out / "phantom.f32raw")
    vol_io.save_labels(truth, out / "truth.u8raw")
    print(f"wrote {out / 'phantom.f32raw'} and {out / 'truth.u8raw'}")
    return EXIT_OK


def cmd_init(args) -> int:
    vol = vol_io.load_volume(args.volume)
    vol = vol_io.normalize_intensities(vol)
    labels = phantom.kmeans_init(vol, seed=args.seed)
    if args.corrupt_boundary > 0:
        labels = phantom.corrupt_boundary_labels(labels, vol.mask,
                                                 args.corrupt_boundary, seed=args.seed)
    vol_io.save_labels(labels, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = _load_config(args)
    cfg.validate()
    vol = vol_io.load_volume(cfg.volume)
    if cfg.normalize:
        vol = vol_io.normalize_intensities(vol)
    tree = build_partition(vol, cfg.partition_config())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "partition.json").write_text(tree.to_json())
    print(f"{len(tree.leaves)} subdomains (optimal count {tree.optimal_count}); "
          f"wrote {out / 'partition.json'}")
    return EXIT_OK


def cmd_classify(args) -> int:
    cfg = _load_config(args)
    cfg.validate()
    vol = vol_io.load_volume(cfg.volume)
    if cfg.normalize:
        vol = vol_io.normalize_intensities(vol)
    if cfg.init_labels == "kmeans":
        init = phantom.kmeans_init(vol, seed=cfg.seed)
    else:
        init = vol_io.load_labels(cfg.init_labels)
    tree = build_partition(vol, cfg.partition_config())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "partition.json").write_text(tree.to_json())
    kcfg = cfg.kfda_config()
    fragments = []
    diagnostics = []
    for index, leaf in enumerate(tree.leaf_nodes()):
        seed = int(np.random.SeedSequence(
            entropy=cfg.seed, spawn_key=(1, index)).generate_state(1)[0])
        labels_box, diag = kfda.classify_subdomain(
            vol, leaf.padded_bounds, init.labels, kcfg, seed=seed)
        diag["domain"] = index + 1
        diagnostics.append(diag)
        fragments.append(stitch.ClassifiedFragment(
            core_bounds=leaf.bounds, padded_bounds=leaf.padded_bounds,
            labels=labels_box))
    pipeline.save_fragments(fragments, out / "fragments")
    (out / "subdomains.json").write_text(json.dumps(diagnostics, sort_keys=True, indent=1))
    print(f"classified {len(fragments)} subdomains into {out / 'fragments'}")
    return EXIT_OK


def cmd_stitch(args) -> int:
    cfg = _load_config(args)
    cfg.validate()
    vol = vol_io.load_volume(cfg.volume)
    out = Path(cfg.out_dir)
    fragments = pipeline.load_fragments(out / "fragments")
    seed = int(np.random.SeedSequence(entropy=cfg.seed,
                                      spawn_key=(2,)).generate_state(1)[0])
    final = stitch.stitch_volume(fragments, vol.dims, mask=vol.mask,
                                 sched=cfg.anneal_schedule(seed),
                                 workers=cfg.workers)
    vol_io.save_labels(final, out / "labels.u8raw")
    print(f"wrote {out / 'labels.u8raw'}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    report = pipeline.run_pipeline(cfg)
    counts = report.class_counts.get("final", {})
    print(f"done: {len(report.subdomains)} subdomains, class counts {counts}; "
          f"outputs in {cfg.out_dir}")
    if report.dice:
        print("dice vs ground truth: " + ", ".join(
            f"{k}={v:.4f}" for k, v in report.dice.items() if v is not None))
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    doc = json.loads((out / "report.json").read_text())
    report = pipeline.RunReport(
        subdomains=doc["subdomains"], curves=doc["curves"],
        class_counts=doc["class_counts"], dice=doc["dice"],
        improved_fraction=doc["improved_fraction"],
        optimal_count=doc["optimal_count"], converged=doc["converged"],
        config=doc["config"])
    labels_path = out / "labels.u8raw"
    if labels_path.exists():
        report.labels = vol_io.load_labels(labels_path)
    pipeline.emit_report(report, out, plots=getattr(args, "plots", False))
    print(f"refreshed report files in {out}")
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "init": cmd_init,
    "partition": cmd_partition,
    "classify": cmd_classify,
    "stitch": cmd_stitch,
    "run": cmd_run,
    "report": cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    verb = args.verb or args.stage
    if verb is None:
        parser.print_help()
        return EXIT_VALIDATION
    try:
        return COMMANDS[verb](args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except pipeline.PipelineStageError as exc:
        cause = exc.__cause__
        if isinstance(cause, (ValueError, FileNotFoundError, KeyError)):
            logger.error("%s", exc)
            return EXIT_VALIDATION
        logger.error("%s", exc)
        return EXIT_NUMERICAL
    except (kfda.ConvergenceError, ArithmeticError) as exc:
        logger.error("%s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
