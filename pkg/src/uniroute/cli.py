"""Command-line interface.

Subcommands: gen (manifest + optional sample cache), train, eval, ablate,
export-routing. Every report-producing command writes delimited text plus
matching figures into --out-dir. URKT_THREADS caps BLAS threads and must be
applied before numpy loads, so heavy imports happen inside main().
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_cap():
    n = os.environ.get("URKT_THREADS")
    if n:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uniroute",
        description="Modality-adaptive change detection: synthetic benchmark, "
                    "two-stage training, evaluation, ablations, routing maps")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out-dir", default="runs/latest",
                       help="output directory")

    p = sub.add_parser("gen", help="write a dataset manifest (and cache)")
    common(p)
    p.add_argument("--cache", action="store_true",
                   help="also materialize samples into <out-dir>/cache")
    p.add_argument("--scarce-sar", action="store_true",
                   help="use the reduced OPT_SAR training count (60)")

    p = sub.add_parser("train", help="run the two-stage training schedule")
    common(p)
    p.add_argument("--manifest", help="manifest path "
                   "(default <out-dir>/manifest.tsv)")
    p.add_argument("--stage", choices=["1", "2", "all"], default="all",
                   help="run only one training stage")
    p.add_argument("--checkpoint",
                   help="stage-1 checkpoint to fine-tune (with --stage 2)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--domain", type=int, help="restrict to one domain id")

    p = sub.add_parser("ablate", help="train variants and compare")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", action="append", default=[],
                   help="variant name (repeatable), e.g. fusion:sub_only")

    p = sub.add_parser("export-routing", help="write a routing map as PGM")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--block", type=int, required=True,
                   help="decision-block index (network order)")
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--domain", type=int, default=0)
    p.add_argument("--out", help="output PGM path "
                   "(default <out-dir>/routing_block<k>.pgm)")
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)

    # heavy imports after the thread cap
    from . import report as R
    from .config import load_config, write_config
    from .harness import (
        UsageError, ablate, ablation_table, evaluate, export_routing_map,
        materialize, train, write_pgm,
    )
    from .model import load_checkpoint
    from .synthdata import (
        SceneSpec, generate, make_split, read_manifest, write_manifest,
        write_sample_cache,
    )
    from .tensor import ContractViolation

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        config = load_config(args.config, overrides)
        os.makedirs(args.out_dir, exist_ok=True)

        if args.command == "gen":
            records = make_split(
                train=config.train_pairs, val=config.val_pairs,
                test=config.test_pairs, base_seed=config.seed,
                sar_train=(60 if args.scarce_sar else config.sar_train_pairs))
            manifest = os.path.join(args.out_dir, "manifest.tsv")
            write_manifest(records, manifest)
            write_config(config, os.path.join(args.out_dir, "run.cfg"))
            if args.cache:
                cache_dir = os.path.join(args.out_dir, "cache")
                os.makedirs(cache_dir, exist_ok=True)
                materialize(records, image_size=config.image_size,
                            cache_dir=cache_dir)
            print(f"wrote {manifest} ({len(records)} records)")

        elif args.command == "train":
            manifest = args.manifest or os.path.join(args.out_dir,
                                                     "manifest.tsv")
            if not os.path.exists(manifest):
                raise UsageError(f"manifest not found: {manifest}")
            records = read_manifest(manifest)
            result = train(config, records, args.out_dir, stages=args.stage,
                           init_checkpoint=args.checkpoint)
            R.plot_loss_curves(result.history, result.val_history,
                               os.path.join(args.out_dir, "loss_curves.png"))
            report = evaluate(result.final_checkpoint, records)
            with open(os.path.join(args.out_dir, "metrics.tsv"), "w") as fh:
                fh.write(report.to_tsv())
            R.plot_domain_metrics(report,
                                  os.path.join(args.out_dir, "test_f1.png"))
            R.plot_routing_rates(report,
                                 os.path.join(args.out_dir, "routing.png"))
            print(f"best val F1 {result.best_val_f1:.4f}; "
                  f"test F1 {report.aggregate['f1']:.4f}; "
                  f"checkpoint {result.final_checkpoint}")

        elif args.command == "eval":
            records = read_manifest(args.manifest)
            report = evaluate(args.checkpoint, records, split=args.split,
                              domain=args.domain)
            tsv = report.to_tsv()
            with open(os.path.join(args.out_dir, "metrics.tsv"), "w") as fh:
                fh.write(tsv)
            R.plot_domain_metrics(report,
                                  os.path.join(args.out_dir, "test_f1.png"))
            R.plot_routing_rates(report,
                                 os.path.join(args.out_dir, "routing.png"))
            print(tsv, end="")

        elif args.command == "ablate":
            records = read_manifest(args.manifest)
            results = ablate(config, args.variant, records, args.out_dir)
            table = ablation_table(results)
            with open(os.path.join(args.out_dir, "ablation.tsv"), "w") as fh:
                fh.write(table)
            R.plot_ablation(results,
                            os.path.join(args.out_dir, "ablation.png"))
            print(table, end="")

        elif args.command == "export-routing":
            sample = generate(SceneSpec(seed=args.sample_seed,
                                        domain=args.domain,
                                        size=(config.image_size,
                                              config.image_size)))
            out = args.out or os.path.join(
                args.out_dir, f"routing_block{args.block}.pgm")
            export_routing_map(args.checkpoint, sample, args.block, out)
            print(f"wrote {out}")

    except (UsageError, ContractViolation, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
