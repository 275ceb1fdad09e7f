"""
Driver program for cavity-to-wall transfer segmentation.

Usage:
    python run.py run-all --config configs/desk.json --out ./c2w_run
    python run.py gen-phantoms --config configs/desk.json --out ./data/phantoms
    python run.py finetune-wall --config configs/desk.json --cavity-ckpt ./c2w_run/cavity --out ./wall

Environment:
    C2W_SEED, C2W_WORKERS, C2W_DATASET_ROOT, C2W_CROPS_ROOT override the config file;
    C2W_LOG_LEVEL sets the log level (default INFO).
"""
import argparse
import dataclasses
import logging
import os
import sys
from datetime import datetime
from pathlib import Path

import pipeline
from config import load_config
from errors import C2WError
from metrics import format_summary


def run_all(cfg, out: Path) -> dict:
    """
    Run the complete workflow.

    Pipeline:
    1. Generate the phantom dataset
    2. Localize ROIs and crop every case
    3. Pre-train the cavity model
    4. Fine-tune the wall model from the cavity weights
    5. Train the wall model from scratch
    6. Predict and evaluate both wall models on the test split
    7. Compare transfer against scratch
    """
    print("=" * 80)
    print("CAVITY-TO-WALL TRANSFER PIPELINE")
    print("=" * 80)

    dirs = pipeline.step_dirs(out)
    cfg = dataclasses.replace(cfg, dataset_root=str(dirs["phantoms"]), crops_root=str(dirs["crops"]))
    start_time = datetime.now()

    print("\n[STEP 1] Generating phantom dataset...")
    manifest = pipeline.gen_phantoms(cfg, dirs["phantoms"])
    print("  Cases: " + ", ".join(f"{k}={len(v)}" for k, v in manifest["splits"].items()))

    print("\n[STEP 2] Localizing ROIs...")
    if cfg.roi_source == "coarse_model" and not cfg.coarse_checkpoint:
        coarse_dir = out / "coarse"
        result = pipeline.train_coarse(cfg, coarse_dir)
        print(f"  Coarse model best val Dice: {result.best_val_dice:.4f}")
        cfg = dataclasses.replace(cfg, coarse_checkpoint=str(coarse_dir))
    records = pipeline.localize(cfg, dirs["crops"])
    fallbacks = sum(1 for r in records if r["fallback_to_center"])
    print(f"  Cropped {len(records)} cases ({fallbacks} at the volume center)")

    print("\n[STEP 3] Pre-training cavity model...")
    cavity = pipeline.train_cavity(cfg, dirs["cavity"])
    print(f"  Best val Dice: {cavity.best_val_dice:.4f} (epoch {cavity.best_epoch})")

    print("\n[STEP 4] Fine-tuning wall model from cavity weights...")
    transfer = pipeline.finetune_wall(cfg, dirs["wall_transfer"], dirs["cavity"])
    print(f"  Best val Dice: {transfer.best_val_dice:.4f} (epoch {transfer.best_epoch})")

    print("\n[STEP 5] Training wall model from scratch...")
    scratch = pipeline.train_scratch(cfg, dirs["wall_scratch"])
    print(f"  Best val Dice: {scratch.best_val_dice:.4f} (epoch {scratch.best_epoch})")

    print("\n[STEP 6] Predicting and evaluating on the test split...")
    summaries = {}
    for name in ("transfer", "scratch"):
        pipeline.predict(cfg, dirs[f"wall_{name}"], dirs[f"pred_{name}"], "test", "wall")
        summaries[name] = pipeline.evaluate_dirs(cfg, dirs[f"pred_{name}"], dirs["crops"],
                                                 dirs[f"eval_{name}"], "test", "wall")
        print(f"  {format_summary(summaries[name], name)}")

    print("\n[STEP 7] Comparing transfer against scratch...")
    comparison = pipeline.compare(dirs["eval_transfer"] / "metrics.jsonl", dirs["eval_scratch"] / "metrics.jsonl",
                                  dirs["comparison"])

    elapsed = (datetime.now() - start_time).total_seconds()
    print("\n" + "=" * 80)
    print("PIPELINE SUMMARY")
    print("=" * 80)
    print(f"Cavity val Dice:             {cavity.best_val_dice:.4f}")
    print(f"Wall val Dice (transfer):    {transfer.best_val_dice:.4f}")
    print(f"Wall val Dice (scratch):     {scratch.best_val_dice:.4f}")
    print(pipeline.format_comparison(comparison))
    print(f"Elapsed:                     {elapsed:.1f}s")
    print("=" * 80)
    return comparison


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Cavity-to-wall transfer segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="Path to JSON run config")
        p.add_argument("--seed", type=int, default=None, help="Run seed (overrides config and C2W_SEED)")
        p.add_argument("--out", required=True, help="Output directory")
        p.add_argument("--workers", type=int, default=None, help="Parallel cases for I/O and evaluation")
        return p

    command("gen-phantoms", "Generate the seeded phantom dataset")
    command("train-coarse", "Train the reduced-width localization model on whole volumes")
    p = command("localize", "Crop ROIs around the cavity")
    p.add_argument("--data", default=None, help="Dataset root (default: config dataset_root)")
    command("train-cavity", "Pre-train the cavity model on ROI crops")
    p = command("finetune-wall", "Fine-tune the wall model from a cavity checkpoint")
    p.add_argument("--cavity-ckpt", required=True, help="Cavity checkpoint or its training directory")
    command("train-scratch", "Train the wall model from random initialization")
    p = command("predict", "Write binarized predictions for one split")
    p.add_argument("--checkpoint", required=True, help="Checkpoint or training directory")
    p.add_argument("--split", default="test")
    p.add_argument("--label", default="wall", choices=("cavity", "wall"))
    p.add_argument("--data", default=None, help="Crops root (default: config crops_root)")
    p = command("evaluate", "Score predictions against reference masks")
    p.add_argument("--pred", required=True, help="Prediction directory")
    p.add_argument("--ref", default=None, help="Reference directory (default: config crops_root)")
    p.add_argument("--split", default="test")
    p.add_argument("--label", default="wall", choices=("cavity", "wall"))
    p = command("compare", "Compare two per-case metrics files")
    p.add_argument("--first", required=True, help="metrics.jsonl of the first method")
    p.add_argument("--second", required=True, help="metrics.jsonl of the second method")
    p.add_argument("--names", nargs=2, default=("transfer", "scratch"))
    p = command("ablate-supervision", "Fine-tune on random subsets of the training split")
    p.add_argument("--cavity-ckpt", required=True)
    p.add_argument("--n", type=int, required=True, help="Training cases per run")
    p.add_argument("--repeats", type=int, default=3)
    command("run-all", "Run every step end to end")
    return parser


def dispatch(args, cfg) -> None:
    out = Path(args.out)
    if args.command == "gen-phantoms":
        manifest = pipeline.gen_phantoms(cfg, out)
        print(f"Generated {sum(len(v) for v in manifest['splits'].values())} cases in {out}")
    elif args.command == "train-coarse":
        result = pipeline.train_coarse(cfg, out)
        print(f"Coarse model best val Dice {result.best_val_dice:.4f} at epoch {result.best_epoch}")
    elif args.command == "localize":
        records = pipeline.localize(cfg, out, args.data)
        print(f"Cropped {len(records)} cases into {out}")
    elif args.command in ("train-cavity", "finetune-wall", "train-scratch"):
        if args.command == "train-cavity":
            result = pipeline.train_cavity(cfg, out)
        elif args.command == "finetune-wall":
            result = pipeline.finetune_wall(cfg, out, args.cavity_ckpt)
        else:
            result = pipeline.train_scratch(cfg, out)
        print(f"Best val Dice {result.best_val_dice:.4f} at epoch {result.best_epoch}"
              f"{' (stopped early)' if result.stopped_early else ''}; checkpoint in {out}")
    elif args.command == "predict":
        ids = pipeline.predict(cfg, args.checkpoint, out, args.split, args.label, args.data)
        print(f"Predicted {len(ids)} cases into {out}")
    elif args.command == "evaluate":
        summary = pipeline.evaluate_dirs(cfg, args.pred, args.ref or cfg.crops_root, out, args.split, args.label)
        print(format_summary(summary, args.label))
    elif args.command == "compare":
        result = pipeline.compare(args.first, args.second, out, tuple(args.names))
        print(pipeline.format_comparison(result))
    elif args.command == "ablate-supervision":
        result = pipeline.ablate_supervision(cfg, out, args.cavity_ckpt, args.n, args.repeats)
        dice = result["across_runs"]["dice"]
        if dice["mean"] is not None:
            print(f"N={args.n}: wall Dice {dice['mean']:.3f} ± {dice['sd']:.3f} over {args.repeats} runs")
    elif args.command == "run-all":
        run_all(cfg, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.getenv("C2W_LOG_LEVEL", "INFO").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "workers": args.workers})
        dispatch(args, cfg)
    except C2WError as e:
        print(f"ERROR [{e.code}]: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
