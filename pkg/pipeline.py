"""
The cavity-to-wall workflow as callable steps.

Every step takes a RunConfig and an output directory, writes its artifacts
under that directory and leaves a ``.partial`` marker there until it
finishes. The CLI in run.py is a thin layer over these functions.
"""
import contextlib
import dataclasses
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import dataset
from config import RunConfig
from errors import CaseMismatch, EmptyPrediction, MissingInput
from executor import map_cases
from metrics import METRIC_FIELDS, evaluate, format_summary, summarize
from network import (
    UNet3D,
    binarize,
    build_model,
    checkpoint_exists,
    load_checkpoint,
    load_model,
    save_checkpoint,
    transfer_weights,
)
from phantom import generate_dataset
from training import (
    Sample,
    ScheduleConfig,
    TrainResult,
    UnfreezeSchedule,
    subsample_cases,
    train,
)
from volume_io import (
    Mask3,
    atomic_write_bytes,
    center_of_mass,
    crop_window,
    load_mask,
    load_volume,
    roi_window,
    save_volume,
    zscore_normalize,
)

logger = logging.getLogger(__name__)

PARTIAL = ".partial"
CHECKPOINT_NAME = "model"


@contextlib.contextmanager
def partial_marker(out):
    """Mark ``out`` incomplete for the duration of a step; the marker stays if the step fails."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / PARTIAL
    marker.write_text("incomplete\n")
    yield out
    marker.unlink()


def _write_json(path: Path, payload) -> None:
    atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())


def _write_jsonl(path: Path, records: Sequence[dict]) -> None:
    atomic_write_bytes(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode())


def read_jsonl(path) -> List[dict]:
    path = Path(path)
    if not path.is_file():
        raise MissingInput(f"no records at {path}")
    with open(path, "r") as f:
        return [json.loads(line) for line in f if line.strip()]


def resolve_checkpoint(path) -> Path:
    """Accept a checkpoint stem or the training output directory that holds one."""
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    if not checkpoint_exists(path):
        raise MissingInput(f"no checkpoint at {path}")
    return path


# --- dataset and localization ---------------------------------------------

def gen_phantoms(cfg: RunConfig, out) -> dict:
    with partial_marker(out) as out:
        return generate_dataset(cfg.phantom, out, workers=cfg.workers)


def train_coarse(cfg: RunConfig, out) -> TrainResult:
    """Reduced-width cavity model on whole volumes, used to place the ROI."""
    spec = cfg.coarse_spec()
    splits = dataset.load_splits(cfg.dataset_root, "cavity", cfg.workers)
    model = build_model(spec, cfg.seed)
    return _fit(cfg, model, splits, "cavity", cfg.cavity_schedule, None, out,
                {"task": "coarse_cavity", "init": "random"})


def locate_center(image, cavity: Mask3, cfg: RunConfig,
                  coarse: Optional[UNet3D]) -> Tuple[Tuple[float, float, float], bool]:
    """ROI center from the oracle cavity or a coarse prediction; True when the volume center was used."""
    if coarse is None:
        return center_of_mass(cavity), False
    pred = Mask3(binarize(coarse.predict(zscore_normalize(image).data), cfg.threshold), image.spacing)
    if pred.count > 0:
        return center_of_mass(pred), False
    if not cfg.fallback_to_center:
        raise EmptyPrediction("coarse model predicted no foreground and fallback is disabled")
    return tuple((n - 1) / 2.0 for n in image.dims), True


def localize(cfg: RunConfig, out, data_root=None) -> List[dict]:
    """Crop image, cavity and wall of every case with one shared ROI window."""
    data_root = Path(data_root or cfg.dataset_root)
    manifest = dataset.read_manifest(data_root)
    coarse = None
    if cfg.roi_source == "coarse_model":
        if not cfg.coarse_checkpoint:
            raise MissingInput("roi_source 'coarse_model' needs coarse_checkpoint")
        coarse = load_model(resolve_checkpoint(cfg.coarse_checkpoint))

    ids = [cid for split in dataset.SPLITS for cid in dataset.split_ids(manifest, split)]
    records = []
    logger.info("Localizing %d cases from %s (%s)...", len(ids), data_root, cfg.roi_source)
    with partial_marker(out) as out:
        # a single tape-free model is shared, so cases run one after another
        for cid in ids:
            dataset.require_case(data_root, cid)
            image = load_volume(data_root / cid / "image")
            cavity = load_mask(data_root / cid / "cavity")
            wall = load_mask(data_root / cid / "wall")
            center, fallback = locate_center(image, cavity, cfg, coarse)
            window = roi_window(center, cfg.roi, image.dims)
            for name, grid in (("image", image), ("cavity", cavity), ("wall", wall)):
                save_volume(crop_window(grid, window, cfg.roi.pad_value), out / cid / name)
            record = {"case_id": cid, "source": cfg.roi_source, "fallback_to_center": fallback,
                      **window.to_dict()}
            _write_json(out / cid / "localization.json", record)
            records.append(record)
            if fallback:
                logger.warning("  %s: empty coarse prediction, cropped at the volume center", cid)
        _write_json(out / "manifest.json", {
            "format": "c2w-crops",
            "version": 1,
            "source_root": str(data_root),
            "roi_size": list(cfg.roi.size),
            "roi_source": cfg.roi_source,
            "splits": manifest["splits"],
        })
    logger.info("  Cropped %d/%d cases into %s (%d at the volume center)", len(records), len(ids), out,
                sum(r["fallback_to_center"] for r in records))
    return records


# --- training --------------------------------------------------------------

def _fit(cfg: RunConfig, model: UNet3D, splits: Dict[str, List[Sample]], label: str,
         schedule: ScheduleConfig, unfreeze: Optional[UnfreezeSchedule], out, run_info: dict,
         seed: Optional[int] = None) -> TrainResult:
    train_cfg = cfg.train_config(seed)
    with partial_marker(out) as out:
        run = dict(run_info)
        run.update({
            "label": label,
            "schedule": dataclasses.asdict(schedule),
            "unfreeze": dataclasses.asdict(unfreeze) if unfreeze is not None else None,
            "model_fingerprint": model.spec.fingerprint(),
            "train_cases": [s.case_id for s in splits["train"]],
            "val_cases": [s.case_id for s in splits["val"]],
        })
        _write_json(out / "run_config.json", {"config": cfg.to_dict(), "run": run})
        result = train(model, splits["train"], splits["val"], train_cfg, schedule, cfg.loss, cfg.optimizer,
                       unfreeze=unfreeze, log_path=out / "train_log.jsonl")
        save_checkpoint(result.best_params, out / CHECKPOINT_NAME)
        _write_json(out / "train_summary.json", {
            "best_epoch": result.best_epoch,
            "best_val_dice": result.best_val_dice,
            "epochs_run": len(result.log),
            "stopped_early": result.stopped_early,
        })
    logger.info("  Best val Dice %.4f at epoch %d (%s)", result.best_val_dice, result.best_epoch, run_info.get("task"))
    return result


def train_cavity(cfg: RunConfig, out) -> TrainResult:
    splits = dataset.load_splits(cfg.crops_root, "cavity", cfg.workers)
    model = build_model(cfg.model_spec(), cfg.seed)
    return _fit(cfg, model, splits, "cavity", cfg.cavity_schedule, None, out,
                {"task": "cavity", "init": "random"})


def finetune_wall(cfg: RunConfig, out, cavity_ckpt, train_samples: Optional[List[Sample]] = None,
                  splits: Optional[Dict[str, List[Sample]]] = None, seed: Optional[int] = None) -> TrainResult:
    """Wall model initialized from the cavity checkpoint with a fresh head and progressive unfreezing."""
    seed = cfg.seed if seed is None else seed
    source = load_checkpoint(resolve_checkpoint(cavity_ckpt))
    splits = dict(splits or dataset.load_splits(cfg.crops_root, "wall", cfg.workers))
    if train_samples is not None:
        splits["train"] = list(train_samples)
    target = build_model(cfg.model_spec(), seed)
    model = target.with_params(transfer_weights(source, target.params, reinit_head=True, seed=seed))
    return _fit(cfg, model, splits, "wall", cfg.wall_schedule, cfg.unfreeze, out,
                {"task": "wall", "init": "transfer", "cavity_checkpoint": str(cavity_ckpt)}, seed)


def train_scratch(cfg: RunConfig, out) -> TrainResult:
    splits = dataset.load_splits(cfg.crops_root, "wall", cfg.workers)
    model = build_model(cfg.model_spec(), cfg.seed)
    return _fit(cfg, model, splits, "wall", cfg.scratch_schedule, None, out,
                {"task": "wall", "init": "random"})


# --- prediction and evaluation ---------------------------------------------

def predict(cfg: RunConfig, checkpoint, out, split: str = "test", label: str = "wall",
            data_root=None) -> List[str]:
    """Binarized predictions written as ``<out>/<case_id>/<label>``."""
    data_root = Path(data_root or cfg.crops_root)
    model = load_model(resolve_checkpoint(checkpoint))
    ids = dataset.split_ids(dataset.read_manifest(data_root), split)
    logger.info("Predicting %d %s cases with %s...", len(ids), split, checkpoint)
    with partial_marker(out) as out:
        for cid in ids:
            dataset.require_case(data_root, cid, ("image",))
            image = zscore_normalize(load_volume(data_root / cid / "image"))
            mask = binarize(model.predict(image.data), cfg.threshold)
            save_volume(Mask3(mask, image.spacing), out / cid / label)
        _write_json(out / "manifest.json", {
            "format": "c2w-predictions",
            "version": 1,
            "checkpoint": str(checkpoint),
            "label": label,
            "threshold": cfg.threshold,
            "splits": {split: ids},
        })
    logger.info("  Predicted %d %s cases into %s", len(ids), split, out)
    return ids


def evaluate_dirs(cfg: RunConfig, pred_dir, ref_dir, out, split: str = "test",
                  label: str = "wall") -> dict:
    """Per-case metrics for every reference case of ``split`` plus a mean/sd summary."""
    pred_dir, ref_dir = Path(pred_dir), Path(ref_dir)
    ids = dataset.split_ids(dataset.read_manifest(ref_dir), split)
    missing = [cid for cid in ids if not (pred_dir / cid / f"{label}.json").is_file()]
    if missing:
        raise CaseMismatch(f"prediction missing for case {missing[0]} ({len(missing)} missing in total)")

    def score(cid: str) -> dict:
        pred = load_mask(pred_dir / cid / label)
        ref = load_mask(ref_dir / cid / label)
        return evaluate(pred, ref, cfg.tolerance_mm).to_record(cid)

    with partial_marker(out) as out:
        records = map_cases(score, ids, cfg.workers)
        summary = summarize(records)
        summary.update({"label": label, "split": split, "tol_mm": cfg.tolerance_mm})
        _write_jsonl(out / "metrics.jsonl", records)
        _write_json(out / "summary.json", summary)
    logger.info("  Scored %d/%d cases: %s", len(records) - summary["n_errors"], len(records),
                format_summary(summary, label))
    return summary


def compare(first, second, out, names: Tuple[str, str] = ("transfer", "scratch")) -> dict:
    """Side-by-side summaries of two metrics files and paired per-case deltas (first - second)."""
    a = {r["case_id"]: r for r in read_jsonl(first)}
    b = {r["case_id"]: r for r in read_jsonl(second)}
    if set(a) != set(b):
        odd = sorted(set(a) ^ set(b))
        raise CaseMismatch(f"metrics files cover different cases, e.g. {odd[0]}")
    ids = sorted(a)
    deltas = {}
    for name in METRIC_FIELDS:
        diff = np.array([a[c][name] - b[c][name] for c in ids
                         if a[c][name] is not None and b[c][name] is not None], dtype=np.float64)
        deltas[name] = ({"mean": float(diff.mean()), "sd": float(diff.std()), "n": int(diff.size)}
                        if diff.size else {"mean": None, "sd": None, "n": 0})
    result = {
        "methods": list(names),
        names[0]: summarize([a[c] for c in ids]),
        names[1]: summarize([b[c] for c in ids]),
        "paired_delta": deltas,
    }
    with partial_marker(out) as out:
        _write_json(out / "comparison.json", result)
    return result


def format_comparison(result: dict) -> str:
    first, second = result["methods"]
    lines = [f"{'metric':<14}{first:>20}{second:>20}{'delta':>20}"]
    for name in METRIC_FIELDS:
        cells = []
        for stat in (result[first][name], result[second][name], result["paired_delta"][name]):
            cells.append("n/a" if stat["mean"] is None else f"{stat['mean']:.3f} ± {stat['sd']:.3f}")
        lines.append(f"{name:<14}" + "".join(f"{c:>20}" for c in cells))
    return "\n".join(lines)


def ablate_supervision(cfg: RunConfig, out, cavity_ckpt, n: int, repeats: int) -> dict:
    """Fine-tune on ``repeats`` random n-case training subsets; validation and test stay fixed."""
    splits = dataset.load_splits(cfg.crops_root, "wall", cfg.workers)
    runs = []
    with partial_marker(out) as out:
        for r in range(repeats):
            run_dir = out / f"run_{r:02d}"
            subset = subsample_cases(splits["train"], n, seed=cfg.seed + r)
            finetune_wall(cfg, run_dir / "train", cavity_ckpt, train_samples=subset, splits=splits)
            predict(cfg, run_dir / "train", run_dir / "pred", "test", "wall")
            summary = evaluate_dirs(cfg, run_dir / "pred", cfg.crops_root, run_dir / "eval", "test", "wall")
            runs.append({"run": r, "train_cases": [s.case_id for s in subset],
                         **{name: summary[name]["mean"] for name in METRIC_FIELDS}})
        across = {}
        for name in METRIC_FIELDS:
            values = np.array([x[name] for x in runs if x[name] is not None], dtype=np.float64)
            across[name] = ({"mean": float(values.mean()), "sd": float(values.std()), "n": int(values.size)}
                            if values.size else {"mean": None, "sd": None, "n": 0})
        result = {"n_train_cases": n, "repeats": repeats, "runs": runs, "across_runs": across}
        _write_json(out / "ablation.json", result)
    return result


def step_dirs(out) -> Dict[str, Path]:
    out = Path(out)
    names = ("phantoms", "crops", "cavity", "wall_transfer", "wall_scratch", "pred_transfer",
             "pred_scratch", "eval_transfer", "eval_scratch", "comparison")
    return {name: out / name for name in names}
