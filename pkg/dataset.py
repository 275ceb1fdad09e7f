"""
Case directories and split manifests on disk.

Both the generated dataset and the localized crops use the same layout:
``<root>/manifest.json`` plus ``<root>/<case_id>/{image,cavity,wall}`` MVOL pairs.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List

from errors import ConfigError, MissingInput
from executor import map_cases
from training import Sample
from volume_io import load_mask, load_volume, mvol_exists, zscore_normalize

logger = logging.getLogger(__name__)

LABELS = ("cavity", "wall")
SPLITS = ("train", "val", "test")


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise MissingInput(f"no manifest at {path}")
    with open(path, "r") as f:
        manifest = json.load(f)
    if "splits" not in manifest:
        raise ConfigError(f"{path}: manifest has no 'splits' section")
    return manifest


def split_ids(manifest: dict, split: str) -> List[str]:
    try:
        return list(manifest["splits"][split])
    except KeyError as e:
        raise ConfigError(f"manifest has no split named {split!r}") from e


def require_case(root, case_id: str, names=("image",) + LABELS) -> None:
    for name in names:
        if not mvol_exists(Path(root) / case_id / name):
            raise MissingInput(f"case {case_id}: {name} volume missing under {root}")


def load_case(root, case_id: str, label: str) -> Sample:
    """Z-scored image and the requested binary label for one case."""
    if label not in LABELS:
        raise ConfigError(f"label must be one of {LABELS}, got {label!r}")
    require_case(root, case_id, ("image", label))
    case_dir = Path(root) / case_id
    image = zscore_normalize(load_volume(case_dir / "image"))
    return Sample(case_id, image, load_mask(case_dir / label))


def load_split(root, split: str, label: str, workers: int = 1) -> List[Sample]:
    ids = split_ids(read_manifest(root), split)
    samples = map_cases(lambda cid: load_case(root, cid, label), ids, workers)
    logger.info("  Loaded %d/%d %s cases with %s labels from %s", len(samples), len(ids), split, label, root)
    return samples


def load_splits(root, label: str, workers: int = 1) -> Dict[str, List[Sample]]:
    return {split: load_split(root, split, label, workers) for split in SPLITS}
