"""
Spacing-aware overlap and surface metrics.

Surface points are the centers of foreground voxels with at least one
six-connected background (or out-of-volume) neighbor, placed in mm at
``index * spacing``. Directed surface distances come from the exact
Euclidean distance transform sampled at the voxel spacing, or from a
brute-force pairwise search kept as the verification oracle.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from errors import EmptyMask, GeometryMismatch, NonPositiveTolerance
from volume_io import Mask3

logger = logging.getLogger(__name__)

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True, eq=False)
class SurfacePointSet:
    indices: np.ndarray  # (K, 3) voxel indices
    points: np.ndarray  # (K, 3) mm coordinates
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]

    def __len__(self) -> int:
        return int(self.points.shape[0])


@dataclass
class MetricsReport:
    dice: float
    surface_dice: Optional[float]
    hd95: Optional[float]
    assd: Optional[float]
    tolerance_mm: float = 1.0
    error: Optional[str] = None

    def to_record(self, case_id: str) -> dict:
        return {
            "case_id": case_id,
            "dice": self.dice,
            "surface_dice": self.surface_dice,
            "tol_mm": self.tolerance_mm,
            "hd95_mm": self.hd95,
            "assd_mm": self.assd,
            "error": self.error,
        }


def _check_geometry(a: Mask3, b: Mask3) -> None:
    if a.dims != b.dims or a.spacing != b.spacing:
        raise GeometryMismatch(f"masks differ in geometry: {a.dims}@{a.spacing} vs {b.dims}@{b.spacing}")


def dice(a: Mask3, b: Mask3) -> float:
    """2|A∩B| / (|A| + |B|); two empty masks score 1.0."""
    _check_geometry(a, b)
    total = a.count + b.count
    if total == 0:
        return 1.0
    inter = int(np.logical_and(a.data, b.data).sum(dtype=np.int64))
    return 2.0 * inter / total


def surface_mask(m: Mask3) -> np.ndarray:
    fg = m.data.astype(bool)
    interior = ndimage.binary_erosion(fg, structure=_SIX_CONNECTED, border_value=0)
    return fg & ~interior


def extract_surface(m: Mask3) -> SurfacePointSet:
    if m.count == 0:
        raise EmptyMask("cannot extract the surface of an empty mask")
    idx = np.argwhere(surface_mask(m))
    points = idx.astype(np.float64) * np.asarray(m.spacing, dtype=np.float64)
    return SurfacePointSet(idx, points, m.dims, m.spacing)


def surface_distances(a: SurfacePointSet, b: SurfacePointSet, method: str = "edt") -> Tuple[np.ndarray, np.ndarray]:
    """Directed nearest-surface distances d(A->B) and d(B->A) in mm."""
    if len(a) == 0 or len(b) == 0:
        raise EmptyMask("surface distances need two non-empty surfaces")
    if method == "brute":
        return _brute_directed(a.points, b.points), _brute_directed(b.points, a.points)
    if method != "edt":
        raise ValueError(f"unknown distance method {method!r}")
    if a.dims != b.dims or a.spacing != b.spacing:
        raise GeometryMismatch("edt distances need surfaces sampled on the same grid")
    return _edt_directed(a, b), _edt_directed(b, a)


def _edt_directed(a: SurfacePointSet, b: SurfacePointSet) -> np.ndarray:
    seeds = np.zeros(b.dims, dtype=bool)
    seeds[tuple(b.indices.T)] = True
    dist = ndimage.distance_transform_edt(~seeds, sampling=b.spacing)
    return dist[tuple(a.indices.T)]


def _brute_directed(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = np.empty(a.shape[0], dtype=np.float64)
    for s in range(0, a.shape[0], chunk):
        out[s:s + chunk] = cdist(a[s:s + chunk], b).min(axis=1)
    return out


def _directed_pair(a: Mask3, b: Mask3, method: str) -> Tuple[np.ndarray, np.ndarray]:
    _check_geometry(a, b)
    return surface_distances(extract_surface(a), extract_surface(b), method)


# --- distance summaries ----------------------------------------------------

def _hd_from(d_ab: np.ndarray, d_ba: np.ndarray, percentile: float, convention: str) -> float:
    if convention == "max_directed":
        return float(max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile)))
    if convention == "pooled":
        return float(np.percentile(np.concatenate([d_ab, d_ba]), percentile))
    raise ValueError(f"unknown HD convention {convention!r}")


def _assd_from(d_ab: np.ndarray, d_ba: np.ndarray) -> float:
    return float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size))


def _nsd_from(d_ab: np.ndarray, d_ba: np.ndarray, tol_mm: float, mode: str) -> float:
    if tol_mm <= 0:
        raise NonPositiveTolerance(f"surface dice tolerance must be positive, got {tol_mm}")
    hit_ab = int((d_ab <= tol_mm).sum())
    if mode == "one_sided":
        return hit_ab / d_ab.size
    if mode == "symmetric":
        return (hit_ab + int((d_ba <= tol_mm).sum())) / (d_ab.size + d_ba.size)
    raise ValueError(f"unknown surface dice mode {mode!r}")


def hd95(a: Mask3, b: Mask3, method: str = "edt", convention: str = "max_directed") -> float:
    """95th-percentile Hausdorff distance (mm), linear interpolation between order statistics."""
    return _hd_from(*_directed_pair(a, b, method), 95.0, convention)


def hausdorff(a: Mask3, b: Mask3, method: str = "edt") -> float:
    d_ab, d_ba = _directed_pair(a, b, method)
    return float(max(d_ab.max(), d_ba.max()))


def assd(a: Mask3, b: Mask3, method: str = "edt") -> float:
    return _assd_from(*_directed_pair(a, b, method))


def surface_dice(a: Mask3, b: Mask3, tol_mm: float = 1.0, mode: str = "symmetric", method: str = "edt") -> float:
    """Fraction of surface points within ``tol_mm`` of the other surface.

    ``one_sided`` counts only the points of ``a`` (the prediction);
    ``symmetric`` pools both surfaces (normalized surface dice).
    """
    if tol_mm <= 0:
        raise NonPositiveTolerance(f"surface dice tolerance must be positive, got {tol_mm}")
    return _nsd_from(*_directed_pair(a, b, method), tol_mm, mode)


def evaluate(pred: Mask3, ref: Mask3, tol_mm: float = 1.0, mode: str = "symmetric",
             convention: str = "max_directed") -> MetricsReport:
    """Dice, surface dice, HD95 and ASSD for one case.

    An empty operand never yields a silent number: the surface metrics are
    left empty and the report carries the EmptyMask code.
    """
    _check_geometry(pred, ref)
    if tol_mm <= 0:
        raise NonPositiveTolerance(f"surface dice tolerance must be positive, got {tol_mm}")
    overlap = dice(pred, ref)
    if pred.count == 0 or ref.count == 0:
        return MetricsReport(overlap, None, None, None, tol_mm, EmptyMask.__name__)
    d_pr, d_rp = surface_distances(extract_surface(pred), extract_surface(ref), "edt")
    return MetricsReport(
        dice=overlap,
        surface_dice=_nsd_from(d_pr, d_rp, tol_mm, mode),
        hd95=_hd_from(d_pr, d_rp, 95.0, convention),
        assd=_assd_from(d_pr, d_rp),
        tolerance_mm=tol_mm,
    )


METRIC_FIELDS = ("dice", "surface_dice", "hd95_mm", "assd_mm")


def summarize(records: List[dict]) -> Dict[str, object]:
    """Mean and population standard deviation per metric over per-case records."""
    summary: Dict[str, object] = {
        "n_cases": len(records),
        "n_errors": sum(1 for r in records if r.get("error")),
    }
    for name in METRIC_FIELDS:
        values = np.array([r[name] for r in records if r.get(name) is not None], dtype=np.float64)
        if values.size == 0:
            summary[name] = {"mean": None, "sd": None, "n": 0}
        else:
            summary[name] = {"mean": float(values.mean()), "sd": float(values.std()), "n": int(values.size)}
    return summary


def format_summary(summary: Dict[str, object], label: str = "") -> str:
    parts = []
    for name in METRIC_FIELDS:
        stat = summary[name]
        if stat["mean"] is None:
            parts.append(f"{name}=n/a")
        else:
            parts.append(f"{name}={stat['mean']:.3f}±{stat['sd']:.3f}")
    prefix = f"{label}: " if label else ""
    return prefix + "  ".join(parts)
