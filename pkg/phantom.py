"""
Seeded synthetic cavity/wall volumes.

Each case is a randomly posed ellipsoid (the bright cavity) wrapped in a thin
morphological shell (the low-contrast wall), optionally broken by one
cylindrical notch, on a noisy background. A dataset is fully determined by
its PhantomConfig: case ``i`` draws from ``default_rng([seed, i])``.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from errors import InvalidConfig
from executor import map_cases
from volume_io import Mask3, Volume3, atomic_write_bytes, save_volume

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

# upper bound on wall voxels as a share of the whole volume, not of the cavity
MAX_WALL_FRACTION = 0.1


@dataclass(frozen=True)
class PhantomConfig:
    dims: Tuple[int, int, int] = (32, 32, 32)
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    # semi-axis length as a fraction of the extent along each axis
    radius_range: Tuple[float, float] = (0.18, 0.28)
    # center offset as a fraction of the extent
    jitter: float = 0.05
    thickness: Tuple[int, int] = (1, 2)
    mu_background: float = 0.0
    mu_wall: float = 0.35
    mu_cavity: float = 1.0
    sigma: float = 0.15
    notch_probability: float = 0.5
    notch_radius: float = 2.0
    counts: Tuple[int, int, int] = (60, 20, 20)
    seed: int = 0

    def __post_init__(self):
        for name in ("dims", "spacing_mm", "radius_range", "thickness", "counts"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise InvalidConfig(f"phantom dims must be three extents >= 8, got {self.dims}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise InvalidConfig("spacing must be three positive values")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise InvalidConfig(f"radius range must satisfy 0 < lo <= hi, got {self.radius_range}")
        t_lo, t_hi = self.thickness
        if not 1 <= t_lo <= t_hi:
            raise InvalidConfig(f"wall thickness must satisfy 1 <= lo <= hi, got {self.thickness}")
        if self.jitter < 0 or self.sigma < 0 or self.notch_radius <= 0:
            raise InvalidConfig("jitter and sigma must be non-negative, notch radius positive")
        if not 0 <= self.notch_probability <= 1:
            raise InvalidConfig("notch probability must lie in [0, 1]")
        if not self.mu_background < self.mu_wall < self.mu_cavity:
            raise InvalidConfig("intensities must be ordered background < wall < cavity")
        for n in self.dims:
            # farthest wall voxel from the volume center, one voxel of margin
            reach = (hi + self.jitter) * n + t_hi + 1
            if reach > (n - 1) / 2.0:
                raise InvalidConfig(f"radius, jitter and thickness push the wall outside an extent of {n}")
        if len(self.counts) != 3 or min(self.counts) < 1:
            raise InvalidConfig(f"every split needs at least one case, got {self.counts}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        try:
            return cls(**d)
        except TypeError as e:
            raise InvalidConfig(f"bad phantom config: {e}") from e


@dataclass
class PhantomCase:
    image: Volume3
    cavity: Mask3
    wall: Mask3
    meta: Dict[str, object] = field(default_factory=dict)


def ball(radius: int) -> np.ndarray:
    r = int(radius)
    z, y, x = np.ogrid[-r:r + 1, -r:r + 1, -r:r + 1]
    return (z * z + y * y + x * x) <= r * r


def _grid(dims: Sequence[int]) -> List[np.ndarray]:
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def generate_case(cfg: PhantomConfig, rng: np.random.Generator) -> PhantomCase:
    """One cavity/wall/image triple; the same generator state always yields the same bytes."""
    dims = np.asarray(cfg.dims, dtype=np.float64)
    radii = rng.uniform(*cfg.radius_range, size=3) * dims
    center = (dims - 1.0) / 2.0 + rng.uniform(-cfg.jitter, cfg.jitter, size=3) * dims
    angle = rng.uniform(0.0, np.pi)
    thickness = int(rng.integers(cfg.thickness[0], cfg.thickness[1] + 1))

    z, y, x = _grid(cfg.dims)
    dz, dy, dx = z - center[0], y - center[1], x - center[2]
    # in-plane rotation about the depth axis
    u = np.cos(angle) * dy + np.sin(angle) * dx
    v = -np.sin(angle) * dy + np.cos(angle) * dx
    cavity = (dz / radii[0]) ** 2 + (u / radii[1]) ** 2 + (v / radii[2]) ** 2 <= 1.0
    wall = ndimage.binary_dilation(cavity, structure=ball(thickness)) & ~cavity

    notch = None
    if rng.random() < cfg.notch_probability:
        phi = rng.uniform(0.0, 2.0 * np.pi)
        direction = np.array([0.0, np.sin(phi), np.cos(phi)])
        along = dz * direction[0] + dy * direction[1] + dx * direction[2]
        perp2 = dz ** 2 + dy ** 2 + dx ** 2 - along ** 2
        tube = (along >= 0) & (perp2 <= cfg.notch_radius ** 2)
        wall &= ~tube
        notch = {"azimuth_rad": float(phi), "radius_vox": cfg.notch_radius}

    image = np.full(cfg.dims, cfg.mu_background, dtype=np.float64)
    image[wall] = cfg.mu_wall
    image[cavity] = cfg.mu_cavity
    if cfg.sigma > 0:
        image = image + rng.normal(0.0, cfg.sigma, size=cfg.dims)

    meta = {
        "center_vox": [float(c) for c in center],
        "radii_vox": [float(r) for r in radii],
        "angle_rad": float(angle),
        "thickness_vox": thickness,
        "notch": notch,
        "wall_fraction": float(wall.sum() / wall.size),
    }
    spacing = cfg.spacing_mm
    return PhantomCase(
        image=Volume3(image.astype(np.float32), spacing),
        cavity=Mask3(cavity.astype(np.uint8), spacing),
        wall=Mask3(wall.astype(np.uint8), spacing),
        meta=meta,
    )


def case_rng(cfg: PhantomConfig, index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, index])


def case_id(index: int) -> str:
    return f"case_{index:04d}"


def write_case(case: PhantomCase, case_dir: Path) -> None:
    save_volume(case.image, case_dir / "image")
    save_volume(case.cavity, case_dir / "cavity")
    save_volume(case.wall, case_dir / "wall")


def generate_dataset(cfg: PhantomConfig, root, counts: Optional[Sequence[int]] = None,
                     workers: int = 1) -> dict:
    """Write every case plus ``manifest.json`` under ``root`` and return the manifest."""
    counts = tuple(cfg.counts if counts is None else counts)
    if len(counts) != 3 or min(counts) < 1:
        raise InvalidConfig(f"every split needs at least one case, got {counts}")
    root = Path(root)

    splits: Dict[str, List[str]] = {}
    start = 0
    for name, n in zip(SPLITS, counts):
        splits[name] = [case_id(i) for i in range(start, start + n)]
        start += n

    def build(index: int) -> Tuple[str, dict]:
        case = generate_case(cfg, case_rng(cfg, index))
        write_case(case, root / case_id(index))
        return case_id(index), case.meta

    logger.info("Generating %d phantom cases under %s...", start, root)
    cases = dict(map_cases(build, list(range(start)), workers))
    heavy = sorted(cid for cid, meta in cases.items() if meta["wall_fraction"] >= MAX_WALL_FRACTION)
    if heavy:
        logger.warning("  %d cases have a wall share of at least %.0f%% of the volume: %s", len(heavy),
                       100 * MAX_WALL_FRACTION, ", ".join(heavy[:5]))
    logger.info("  Generated %d/%d cases (%s)", len(cases), start,
                ", ".join(f"{k}={len(v)}" for k, v in splits.items()))

    manifest = {
        "format": "c2w-phantoms",
        "version": 1,
        "config": cfg.to_dict(),
        "splits": splits,
        "cases": cases,
    }
    atomic_write_bytes(root / "manifest.json", (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return manifest
