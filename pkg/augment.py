"""
On-the-fly augmentation for (image, mask) pairs.

Geometric transforms (axis flips, in-plane rotation, elastic warp) move the
image and mask together, resampling the mask with nearest neighbour so it
stays binary. Intensity transforms (scaling, histogram matching) touch the
image only. Every random draw comes from the caller's generator, so a fixed
seed reproduces the output bitwise.
"""
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage
from skimage.exposure import match_histograms

from volume_io import Mask3, Volume3


@dataclass(frozen=True)
class AugmentConfig:
    p_flip: float = 0.5
    # left-right only by default
    flip_axes: Tuple[int, ...] = (2,)
    p_rotate: float = 0.2
    max_rotation_deg: float = 10.0
    p_elastic: float = 0.2
    elastic_sigma: float = 4.0
    # peak displacement in voxels
    elastic_alpha: float = 1.5
    p_scale: float = 0.3
    scale_range: Tuple[float, float] = (0.9, 1.1)
    p_histogram: float = 0.1

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_flip=0.0, p_rotate=0.0, p_elastic=0.0, p_scale=0.0, p_histogram=0.0)


def flip(image: np.ndarray, mask: np.ndarray, axis: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.flip(image, axis=axis).copy(), np.flip(mask, axis=axis).copy()


def rotate_depth_axis(image: np.ndarray, mask: np.ndarray, angle_deg: float) -> Tuple[np.ndarray, np.ndarray]:
    """Rotate every axial slice by the same angle about the depth axis."""
    img = ndimage.rotate(image, angle_deg, axes=(1, 2), reshape=False, order=1, mode="nearest")
    msk = ndimage.rotate(mask, angle_deg, axes=(1, 2), reshape=False, order=0, mode="constant", cval=0)
    return img.astype(np.float32), msk.astype(np.uint8)


def elastic_deform(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                   sigma: float, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    """Warp with a Gaussian-smoothed random displacement field of peak size ``alpha`` voxels."""
    grid = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in image.shape), indexing="ij")
    coords = []
    for g in grid:
        field = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, size=image.shape), sigma, mode="constant")
        peak = np.abs(field).max()
        coords.append(g + (field / peak * alpha if peak > 0 else 0.0))
    img = ndimage.map_coordinates(image, coords, order=1, mode="nearest")
    msk = ndimage.map_coordinates(mask, coords, order=0, mode="constant", cval=0)
    return img.astype(np.float32), msk.astype(np.uint8)


def histogram_match(image: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Monotone CDF mapping of ``image`` onto the intensity distribution of ``reference``."""
    return match_histograms(image, reference).astype(np.float32)


def augment(v: Volume3, m: Mask3, cfg: AugmentConfig, rng: np.random.Generator,
            references: Sequence[np.ndarray] = ()) -> Tuple[Volume3, Mask3]:
    """Apply flips, rotation, elastic warp, intensity scaling and histogram matching in that order."""
    if not v.same_geometry(m):
        raise ValueError("image and mask must share geometry")
    img = np.array(v.data, dtype=np.float32)
    msk = np.array(m.data, dtype=np.uint8)

    for axis in cfg.flip_axes:
        if rng.random() < cfg.p_flip:
            img, msk = flip(img, msk, axis)
    if rng.random() < cfg.p_rotate:
        img, msk = rotate_depth_axis(img, msk, rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    if rng.random() < cfg.p_elastic:
        img, msk = elastic_deform(img, msk, rng, cfg.elastic_sigma, cfg.elastic_alpha)
    if rng.random() < cfg.p_scale:
        img = (img * rng.uniform(*cfg.scale_range)).astype(np.float32)
    if references and rng.random() < cfg.p_histogram:
        img = histogram_match(img, references[int(rng.integers(len(references)))])

    return v.with_data(img), m.with_data(msk)
