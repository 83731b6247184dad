"""Training-time patch selection centered on the optic disc.

Coordinates follow image convention: ``x`` is the column, ``y`` the row.
Masks are 2-D arrays where any nonzero value marks the disc. Images are
``(C, H, W)`` arrays.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError


class SamplerWarning(UserWarning):
    """Disc sampling could not honour its constraints for one image."""


@dataclass(frozen=True)
class MaskStats:
    positive_count: int
    bbox: tuple = None  # (x0, y0, x1, y1), inclusive
    center_of_mass: tuple = None  # (cx, cy)

    @property
    def empty(self):
        return self.positive_count == 0


@dataclass(frozen=True)
class SamplerConfig:
    ratio: float = 0.5
    min_positive: int = 500
    patch_w: int = 388
    patch_h: int = 388
    margin: int = 92
    include_corners: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.min_positive < 0:
            raise ValueError(f"min_positive must be >= 0, got {self.min_positive}")
        if self.patch_w < 1 or self.patch_h < 1:
            raise ValueError(f"patch size must be positive, got {self.patch_w}x{self.patch_h}")
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")


@dataclass(frozen=True)
class PatchSpec:
    """Output rectangle of one patch; the network input extends it by ``margin``."""

    x: int
    y: int
    w: int
    h: int
    margin: int = 0
    kind: str = "tile"

    @property
    def input_rect(self):
        m = self.margin
        return (self.x - m, self.y - m, self.w + 2 * m, self.h + 2 * m)

    def contains(self, bbox):
        x0, y0, x1, y1 = bbox
        return self.x <= x0 and self.y <= y0 and x1 < self.x + self.w and y1 < self.y + self.h

    def in_bounds(self, height, width):
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height


def mask_stats(mask):
    ys, xs = np.nonzero(np.asarray(mask))
    if ys.size == 0:
        return MaskStats(0)
    bbox = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
    return MaskStats(int(ys.size), bbox, (float(xs.mean()), float(ys.mean())))


def disc_patch_count(cfg, P):
    """Number of disc patches drawn per image: ceil(r * P)."""
    # the small slack keeps float noise in r * P from adding a patch
    return max(1, math.ceil(cfg.ratio * P - 1e-9))


def _round_half_up(v):
    return int(math.floor(v + 0.5))


def feasible_offsets(stats, image_size, cfg):
    """Inclusive ranges of top-left corners that contain the disc and stay in bounds.

    Returns ``((xlo, xhi), (ylo, yhi))`` or ``None`` when no placement exists.
    """
    H, W = image_size
    x0, y0, x1, y1 = stats.bbox
    xlo, xhi = max(x1 - cfg.patch_w + 1, 0), min(x0, W - cfg.patch_w)
    ylo, yhi = max(y1 - cfg.patch_h + 1, 0), min(y0, H - cfg.patch_h)
    if xlo > xhi or ylo > yhi:
        return None
    return (xlo, xhi), (ylo, yhi)


def centered_origin(stats, cfg):
    """Top-left corner of the zero-shift patch centered on the rounded center of mass."""
    cx, cy = stats.center_of_mass
    return _round_half_up(cx) - cfg.patch_w // 2, _round_half_up(cy) - cfg.patch_h // 2


def sample_disc_patches(mask, cfg, P, rng):
    """Draw ceil(r * P) patches that each contain the whole disc.

    The shift from the centered placement is uniform over every offset that
    keeps the disc bounding box inside the patch and the patch inside the
    image. An image with fewer than ``min_positive`` disc pixels yields no
    disc patches (no placement can reach the floor). A disc larger than the
    patch yields one centered, clamped patch. Both cases emit a
    :class:`SamplerWarning`.
    """
    mask = np.asarray(mask)
    H, W = mask.shape
    stats = mask_stats(mask)
    if stats.empty:
        raise ValueError("cannot sample disc patches from an empty mask")
    if cfg.patch_w > W or cfg.patch_h > H:
        raise GeometryError(f"patch {cfg.patch_w}x{cfg.patch_h} exceeds image {W}x{H}")
    if stats.positive_count < cfg.min_positive:
        warnings.warn(
            f"disc has {stats.positive_count} pixels, below the floor of {cfg.min_positive}; "
            "no disc patches drawn",
            SamplerWarning,
            stacklevel=2,
        )
        return []
    ranges = feasible_offsets(stats, (H, W), cfg)
    if ranges is None:
        ox, oy = centered_origin(stats, cfg)
        ox = min(max(ox, 0), W - cfg.patch_w)
        oy = min(max(oy, 0), H - cfg.patch_h)
        warnings.warn(
            f"disc bbox {stats.bbox} does not fit a {cfg.patch_w}x{cfg.patch_h} patch; "
            "using a single centered patch",
            SamplerWarning,
            stacklevel=2,
        )
        return [PatchSpec(ox, oy, cfg.patch_w, cfg.patch_h, cfg.margin, "fallback")]
    (xlo, xhi), (ylo, yhi) = ranges
    n = disc_patch_count(cfg, P)
    xs = rng.integers(xlo, xhi + 1, size=n)
    ys = rng.integers(ylo, yhi + 1, size=n)
    return [PatchSpec(int(x), int(y), cfg.patch_w, cfg.patch_h, cfg.margin, "disc") for x, y in zip(xs, ys)]


def sample_uniform_patches(image_size, cfg, n, rng):
    """``n`` patches at uniformly random in-bounds positions (the ablation baseline)."""
    H, W = image_size
    if cfg.patch_w > W or cfg.patch_h > H:
        raise GeometryError(f"patch {cfg.patch_w}x{cfg.patch_h} exceeds image {W}x{H}")
    xs = rng.integers(0, W - cfg.patch_w + 1, size=n)
    ys = rng.integers(0, H - cfg.patch_h + 1, size=n)
    return [PatchSpec(int(x), int(y), cfg.patch_w, cfg.patch_h, cfg.margin, "uniform") for x, y in zip(xs, ys)]


def corner_patches(image_size, cfg):
    """One patch flush with each image corner, duplicates removed."""
    H, W = image_size
    if cfg.patch_w > W or cfg.patch_h > H:
        raise GeometryError(f"patch {cfg.patch_w}x{cfg.patch_h} exceeds image {W}x{H}")
    xr, yb = W - cfg.patch_w, H - cfg.patch_h
    specs = []
    for x, y in ((0, 0), (xr, 0), (0, yb), (xr, yb)):
        spec = PatchSpec(x, y, cfg.patch_w, cfg.patch_h, cfg.margin, "corner")
        if spec not in specs:
            specs.append(spec)
    return specs


def _starts(extent, size):
    if size >= extent:
        return [0]
    starts = list(range(0, extent - size + 1, size))
    if starts[-1] + size < extent:
        starts.append(extent - size)
    return starts


def tiling(image_size, patch_size, margin=0):
    """Grid of output tiles covering the image; the last row and column sit flush.

    ``patch_size`` is ``(w, h)`` or a single int. An image smaller than the
    patch along an axis gets one tile clamped to the image extent.
    """
    H, W = image_size
    pw, ph = (patch_size, patch_size) if np.isscalar(patch_size) else patch_size
    return [
        PatchSpec(x, y, min(pw, W), min(ph, H), margin, "tile")
        for y in _starts(H, ph)
        for x in _starts(W, pw)
    ]


def training_patches(mask, cfg, rng, mode="dcpa"):
    """Disc (or uniform) patches for one image followed by its corner patches."""
    mask = np.asarray(mask)
    P = len(tiling(mask.shape, (cfg.patch_w, cfg.patch_h)))
    if mode == "dcpa":
        specs = sample_disc_patches(mask, cfg, P, rng)
    elif mode == "uniform":
        specs = sample_uniform_patches(mask.shape, cfg, disc_patch_count(cfg, P), rng)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    if cfg.include_corners:
        specs = specs + corner_patches(mask.shape, cfg)
    return specs


# -- extraction -----------------------------------------------------------------

def reflect_index(idx, n):
    """Map integer indices into ``[0, n)`` by mirror reflection without repeating the edge."""
    idx = np.asarray(idx)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    r = np.mod(idx, period)
    return np.where(r < n, r, period - r)


def extract(image, spec):
    """Network input for ``spec``: the output rectangle grown by its margin, mirror-extended."""
    image = np.asarray(image)
    H, W = image.shape[-2:]
    x, y, w, h = spec.input_rect
    rows = reflect_index(np.arange(y, y + h), H)
    cols = reflect_index(np.arange(x, x + w), W)
    return image[..., rows[:, None], cols[None, :]]


def extract_mask(mask, spec):
    """Ground-truth labels under the output rectangle."""
    return np.asarray(mask)[spec.y:spec.y + spec.h, spec.x:spec.x + spec.w]
