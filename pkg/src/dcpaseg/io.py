"""Dataset manifests, raster I/O, synthetic fundus images and overlays.

A manifest is a YAML document::

    format: 1
    name: drive
    geometry: {output: [388, 388], input: [572, 572]}
    records:
      - {id: "01", image: images/01.png, mask: masks/01.png, split: train}

Paths are relative to the manifest's directory. ``geometry`` may be
omitted, in which case the 388/572 pairing is used. ``mask`` may be absent
for images without ground truth; ``split`` is ``train``, ``test`` or
``unsplit`` (the default).
"""

import os
from dataclasses import dataclass, field

import numpy as np
import yaml
from PIL import Image

from .errors import DataError
from .sampler import mask_stats
from .unet import ModelConfig, geometry, geometry_for_input

MANIFEST_FORMAT = 1
DEFAULT_OUTPUT = (388, 388)
DEFAULT_INPUT = (572, 572)
SPLITS = ("train", "test", "unsplit")


@dataclass(frozen=True)
class Record:
    id: str
    image: str
    mask: str = None
    split: str = "unsplit"


@dataclass
class DatasetManifest:
    name: str
    records: list
    output_size: tuple = DEFAULT_OUTPUT  # (w, h)
    input_size: tuple = DEFAULT_INPUT  # (w, h)
    root: str = "."

    @property
    def margin(self):
        return (self.input_size[0] - self.output_size[0]) // 2

    def ids(self, split=None):
        return [r.id for r in self.records if split is None or r.split == split]

    def record(self, rid):
        for r in self.records:
            if r.id == rid:
                return r
        raise KeyError(rid)

    def path(self, rel):
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def has_fixed_split(self):
        splits = {r.split for r in self.records}
        return "train" in splits and "test" in splits

    def depth(self):
        """Network depth whose valid-convolution layout realizes the declared geometry."""
        for depth in range(1, 9):
            cfg = ModelConfig(depth=depth, base_width=1)
            try:
                geo = geometry_for_input(cfg, self.input_size)
            except ValueError:
                continue
            if (geo.output_w, geo.output_h) == tuple(self.output_size):
                return depth
        return None

    def to_dict(self):
        recs = []
        for r in self.records:
            d = {"id": r.id, "image": r.image}
            if r.mask is not None:
                d["mask"] = r.mask
            d["split"] = r.split
            recs.append(d)
        return {
            "format": MANIFEST_FORMAT,
            "name": self.name,
            "geometry": {"output": list(self.output_size), "input": list(self.input_size)},
            "records": recs,
        }


def _pair(value, what):
    if isinstance(value, int):
        return (value, value)
    if isinstance(value, (list, tuple)) and len(value) == 2 and all(isinstance(v, int) for v in value):
        return tuple(value)
    raise DataError(f"manifest geometry {what} must be an integer or [w, h], got {value!r}")


def load_manifest(path, check_files=True):
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except yaml.YAMLError as exc:
        raise DataError(f"manifest {path} is not valid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise DataError(f"manifest {path} must be a mapping")
    if doc.get("format") != MANIFEST_FORMAT:
        raise DataError(f"manifest {path}: unsupported format {doc.get('format')!r} (expected {MANIFEST_FORMAT})")
    geo = doc.get("geometry") or {}
    records, seen = [], set()
    for i, raw in enumerate(doc.get("records") or []):
        if not isinstance(raw, dict) or "id" not in raw or "image" not in raw:
            raise DataError(f"manifest {path}: record {i} needs at least 'id' and 'image'")
        rec = Record(str(raw["id"]), raw["image"], raw.get("mask"), raw.get("split", "unsplit"))
        if rec.id in seen:
            raise DataError(f"manifest {path}: duplicate id {rec.id!r}")
        if rec.split not in SPLITS:
            raise DataError(f"manifest {path}: record {rec.id!r} has unknown split {rec.split!r}")
        seen.add(rec.id)
        records.append(rec)
    if not records:
        raise DataError(f"manifest {path} lists no records")
    manifest = DatasetManifest(
        name=str(doc.get("name", os.path.splitext(os.path.basename(path))[0])),
        records=records,
        output_size=_pair(geo.get("output", DEFAULT_OUTPUT), "output"),
        input_size=_pair(geo.get("input", DEFAULT_INPUT), "input"),
        root=os.path.dirname(os.path.abspath(path)),
    )
    if manifest.depth() is None:
        raise DataError(
            f"manifest {path}: output {manifest.output_size} / input {manifest.input_size} "
            "is not realizable by any network depth"
        )
    if check_files:
        for r in records:
            for rel in (r.image, r.mask):
                if rel is not None and not os.path.isfile(manifest.path(rel)):
                    raise DataError(f"manifest {path}: file for {r.id!r} not found: {rel}")
    return manifest


def save_manifest(manifest, path):
    with open(path, "w") as fh:
        yaml.safe_dump(manifest.to_dict(), fh, sort_keys=False)


# -- rasters --------------------------------------------------------------------

def _open(path):
    try:
        img = Image.open(path)
        img.load()
        return img
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except (OSError, SyntaxError) as exc:
        raise DataError(f"unreadable raster {path}: {exc}") from None


def load_image(path):
    """RGB raster as float32 ``(3, H, W)`` in [0, 1]."""
    arr = np.asarray(_open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_mask(path):
    """Single-channel raster binarized at > 0, as uint8 {0, 1}."""
    img = _open(path)
    if img.mode not in ("L", "1", "P", "I", "I;16"):
        img = img.convert("L")
    return (np.asarray(img) > 0).astype(np.uint8)


def save_mask(mask, path):
    Image.fromarray((np.asarray(mask) != 0).astype(np.uint8) * 255, mode="L").save(path)


def save_image(image, path):
    """Write a ``(3, H, W)`` float image in [0, 1] as 8-bit RGB."""
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_record(manifest, rid):
    """``(image, mask)`` for one id; ``mask`` is None when the record has none."""
    rec = manifest.record(rid)
    image = load_image(manifest.path(rec.image))
    if rec.mask is None:
        return image, None
    mask = load_mask(manifest.path(rec.mask))
    if mask.shape != image.shape[1:]:
        raise DataError(f"{rid}: mask is {mask.shape[1]}x{mask.shape[0]} but image is {image.shape[2]}x{image.shape[1]}")
    return image, mask


# -- synthetic data -------------------------------------------------------------

FOV_RADIUS = 0.47  # field-of-view radius as a fraction of the image side
DISC_FRACTION = (0.03, 0.09)


def field_of_view(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    return (xx - c) ** 2 + (yy - c) ** 2 <= (FOV_RADIUS * size) ** 2


@dataclass
class SynthSample:
    image: np.ndarray
    mask: np.ndarray
    fov: np.ndarray = field(repr=False, default=None)


def synth_sample(size, patch_size, rng):
    """One fundus-like image and its disc mask.

    The disc is a bright ellipse covering 3-9% of the field of view whose
    bounding box fits inside a ``patch_size`` square. Dark curved vessels
    radiate from it and the whole image carries additive noise.
    """
    fov = field_of_view(size)
    fov_area = int(fov.sum())
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    R = FOV_RADIUS * size

    while True:
        frac = rng.uniform(*DISC_FRACTION)
        aspect = rng.uniform(0.85, 1.15)
        area = frac * fov_area
        ry = np.sqrt(area / (np.pi * aspect))
        rx = aspect * ry
        theta = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.15, 0.6) * (R - max(rx, ry) - 3)
        cx, cy = c + dist * np.cos(theta), c + dist * np.sin(theta)
        mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        mask &= fov
        stats = mask_stats(mask)
        if stats.empty:
            continue
        x0, y0, x1, y1 = stats.bbox
        inside = DISC_FRACTION[0] <= stats.positive_count / fov_area <= DISC_FRACTION[1]
        if inside and x1 - x0 < patch_size and y1 - y0 < patch_size:
            break

    # retina: orange-red with a darker macula-side gradient
    shade = 0.75 + 0.25 * np.cos(np.hypot(xx - c, yy - c) / R * np.pi / 2)
    rgb = np.stack([0.62 * shade, 0.28 * shade, 0.12 * shade])

    # disc: bright yellow with a soft halo just outside the mask
    r = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    core = np.clip(1.6 - r, 0.0, 1.0) ** 0.5 * (r <= 1.0)
    halo = np.clip(1.25 - r, 0.0, 0.25) * (r > 1.0)
    glow = np.maximum(core, halo)
    disc_rgb = np.array([0.98, 0.90, 0.62])[:, None, None]
    rgb = rgb * (1 - glow) + disc_rgb * glow

    # vessels: dark curves leaving the disc
    vessels = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(4, 8)):
        angle = rng.uniform(0, 2 * np.pi)
        bend = rng.uniform(-0.012, 0.012)
        width = rng.uniform(0.8, 2.0)
        t = np.linspace(0, 1.2 * R, 600)
        a = angle + bend * t
        px, py = cx + t * np.cos(a), cy + t * np.sin(a)
        for x, y in zip(px[::3], py[::3]):
            r0, r1 = max(int(y - width) - 1, 0), min(int(y + width) + 2, size)
            c0, c1 = max(int(x - width) - 1, 0), min(int(x + width) + 2, size)
            if r0 >= r1 or c0 >= c1:
                continue
            win = (xx[r0:r1, c0:c1] - x) ** 2 + (yy[r0:r1, c0:c1] - y) ** 2 <= width ** 2
            vessels[r0:r1, c0:c1] |= win
    rgb = np.where(vessels, rgb * 0.45, rgb)

    rgb = rgb + rng.normal(0.0, 0.03, size=rgb.shape)
    rgb = np.where(fov, np.clip(rgb, 0.0, 1.0), 0.0)
    image = (np.rint(rgb * 255) / 255).astype(np.float32)
    return SynthSample(image, mask.astype(np.uint8), fov)


def synth_dataset(out_dir, n=30, image_size=256, patch_size=100, depth=3, seed=0, test_fraction=1 / 3):
    """Write ``n`` synthetic images, masks and a manifest to ``out_dir``.

    The first ``round(n * (1 - test_fraction))`` ids are tagged ``train``
    and the rest ``test``. Returns the manifest path.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    geo = geometry(ModelConfig(depth=depth, base_width=1), patch_size)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    n_train = n - int(np.floor(n * test_fraction + 0.5)) if n > 1 else 1
    records = []
    for i in range(n):
        sample = synth_sample(image_size, patch_size, np.random.default_rng([seed, i]))
        rid = f"synth{i:03d}"
        img_rel, mask_rel = f"images/{rid}.png", f"masks/{rid}.png"
        save_image(sample.image, os.path.join(out_dir, img_rel))
        save_mask(sample.mask, os.path.join(out_dir, mask_rel))
        records.append(Record(rid, img_rel, mask_rel, "train" if i < n_train else "test"))
    manifest = DatasetManifest(
        "synth", records, (geo.output_w, geo.output_h), (geo.input_w, geo.input_h), os.path.abspath(out_dir)
    )
    path = os.path.join(out_dir, "manifest.yaml")
    save_manifest(manifest, path)
    return path


# -- overlays -------------------------------------------------------------------

OVERLAY_COLORS = {
    "tp": (255, 255, 255),
    "fp": (0, 255, 0),
    "fn": (255, 0, 0),
    "tn": (0, 0, 0),
}


def render_overlay(image, pred, truth):
    """RGB uint8 map coloring each pixel by its confusion class."""
    pred, truth = np.asarray(pred) != 0, np.asarray(truth) != 0
    hw = np.asarray(image).shape[-2:]
    if pred.shape != truth.shape or pred.shape != hw:
        raise DataError(f"overlay size mismatch: image {hw}, prediction {pred.shape}, truth {truth.shape}")
    out = np.zeros(pred.shape + (3,), dtype=np.uint8)
    out[pred & truth] = OVERLAY_COLORS["tp"]
    out[pred & ~truth] = OVERLAY_COLORS["fp"]
    out[~pred & truth] = OVERLAY_COLORS["fn"]
    return out


def save_overlay(image, pred, truth, path):
    Image.fromarray(render_overlay(image, pred, truth), mode="RGB").save(path)
