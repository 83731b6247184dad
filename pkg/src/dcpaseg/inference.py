"""Full-image prediction by sliding-window tiling."""

import numpy as np

from .postprocess import postprocess as clean
from .sampler import extract, reflect_index, tiling


def _grow(image, min_h, min_w):
    """Mirror-extend ``image`` at the bottom/right up to at least ``min_h x min_w``."""
    H, W = image.shape[-2:]
    if H >= min_h and W >= min_w:
        return image
    rows = reflect_index(np.arange(max(H, min_h)), H)
    cols = reflect_index(np.arange(max(W, min_w)), W)
    return image[..., rows[:, None], cols[None, :]]


def predict_full(model, image, output_size, batch_size=8):
    """Probability map ``(2, H, W)`` for a ``(C, H, W)`` image.

    Each tile's network output is written into its window. Pixels covered by
    more than one tile get the mean of their tile outputs, renormalized to
    sum to 1; pixels covered by a single tile keep that tile's values exactly.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {image.shape}")
    geo = model.geometry(output_size)
    H, W = image.shape[-2:]
    work = _grow(image, geo.output_h, geo.output_w)
    Hw, Ww = work.shape[-2:]
    tiles = tiling((Hw, Ww), (geo.output_w, geo.output_h), geo.margin)

    acc = np.zeros((2, Hw, Ww), dtype=np.float64)
    hits = np.zeros((Hw, Ww), dtype=np.int32)
    for start in range(0, len(tiles), batch_size):
        chunk = tiles[start:start + batch_size]
        batch = np.stack([extract(work, t) for t in chunk]).astype(model.dtype, copy=False)
        probs = model(batch).data
        for t, p in zip(chunk, probs):
            acc[:, t.y:t.y + t.h, t.x:t.x + t.w] += p
            hits[t.y:t.y + t.h, t.x:t.x + t.w] += 1

    out = acc.astype(model.dtype)
    shared = hits > 1
    if shared.any():
        mean = acc[:, shared] / hits[shared]
        out[:, shared] = (mean / mean.sum(axis=0, keepdims=True)).astype(model.dtype)
    return out[:, :H, :W]


def binarize(prob_map):
    """Disc where its probability strictly exceeds background; ties go to background."""
    prob_map = np.asarray(prob_map)
    return (prob_map[1] > prob_map[0]).astype(np.uint8)


def predict_mask(model, image, output_size, postprocess=True, batch_size=8):
    mask = binarize(predict_full(model, image, output_size, batch_size))
    return clean(mask) if postprocess else mask

