"""Fold planning and the training loop.

Every random choice comes from its own seeded stream so that a run is
reproducible bit for bit. The stream for a draw is
``default_rng([seed, STREAM, epoch, index])``, with one stream id per
purpose (patch sampling, shuffling, flips, loss penalty).
"""

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NonFiniteError
from .inference import predict_mask
from .losses import AdamState, LossConfig, adam_step, draw_penalty, loss_value
from .postprocess import confusion, mean_report, metrics
from .sampler import SamplerConfig, extract, extract_mask, mask_stats, training_patches
from .unet import Checkpoint, UNet, save

log = logging.getLogger(__name__)

STREAM_SAMPLE, STREAM_SHUFFLE, STREAM_FLIP, STREAM_PENALTY = 1, 2, 3, 4
SAMPLING_MODES = ("dcpa", "uniform")
LOG_FIELDS = ("epoch", "loss", "val_precision", "val_recall", "val_f1", "val_overlap")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 351
    batch_size: int = 8
    folds: int = 5
    validation_fraction: float = 0.3
    lr: float = 1e-3
    seed: int = 0
    sampling: str = "dcpa"
    postprocess: bool = True
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    checkpoint_dir: str = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")
        if not 0 < self.validation_fraction < 1:
            raise ValueError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"sampling must be one of {SAMPLING_MODES}, got {self.sampling!r}")


@dataclass(frozen=True)
class Fold:
    train: tuple
    validation: tuple
    test: tuple


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple

    def __iter__(self):
        return iter(self.folds)

    def __len__(self):
        return len(self.folds)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    loss: float
    val_precision: float
    val_recall: float
    val_f1: float
    val_overlap: float
    penalties: tuple = ()

    def row(self):
        return [self.epoch] + [format(getattr(self, k), ".10g") for k in LOG_FIELDS[1:]]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    logs: list
    best_epoch: int


def _carve(ids, fraction, rng):
    """Shuffle ``ids`` and split off a validation share (at least one of each)."""
    ids = list(ids)
    rng.shuffle(ids)
    n_val = int(np.floor(fraction * len(ids) + 0.5))
    n_val = min(max(n_val, 1), len(ids) - 1)
    return tuple(ids[n_val:]), tuple(ids[:n_val])


def make_folds(ids, cfg, rng, test_ids=None):
    """Cross-validation plan.

    Without ``test_ids`` the ids are shuffled into ``cfg.folds`` near-equal
    test groups and, per fold, the rest splits into train and validation.
    With a fixed test split only the validation carve-out is applied and a
    single fold is returned.
    """
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("image ids must be unique")
    if test_ids is not None:
        test = tuple(test_ids)
        pool = [i for i in ids if i not in set(test)]
        if len(pool) < 2:
            raise ValueError(f"need at least 2 training images, got {len(pool)}")
        train, val = _carve(pool, cfg.validation_fraction, rng)
        return FoldPlan((Fold(train, val, test),))
    if len(ids) < cfg.folds:
        raise ValueError(f"{len(ids)} images cannot be split into {cfg.folds} folds")
    if len(ids) - -(-len(ids) // cfg.folds) < 2:
        raise ValueError(f"{len(ids)} images leave too few for training in {cfg.folds} folds")
    order = list(ids)
    rng.shuffle(order)
    folds = []
    for group in np.array_split(np.arange(len(order)), cfg.folds):
        test = tuple(order[i] for i in group)
        rest = [i for i in order if i not in set(test)]
        train, val = _carve(rest, cfg.validation_fraction, rng)
        folds.append(Fold(train, val, test))
    return FoldPlan(tuple(folds))


def augment_flip(patch, mask_patch, rng):
    """Flip image and mask together, each axis with probability 0.5."""
    flip_v, flip_h = rng.random(2) < 0.5
    if flip_v:
        patch, mask_patch = patch[..., ::-1, :], mask_patch[..., ::-1, :]
    if flip_h:
        patch, mask_patch = patch[..., :, ::-1], mask_patch[..., :, ::-1]
    return np.ascontiguousarray(patch), np.ascontiguousarray(mask_patch)


def _stream(cfg, stream, *keys):
    return np.random.default_rng([cfg.seed, stream, *keys])


def epoch_batches(data, train_ids, cfg, epoch):
    """Sample, shuffle and group one epoch's patches as lists of ``(id, PatchSpec)``."""
    items = []
    for index, rid in enumerate(train_ids):
        _, mask = data[rid]
        specs = training_patches(mask, cfg.sampler, _stream(cfg, STREAM_SAMPLE, epoch, index), cfg.sampling)
        stats = mask_stats(mask)
        for spec in specs:
            if spec.kind == "disc" and not spec.contains(stats.bbox):
                raise AssertionError(f"{rid}: disc patch {spec} misses the disc")
            items.append((rid, spec))
    order = _stream(cfg, STREAM_SHUFFLE, epoch).permutation(len(items))
    items = [items[i] for i in order]
    return [items[i:i + cfg.batch_size] for i in range(0, len(items), cfg.batch_size)]


def evaluate(model, data, ids, output_size, postprocess=True):
    """Mean per-image metrics of full-image predictions against ground truth."""
    reports = []
    for rid in ids:
        image, mask = data[rid]
        pred = predict_mask(model, image, output_size, postprocess=postprocess)
        reports.append(metrics(confusion(pred, mask)))
    return mean_report(reports)


def _write_log(path, logs):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for entry in logs:
            writer.writerow(entry.row())


def train_fold(model_config, fold, data, cfg, log_path=None, checkpoint_path=None):
    """Train one fold and return the checkpoint with the best validation F1.

    ``data`` maps ids to ``(image, mask)`` arrays. The epoch log is appended
    to ``log_path`` as CSV after every epoch when given; the best
    checkpoint is written to ``checkpoint_path`` when given.
    """
    leaked = set(fold.train) & (set(fold.test) | set(fold.validation))
    if leaked:
        raise ValueError(f"ids appear in training and held-out sets: {sorted(leaked)}")
    model = UNet(model_config)
    output_size = (cfg.sampler.patch_w, cfg.sampler.patch_h)
    geo = model.geometry(output_size)
    if geo.margin != cfg.sampler.margin:
        raise ValueError(f"sampler margin {cfg.sampler.margin} does not match the network's {geo.margin}")
    names = list(model.params)
    state = AdamState(lr=cfg.lr)
    best = Checkpoint(model_config, model.state_dict(), {"epoch": 0, "val_f1": None})
    best_f1, best_epoch, logs = None, 0, []
    if log_path:
        _write_log(log_path, logs)
    train_set = set(fold.train)

    for epoch in range(1, cfg.epochs + 1):
        losses, penalties = [], []
        for b, batch in enumerate(epoch_batches(data, fold.train, cfg, epoch)):
            flip_rng = _stream(cfg, STREAM_FLIP, epoch, b)
            xs, ys = [], []
            for rid, spec in batch:
                assert rid in train_set, f"{rid} is not a training image"
                image, mask = data[rid]
                x, y = augment_flip(extract(image, spec), extract_mask(mask, spec), flip_rng)
                xs.append(x)
                ys.append(y)
            penalty = draw_penalty(cfg.loss, np.random.default_rng([cfg.seed, STREAM_PENALTY, cfg.loss.seed, epoch, b]))
            probs = model(np.stack(xs))
            loss = loss_value(cfg.loss, probs, np.stack(ys), penalty)
            value = loss.item()
            where = f"epoch {epoch}, batch {b} (images {[rid for rid, _ in batch]})"
            if not np.isfinite(value):
                log.error("non-finite loss at %s", where)
                raise NonFiniteError(f"loss became {value} at {where}")
            T.backward(loss)
            grads = {n: model.params[n].grad for n in names}
            try:
                adam_step(model.params, grads, state)
            except NonFiniteError as exc:
                log.error("%s at %s", exc, where)
                raise NonFiniteError(f"{exc} at {where}") from exc
            for p in model.params.values():
                p.grad = None
            losses.append(value)
            penalties.append(penalty)

        report = evaluate(model, data, fold.validation, output_size, cfg.postprocess)
        entry = EpochLog(
            epoch, float(np.mean(losses)), report.precision, report.recall, report.f1, report.overlap, tuple(penalties)
        )
        logs.append(entry)
        log.info("epoch %d loss %.4f val F1 %.4f", epoch, entry.loss, entry.val_f1)
        if log_path:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(entry.row())
        if best_f1 is None or entry.val_f1 > best_f1:
            best_f1, best_epoch = entry.val_f1, epoch
            best = Checkpoint(model_config, model.state_dict(), {"epoch": epoch, "val_f1": entry.val_f1})

    if checkpoint_path:
        save(best, checkpoint_path)
    return TrainResult(best, logs, best_epoch)

