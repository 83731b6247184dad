"""Run configuration files and the end-to-end experiment runner.

A run config is YAML with a versioned ``format`` key::

    format: 1
    manifest: data/manifest.yaml
    output_dir: runs/r1
    model: {depth: 4, base_width: 32, seed: 0}
    train: {epochs: 351, batch_size: 8, folds: 5, sampling: dcpa, seed: 0}
    loss: {kind: dice, stochastic: true, alpha: 5.0, step: 0.5}
    sampler: {ratio: 0.5, min_positive: 500, include_corners: true}

Patch size and margin come from the manifest geometry. Relative paths
resolve against the config file's directory. A missing ``train.seed`` is
drawn from fresh entropy; the resolved file written next to the outputs
records it, so re-running from that file reproduces the run.
"""

import csv
import dataclasses
import os

import numpy as np
import yaml

from .errors import DataError
from .inference import predict_mask
from .io import load_manifest, load_record, save_mask
from .losses import LossConfig
from .postprocess import confusion, mean_report, metrics
from .sampler import SamplerConfig
from .trainer import TrainConfig, make_folds, train_fold
from .unet import ModelConfig, geometry

CONFIG_FORMAT = 1
METRIC_FIELDS = ("id", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "overlap")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    manifest: str
    output_dir: str
    model: ModelConfig
    train: TrainConfig

    @property
    def loss(self):
        return self.train.loss

    @property
    def sampler(self):
        return self.train.sampler

    def to_dict(self):
        train = dataclasses.asdict(self.train)
        loss, sampler = train.pop("loss"), train.pop("sampler")
        return {
            "format": CONFIG_FORMAT,
            "manifest": self.manifest,
            "output_dir": self.output_dir,
            "model": dataclasses.asdict(self.model),
            "train": train,
            "loss": loss,
            "sampler": sampler,
        }


def _section(doc, key, cls, exclude=()):
    raw = doc.get(key) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"config section {key!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"unknown keys in config section {key!r}: {unknown}")
    return raw


def run_config_from_dict(doc, base_dir=".", manifest=None):
    """Build and validate a RunConfig; ``manifest`` supplies patch geometry when given."""
    if doc.get("format") != CONFIG_FORMAT:
        raise ValueError(f"unsupported run config format {doc.get('format')!r} (expected {CONFIG_FORMAT})")
    for key in ("manifest", "output_dir"):
        if not doc.get(key):
            raise ValueError(f"run config needs {key!r}")

    def resolve(p):
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))

    manifest_path, output_dir = resolve(doc["manifest"]), resolve(doc["output_dir"])
    model = ModelConfig(**_section(doc, "model", ModelConfig))
    train_raw = dict(_section(doc, "train", TrainConfig, exclude=("loss", "sampler")))
    if train_raw.get("seed") is None:
        train_raw["seed"] = int(np.random.SeedSequence().entropy % 2**31)
    loss = LossConfig(**_section(doc, "loss", LossConfig))
    sampler_raw = dict(_section(doc, "sampler", SamplerConfig))
    if manifest is None:
        manifest = load_manifest(manifest_path)
    sampler_raw.update(patch_w=manifest.output_size[0], patch_h=manifest.output_size[1], margin=manifest.margin)
    sampler = SamplerConfig(**sampler_raw)
    train = TrainConfig(**train_raw, loss=loss, sampler=sampler)
    geo = model_geometry(model, sampler)
    if (geo.input_w, geo.input_h) != tuple(manifest.input_size):
        raise ValueError(
            f"model depth {model.depth} needs input {geo.input_w}x{geo.input_h} for output "
            f"{sampler.patch_w}x{sampler.patch_h}, manifest declares {manifest.input_size}"
        )
    return RunConfig(manifest_path, output_dir, model, train)


def model_geometry(model, sampler):
    return geometry(model, (sampler.patch_w, sampler.patch_h))


def load_run_config(path):
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError:
        raise DataError(f"run config not found: {path}") from None
    if not isinstance(doc, dict):
        raise ValueError(f"run config {path} must be a mapping")
    return run_config_from_dict(doc, os.path.dirname(os.path.abspath(path)))


def save_run_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def metric_row(rid, counts, report):
    return [rid, counts.tp, counts.fp, counts.fn, counts.tn] + [
        format(getattr(report, k), ".10g") for k in ("precision", "recall", "f1", "overlap")
    ]


def write_metrics_csv(path, rows, summary):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        writer.writerows(rows)
        writer.writerow(["mean", "", "", "", ""] + [format(getattr(summary, k), ".10g") for k in METRIC_FIELDS[5:]])


@dataclasses.dataclass
class ExperimentResult:
    folds: list  # TrainResult per fold
    reports: dict  # id -> MetricsReport on test images
    summary: object  # mean MetricsReport


def run_experiment(cfg, progress=None):
    """Train every fold, predict its test images and score them.

    Writes into ``cfg.output_dir``: ``config.yaml`` (the resolved config),
    ``fold{k}/epochs.csv``, ``fold{k}/best.ckpt``, ``masks/{id}.png`` and
    ``metrics.csv``.
    """
    manifest = load_manifest(cfg.manifest)
    os.makedirs(cfg.output_dir, exist_ok=True)
    save_run_config(cfg, os.path.join(cfg.output_dir, "config.yaml"))
    ids = manifest.ids()
    missing = [r.id for r in manifest.records if r.mask is None]
    if missing:
        raise DataError(f"training needs ground truth; no mask for {missing[:5]}")
    data = {rid: load_record(manifest, rid) for rid in ids}
    rng = np.random.default_rng([cfg.train.seed, 0])
    test_ids = manifest.ids("test") if manifest.has_fixed_split() else None
    plan = make_folds(ids, cfg.train, rng, test_ids=test_ids)

    mask_dir = os.path.join(cfg.output_dir, "masks")
    os.makedirs(mask_dir, exist_ok=True)
    output_size = (cfg.sampler.patch_w, cfg.sampler.patch_h)
    results, reports, rows = [], {}, []
    for k, fold in enumerate(plan):
        fold_dir = os.path.join(cfg.output_dir, f"fold{k}")
        os.makedirs(fold_dir, exist_ok=True)
        if progress:
            progress(f"fold {k}: {len(fold.train)} train / {len(fold.validation)} validation / {len(fold.test)} test")
        res = train_fold(
            cfg.model, fold, data, cfg.train,
            log_path=os.path.join(fold_dir, "epochs.csv"),
            checkpoint_path=os.path.join(fold_dir, "best.ckpt"),
        )
        results.append(res)
        model = res.checkpoint.model()
        for rid in fold.test:
            image, mask = data[rid]
            pred = predict_mask(model, image, output_size, postprocess=cfg.train.postprocess)
            save_mask(pred, os.path.join(mask_dir, f"{rid}.png"))
            counts = confusion(pred, mask)
            reports[rid] = metrics(counts)
            rows.append(metric_row(rid, counts, reports[rid]))
    order = sorted(range(len(rows)), key=lambda i: rows[i][0])
    rows = [rows[i] for i in order]
    summary = mean_report(reports[r] for r in sorted(reports))
    write_metrics_csv(os.path.join(cfg.output_dir, "metrics.csv"), rows, summary)
    return ExperimentResult(results, reports, summary)
