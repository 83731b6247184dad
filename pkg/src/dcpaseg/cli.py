"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

import csv
import os
import sys

import click
import numpy as np

from . import kernels
from .config import load_run_config, metric_row, run_experiment, write_metrics_csv
from .errors import CheckpointError, DataError, GeometryError, NonFiniteError
from .inference import binarize, predict_full
from .io import load_image, load_manifest, load_mask, save_mask, synth_dataset
from .postprocess import confusion, mean_report, metrics, postprocess
from .sampler import SamplerConfig, extract_mask, training_patches
from .unet import ModelConfig, geometry, load_checkpoint, param_count

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


@click.group()
@click.version_option(package_name="dcpaseg")
def cli():
    """Optic-disc segmentation with disc-centered patch augmentation."""


@cli.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("-n", "--count", default=30, show_default=True, type=click.IntRange(min=1))
@click.option("--size", default=256, show_default=True, type=click.IntRange(min=16), help="Image side in pixels.")
@click.option("--patch", default=100, show_default=True, type=click.IntRange(min=1), help="Output patch side.")
@click.option("--depth", default=3, show_default=True, type=click.IntRange(min=1), help="Network depth for the geometry.")
@click.option("--seed", default=0, show_default=True, type=int)
def synth(out_dir, count, size, patch, depth, seed):
    """Write a synthetic fundus dataset and its manifest."""
    path = synth_dataset(out_dir, count, size, patch, depth, seed)
    click.echo(f"wrote {count} images and {path}")


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--quiet", is_flag=True, help="Suppress progress lines.")
def train(config_path, quiet):
    """Run the full training protocol described by a run config."""
    cfg = load_run_config(config_path)
    echo = None if quiet else click.echo
    if echo:
        echo(f"kernels: {kernels.BACKEND_NAME}; writing to {cfg.output_dir}")
    result = run_experiment(cfg, progress=echo)
    s = result.summary
    click.echo(f"test mean: precision {s.precision:.4f} recall {s.recall:.4f} f1 {s.f1:.4f} overlap {s.overlap:.4f}")


@cli.command()
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(dir_okay=False), help="Model checkpoint.")
@click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False), help="Predict every image listed.")
@click.option("--image", "image_path", type=click.Path(dir_okay=False), help="Predict one image.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--patch", type=int, help="Output patch side (default: manifest geometry, else 388).")
@click.option("--raw", is_flag=True, help="Skip largest-component and hole-filling cleanup.")
@click.option("--probs", is_flag=True, help="Also save the disc probability map as .npy.")
def predict(ckpt_path, manifest_path, image_path, out_dir, patch, raw, probs):
    """Segment images with a trained checkpoint."""
    if (manifest_path is None) == (image_path is None):
        raise click.UsageError("give exactly one of --manifest or --image")
    ckpt = load_checkpoint(ckpt_path)
    if manifest_path:
        manifest = load_manifest(manifest_path)
        jobs = [(r.id, manifest.path(r.image)) for r in manifest.records]
        size = patch or manifest.output_size
    else:
        jobs = [(os.path.splitext(os.path.basename(image_path))[0], image_path)]
        size = patch or 388
    geometry(ckpt.config, size)
    images = [(rid, load_image(path)) for rid, path in jobs]
    model = ckpt.model()
    os.makedirs(out_dir, exist_ok=True)
    for rid, image in images:
        prob = predict_full(model, image, size)
        mask = binarize(prob)
        if not raw:
            mask = postprocess(mask)
        save_mask(mask, os.path.join(out_dir, f"{rid}.png"))
        if probs:
            np.save(os.path.join(out_dir, f"{rid}_prob.npy"), prob[1])
        click.echo(f"{rid}: {int(mask.sum())} disc pixels")


def _mask_files(directory):
    out = {}
    for name in sorted(os.listdir(directory)):
        stem, ext = os.path.splitext(name)
        if ext.lower() in (".png", ".bmp", ".tif", ".tiff", ".gif"):
            out[stem] = os.path.join(directory, name)
    return out


@cli.command("metrics")
@click.option("--pred", "pred_dir", required=True, type=click.Path(file_okay=False, exists=True))
@click.option("--truth", "truth_dir", required=True, type=click.Path(file_okay=False, exists=True))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="CSV file (default: stdout).")
def metrics_cmd(pred_dir, truth_dir, out_path):
    """Compare predicted masks with ground truth, matched by file stem."""
    preds, truths = _mask_files(pred_dir), _mask_files(truth_dir)
    ids = sorted(set(preds) & set(truths))
    if not ids:
        raise DataError(f"no masks with matching names in {pred_dir} and {truth_dir}")
    missing = sorted(set(preds) - set(truths))
    if missing:
        raise DataError(f"no ground truth for predictions {missing[:5]}")
    rows, reports = [], []
    for rid in ids:
        pred, truth = load_mask(preds[rid]), load_mask(truths[rid])
        if pred.shape != truth.shape:
            raise DataError(f"{rid}: prediction {pred.shape} and truth {truth.shape} differ in size")
        counts = confusion(pred, truth)
        reports.append(metrics(counts))
        rows.append(metric_row(rid, counts, reports[-1]))
    summary = mean_report(reports)
    if out_path:
        write_metrics_csv(out_path, rows, summary)
        click.echo(f"mean f1 {summary.f1:.4f} overlap {summary.overlap:.4f} over {len(ids)} images")
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(["id", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "overlap"])
        writer.writerows(rows)
        writer.writerow(["mean", "", "", "", ""] + [format(v, ".10g") for v in summary.as_dict().values()])


@cli.command("sample-patches")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(dir_okay=False))
@click.option("--ratio", default=0.5, show_default=True, type=float)
@click.option("--min-positive", default=500, show_default=True, type=int)
@click.option("--mode", type=click.Choice(["dcpa", "uniform"]), default="dcpa", show_default=True)
@click.option("--no-corners", is_flag=True, help="Omit the four corner patches.")
@click.option("--seed", default=0, show_default=True, type=int)
def sample_patches(manifest_path, ratio, min_positive, mode, no_corners, seed):
    """Print one training epoch's patches: id x y w h positives kind."""
    manifest = load_manifest(manifest_path)
    cfg = SamplerConfig(
        ratio=ratio, min_positive=min_positive, patch_w=manifest.output_size[0], patch_h=manifest.output_size[1],
        margin=manifest.margin, include_corners=not no_corners, seed=seed,
    )
    for index, rec in enumerate(manifest.records):
        if rec.mask is None:
            continue
        mask = load_mask(manifest.path(rec.mask))
        for spec in training_patches(mask, cfg, np.random.default_rng([seed, index]), mode):
            positives = int(extract_mask(mask, spec).sum())
            click.echo(f"{rec.id} {spec.x} {spec.y} {spec.w} {spec.h} {positives} {spec.kind}")


@cli.command()
@click.option("--depth", default=4, show_default=True, type=click.IntRange(min=1))
@click.option("--width", default=64, show_default=True, type=click.IntRange(min=1), help="Base channel width.")
@click.option("--output", "output_size", default=388, show_default=True, type=click.IntRange(min=1))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Take the model from a run config.")
def info(depth, width, output_size, config_path):
    """Parameter count and patch geometry for a network configuration."""
    if config_path:
        run = load_run_config(config_path)
        cfg, output_size = run.model, run.sampler.patch_w
    else:
        cfg = ModelConfig(depth=depth, base_width=width)
    geo = geometry(cfg, output_size)
    click.echo(f"depth {cfg.depth} width {cfg.base_width}")
    click.echo(f"parameters {param_count(cfg)}")
    click.echo(f"output {geo.output_w}x{geo.output_h} input {geo.input_w}x{geo.input_h} margin {geo.margin}")
    click.echo(f"kernels {kernels.BACKEND_NAME}")


def main(argv=None):
    """Entry point mapping failures to exit codes."""
    try:
        cli.main(args=argv, prog_name="dcpaseg", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except NonFiniteError as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return EXIT_NUMERIC
    except (GeometryError, ValueError, TypeError) as exc:
        click.echo(f"invalid configuration: {exc}", err=True)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
