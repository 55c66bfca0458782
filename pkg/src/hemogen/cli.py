"""Command line front end: database building, mask synthesis, evaluation.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 internal error.
"""

import functools
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
import yaml
from PIL import Image

from . import maskdb, metrics, synth
from .maskdb import DatabaseFormatError, MaskValidationError
from .probmap import SamplerParams

EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_INTERNAL = 3


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (MaskValidationError, DatabaseFormatError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
        except OSError as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(EXIT_IO)
        except click.exceptions.Exit:
            raise
        except Exception as exc:
            click.echo(f"internal error: {exc}", err=True)
            sys.exit(EXIT_INTERNAL)

    return wrapper


def _parse_rgb(text):
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3 or not all(0 <= p <= 255 for p in parts):
        raise ValueError(f"expected R,G,B in 0..255, got {text!r}")
    return tuple(parts)


def _default_threads():
    try:
        return max(1, int(os.environ.get("HEMOGEN_THREADS", "1")))
    except ValueError:
        return 1


@click.group()
def main():
    """Synthetic blood-cell instance mask toolkit."""


@main.command("build-db")
@click.argument("masks_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", "-o", required=True, type=click.Path(), help="Database file to write.")
@click.option("--background", default=None, help="Background color as R,G,B (default: most frequent color per image).")
@click.option("--keep-going", is_flag=True, help="Skip invalid masks instead of aborting.")
@click.option("--stats-out", type=click.Path(), default=None, help="Also write the stats report as JSON.")
@_guarded
def cmd_build_db(masks_dir, out, background, keep_going, stats_out):
    """Extract every cell from the PNG masks in MASKS_DIR into a database."""
    bg = _parse_rgb(background) if background else None
    paths = sorted(Path(masks_dir).glob("*.png"))
    if not paths:
        raise OSError(f"no PNG masks found in {masks_dir}")
    masks = []
    failures = 0
    for path in paths:
        try:
            masks.append(maskdb.load_mask(path, background=bg, ident=path.stem))
        except (MaskValidationError, OSError) as exc:
            failures += 1
            click.echo(f"warning: skipping {path}: {exc}", err=True)
            if not keep_going:
                raise
    if not masks:
        raise ValueError("all input masks failed validation")
    db = maskdb.build_database(masks)
    maskdb.save_db(db, out)
    report = db.report()
    if stats_out:
        with open(stats_out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    click.echo(f"ingested {len(masks)} mask(s), {len(db.shapes)} cell shapes")
    click.echo(
        f"cells/image: mean {report['cells_per_image_mean']:.1f} "
        f"std {report['cells_per_image_std']:.1f}"
    )
    click.echo(
        f"bbox side: mean {report['bbox_side_mean']:.1f} "
        f"std {report['bbox_side_std']:.1f} px"
    )
    if failures:
        click.echo(f"{failures} file(s) skipped", err=True)
    click.echo(f"database written to {out}")


@main.command("stats")
@click.argument("db_path", type=click.Path(exists=True, dir_okay=False))
@_guarded
def cmd_stats(db_path):
    """Print the stats report of a shape database as JSON."""
    db = maskdb.load_db(db_path)
    click.echo(json.dumps(db.report(), indent=2, sort_keys=True))


def _load_run_config(config_path):
    if config_path is None:
        return {}
    with open(config_path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a mapping")
    return doc


def _resolve_synthesis_config(file_cfg, overrides):
    """Build a SynthesisConfig from file values plus flag overrides."""
    merged = dict(file_cfg)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value

    sampler_cfg = dict(merged.pop("sampler", {}) or {})
    for key in ("cell_size", "n_init", "sigma"):
        if merged.get(key) is not None:
            sampler_cfg[key] = merged[key]
        merged.pop(key, None)
    aug_cfg = dict(merged.pop("augmentation", {}) or {})

    palette = merged.pop("palette", None)
    background = merged.pop("background", None)
    kwargs = {
        k: merged[k]
        for k in (
            "width", "height", "mu_n", "sigma_n", "seed", "strategy",
            "max_location_retries", "max_color_retries",
        )
        if merged.get(k) is not None
    }
    if palette is not None:
        kwargs["palette"] = [tuple(c) for c in palette]
    if background is not None:
        kwargs["background"] = tuple(background)
    if aug_cfg:
        for k in ("rotation_range", "scale_range"):
            if k in aug_cfg:
                aug_cfg[k] = tuple(aug_cfg[k])
        kwargs["augmentation"] = synth.AugmentationConfig(**aug_cfg)
    if sampler_cfg:
        kwargs["sampler"] = SamplerParams(**sampler_cfg)
    return synth.SynthesisConfig(**kwargs)


@main.command("generate")
@click.option("--db", "db_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", "-o", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None, help="YAML run config; flags override its keys.")
@click.option("--count", type=int, default=None, help="Number of masks to generate (default 1).")
@click.option("--seed", type=int, default=None, help="Base seed; job k uses seed+k. Random when absent.")
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
@click.option("--mu-n", type=float, default=None, help="Mean cell count.")
@click.option("--sigma-n", type=float, default=None, help="Std of cell count.")
@click.option("--cell-size", type=float, default=None)
@click.option("--n-init", type=int, default=None)
@click.option("--strategy", type=click.Choice([synth.STRATEGY_ADHESION, synth.STRATEGY_UNIFORM]), default=None)
@click.option("--parallelism", type=int, default=None, help="Parallel jobs (default: HEMOGEN_THREADS or 1).")
@click.option("--dump-probmap", is_flag=True, help="Dump the final probability map of the first job.")
@_guarded
def cmd_generate(db_path, out_dir, config_path, count, seed, width, height,
                 mu_n, sigma_n, cell_size, n_init, strategy, parallelism,
                 dump_probmap):
    """Generate synthetic masks (PNG + JSON sidecar per mask)."""
    file_cfg = _load_run_config(config_path)
    if count is None:
        count = int(file_cfg.get("count", 1))
    if parallelism is None:
        parallelism = int(file_cfg.get("parallelism", _default_threads()))
    if seed is None and file_cfg.get("seed") is None:
        seed = int(np.random.SeedSequence().generate_state(1)[0])
        click.echo(f"no seed given; using random base seed {seed}")
    config = _resolve_synthesis_config(
        file_cfg,
        {
            "width": width, "height": height, "mu_n": mu_n,
            "sigma_n": sigma_n, "cell_size": cell_size, "n_init": n_init,
            "strategy": strategy, "seed": seed,
        },
    )

    db = maskdb.load_db(db_path)
    os.makedirs(out_dir, exist_ok=True)

    t0 = time.perf_counter()
    results = synth.batch_generate(db, config, count, parallelism)
    total = time.perf_counter() - t0

    had_warnings = False
    for k, (mask, record) in enumerate(results):
        stem = f"mask_{record.seed:08d}"
        synth.save_outputs(mask, record, out_dir, stem)
        click.echo(
            f"{stem}: {len(record.placed)}/{record.requested_cells} cells "
            f"in {record.elapsed:.2f}s"
        )
        for warning in record.warnings:
            click.echo(f"  warning: {warning}", err=True)
            had_warnings = True
        if dump_probmap and k == 0 and config.strategy == synth.STRATEGY_ADHESION:
            # regenerate the first job to capture its map state
            synth.generate_mask(
                db,
                replace(config, seed=record.seed),
                probmap_dump=os.path.join(out_dir, f"{stem}_probmap"),
            )
    click.echo(
        f"{count} mask(s) in {total:.2f}s "
        f"({count / total:.2f} masks/s, parallelism {parallelism})"
    )
    if had_warnings:
        sys.exit(EXIT_VALIDATION)


@main.group("eval")
def cmd_eval():
    """Evaluation metrics over files."""


def _load_binary(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= 128


def _load_soft_map(path, width=None, height=None):
    if str(path).endswith(".f32"):
        if width is None or height is None:
            raise ValueError("--width/--height required for .f32 rasters")
        data = np.fromfile(path, dtype=np.float32)
        if data.size != width * height:
            raise ValueError(f"raster size mismatch in {path}")
        return data.reshape(height, width).astype(float)
    with Image.open(path) as im:
        return np.asarray(im.convert("L")).astype(float) / 255.0


def _load_bboxes(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if isinstance(doc, dict) and "cells" in doc:  # synthesis sidecar
        return [tuple(c["bbox"]) for c in doc["cells"]]
    return [tuple(entry["bbox"] if isinstance(entry, dict) else entry) for entry in doc]


def _emit(report, out):
    text = json.dumps(report, indent=2, sort_keys=True)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        click.echo(text)


@cmd_eval.command("dice")
@click.argument("prediction", type=click.Path(exists=True, dir_okay=False))
@click.argument("target", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(), default=None)
@_guarded
def eval_dice(prediction, target, out):
    """Dice score between two binary mask images."""
    score = metrics.dice(_load_binary(prediction), _load_binary(target))
    _emit({"dice": score}, out)


@cmd_eval.command("ap")
@click.option("--detections", required=True, type=click.Path(exists=True, dir_okay=False), help="JSON list of {bbox, score}.")
@click.option("--ground-truth", required=True, type=click.Path(exists=True, dir_okay=False), help="JSON bbox list or synthesis sidecar.")
@click.option("--iou", type=float, default=0.5, show_default=True)
@click.option("--out", type=click.Path(), default=None)
@_guarded
def eval_ap(detections, ground_truth, iou, out):
    """Average precision of detections against ground-truth boxes."""
    with open(detections, "r", encoding="utf-8") as fh:
        det_doc = json.load(fh)
    dets = [
        metrics.Detection(bbox=tuple(d["bbox"]), score=float(d.get("score", 1.0)))
        for d in det_doc
    ]
    gt = _load_bboxes(ground_truth)
    ap, pr = metrics.match_and_ap(dets, gt, iou_threshold=iou)
    _emit({"ap": ap, "iou_threshold": iou, "pr_curve": pr}, out)


@cmd_eval.command("instances")
@click.option("--objectness", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--contour", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tau-objectness", type=float, default=0.5, show_default=True)
@click.option("--tau-contour", type=float, default=0.5, show_default=True)
@click.option("--min-blob-size", type=int, default=50, show_default=True)
@click.option("--contour-width", type=int, default=2, show_default=True)
@click.option("--width", type=int, default=None, help="Required for .f32 rasters.")
@click.option("--height", type=int, default=None, help="Required for .f32 rasters.")
@click.option("--ground-truth", type=click.Path(exists=True, dir_okay=False), default=None, help="Optionally score extracted instances against these boxes.")
@click.option("--iou", type=float, default=0.5, show_default=True)
@click.option("--out", type=click.Path(), default=None)
@_guarded
def eval_instances(objectness, contour, tau_objectness, tau_contour,
                   min_blob_size, contour_width, width, height,
                   ground_truth, iou, out):
    """Extract instances from objectness + contour maps (blob detection)."""
    obj = _load_soft_map(objectness, width, height)
    cont = _load_soft_map(contour, width, height)
    extraction = metrics.extract_instances(
        obj, cont,
        tau_objectness=tau_objectness, tau_contour=tau_contour,
        min_blob_size=min_blob_size, contour_width=contour_width,
    )
    report = {
        "instance_count": extraction.count,
        "components": extraction.components,
    }
    if ground_truth:
        gt = _load_bboxes(ground_truth)
        dets = [
            metrics.Detection(bbox=c["bbox"], score=1.0)
            for c in extraction.components
        ]
        ap, pr = metrics.match_and_ap(dets, gt, iou_threshold=iou)
        report["ap"] = ap
        report["precision"] = pr[-1][1] if pr else (1.0 if not gt else 0.0)
        report["recall"] = pr[-1][0] if pr else (1.0 if not gt else 0.0)
    _emit(report, out)


@cmd_eval.command("adhesion")
@click.argument("masks", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--background", default=None, help="Background color as R,G,B.")
@click.option("--out", type=click.Path(), default=None)
@_guarded
def eval_adhesion(masks, background, out):
    """Adhesion statistics (touch fraction, clusters) of instance masks."""
    bg = _parse_rgb(background) if background else None
    per_mask = []
    for path in masks:
        mask = maskdb.load_mask(path, background=bg, ident=Path(path).stem)
        stats = metrics.adhesion_stats(mask)
        per_mask.append({"mask": str(path), **stats.to_dict()})
    fractions = [m["touch_fraction"] for m in per_mask]
    _emit(
        {
            "masks": per_mask,
            "mean_touch_fraction": float(np.mean(fractions)),
        },
        out,
    )


@main.command("compare-distribution")
@click.option("--db", "db_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seeds", type=int, default=20, show_default=True, help="Seeds per strategy.")
@click.option("--base-seed", type=int, default=0, show_default=True)
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
@click.option("--mu-n", type=float, default=None)
@click.option("--sigma-n", type=float, default=None)
@click.option("--parallelism", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@_guarded
def cmd_compare_distribution(db_path, seeds, base_seed, width, height,
                             mu_n, sigma_n, parallelism, out):
    """Compare adhesion vs uniform-random placement via touch fractions."""
    from scipy import stats as scipy_stats

    if parallelism is None:
        parallelism = _default_threads()
    db = maskdb.load_db(db_path)
    overrides = {
        "width": width, "height": height, "mu_n": mu_n,
        "sigma_n": sigma_n, "seed": base_seed,
    }
    report = {"seeds_per_strategy": seeds}
    fractions = {}
    for strategy in (synth.STRATEGY_ADHESION, synth.STRATEGY_UNIFORM):
        config = _resolve_synthesis_config({"strategy": strategy}, overrides)
        results = synth.batch_generate(db, config, seeds, parallelism)
        vals = np.array(
            [metrics.adhesion_stats(mask).touch_fraction for mask, _ in results]
        )
        fractions[strategy] = vals
        report[strategy] = {
            "mean_touch_fraction": float(vals.mean()),
            "std_error": float(vals.std(ddof=1) / np.sqrt(len(vals)))
            if len(vals) > 1
            else 0.0,
            "touch_fractions": vals.tolist(),
        }
    t_stat, p_value = scipy_stats.ttest_ind(
        fractions[synth.STRATEGY_ADHESION],
        fractions[synth.STRATEGY_UNIFORM],
        equal_var=False,
        alternative="greater",
    )
    report["one_sided_test"] = {
        "t_statistic": float(t_stat),
        "p_value": float(p_value),
        "adhesion_exceeds_random": bool(
            fractions[synth.STRATEGY_ADHESION].mean()
            > fractions[synth.STRATEGY_UNIFORM].mean()
        ),
    }
    _emit(report, out)


if __name__ == "__main__":
    main()
