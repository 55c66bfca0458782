"""Synthetic instance mask generation.

Builds a full mask from a shape database: draw the cell count from the
dataset's normal distribution, repeatedly pick and augment exemplar shapes,
place them without overlap at locations drawn from the evolving probability
map (or uniformly, for the baseline strategy), and assign colors so that no
two touching cells share one.  Every run is a pure function of
(database, config) for a fixed seed.
"""

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, asdict, replace
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from scipy import ndimage

from .maskdb import InstanceMask, STRUCTURE_4, STRUCTURE_8, save_mask_png
from .probmap import ProbabilityMap, SamplerParams

# 12 saturated, mutually distinct colors; background stays black
DEFAULT_PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
]
DEFAULT_BACKGROUND = (0, 0, 0)

# canvas coverage above which requested cell counts are clamped down
DENSITY_CAP = 0.6

PLACED = "placed"
OVERLAP = "overlap"
OUT_OF_BOUNDS = "out-of-bounds"

STRATEGY_ADHESION = "adhesion"
STRATEGY_UNIFORM = "uniform-random"


@dataclass
class AugmentationConfig:
    """Per-shape augmentation ranges (uniform rotation/scale, coin flips)."""

    rotation_range: tuple = (0.0, 360.0)
    scale_range: tuple = (0.8, 1.2)
    flip_horizontal_prob: float = 0.5
    flip_vertical_prob: float = 0.5

    def __post_init__(self):
        if self.scale_range[0] <= 0:
            raise ValueError("scale range must be positive")
        for p in (self.flip_horizontal_prob, self.flip_vertical_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("flip probabilities must be in [0, 1]")


@dataclass
class SynthesisConfig:
    width: int = 1920
    height: int = 1200
    mu_n: float = 669.0
    sigma_n: float = 149.0
    sampler: SamplerParams = field(default_factory=SamplerParams)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    palette: list = field(default_factory=lambda: list(DEFAULT_PALETTE))
    background: tuple = DEFAULT_BACKGROUND
    max_location_retries: int = 100
    max_color_retries: int = 20
    strategy: str = STRATEGY_ADHESION
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("canvas dimensions must be positive")
        colors = [tuple(c) for c in self.palette]
        if len(set(colors)) != len(colors) or tuple(self.background) in colors:
            raise ValueError(
                "palette colors must be distinct and differ from background"
            )
        if len(colors) < 2:
            raise ValueError("palette needs at least 2 colors")
        if self.strategy not in (STRATEGY_ADHESION, STRATEGY_UNIFORM):
            raise ValueError(f"unknown strategy {self.strategy!r}")

    def to_dict(self):
        d = asdict(self)
        d["palette"] = [list(c) for c in self.palette]
        d["background"] = list(self.background)
        d["augmentation"]["rotation_range"] = list(
            self.augmentation.rotation_range
        )
        d["augmentation"]["scale_range"] = list(self.augmentation.scale_range)
        d["sampler"].pop("_kernel", None)
        return d

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class Transform:
    rotation: float
    scale: float
    flip_horizontal: bool
    flip_vertical: bool


@dataclass
class AugmentedShape:
    shape_id: int
    transform: Transform
    bitmap: np.ndarray
    centroid: tuple  # (cx, cy) within the bitmap


@dataclass
class PlacedCell:
    shape_id: int
    transform: Transform
    location: tuple  # (x, y) pixel the centroid was anchored at
    color_id: int
    clipped: bool
    x0: int
    y0: int
    bitmap: np.ndarray  # realized (possibly border-clipped) bitmap

    @property
    def area(self):
        return int(self.bitmap.sum())

    @property
    def bbox(self):
        return (self.x0, self.y0, self.bitmap.shape[1], self.bitmap.shape[0])


@dataclass
class Placement:
    x0: int
    y0: int
    bitmap: np.ndarray
    clipped: bool


@dataclass
class SynthesisRecord:
    config: SynthesisConfig
    seed: int
    requested_cells: int
    placed: list
    rejections: dict  # overlap / color / border counters
    warnings: list
    elapsed: float = 0.0

    def to_dict(self):
        """JSON sidecar payload.

        ``elapsed`` is deliberately left out so identical seeds produce
        byte-identical sidecars.
        """
        return {
            "schema_version": 1,
            "seed": self.seed,
            "strategy": self.config.strategy,
            "width": self.config.width,
            "height": self.config.height,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "palette": [list(c) for c in self.config.palette],
            "background": list(self.config.background),
            "requested_cells": self.requested_cells,
            "placed_cells": len(self.placed),
            "rejections": dict(self.rejections),
            "warnings": list(self.warnings),
            "cells": [
                {
                    "shape_id": c.shape_id,
                    "rotation": c.transform.rotation,
                    "scale": c.transform.scale,
                    "flip_horizontal": c.transform.flip_horizontal,
                    "flip_vertical": c.transform.flip_vertical,
                    "location": [c.location[0], c.location[1]],
                    "color_id": c.color_id,
                    "bbox": list(c.bbox),
                    "area": c.area,
                    "clipped": c.clipped,
                }
                for c in self.placed
            ],
        }


def _tighten(bitmap):
    """Crop to the tight bounding box; returns (cropped, (dy, dx))."""
    ys, xs = np.nonzero(bitmap)
    if len(ys) == 0:
        return bitmap[:0, :0], (0, 0)
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1
    return bitmap[y0:y1, x0:x1], (int(y0), int(x0))


def _largest_component(bitmap):
    """Largest 4-connected component (keeps rendered cells 4-connected)."""
    labels, n = ndimage.label(bitmap, structure=STRUCTURE_4)
    if n <= 1:
        return bitmap
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    return labels == np.argmax(counts)


def rotate_nearest(bitmap, degrees):
    """Rotate a binary bitmap with nearest-neighbor lookup.

    Positive angles rotate clockwise in image (y-down) coordinates.
    Nearest-neighbor keeps the grid strictly binary; exact multiples of 90
    degrees reproduce the axis-aligned rotation pixel for pixel.
    """
    theta = math.radians(degrees % 360.0)
    if theta == 0.0:
        return bitmap.copy()
    h, w = bitmap.shape
    c, s = math.cos(theta), math.sin(theta)
    new_w = int(math.ceil(abs(c) * w + abs(s) * h - 1e-9))
    new_h = int(math.ceil(abs(c) * h + abs(s) * w - 1e-9))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ncy, ncx = (new_h - 1) / 2.0, (new_w - 1) / 2.0
    yy, xx = np.meshgrid(
        np.arange(new_h) - ncy, np.arange(new_w) - ncx, indexing="ij"
    )
    # inverse rotation back into source coordinates
    src_x = np.rint(c * xx + s * yy + cx).astype(int)
    src_y = np.rint(-s * xx + c * yy + cy).astype(int)
    valid = (src_x >= 0) & (src_x < w) & (src_y >= 0) & (src_y < h)
    out = np.zeros((new_h, new_w), dtype=bool)
    out[valid] = bitmap[src_y[valid], src_x[valid]]
    return out


def scale_nearest(bitmap, factor):
    """Nearest-neighbor rescale of a binary bitmap."""
    if factor == 1.0:
        return bitmap.copy()
    h, w = bitmap.shape
    new_h = max(1, int(round(h * factor)))
    new_w = max(1, int(round(w * factor)))
    src_y = np.clip(
        np.rint((np.arange(new_h) + 0.5) * (h / new_h) - 0.5).astype(int), 0, h - 1
    )
    src_x = np.clip(
        np.rint((np.arange(new_w) + 0.5) * (w / new_w) - 0.5).astype(int), 0, w - 1
    )
    return bitmap[np.ix_(src_y, src_x)]


def sample_cell_count(mu_n, sigma_n, rng, lower, upper):
    """Normal draw for the number of cells, rounded and clamped."""
    n = int(round(rng.normal(mu_n, sigma_n)))
    if upper < lower:
        return upper
    return max(lower, min(n, upper))


def sample_shape(db, augmentation, rng, max_attempts=100):
    """Pick a random exemplar and apply the probabilistic augmentations.

    The augmented bitmap is re-tightened; if rotation or scaling
    disconnects it, the largest component is kept.  A shape that collapses
    to zero pixels is redrawn.
    """
    for _ in range(max_attempts):
        shape_id = int(rng.integers(len(db.shapes)))
        rotation = float(rng.uniform(*augmentation.rotation_range))
        scale = float(rng.uniform(*augmentation.scale_range))
        flip_h = bool(rng.random() < augmentation.flip_horizontal_prob)
        flip_v = bool(rng.random() < augmentation.flip_vertical_prob)

        bmp = rotate_nearest(db.shapes[shape_id].bitmap, rotation)
        bmp = scale_nearest(bmp, scale)
        if flip_h:
            bmp = bmp[:, ::-1]
        if flip_v:
            bmp = bmp[::-1, :]
        if not bmp.any():
            continue
        bmp = _largest_component(bmp)
        bmp, _ = _tighten(bmp)
        ys, xs = np.nonzero(bmp)
        return AugmentedShape(
            shape_id=shape_id,
            transform=Transform(rotation, scale, flip_h, flip_v),
            bitmap=np.ascontiguousarray(bmp),
            centroid=(float(xs.mean()), float(ys.mean())),
        )
    raise RuntimeError("augmentation kept collapsing shapes to zero pixels")


def try_place(occupancy, shape, location):
    """Attempt to stamp ``shape`` with its centroid at ``location``.

    Returns (PLACED, Placement) on success (occupancy updated in place), or
    (OVERLAP | OUT_OF_BOUNDS, None).  Border-clipped placements are allowed
    as long as the visible part stays one 4-connected piece; a clip that
    would split the cell is rejected so re-ingestion sees one region per
    placed cell.
    """
    height, width = occupancy.shape
    x, y = location
    x0 = int(round(x - shape.centroid[0]))
    y0 = int(round(y - shape.centroid[1]))
    h, w = shape.bitmap.shape
    ix0, iy0 = max(0, x0), max(0, y0)
    ix1, iy1 = min(width, x0 + w), min(height, y0 + h)
    if ix0 >= ix1 or iy0 >= iy1:
        return OUT_OF_BOUNDS, None
    sub = shape.bitmap[iy0 - y0 : iy1 - y0, ix0 - x0 : ix1 - x0]
    area = int(sub.sum())
    if area == 0:
        return OUT_OF_BOUNDS, None
    clipped = area != int(shape.bitmap.sum())
    if clipped:
        _, n = ndimage.label(sub, structure=STRUCTURE_4)
        if n != 1:
            return OUT_OF_BOUNDS, None
        sub, (dy, dx) = _tighten(sub)
        iy0, ix0 = iy0 + dy, ix0 + dx
        iy1, ix1 = iy0 + sub.shape[0], ix0 + sub.shape[1]
    window = occupancy[iy0:iy1, ix0:ix1]
    if window[sub].any():
        return OVERLAP, None
    window[sub] = True
    return PLACED, Placement(x0=ix0, y0=iy0, bitmap=sub, clipped=clipped)


def _undo_place(occupancy, placement):
    h, w = placement.bitmap.shape
    occupancy[placement.y0 : placement.y0 + h,
              placement.x0 : placement.x0 + w][placement.bitmap] = False


def adjacent_colors(color_canvas, placement):
    """Color ids of all cells 8-adjacent to a fresh placement."""
    height, width = color_canvas.shape
    h, w = placement.bitmap.shape
    y0 = max(0, placement.y0 - 1)
    x0 = max(0, placement.x0 - 1)
    y1 = min(height, placement.y0 + h + 1)
    x1 = min(width, placement.x0 + w + 1)
    expanded = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    expanded[
        placement.y0 - y0 : placement.y0 - y0 + h,
        placement.x0 - x0 : placement.x0 - x0 + w,
    ] = placement.bitmap
    halo = ndimage.binary_dilation(expanded, structure=STRUCTURE_8) & ~expanded
    nearby = color_canvas[y0:y1, x0:x1][halo]
    return {int(c) for c in np.unique(nearby) if c >= 0}


def assign_color(adjacent, palette_size, rng):
    """Uniform pick among palette colors unused by any touching neighbor.

    Returns None when every color is taken (caller resamples the location).
    """
    feasible = [c for c in range(palette_size) if c not in adjacent]
    if not feasible:
        return None
    return feasible[int(rng.integers(len(feasible)))]


def generate_mask(db, config, probmap_dump=None):
    """Run the full synthesis pipeline for one mask.

    Returns (InstanceMask, SynthesisRecord).  Deterministic for a fixed
    config seed.  If the retry budgets run out before all requested cells
    are placed, a partial mask is returned with a warning in the record.
    ``probmap_dump`` optionally names a path prefix for a debug dump of the
    final probability map (float raster + false-color PNG).
    """
    if not db.shapes:
        raise ValueError("shape database is empty")
    t_start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    width, height = config.width, config.height
    params = config.sampler

    cap = int(math.floor(DENSITY_CAP * width * height / db.mean_area()))
    n = sample_cell_count(config.mu_n, config.sigma_n, rng, params.n_init, cap)
    warnings = []
    if n == cap:
        warnings.append(
            f"density cap bound the cell count at {cap} "
            f"({DENSITY_CAP:.0%} canvas coverage)"
        )

    occupancy = np.zeros((height, width), dtype=bool)
    color_canvas = np.full((height, width), -1, dtype=np.int32)
    prob_map = (
        ProbabilityMap(width, height)
        if config.strategy == STRATEGY_ADHESION
        else None
    )

    placed = []
    rejections = {"overlap": 0, "color": 0, "border": 0}
    palette_size = len(config.palette)

    for _ in range(n):
        success = False
        shape = sample_shape(db, config.augmentation, rng)
        for _shape_try in range(2):
            attempts = 0
            color_failures = 0
            while (
                attempts < config.max_location_retries
                and color_failures < config.max_color_retries
            ):
                attempts += 1
                if prob_map is None or prob_map.step_index < params.n_init:
                    location = (
                        int(rng.integers(width)),
                        int(rng.integers(height)),
                    )
                else:
                    location = prob_map.sample(rng)
                    if params.zero_occupied and occupancy[
                        location[1], location[0]
                    ]:
                        rejections["overlap"] += 1
                        continue
                status, placement = try_place(occupancy, shape, location)
                if status == OUT_OF_BOUNDS:
                    rejections["border"] += 1
                    continue
                if status == OVERLAP:
                    rejections["overlap"] += 1
                    continue
                color = assign_color(
                    adjacent_colors(color_canvas, placement),
                    palette_size,
                    rng,
                )
                if color is None:
                    rejections["color"] += 1
                    color_failures += 1
                    _undo_place(occupancy, placement)
                    continue
                h, w = placement.bitmap.shape
                color_canvas[
                    placement.y0 : placement.y0 + h,
                    placement.x0 : placement.x0 + w,
                ][placement.bitmap] = color
                placed.append(
                    PlacedCell(
                        shape_id=shape.shape_id,
                        transform=shape.transform,
                        location=location,
                        color_id=color,
                        clipped=placement.clipped,
                        x0=placement.x0,
                        y0=placement.y0,
                        bitmap=placement.bitmap,
                    )
                )
                if prob_map is not None:
                    prob_map.advance(location, params)
                success = True
                break
            if success:
                break
            if _shape_try == 0:
                shape = sample_shape(db, config.augmentation, rng)
        if not success:
            warnings.append(
                f"gave up placing cell {len(placed)} after exhausting retries"
            )

    if probmap_dump is not None and prob_map is not None:
        prob_map.dump(probmap_dump)

    mask = InstanceMask(
        width=width,
        height=height,
        pixels=(color_canvas + 1).astype(np.int32),
        palette=[tuple(config.background)]
        + [tuple(c) for c in config.palette],
        ident=f"synthetic-seed-{config.seed}",
    )
    record = SynthesisRecord(
        config=config,
        seed=config.seed,
        requested_cells=n,
        placed=placed,
        rejections=rejections,
        warnings=warnings,
        elapsed=time.perf_counter() - t_start,
    )
    return mask, record


def _generate_job(args):
    db, config, seed = args
    return generate_mask(db, replace(config, seed=seed))


def batch_generate(db, config, count, parallelism=1):
    """Generate ``count`` masks; job k runs with seed ``config.seed + k``.

    Output is independent of the parallelism degree.  A failing job raises
    after all others complete.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    jobs = [(db, config, config.seed + k) for k in range(count)]
    if parallelism <= 1 or count == 1:
        return [_generate_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        futures = [pool.submit(_generate_job, j) for j in jobs]
        results = []
        errors = []
        for fut in futures:
            try:
                results.append(fut.result())
            except Exception as exc:  # keep sibling jobs' results
                errors.append(exc)
        if errors:
            raise RuntimeError(
                f"{len(errors)} generation job(s) failed: {errors[0]}"
            ) from errors[0]
        return results


def save_outputs(mask, record, out_dir, stem):
    """Write the PNG mask and JSON sidecar; returns their paths."""
    png_path = f"{out_dir}/{stem}.png"
    json_path = f"{out_dir}/{stem}.json"
    save_mask_png(mask, png_path)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(record.to_dict(), fh, sort_keys=True, separators=(",", ":"))
    return png_path, json_path
