"""Cell shape database built from color-coded instance segmentation masks.

An instance mask encodes each cell as a region of uniform color, with the
annotation rule that touching cells never share a color.  This module parses
such masks, extracts every cell silhouette into a reusable database, and
computes the dataset statistics (cell count distribution, cell extents) that
parameterize downstream mask synthesis.
"""

import base64
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

DB_FORMAT_VERSION = 1

# 8-connectivity defines both cell membership and "touching"
STRUCTURE_8 = np.ones((3, 3), dtype=bool)
STRUCTURE_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class MaskValidationError(ValueError):
    """Raised when a mask breaks the touching-cells-differ-in-color rule.

    ``violations`` holds up to ``MAX_REPORTED`` tuples
    ``((x1, y1), (x2, y2), color)`` of offending touching pixel pairs.
    """

    MAX_REPORTED = 10

    def __init__(self, violations):
        self.violations = violations
        pairs = ", ".join(
            f"({p1[0]},{p1[1]})-({p2[0]},{p2[1]}) color={c}"
            for p1, p2, c in violations[: self.MAX_REPORTED]
        )
        super().__init__(
            f"{len(violations)} same-color touching cell pair(s): {pairs}"
        )


class DatabaseFormatError(ValueError):
    """Raised when a shape database file cannot be decoded safely."""


@dataclass
class InstanceMask:
    """A parsed instance mask: color-id grid plus the palette behind it.

    ``pixels`` stores per-pixel color-ids; id 0 is always the background.
    Immutable by convention after construction.
    """

    width: int
    height: int
    pixels: np.ndarray  # (height, width) int32 color-ids, 0 = background
    palette: list  # RGB triples indexed by color-id, palette[0] = background
    ident: str = ""

    @property
    def n_colors(self):
        return len(self.palette)

    def cell_pixel_count(self):
        return int(np.count_nonzero(self.pixels))


@dataclass
class CellShape:
    """One extracted cell: a tight binary bitmap plus sub-pixel centroid."""

    bitmap: np.ndarray  # (h, w) bool, tight bounding box
    centroid: tuple  # (cx, cy) float offset within the bitmap
    source: tuple  # (mask identifier, region index)
    area: int

    def __eq__(self, other):
        if not isinstance(other, CellShape):
            return NotImplemented
        return (
            np.array_equal(self.bitmap, other.bitmap)
            and self.centroid == other.centroid
            and tuple(self.source) == tuple(other.source)
            and self.area == other.area
        )


@dataclass
class DatasetStats:
    """Cell count and extent statistics of an ingested mask set."""

    mu_n: float
    sigma_n: float
    mean_cell_extent: float
    std_cell_extent: float
    image_width: int
    image_height: int
    n_images: int


@dataclass
class ShapeDatabase:
    """Accumulated cell shapes plus the statistics of their source masks."""

    shapes: list
    stats: DatasetStats
    format_version: int = DB_FORMAT_VERSION

    def __eq__(self, other):
        if not isinstance(other, ShapeDatabase):
            return NotImplemented
        return (
            self.format_version == other.format_version
            and self.stats == other.stats
            and len(self.shapes) == len(other.shapes)
            and all(a == b for a, b in zip(self.shapes, other.shapes))
        )

    def mean_area(self):
        return float(np.mean([s.area for s in self.shapes]))

    def report(self):
        """Stats report with the alternative cell-size interpretations."""
        areas = np.array([s.area for s in self.shapes], dtype=float)
        sides = np.array(
            [d for s in self.shapes for d in s.bitmap.shape], dtype=float
        )
        eq_diameters = 2.0 * np.sqrt(areas / np.pi)
        return {
            "n_images": self.stats.n_images,
            "n_shapes": len(self.shapes),
            "cells_per_image_mean": self.stats.mu_n,
            "cells_per_image_std": self.stats.sigma_n,
            "bbox_side_mean": self.stats.mean_cell_extent,
            "bbox_side_std": self.stats.std_cell_extent,
            "equivalent_diameter_mean": float(eq_diameters.mean()),
            "equivalent_diameter_std": float(eq_diameters.std(ddof=1))
            if len(areas) > 1
            else 0.0,
            "ellipse_axis_mean": _mean_ellipse_axis(self.shapes),
            "image_width": self.stats.image_width,
            "image_height": self.stats.image_height,
        }


def _mean_ellipse_axis(shapes):
    """Mean of the fitted-ellipse axis lengths (second-moment fit)."""
    axes = []
    for s in shapes:
        ys, xs = np.nonzero(s.bitmap)
        if len(ys) < 2:
            axes.append(1.0)
            continue
        cov = np.cov(np.stack([xs, ys]).astype(float))
        eigvals = np.clip(np.linalg.eigvalsh(np.atleast_2d(cov)), 0, None)
        # full axis length of the ellipse with matching second moments
        axes.extend(4.0 * np.sqrt(eigvals))
    return float(np.mean(axes))


def _pack_colors(rgb):
    rgb = rgb.astype(np.uint32)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


def load_mask(image_file, background=None, ident=None):
    """Load an RGB mask image and validate the coloring rule.

    ``background`` is an RGB triple; when omitted the most frequent color in
    the image is used.  Raises MaskValidationError when two same-color cells
    touch (detectable as a same-color region that is 8-connected but not
    4-connected, i.e. joined only through a diagonal contact).
    """
    try:
        with Image.open(image_file) as im:
            rgb = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read mask image {image_file!r}: {exc}") from exc

    packed = _pack_colors(rgb)
    colors, inverse = np.unique(packed, return_inverse=True)
    inverse = inverse.reshape(packed.shape)
    counts = np.bincount(inverse.ravel())

    if background is None:
        bg_packed = int(colors[np.argmax(counts)])
    else:
        r, g, b = background
        bg_packed = (int(r) << 16) | (int(g) << 8) | int(b)

    # color-id 0 = background, remaining colors in ascending RGB order
    cell_colors = [int(c) for c in colors if int(c) != bg_packed]
    ordered = [bg_packed] + cell_colors
    remap = np.zeros(len(colors), dtype=np.int32)
    for new_id, packed_color in enumerate(ordered):
        pos = np.searchsorted(colors, packed_color)
        if pos < len(colors) and colors[pos] == packed_color:
            remap[pos] = new_id
    pixels = remap[inverse]

    palette = [
        ((c >> 16) & 0xFF, (c >> 8) & 0xFF, c & 0xFF) for c in ordered
    ]

    height, width = pixels.shape
    mask = InstanceMask(
        width=width,
        height=height,
        pixels=pixels,
        palette=palette,
        ident=ident if ident is not None else str(image_file),
    )
    violations = find_violations(mask)
    if violations:
        raise MaskValidationError(violations)
    return mask


def find_violations(mask):
    """Locate same-color touching cell pairs.

    Two cells of the same color that touch can only be told apart when the
    contact is purely diagonal (otherwise they merge into one region under
    any connectivity).  We flag every diagonal same-color contact between
    distinct 4-connected regions.
    """
    violations = []
    for color_id in range(1, mask.n_colors):
        binary = mask.pixels == color_id
        if not binary.any():
            continue
        labels4, n4 = ndimage.label(binary, structure=STRUCTURE_4)
        _, n8 = ndimage.label(binary, structure=STRUCTURE_8)
        if n4 == n8:
            continue
        for dy, dx in ((1, 1), (1, -1)):
            a = labels4[max(0, -dy) : labels4.shape[0] - max(0, dy),
                        max(0, -dx) : labels4.shape[1] - max(0, dx)]
            b = labels4[max(0, dy) : labels4.shape[0] + min(0, dy),
                        max(0, dx) : labels4.shape[1] + min(0, dx)]
            bad = (a > 0) & (b > 0) & (a != b)
            for y, x in zip(*np.nonzero(bad)):
                y2, x2 = y + dy, x + dx
                if dx < 0:
                    x, x2 = x - dx, x2 - dx
                violations.append(
                    ((int(x), int(y)), (int(x2), int(y2)), color_id)
                )
    return violations


@dataclass
class Region:
    """A labeled cell region in image coordinates."""

    color_id: int
    x0: int
    y0: int
    bitmap: np.ndarray
    area: int
    centroid: tuple  # (cx, cy) offset within the bitmap

    @property
    def centroid_xy(self):
        return (self.x0 + self.centroid[0], self.y0 + self.centroid[1])


def extract_regions(mask):
    """Label every cell region and return (label image, regions).

    Regions are ordered row-major by their first set pixel; labels in the
    returned image are ``region index + 1``.
    """
    labels = np.zeros((mask.height, mask.width), dtype=np.int32)
    regions = []
    firsts = []
    for color_id in range(1, mask.n_colors):
        binary = mask.pixels == color_id
        if not binary.any():
            continue
        lab, n = ndimage.label(binary, structure=STRUCTURE_8)
        slices = ndimage.find_objects(lab)
        for k, sl in enumerate(slices, start=1):
            bitmap = lab[sl] == k
            ys, xs = np.nonzero(bitmap)
            cx = float(xs.mean())
            cy = float(ys.mean())
            y0, x0 = sl[0].start, sl[1].start
            regions.append(
                Region(
                    color_id=color_id,
                    x0=x0,
                    y0=y0,
                    bitmap=bitmap,
                    area=int(bitmap.sum()),
                    centroid=(cx, cy),
                )
            )
            first = (y0 + ys.min()) * mask.width + (
                x0 + xs[ys == ys.min()].min()
            )
            firsts.append(first)
    order = np.argsort(firsts, kind="stable")
    regions = [regions[i] for i in order]
    for idx, reg in enumerate(regions, start=1):
        sl = (
            slice(reg.y0, reg.y0 + reg.bitmap.shape[0]),
            slice(reg.x0, reg.x0 + reg.bitmap.shape[1]),
        )
        labels[sl][reg.bitmap] = idx
    return labels, regions


def extract_cells(mask):
    """Extract one CellShape per cell region, row-major by top-left pixel."""
    _, regions = extract_regions(mask)
    return [
        CellShape(
            bitmap=reg.bitmap,
            centroid=reg.centroid,
            source=(mask.ident, idx),
            area=reg.area,
        )
        for idx, reg in enumerate(regions)
    ]


def compute_stats(masks, cells_per_mask=None):
    """Dataset statistics over a set of masks.

    Cell counts use the sample standard deviation (ddof=1, 0 for a single
    image).  Extents pool both bounding box sides of every cell.
    """
    if not masks:
        raise ValueError("compute_stats requires at least one mask")
    if cells_per_mask is None:
        cells_per_mask = [extract_cells(m) for m in masks]

    counts = np.array([len(c) for c in cells_per_mask], dtype=float)
    sides = np.array(
        [d for cells in cells_per_mask for s in cells for d in s.bitmap.shape],
        dtype=float,
    )
    return DatasetStats(
        mu_n=float(counts.mean()),
        sigma_n=float(counts.std(ddof=1)) if len(counts) > 1 else 0.0,
        mean_cell_extent=float(sides.mean()) if len(sides) else 0.0,
        std_cell_extent=float(sides.std(ddof=1)) if len(sides) > 1 else 0.0,
        image_width=masks[0].width,
        image_height=masks[0].height,
        n_images=len(masks),
    )


def build_database(masks):
    """Ingest masks into a ShapeDatabase (shapes plus stats in one pass)."""
    cells_per_mask = [extract_cells(m) for m in masks]
    shapes = [s for cells in cells_per_mask for s in cells]
    if not shapes:
        raise ValueError("no cells found in any input mask")
    stats = compute_stats(masks, cells_per_mask)
    return ShapeDatabase(shapes=shapes, stats=stats)


def _rle_encode(bitmap):
    """Row-major RLE: alternating run lengths starting with a zero-run."""
    flat = np.ascontiguousarray(bitmap, dtype=np.uint8).ravel()
    if flat.size == 0:
        return base64.b64encode(b"").decode("ascii")
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds)
    if flat[0] == 1:
        runs = np.concatenate(([0], runs))
    return base64.b64encode(runs.astype("<u4").tobytes()).decode("ascii")


def _rle_decode(encoded, height, width):
    raw = base64.b64decode(encoded.encode("ascii"))
    runs = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    if runs.sum() != height * width:
        raise DatabaseFormatError("RLE length does not match bitmap size")
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    for i, run in enumerate(runs):
        if i % 2 == 1:
            flat[pos : pos + run] = True
        pos += run
    return flat.reshape(height, width)


def _db_payload(db):
    return {
        "stats": {
            "mu_n": db.stats.mu_n,
            "sigma_n": db.stats.sigma_n,
            "mean_cell_extent": db.stats.mean_cell_extent,
            "std_cell_extent": db.stats.std_cell_extent,
            "image_width": db.stats.image_width,
            "image_height": db.stats.image_height,
            "n_images": db.stats.n_images,
        },
        "shapes": [
            {
                "height": int(s.bitmap.shape[0]),
                "width": int(s.bitmap.shape[1]),
                "rle": _rle_encode(s.bitmap),
                "centroid": [s.centroid[0], s.centroid[1]],
                "source": [s.source[0], s.source[1]],
                "area": s.area,
            }
            for s in db.shapes
        ],
    }


def _payload_checksum(payload):
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def save_db(db, path):
    """Write a versioned, checksummed JSON database file."""
    payload = _db_payload(db)
    doc = {
        "format_version": db.format_version,
        "checksum": _payload_checksum(payload),
        **payload,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))


def load_db(path):
    """Load a database file, verifying version and checksum."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatabaseFormatError(f"truncated or corrupt database: {exc}")

    version = doc.get("format_version")
    if version != DB_FORMAT_VERSION:
        raise DatabaseFormatError(
            f"unsupported database format_version {version!r}, "
            f"expected {DB_FORMAT_VERSION}"
        )
    payload = {"stats": doc.get("stats"), "shapes": doc.get("shapes")}
    if payload["stats"] is None or payload["shapes"] is None:
        raise DatabaseFormatError("database missing stats or shapes section")
    if _payload_checksum(payload) != doc.get("checksum"):
        raise DatabaseFormatError("database checksum mismatch")

    shapes = [
        CellShape(
            bitmap=_rle_decode(s["rle"], s["height"], s["width"]),
            centroid=(s["centroid"][0], s["centroid"][1]),
            source=(s["source"][0], s["source"][1]),
            area=s["area"],
        )
        for s in payload["shapes"]
    ]
    st = payload["stats"]
    stats = DatasetStats(
        mu_n=st["mu_n"],
        sigma_n=st["sigma_n"],
        mean_cell_extent=st["mean_cell_extent"],
        std_cell_extent=st["std_cell_extent"],
        image_width=st["image_width"],
        image_height=st["image_height"],
        n_images=st["n_images"],
    )
    return ShapeDatabase(
        shapes=shapes, stats=stats, format_version=version
    )


def mask_to_image(mask):
    """Render an InstanceMask back to an RGB array via its palette."""
    palette = np.array(mask.palette, dtype=np.uint8)
    return palette[mask.pixels]


def save_mask_png(mask, path):
    Image.fromarray(mask_to_image(mask)).save(path, format="PNG")
