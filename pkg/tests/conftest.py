import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))

from hemogen.maskdb import CellShape, DatasetStats, ShapeDatabase


def disc_bitmap(radius):
    d = 2 * radius + 1
    yy, xx = np.mgrid[:d, :d] - radius
    return (yy * yy + xx * xx) <= radius * radius


def make_disc_db(radii=(14, 16, 18, 20), mu_n=669.0, sigma_n=149.0,
                 width=1920, height=1200):
    """Small shape database of filled discs, enough to drive synthesis."""
    shapes = []
    for i, r in enumerate(radii):
        bmp = disc_bitmap(r)
        shapes.append(
            CellShape(
                bitmap=bmp,
                centroid=(float(r), float(r)),
                source=("disc-fixture", i),
                area=int(bmp.sum()),
            )
        )
    sides = np.array([s.bitmap.shape[0] for s in shapes] * 2, dtype=float)
    stats = DatasetStats(
        mu_n=mu_n,
        sigma_n=sigma_n,
        mean_cell_extent=float(sides.mean()),
        std_cell_extent=float(sides.std(ddof=1)),
        image_width=width,
        image_height=height,
        n_images=1,
    )
    return ShapeDatabase(shapes=shapes, stats=stats)


def write_rgb_png(path, rgb):
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path, format="PNG")


def blob_mask_image(width, height, blobs, background=(0, 0, 0)):
    """RGB mask image from (x, y, radius, color) blob specs."""
    rgb = np.zeros((height, width, 3), dtype=np.uint8)
    rgb[:] = background
    yy, xx = np.mgrid[:height, :width]
    for x, y, r, color in blobs:
        rgb[(yy - y) ** 2 + (xx - x) ** 2 <= r * r] = color
    return rgb


@pytest.fixture(scope="session")
def disc_db():
    return make_disc_db()


@pytest.fixture(scope="session")
def small_disc_db():
    return make_disc_db(radii=(6, 8, 10), width=256, height=256)
