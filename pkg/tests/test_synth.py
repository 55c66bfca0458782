import json

import numpy as np
import pytest

from hemogen.maskdb import extract_cells, extract_regions, find_violations, load_mask
from hemogen.probmap import SamplerParams
from hemogen.synth import (
    AugmentationConfig,
    AugmentedShape,
    OUT_OF_BOUNDS,
    OVERLAP,
    PLACED,
    STRATEGY_UNIFORM,
    SynthesisConfig,
    Transform,
    assign_color,
    batch_generate,
    generate_mask,
    rotate_nearest,
    sample_cell_count,
    sample_shape,
    save_outputs,
    scale_nearest,
    try_place,
)
from conftest import make_disc_db

IDENTITY_AUG = AugmentationConfig(
    rotation_range=(0.0, 0.0),
    scale_range=(1.0, 1.0),
    flip_horizontal_prob=0.0,
    flip_vertical_prob=0.0,
)


def small_config(**overrides):
    defaults = dict(
        width=256,
        height=256,
        mu_n=20,
        sigma_n=0,
        sampler=SamplerParams(n_init=5),
        seed=0,
    )
    defaults.update(overrides)
    return SynthesisConfig(**defaults)


class TestSampleCellCount:
    def test_degenerate_sigma(self):
        rng = np.random.default_rng(0)
        assert all(
            sample_cell_count(669, 0, rng, 20, 10**9) == 669 for _ in range(10)
        )

    def test_clamp_floor(self):
        class FixedRng:
            def normal(self, mu, sigma):
                return -500.0

        assert sample_cell_count(10, 100, FixedRng(), 20, 10**9) == 20

    def test_clamp_ceiling(self):
        class FixedRng:
            def normal(self, mu, sigma):
                return 1e9

        assert sample_cell_count(669, 149, FixedRng(), 20, 500) == 500

    def test_golden_seeded_value(self):
        # frozen draw of the seeded PCG64 normal sampler; stable across releases
        rng = np.random.default_rng(12345)
        assert sample_cell_count(669, 149, rng, 20, 10**9) == 457


class TestAugmentation:
    def test_identity_equals_exemplar(self, small_disc_db):
        rng = np.random.default_rng(1)
        shape = sample_shape(small_disc_db, IDENTITY_AUG, rng)
        assert np.array_equal(
            shape.bitmap, small_disc_db.shapes[shape.shape_id].bitmap
        )

    def test_rotate_90_l_shape(self):
        l_shape = np.array([[1, 0], [1, 0], [1, 1]], dtype=bool)
        # clockwise quarter turn in y-down image coordinates, by hand:
        expected = np.array([[1, 1, 1], [1, 0, 0]], dtype=bool)
        assert np.array_equal(rotate_nearest(l_shape, 90), expected)

    def test_rotate_360_is_identity(self):
        rng = np.random.default_rng(2)
        bmp = rng.random((9, 7)) > 0.5
        assert np.array_equal(rotate_nearest(bmp, 360), bmp)

    def test_double_flip_is_identity(self):
        rng = np.random.default_rng(3)
        bmp = rng.random((8, 6)) > 0.5
        assert np.array_equal(bmp[:, ::-1][:, ::-1], bmp)

    def test_flip_only_augmentation_involution(self, small_disc_db):
        aug = AugmentationConfig(
            rotation_range=(0.0, 0.0),
            scale_range=(1.0, 1.0),
            flip_horizontal_prob=1.0,
            flip_vertical_prob=0.0,
        )
        rng = np.random.default_rng(4)
        shape = sample_shape(small_disc_db, aug, rng)
        original = small_disc_db.shapes[shape.shape_id].bitmap
        assert np.array_equal(shape.bitmap[:, ::-1], original)

    def test_scale_changes_extent(self):
        bmp = np.ones((10, 10), dtype=bool)
        assert scale_nearest(bmp, 0.8).shape == (8, 8)
        assert scale_nearest(bmp, 1.2).shape == (12, 12)

    def test_augmented_shape_is_tight_and_connected(self, small_disc_db):
        from scipy import ndimage

        rng = np.random.default_rng(5)
        for _ in range(50):
            shape = sample_shape(small_disc_db, AugmentationConfig(), rng)
            bmp = shape.bitmap
            assert bmp.any()
            assert bmp[0].any() and bmp[-1].any()
            assert bmp[:, 0].any() and bmp[:, -1].any()
            structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
            _, n = ndimage.label(bmp, structure=structure)
            assert n == 1


def square_shape(side=4):
    bmp = np.ones((side, side), dtype=bool)
    c = (side - 1) / 2.0
    return AugmentedShape(
        shape_id=0,
        transform=Transform(0.0, 1.0, False, False),
        bitmap=bmp,
        centroid=(c, c),
    )


class TestTryPlace:
    def test_place_into_empty_canvas(self):
        occ = np.zeros((20, 20), dtype=bool)
        status, placement = try_place(occ, square_shape(), (10, 10))
        assert status == PLACED
        assert not placement.clipped
        assert occ.sum() == 16
        assert occ[placement.y0, placement.x0]

    def test_same_location_twice_overlaps(self):
        occ = np.zeros((20, 20), dtype=bool)
        assert try_place(occ, square_shape(), (10, 10))[0] == PLACED
        assert try_place(occ, square_shape(), (10, 10))[0] == OVERLAP

    def test_clipped_at_right_edge(self):
        occ = np.zeros((60, 60), dtype=bool)
        shape = square_shape(46)
        status, placement = try_place(occ, shape, (57, 30))
        assert status == PLACED
        assert placement.clipped
        # centroid 22.5 anchored at x=57: left edge round(34.5) -> 34,
        # columns 34..79 clipped to 34..59 = 26 visible
        assert placement.bitmap.shape[1] == 26
        assert occ.sum() == placement.bitmap.sum()

    def test_fully_outside(self):
        occ = np.zeros((20, 20), dtype=bool)
        big = square_shape(4)
        big.bitmap = np.ones((2, 2), dtype=bool)
        big.centroid = (0.5, 0.5)
        status, _ = try_place(occ, big, (19, 19))
        assert status == PLACED  # corner still visible
        occ2 = np.zeros((20, 20), dtype=bool)
        shifted = square_shape(2)
        shifted.centroid = (-30.0, -30.0)  # pushes the stamp far off-canvas
        assert try_place(occ2, shifted, (5, 5))[0] == OUT_OF_BOUNDS


class TestAssignColor:
    def test_isolated_cell_any_color(self):
        rng = np.random.default_rng(0)
        picks = {assign_color(set(), 8, rng) for _ in range(200)}
        assert picks == set(range(8))

    def test_elimination(self):
        rng = np.random.default_rng(0)
        assert assign_color({0, 1}, 3, rng) == 2

    def test_exhausted(self):
        rng = np.random.default_rng(0)
        assert assign_color(set(range(8)), 8, rng) is None


class TestGenerateMask:
    def test_determinism_same_seed(self, small_disc_db, tmp_path):
        cfg = small_config(seed=77)
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        out_a.mkdir()
        out_b.mkdir()
        for out in (out_a, out_b):
            mask, record = generate_mask(small_disc_db, cfg)
            save_outputs(mask, record, str(out), "mask")
        assert (out_a / "mask.png").read_bytes() == (out_b / "mask.png").read_bytes()
        assert (out_a / "mask.json").read_bytes() == (out_b / "mask.json").read_bytes()

    def test_tiny_config_round_trip(self, small_disc_db):
        cfg = SynthesisConfig(
            width=64,
            height=64,
            mu_n=3,
            sigma_n=0,
            sampler=SamplerParams(n_init=3, cell_size=10),
            palette=[(255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0)],
            seed=5,
        )
        mask, record = generate_mask(small_disc_db, cfg)
        assert len(record.placed) == 3
        _, regions = extract_regions(mask)
        assert len(regions) == 3
        placed_by_origin = {(c.x0, c.y0): c for c in record.placed}
        for reg in regions:
            cell = placed_by_origin[(reg.x0, reg.y0)]
            assert np.array_equal(reg.bitmap, cell.bitmap)

    def test_output_passes_mask_validation(self, small_disc_db, tmp_path):
        mask, record = generate_mask(small_disc_db, small_config(seed=9))
        assert find_violations(mask) == []
        path = tmp_path / "out.png"
        save_outputs(mask, record, str(tmp_path), "out")
        reloaded = load_mask(path, background=(0, 0, 0))
        assert len(extract_cells(reloaded)) == len(record.placed)

    def test_no_overlap_partition(self, small_disc_db):
        mask, record = generate_mask(small_disc_db, small_config(seed=13))
        assert sum(c.area for c in record.placed) == mask.cell_pixel_count()

    def test_retry_accounting(self, small_disc_db):
        mask, record = generate_mask(small_disc_db, small_config(seed=21))
        # every loop iteration ended as a placement or a counted rejection
        assert all(v >= 0 for v in record.rejections.values())
        assert len(record.placed) <= record.requested_cells
        assert record.requested_cells == 20

    def test_density_cap_binds(self, small_disc_db):
        cfg = small_config(width=64, height=64, mu_n=5000, sigma_n=0)
        mask, record = generate_mask(small_disc_db, cfg)
        mean_area = small_disc_db.mean_area()
        assert record.requested_cells == int(0.6 * 64 * 64 / mean_area)
        assert any("density cap" in w for w in record.warnings)

    def test_uniform_random_strategy(self, small_disc_db):
        cfg = small_config(seed=4, strategy=STRATEGY_UNIFORM)
        mask, record = generate_mask(small_disc_db, cfg)
        assert record.config.strategy == STRATEGY_UNIFORM
        assert record.to_dict()["strategy"] == STRATEGY_UNIFORM
        assert len(record.placed) > 0

    def test_sidecar_schema(self, small_disc_db):
        mask, record = generate_mask(small_disc_db, small_config(seed=2))
        doc = record.to_dict()
        assert doc["placed_cells"] == len(record.placed)
        for entry in doc["cells"]:
            x, y, w, h = entry["bbox"]
            assert 0 <= x < 256 and 0 <= y < 256
            assert w > 0 and h > 0
            assert entry["area"] > 0
            assert 0 <= entry["color_id"] < 12
        # sidecar is valid JSON end to end
        json.loads(json.dumps(doc))

    def test_empty_db_rejected(self):
        db = make_disc_db()
        db.shapes = []
        with pytest.raises(ValueError):
            generate_mask(db, small_config())


class TestBatchGenerate:
    def test_parallelism_independence(self, small_disc_db):
        cfg = small_config(seed=100)
        serial = batch_generate(small_disc_db, cfg, 4, parallelism=1)
        parallel = batch_generate(small_disc_db, cfg, 4, parallelism=4)
        for (mask_s, rec_s), (mask_p, rec_p) in zip(serial, parallel):
            assert np.array_equal(mask_s.pixels, mask_p.pixels)
            assert rec_s.to_dict() == rec_p.to_dict()

    def test_count_one_equals_generate(self, small_disc_db):
        cfg = small_config(seed=8)
        [(mask_b, rec_b)] = batch_generate(small_disc_db, cfg, 1)
        mask_g, rec_g = generate_mask(small_disc_db, cfg)
        assert np.array_equal(mask_b.pixels, mask_g.pixels)
        assert rec_b.to_dict() == rec_g.to_dict()

    def test_seed_progression(self, small_disc_db):
        cfg = small_config(seed=50)
        results = batch_generate(small_disc_db, cfg, 3)
        assert [rec.seed for _, rec in results] == [50, 51, 52]

    def test_count_mean_tracks_distribution(self, small_disc_db):
        cfg = small_config(mu_n=30, sigma_n=5, seed=0)
        results = batch_generate(small_disc_db, cfg, 20, parallelism=2)
        counts = [rec.requested_cells for _, rec in results]
        assert abs(np.mean(counts) - 30) <= 3 * 5 / np.sqrt(20)
