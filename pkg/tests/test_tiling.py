import numpy as np
import pytest

from bcrisk.errors import FormatError, ValidationError
from bcrisk.tiling import (
    EmbeddingBag,
    TissueMask,
    assemble_bag,
    concat_embeddings,
    enumerate_tiles,
    read_mask,
    sample_training_slides,
    write_mask,
)


def full_mask(width, height, value=1):
    return TissueMask(
        bitmap=np.full((height, width), value, dtype=np.uint8), resolution_um_per_px=1.0
    )


def make_bag(pid="P1", n=5, dim=4, seed=0, slide=None):
    rng = np.random.default_rng(seed)
    return EmbeddingBag(
        patient_id=pid,
        tiles=rng.normal(size=(n, dim)).astype(np.float32),
        provenance=f"synthetic:{dim}",
        slide_id=slide,
    )


class TestEnumerateTiles:
    def test_all_tissue_512_grid_is_3x3(self):
        grid = enumerate_tiles(full_mask(512, 512), 256, 128, 0.2)
        assert grid.lattice_shape == (3, 3)
        assert len(grid) == 9
        np.testing.assert_array_equal(grid.tissue_fraction, 1.0)

    def test_all_background_keeps_nothing(self):
        grid = enumerate_tiles(full_mask(512, 512, value=0), 256, 128, 0.2)
        assert len(grid) == 0
        assert grid.lattice_shape == (3, 3)

    def test_exact_threshold_is_inclusive(self):
        # non-overlapping 10px tiles over 30x30; exactly 20 tissue pixels
        # (two full rows) in every tile block -> fraction exactly 0.2
        bitmap = np.zeros((30, 30), dtype=np.uint8)
        for by in range(0, 30, 10):
            bitmap[by : by + 2, :] = 1
        mask = TissueMask(bitmap=bitmap, resolution_um_per_px=1.0)
        grid = enumerate_tiles(mask, 10, 10, 0.2)
        assert len(grid) == 9
        np.testing.assert_array_equal(grid.tissue_fraction, 0.2)
        assert len(enumerate_tiles(mask, 10, 10, 0.2 + 1e-9)) == 0

    def test_tile_larger_than_mask_rejected(self):
        with pytest.raises(ValidationError):
            enumerate_tiles(full_mask(100, 100), 256, 128, 0.2)

    def test_margin_pixels_do_not_affect_output(self):
        # 70x70 mask, tile 32 stride 16: lattice covers [0, 64); the 6px
        # right/bottom margin must be invisible to the filter
        rng = np.random.default_rng(3)
        base = (rng.random((70, 70)) < 0.5).astype(np.uint8)
        grid1 = enumerate_tiles(
            TissueMask(bitmap=base, resolution_um_per_px=1.0), 32, 16, 0.4
        )
        noisy = base.copy()
        noisy[64:, :] = 1 - noisy[64:, :]
        noisy[:, 64:] = 1 - noisy[:, 64:]
        grid2 = enumerate_tiles(
            TissueMask(bitmap=noisy, resolution_um_per_px=1.0), 32, 16, 0.4
        )
        np.testing.assert_array_equal(grid1.positions, grid2.positions)
        np.testing.assert_array_equal(grid1.tissue_fraction, grid2.tissue_fraction)

    def test_lowering_threshold_never_removes_positions(self):
        rng = np.random.default_rng(11)
        bitmap = (rng.random((128, 128)) < 0.35).astype(np.uint8)
        mask = TissueMask(bitmap=bitmap, resolution_um_per_px=1.0)
        thresholds = [0.6, 0.45, 0.3, 0.15, 0.0]
        previous = None
        for thr in thresholds:
            grid = enumerate_tiles(mask, 32, 16, thr)
            kept = {tuple(p) for p in grid.positions}
            if previous is not None:
                assert previous <= kept
            previous = kept


class TestMaskIo:
    def test_pgm_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        mask = TissueMask(
            bitmap=(rng.random((20, 30)) < 0.5).astype(np.uint8),
            resolution_um_per_px=0.5,
        )
        path = tmp_path / "mask.pgm"
        write_mask(mask, path)
        loaded = read_mask(path)
        np.testing.assert_array_equal(loaded.bitmap != 0, mask.bitmap != 0)
        assert loaded.resolution_um_per_px == 0.5

    def test_truncated_payload_names_offset(self, tmp_path):
        path = tmp_path / "mask.pgm"
        write_mask(full_mask(10, 10), path)
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(FormatError, match="byte offset"):
            read_mask(path)

    def test_missing_sidecar_rejected(self, tmp_path):
        path = tmp_path / "mask.pgm"
        write_mask(full_mask(4, 4), path)
        (tmp_path / "mask.pgm.mpp").unlink()
        with pytest.raises(FormatError, match="sidecar"):
            read_mask(path)


class TestAssembleBag:
    def test_concatenation_preserves_order_without_capping(self):
        b1 = make_bag(n=10, seed=1, slide="S1")
        b2 = make_bag(n=15, seed=2, slide="S2")
        out = assemble_bag([b1, b2], max_tiles=3500, sampler_seed=0)
        assert out.n_tiles == 25
        np.testing.assert_array_equal(out.tiles[:10], b1.tiles)
        np.testing.assert_array_equal(out.tiles[10:], b2.tiles)

    def test_capping_is_deterministic_and_a_subset(self):
        big = make_bag(n=4000, dim=3, seed=7)
        a = assemble_bag([big], max_tiles=3500, sampler_seed=99)
        b = assemble_bag([big], max_tiles=3500, sampler_seed=99)
        assert a.n_tiles == 3500
        np.testing.assert_array_equal(a.tiles, b.tiles)
        rows = {t.tobytes() for t in big.tiles}
        assert all(t.tobytes() in rows for t in a.tiles)

    def test_mixed_dims_rejected(self):
        with pytest.raises(ValidationError):
            assemble_bag([make_bag(dim=4), make_bag(dim=8)], 100, 0)


class TestSampleTrainingSlides:
    def test_single_slide_returned_when_k_larger(self):
        assert sample_training_slides(["S1"], k=3, seed=0) == ["S1"]

    def test_deterministic_per_seed(self):
        ids = [f"S{i}" for i in range(5)]
        assert sample_training_slides(ids, 2, 42) == sample_training_slides(ids, 2, 42)

    def test_empty_list_rejected(self):
        with pytest.raises(ValidationError):
            sample_training_slides([], 1, 0)

    def test_draw_frequencies_within_3_sigma_of_uniform(self):
        # binomial oracle: 10,000 draws of k=1 from 4 slides
        ids = ["S0", "S1", "S2", "S3"]
        counts = {s: 0 for s in ids}
        for i in range(10_000):
            counts[sample_training_slides(ids, 1, [123, i])[0]] += 1
        sigma = np.sqrt(0.25 * 0.75 / 10_000)
        for s in ids:
            assert abs(counts[s] / 10_000 - 0.25) < 3 * sigma


class TestConcatEmbeddings:
    def test_encoder_dims_sum_to_ensemble_dim(self):
        bags = [
            EmbeddingBag("P1", np.zeros((4, 1536), dtype=np.float32), "uni2:1536"),
            EmbeddingBag("P1", np.zeros((4, 2560), dtype=np.float32), "virchow2:2560"),
            EmbeddingBag("P1", np.zeros((4, 512), dtype=np.float32), "conch:512"),
        ]
        out = concat_embeddings(bags)
        assert out.dim == 4608
        assert out.provenance == "ensemble:4608"

    def test_single_input_is_identity(self):
        bag = make_bag()
        assert concat_embeddings([bag]) is bag

    def test_tile_count_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            concat_embeddings([make_bag(n=10), make_bag(n=11)])

    def test_values_interleave_tile_wise(self):
        b1 = make_bag(n=3, dim=2, seed=1)
        b2 = make_bag(n=3, dim=5, seed=2)
        out = concat_embeddings([b1, b2])
        np.testing.assert_array_equal(out.tiles[:, :2], b1.tiles)
        np.testing.assert_array_equal(out.tiles[:, 2:], b2.tiles)
