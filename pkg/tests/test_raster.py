import io

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from controllers.raster_controller import (
    align_to_reference,
    bilinear_sample,
    block_nanmean,
    build_validity_mask,
    downsample,
    grids_match,
    resample,
)
from controllers.metrics_controller import compute_pad
from models.metrics_model import PadParams, ReturnHistogramGrid
from models.raster_model import GridSpec, MetricRaster
from tests.fixtures import make_raster
from utils.errors import (
    AlignmentError,
    CrsMismatchError,
    GridMismatchError,
    InvalidParameterError,
    RasterParseError,
    ResampleError,
    TruncationError,
)
from utils.file_handlers import (
    FileHandler,
    read_ascii_grid,
    read_binary,
    read_pad_grid,
    read_raster,
    write_ascii_grid,
    write_binary,
    write_pad_grid,
)


class TestBinaryRaster:

    def test_round_trip_is_bit_exact(self, tmp_path, rng):
        for index in range(1000):
            height, width = rng.integers(1, 9, size=2)
            values = rng.normal(10.0, 5.0, size=(height, width))
            values[rng.random((height, width)) < 0.2] = np.nan
            grid = GridSpec(float(rng.uniform(-1e6, 1e6)), float(rng.uniform(-1e6, 1e6)),
                            float(rng.uniform(0.1, 5.0)), int(width), int(height), 32633)
            raster = MetricRaster.from_values(grid, values, "pai", {"source": f"tile{index}"})
            write_binary(raster, tmp_path / f"r{index}")
            back = read_binary(tmp_path / f"r{index}.f64")
            assert back.grid == grid
            assert np.array_equal(back.values, values, equal_nan=True)
            assert np.array_equal(back.nodata_mask, np.isnan(values))
            assert back.band_name == "pai"
            assert back.metadata == {"source": f"tile{index}"}

    def test_truncated_payload(self, tmp_path):
        payload, _ = write_binary(make_raster(np.ones((3, 3))), tmp_path / "chm")
        payload.write_bytes(payload.read_bytes()[:-8])
        with pytest.raises(TruncationError) as info:
            read_binary(tmp_path / "chm")
        assert info.value.expected == 72
        assert info.value.actual == 64

    def test_missing_header_key(self, tmp_path):
        _, header = write_binary(make_raster(np.ones((2, 2))), tmp_path / "chm")
        header.write_text("".join(line + "\n" for line in header.read_text().splitlines()
                                  if not line.startswith("cell_size")))
        with pytest.raises(RasterParseError) as info:
            read_binary(tmp_path / "chm")
        assert info.value.key == "cell_size"


class TestAsciiGrid:

    def test_round_trip(self, tmp_path):
        values = np.array([[1.5, 2.123456789012], [np.nan, -3.0]])
        raster = make_raster(values, cell=0.5, origin_x=500000.0, origin_y=6600000.0)
        write_ascii_grid(raster, tmp_path / "chm.asc")
        back = read_raster(tmp_path / "chm.asc")
        assert grids_match(back.grid, raster.grid)
        assert back.band_name == "chm"
        assert back.nodata_mask.tolist() == [[False, False], [True, False]]
        np.testing.assert_allclose(back.values[back.valid], values[raster.valid], rtol=1e-11)

    def test_header_layout(self):
        sink = io.StringIO()
        write_ascii_grid(make_raster([[1.0, np.nan]]), sink)
        lines = sink.getvalue().splitlines()
        assert lines[:6] == ["ncols 2", "nrows 1", "xllcorner 0.0", "yllcorner 0.0",
                             "cellsize 1.0", "NODATA_value -9999"]
        assert lines[6] == "1 -9999"

    def test_centre_registered_header(self):
        text = "ncols 2\nnrows 1\nxllcenter 10.5\nyllcenter 20.5\ncellsize 1\n4 5\n"
        raster = read_ascii_grid(io.StringIO(text))
        assert raster.grid.origin_x == 10.0
        assert raster.grid.origin_y == 21.0
        assert raster.values.tolist() == [[4.0, 5.0]]

    def test_missing_key(self):
        with pytest.raises(RasterParseError) as info:
            read_ascii_grid(io.StringIO("nrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\n4\n"))
        assert info.value.key == "ncols"

    def test_wrong_cell_count(self):
        text = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n"
        with pytest.raises(RasterParseError) as info:
            read_ascii_grid(io.StringIO(text))
        assert info.value.key == "values"


class TestBilinearSample:

    def test_constant_is_exact(self):
        raster = make_raster(np.full((6, 6), 123.456))
        xs = np.linspace(0.0, 6.0, 37)
        assert np.all(bilinear_sample(raster, xs, np.full(37, 2.7)) == 123.456)

    def test_plane_is_reproduced(self):
        rows, cols = np.mgrid[0:8, 0:8]
        raster = make_raster(2.0 * cols + 3.0 * rows)
        xs = np.array([0.5, 1.25, 3.9, 7.5])
        ys = np.array([7.5, 5.1, 2.2, 0.5])
        expected = 2.0 * (xs - 0.5) + 3.0 * (8.0 - ys - 0.5)
        np.testing.assert_allclose(bilinear_sample(raster, xs, ys), expected, rtol=1e-12)

    def test_nodata_neighbours_are_renormalised(self):
        raster = make_raster([[1.0, np.nan], [3.0, 5.0]])
        value = bilinear_sample(raster, np.array([1.0]), np.array([1.0]))[0]
        assert value == pytest.approx(3.0)
        assert np.isnan(bilinear_sample(make_raster([[np.nan, np.nan]]), [0.5], [0.5])[0])

    def test_midpoint_between_two_cells(self):
        raster = make_raster([[0.0, 10.0]])
        assert bilinear_sample(raster, [1.0], [0.5])[0] == 5.0

    @given(arrays(np.float64, (2, 2), elements=st.floats(-100.0, 100.0)),
           st.floats(0.0, 2.0), st.floats(0.0, 2.0))
    def test_bounded_by_neighbour_extremes(self, values, x, y):
        value = bilinear_sample(make_raster(values), [x], [y])[0]
        assert values.min() - 1e-9 <= value <= values.max() + 1e-9


class TestResample:

    def test_nearest_upsample_copies_blocks(self, rng):
        src = make_raster(rng.uniform(0, 30, (4, 6)))
        fine = resample(src, 0.2, "nearest")
        assert fine.grid.shape == (20, 30)
        assert fine.grid.cell_size == pytest.approx(0.2)
        assert np.array_equal(fine.values[::5, ::5], src.values)
        assert np.array_equal(fine.values[4::5, 4::5], src.values)
        assert fine.metadata["resample_method"] == "nearest"

    def test_bilinear_upsample_of_constant(self):
        fine = resample(make_raster(np.full((3, 3), 7.25)), 0.25, "bilinear")
        assert fine.grid.shape == (12, 12)
        assert np.all(fine.values == 7.25)

    def test_downsample_by_block_mean(self):
        src = make_raster(np.arange(16, dtype=float).reshape(4, 4), cell=0.5)
        coarse = resample(src, 1.0, "bilinear")
        assert coarse.grid.shape == (2, 2)
        assert coarse.values.tolist() == [[2.5, 4.5], [10.5, 12.5]]

    def test_non_integer_ratio(self):
        with pytest.raises(ResampleError):
            resample(make_raster(np.ones((3, 3))), 0.3)

    def test_unknown_method(self):
        with pytest.raises(InvalidParameterError):
            resample(make_raster(np.ones((2, 2))), 0.5, "cubic")

    def test_nearest_up_then_down_is_identity(self, rng):
        src = make_raster(rng.uniform(0, 30, (7, 9)))
        fine = resample(src, 0.2, "nearest")
        back = resample(fine, 1.0, "nearest")
        assert back.grid.shape == src.grid.shape
        assert np.array_equal(back.values, src.values)


class TestDownsample:

    def test_mean_skips_nodata_and_pads_edges(self):
        values = np.arange(25, dtype=float).reshape(5, 5)
        values[0, 0] = np.nan
        values[4, 4] = np.nan
        coarse = downsample(make_raster(values), 2)
        assert coarse.grid.shape == (3, 3)
        assert coarse.values[0, 0] == pytest.approx((1 + 5 + 6) / 3)
        assert coarse.values[0, 2] == pytest.approx((4 + 9) / 2)
        assert np.isnan(coarse.values[2, 2])

    def test_nearest_takes_block_centre(self):
        values = np.arange(36, dtype=float).reshape(6, 6)
        coarse = downsample(make_raster(values), 3, "nearest")
        assert coarse.values.tolist() == [[7.0, 10.0], [25.0, 28.0]]

    def test_block_nanmean_on_stack(self):
        stack = np.ones((3, 4, 4))
        stack[1] = 2.0
        stack[2, :2, :2] = np.nan
        reduced = block_nanmean(stack, 2)
        assert reduced.shape == (3, 2, 2)
        assert np.all(reduced[1] == 2.0)
        assert np.isnan(reduced[2, 0, 0])
        assert reduced[2, 1, 1] == 1.0


class TestAlign:

    def test_equal_cells_shift_without_interpolation(self, rng):
        values = rng.uniform(0, 30, (4, 4))
        src = make_raster(values, origin_x=10.0, origin_y=20.0)
        ref = GridSpec(12.0, 19.0, 1.0, 4, 4)
        aligned = align_to_reference(src, ref)
        assert aligned.grid == ref
        assert np.array_equal(aligned.values[:3, :2], values[1:, 2:])
        assert np.isnan(aligned.values[3, :]).all()
        assert np.isnan(aligned.values[:, 2:]).all()

    def test_finer_reference(self):
        src = make_raster([[1.0, 2.0], [3.0, 4.0]])
        aligned = align_to_reference(src, GridSpec(0.0, 2.0, 0.5, 4, 4))
        assert aligned.values[0].tolist() == [1.0, 1.0, 2.0, 2.0]
        assert aligned.values[3].tolist() == [3.0, 3.0, 4.0, 4.0]

    def test_half_cell_offset(self):
        with pytest.raises(AlignmentError) as info:
            align_to_reference(make_raster(np.ones((3, 3))), GridSpec(0.5, 3.0, 1.0, 3, 3))
        assert info.value.residual[0] == pytest.approx(0.5)

    def test_crs_mismatch(self):
        with pytest.raises(CrsMismatchError):
            align_to_reference(make_raster(np.ones((2, 2))), GridSpec(0.0, 2.0, 1.0, 2, 2, 32633))

    def test_aligning_twice_changes_nothing(self, rng):
        src = make_raster(rng.uniform(0, 30, (6, 6)), origin_x=10.0, origin_y=20.0)
        ref = GridSpec(11.0, 22.0, 0.5, 14, 12)
        once = align_to_reference(src, ref)
        twice = align_to_reference(once, ref)
        assert twice.grid == once.grid
        np.testing.assert_array_equal(twice.values, once.values)
        assert np.array_equal(twice.nodata_mask, once.nodata_mask)


class TestCoveringGrid:

    def test_origin_snaps_to_whole_cells(self):
        grid = GridSpec.covering((0.37, 0.21, 10.37, 10.21), 1.0)
        assert (grid.origin_x, grid.origin_y) == (0.0, 11.0)
        assert grid.shape == (11, 11)
        assert grid.is_alignment_compatible(GridSpec(0.0, 11.0, 0.2, 55, 55))

    def test_bounds_on_cell_edges_are_kept(self):
        grid = GridSpec.covering((2.0, 4.0, 12.0, 10.0), 2.0)
        assert (grid.origin_x, grid.origin_y) == (2.0, 10.0)
        assert grid.shape == (3, 5)

    def test_negative_coordinates(self):
        grid = GridSpec.covering((-3.5, -7.25, -0.5, -2.5), 1.0)
        assert (grid.origin_x, grid.origin_y) == (-4.0, -2.0)
        assert grid.shape == (6, 4)

    def test_cell_size_must_be_positive(self):
        with pytest.raises(InvalidParameterError):
            GridSpec.covering((0.0, 0.0, 1.0, 1.0), 0.0)


class TestValidityMask:

    def test_intersection_of_bands(self):
        chm = make_raster([[1.0, np.nan], [2.0, 3.0]])
        pai = make_raster([[1.0, 1.0], [np.nan, 3.0]], band="pai")
        mask = build_validity_mask([chm, pai])
        assert mask.valid.tolist() == [[True, False], [False, True]]
        assert mask.valid_count == 2

    def test_grid_mismatch(self):
        with pytest.raises(GridMismatchError):
            build_validity_mask([make_raster(np.ones((2, 2))), make_raster(np.ones((2, 2)), cell=2.0)])


def test_pad_grid_persistence(tmp_path, rng):
    counts = rng.integers(0, 4, size=(3, 4, 6)).astype(np.int32)
    counts[1, 2] = 0
    grid = GridSpec(0.0, 3.0, 1.0, 4, 3)
    params = PadParams(k=0.5, dz=1.0, max_height=6.0)
    pad = compute_pad(ReturnHistogramGrid(grid, counts, counts.sum(axis=-1, dtype=np.int64)), params)
    write_pad_grid(pad, tmp_path / "pad")
    back = read_pad_grid(tmp_path / "pad")
    assert back.params == params
    assert back.grid == grid
    assert np.array_equal(back.valid, pad.valid)
    assert np.array_equal(back.pad, pad.pad)


def test_file_handler_tracks_outputs(tmp_path):
    handler = FileHandler(tmp_path / "out")
    paths = handler.save_raster(make_raster(np.ones((2, 2))), "tile_chm")
    assert [p.name for p in paths] == ["tile_chm.f64", "tile_chm.hdr", "tile_chm.asc"]
    assert handler.written == paths
    assert all(p.exists() for p in paths)
