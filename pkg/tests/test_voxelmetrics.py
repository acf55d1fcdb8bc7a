import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from controllers.metrics_controller import (
    bin_returns,
    compute_all,
    compute_chm,
    compute_fhd,
    compute_pad,
    compute_pai,
    compute_percentiles,
    percentile_band_name,
)
from models.metrics_model import PadGrid, PadParams, ReturnHistogramGrid
from models.pointcloud_model import HagCloud
from models.raster_model import GridSpec
from utils.errors import CoverageError, InvalidParameterError


def histogram(counts) -> ReturnHistogramGrid:
    counts = np.asarray(counts, dtype=np.int32)
    height, width, _ = counts.shape
    return ReturnHistogramGrid(GridSpec(0.0, float(height), 1.0, width, height), counts,
                               counts.sum(axis=-1, dtype=np.int64))


def pad_oracle(column, k, dz):
    """Layer-by-layer Beer-Lambert profile of one cell."""
    profile = []
    for i in range(len(column)):
        entering = int(sum(column[i:]))
        exiting = int(sum(column[i + 1:]))
        if entering == 0:
            profile.append(0.0)
        else:
            profile.append(math.log(entering / max(exiting, 1)) / (k * dz))
    return profile


def hag_cloud(x, y, hag, max_height=60.0) -> HagCloud:
    return HagCloud(np.asarray(x, float), np.asarray(y, float), np.asarray(hag, float),
                    (0.0, 0.0, 5.0, 5.0), max_height)


GRID_5 = GridSpec(0.0, 5.0, 1.0, 5, 5)


def pad_grid(values) -> PadGrid:
    """A PadGrid holding the given (rows, cols, layers) profile, every cell valid."""
    values = np.asarray(values, dtype=np.float64)
    height, width, layers = values.shape
    return PadGrid(GridSpec(0.0, float(height), 1.0, width, height), values,
                   np.zeros(values.shape, dtype=bool), PadParams(max_height=float(layers)),
                   np.ones((height, width), dtype=np.int64))


class TestPadParams:

    def test_layers(self):
        assert PadParams().n_layers == 60
        assert PadParams(dz=0.5, max_height=30.0).n_layers == 60

    @pytest.mark.parametrize("kwargs, name", [
        ({"k": 0.0}, "k"),
        ({"dz": -1.0}, "dz"),
        ({"dz": 0.7, "max_height": 10.0}, "max_height"),
    ])
    def test_invalid(self, kwargs, name):
        with pytest.raises(InvalidParameterError) as info:
            PadParams(**kwargs)
        assert info.value.name == name


class TestBinReturns:

    def test_layer_boundaries(self):
        params = PadParams(dz=1.0, max_height=5.0)
        hag = hag_cloud([0.5] * 5, [4.5] * 5, [0.0, 0.999, 1.0, 5.0, 5.5])
        hist = bin_returns(hag, GRID_5, params)
        assert hist.counts[0, 0].tolist() == [2, 1, 0, 0, 1]
        assert hist.total_per_cell[0, 0] == 4
        assert hist.counts.sum() == 4

    def test_points_off_grid(self):
        with pytest.raises(CoverageError):
            bin_returns(hag_cloud([7.0], [1.0], [3.0]), GRID_5)

    def test_negative_heights_are_rejected(self):
        with pytest.raises(InvalidParameterError) as info:
            hag_cloud([0.5, 1.5], [4.5, 4.5], [3.0, -0.5])
        assert info.value.name == "hag"

    def test_mismatched_columns_are_rejected(self):
        with pytest.raises(InvalidParameterError):
            HagCloud(np.zeros(2), np.zeros(3), np.zeros(2), (0.0, 0.0, 1.0, 1.0))

    def test_height_below_ground_does_not_spill_into_the_previous_cell(self):
        cloud = hag_cloud([1.5], [4.5], [2.0])
        cloud.hag[0] = -0.5
        with pytest.raises(InvalidParameterError):
            bin_returns(cloud, GRID_5, PadParams(dz=1.0, max_height=5.0))


class TestPad:

    def test_matches_layer_oracle(self, rng):
        params = PadParams(k=0.5, dz=1.0, max_height=12.0)
        counts = rng.integers(0, 6, size=(10, 100, 12))
        counts[0, :10] = 0
        counts[1, :10, 6:] = 0
        pad = compute_pad(histogram(counts), params)
        expected = np.array([[pad_oracle(counts[r, c], params.k, params.dz) for c in range(100)]
                             for r in range(10)])
        np.testing.assert_allclose(pad.pad, expected, rtol=1e-12, atol=0.0)
        assert not pad.valid[0, :10].any()
        assert np.all(pad.pad[0, :10] == 0.0)

    def test_saturated_top_layer(self):
        params = PadParams(k=0.5, dz=1.0, max_height=3.0)
        pad = compute_pad(histogram([[[4, 2, 0]]]), params)
        assert pad.saturated_mask[0, 0].tolist() == [False, True, False]
        assert pad.pad[0, 0, 1] == pytest.approx(math.log(2) / 0.5)
        assert pad.pad[0, 0, 2] == 0.0

    def test_column_integral_is_log_of_total(self, rng):
        params = PadParams(k=0.5, dz=1.0, max_height=20.0)
        counts = rng.integers(0, 4, size=(200, 200, 20))
        counts[rng.random((200, 200)) < 0.1] = 0
        pad = compute_pad(histogram(counts), params)
        pai = compute_pai(pad)
        total = counts.sum(axis=-1)
        has_returns = total > 0
        np.testing.assert_allclose(pai.values[has_returns] * params.k * params.dz,
                                   np.log(total[has_returns]), rtol=1e-9)
        assert np.isnan(pai.values[~has_returns]).all()
        assert np.array_equal(pai.nodata_mask, ~has_returns)

    @given(arrays(np.int32, (4, 5, 6), elements=st.integers(0, 30)))
    def test_pai_is_exactly_the_layer_sum(self, counts):
        pad = compute_pad(histogram(counts), PadParams(max_height=6.0))
        pai = compute_pai(pad)
        assert np.array_equal(pai.values[pad.valid], pad.pad.sum(axis=-1)[pad.valid])
        assert np.isnan(pai.values[~pad.valid]).all()

    def test_thread_count_does_not_change_result(self, rng):
        params = PadParams(max_height=10.0)
        hist = histogram(rng.integers(0, 5, size=(200, 30, 10)))
        serial = compute_pad(hist, params, threads=1)
        parallel = compute_pad(hist, params, threads=4)
        assert np.array_equal(serial.pad, parallel.pad)
        assert np.array_equal(compute_fhd(serial).values, compute_fhd(parallel, threads=4).values,
                              equal_nan=True)

    def test_layer_count_mismatch(self):
        with pytest.raises(InvalidParameterError):
            compute_pad(histogram(np.ones((2, 2, 5))), PadParams(max_height=6.0))

    def test_logs_saturated_layers(self, caplog):
        with caplog.at_level(logging.INFO):
            compute_pad(histogram([[[1, 1, 1]]]), PadParams(max_height=3.0))
        assert "saturated" in caplog.text


class TestFhd:

    @pytest.mark.parametrize("occupied", [2, 3, 7])
    def test_uniform_returns_give_log_of_layer_count(self, occupied):
        counts = np.zeros((1, 1, 10), dtype=np.int32)
        counts[0, 0, :occupied] = 3
        pad = compute_pad(histogram(counts), PadParams(max_height=10.0))
        assert compute_fhd(pad, basis="returns").values[0, 0] == pytest.approx(math.log(occupied))

    def test_single_layer_is_zero(self):
        pad = compute_pad(histogram([[[0, 5, 0, 0]]]), PadParams(max_height=4.0))
        assert compute_fhd(pad).values[0, 0] == 0.0
        assert compute_fhd(pad, basis="returns").values[0, 0] == 0.0

    def test_unknown_basis(self):
        pad = compute_pad(histogram([[[1, 1]]]), PadParams(max_height=2.0))
        with pytest.raises(InvalidParameterError):
            compute_fhd(pad, basis="voxels")

    @pytest.mark.parametrize("layers", [2, 5, 12])
    def test_uniform_pad_gives_log_of_layer_count(self, layers):
        fhd = compute_fhd(pad_grid(np.full((1, 1, layers), 0.7)))
        assert fhd.values[0, 0] == pytest.approx(math.log(layers), rel=1e-12)

    def test_three_layer_profile(self):
        fhd = compute_fhd(pad_grid([[[0.5, 0.5, 1.0]]]))
        assert fhd.values[0, 0] == pytest.approx(1.0397, abs=5e-5)

    @given(arrays(np.float64, (2, 3, 6), elements=st.one_of(st.just(0.0), st.floats(1e-3, 10.0))),
           st.floats(1e-2, 1e2))
    def test_scaling_pad_leaves_fhd_unchanged(self, values, scale):
        base = compute_fhd(pad_grid(values)).values
        scaled = compute_fhd(pad_grid(values * scale)).values
        np.testing.assert_allclose(scaled, base, rtol=1e-9, atol=1e-12)

    @given(arrays(np.int32, (3, 4, 8), elements=st.integers(0, 20)))
    def test_bounded_by_log_of_layers(self, counts):
        pad = compute_pad(histogram(counts), PadParams(max_height=8.0))
        for basis in ("pad", "returns"):
            fhd = compute_fhd(pad, basis=basis)
            finite = fhd.values[pad.valid]
            assert np.all(finite >= 0.0)
            assert np.all(finite <= math.log(8) + 1e-12)
            assert np.isnan(fhd.values[~pad.valid]).all()


class TestChmAndPercentiles:

    def test_against_numpy_percentile(self, rng):
        x = rng.uniform(0.0, 5.0, 3000)
        y = rng.uniform(0.0, 5.0, 3000)
        hag = rng.uniform(0.0, 40.0, 3000)
        x[:40] = 0.5
        y[:40] = 0.5
        cloud = hag_cloud(x, y, hag)
        chm = compute_chm(cloud, GRID_5)
        fractions = (0.05, 0.5, 0.95, 0.99)
        rasters = compute_percentiles(cloud, GRID_5, fractions)
        assert [r.band_name for r in rasters] == ["p05", "p50", "p95", "p99"]
        rows, cols, _ = GRID_5.cell_index(x, y)
        for r in range(5):
            for c in range(5):
                cell = hag[(rows == r) & (cols == c)]
                assert chm.values[r, c] == cell.max()
                for fraction, raster in zip(fractions, rasters):
                    assert raster.values[r, c] == pytest.approx(np.percentile(cell, fraction * 100),
                                                                rel=1e-12, abs=1e-12)

    @settings(max_examples=10)
    @given(st.integers(0, 2**32 - 1))
    def test_random_clouds_against_numpy_percentile(self, seed):
        rng = np.random.default_rng(seed)
        grid = GridSpec(0.0, 50.0, 1.0, 50, 50)
        x = rng.uniform(0.0, 50.0, 10_000)
        y = rng.uniform(0.0, 50.0, 10_000)
        hag = rng.uniform(0.0, 45.0, 10_000)
        cloud = hag_cloud(x, y, hag)
        fractions = (0.05, 0.5, 0.95)
        chm = compute_chm(cloud, grid)
        rasters = compute_percentiles(cloud, grid, fractions)

        rows, cols, _ = grid.cell_index(x, y)
        flat = rows * grid.width + cols
        counts = np.bincount(flat, minlength=grid.width * grid.height)
        groups = np.split(hag[np.argsort(flat, kind="stable")], np.cumsum(counts)[:-1])
        for index, cell in enumerate(groups):
            r, c = divmod(index, grid.width)
            if cell.size == 0:
                assert np.isnan(chm.values[r, c])
                assert all(np.isnan(raster.values[r, c]) for raster in rasters)
                continue
            assert chm.values[r, c] == cell.max()
            expected = np.percentile(cell, [fraction * 100 for fraction in fractions])
            for value, raster in zip(expected, rasters):
                assert raster.values[r, c] == pytest.approx(value, rel=1e-12, abs=1e-12)

    def test_empty_cells_are_nodata(self):
        cloud = hag_cloud([0.5, 0.6], [4.5, 4.5], [3.0, 7.0])
        chm = compute_chm(cloud, GRID_5)
        p50 = compute_percentiles(cloud, GRID_5, (0.5,))[0]
        assert chm.values[0, 0] == 7.0
        assert p50.values[0, 0] == 5.0
        assert chm.nodata_mask.sum() == 24
        assert np.isnan(p50.values[1:, :]).all()

    def test_single_return_cell(self):
        p05, p95 = compute_percentiles(hag_cloud([2.5], [2.5], [11.0]), GRID_5, (0.05, 0.95))
        assert p05.values[2, 2] == p95.values[2, 2] == 11.0

    def test_off_grid_points_are_ignored(self, caplog):
        cloud = hag_cloud([0.5, 9.0], [4.5, 9.0], [3.0, 50.0])
        with caplog.at_level(logging.WARNING):
            chm = compute_chm(cloud, GRID_5)
        assert np.nanmax(chm.values) == 3.0
        assert "outside" in caplog.text

    @pytest.mark.parametrize("fraction", [0.0, 1.0, 1.5])
    def test_fraction_range(self, fraction):
        with pytest.raises(InvalidParameterError):
            compute_percentiles(hag_cloud([1.0], [1.0], [1.0]), GRID_5, (fraction,))

    def test_band_names(self):
        assert percentile_band_name(0.05) == "p05"
        assert percentile_band_name(0.5) == "p50"


def test_compute_all_band_set(rng):
    cloud = hag_cloud(rng.uniform(0, 5, 500), rng.uniform(0, 5, 500), rng.uniform(0, 30, 500))
    rasters, pad = compute_all(cloud, GRID_5, PadParams(max_height=30.0))
    assert [r.band_name for r in rasters] == ["chm", "pai", "fhd", "p05", "p50", "p95"]
    assert pad.pad.shape == (5, 5, 30)
    assert all(r.grid == GRID_5 for r in rasters)
