import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from controllers.raster_controller import grids_match
from models.raster_model import MaskRaster, MetricRaster
from models.report_model import STATISTICS, EvalReport
from utils.errors import GridMismatchError, NoValidPixelsError, ReportError
from utils.settings import DEFAULT_THRESHOLD

logger = logging.getLogger(__name__)


def compute_statistics(pred: np.ndarray, ref: np.ndarray,
                       threshold: float = DEFAULT_THRESHOLD) -> Dict[str, float]:
    """
    Error, agreement and overlap statistics for paired valid pixel values.

    Undefined values are NaN: R² for a constant reference, Pearson R when
    either side is constant, rMAE when the reference mean is not positive,
    and IoU/F1 when neither map exceeds the threshold.

    Args:
        pred: Predicted values (1-D)
        ref: Reference values (1-D)
        threshold: Height above which a pixel counts as canopy for IoU/F1

    Returns:
        Statistic name -> value
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.size < 2:
        raise NoValidPixelsError(f"at least 2 valid pixels are required, got {pred.size}")

    error = pred - ref
    abs_error = np.abs(error)
    mae = float(abs_error.mean())
    stats = {
        "mae": mae,
        "rmse": float(np.sqrt((error ** 2).mean())),
        "medae": float(np.median(abs_error)),
        "bias": float(error.mean()),
    }

    ref_mean = ref.mean()
    ref_dev = ref - ref_mean
    pred_dev = pred - pred.mean()
    ss_tot = float((ref_dev ** 2).sum())
    stats["r2"] = 1.0 - float((error ** 2).sum()) / ss_tot if ss_tot > 0 else float("nan")

    spread = np.sqrt((pred_dev ** 2).mean()) * np.sqrt((ref_dev ** 2).mean())
    if spread > 0:
        stats["pearson_r"] = float(np.clip((pred_dev * ref_dev).mean() / spread, -1.0, 1.0))
    else:
        stats["pearson_r"] = float("nan")

    if ref_mean > 0:
        stats["rmae_percent"] = 100.0 * mae / float(ref_mean)
    else:
        logger.warning("rMAE undefined: reference mean %.6g is not positive", ref_mean)
        stats["rmae_percent"] = float("nan")

    canopy_pred = pred > threshold
    canopy_ref = ref > threshold
    intersection = int((canopy_pred & canopy_ref).sum())
    union = int((canopy_pred | canopy_ref).sum())
    if union:
        stats["iou"] = intersection / union
        # 2TP / (2TP + FP + FN)
        stats["f1"] = 2 * intersection / (intersection + union)
    else:
        stats["iou"] = stats["f1"] = float("nan")
    return stats


def _valid_pairs(pred: MetricRaster, ref: MetricRaster, mask: MaskRaster) -> Tuple[np.ndarray, np.ndarray]:
    for other, label in ((ref.grid, f"reference '{ref.band_name}'"), (mask.grid, "mask")):
        if not grids_match(pred.grid, other):
            raise GridMismatchError(
                f"prediction '{pred.band_name}' grid {pred.grid.to_dict()} differs from "
                f"{label} grid {other.to_dict()}"
            )
    valid = mask.valid & pred.valid & ref.valid
    return pred.values[valid], ref.values[valid]


def evaluate(pred: MetricRaster, ref: MetricRaster, mask: MaskRaster,
             threshold: float = DEFAULT_THRESHOLD, tile_id: Optional[str] = None) -> EvalReport:
    """Compare one predicted band with its reference over the masked pixels."""
    p, r = _valid_pairs(pred, ref, mask)
    stats = compute_statistics(p, r, threshold)
    logger.debug("Evaluated '%s' over %d pixels: MAE %.4f", pred.band_name, p.size, stats["mae"])
    return EvalReport({pred.band_name: stats}, int(p.size), threshold, tile_id=tile_id)


def evaluate_bands(preds: Dict[str, MetricRaster], refs: Dict[str, MetricRaster], mask: MaskRaster,
                   threshold: float = DEFAULT_THRESHOLD, tile_id: Optional[str] = None) -> EvalReport:
    """
    Evaluate several bands sharing one mask into a single report.

    ``n_valid`` is the largest per-band pixel count.
    """
    missing = sorted(set(preds) ^ set(refs))
    if missing:
        raise ReportError(f"band '{missing[0]}' is not present in both predictions and references")
    bands = {}
    n_valid = 0
    for band in sorted(preds):
        p, r = _valid_pairs(preds[band], refs[band], mask)
        bands[band] = compute_statistics(p, r, threshold)
        n_valid = max(n_valid, int(p.size))
    return EvalReport(bands, n_valid, threshold, tile_id=tile_id)


def _mean_and_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation of the defined values (std 0 for one value)."""
    finite = np.asarray([v for v in values if np.isfinite(v)], dtype=np.float64)
    if finite.size == 0:
        return float("nan"), float("nan")
    if finite.size == 1:
        return float(finite[0]), 0.0
    return float(finite.mean()), float(finite.std(ddof=1))


def aggregate_tiles(reports: List[EvalReport]) -> EvalReport:
    """
    Unweighted mean and sample standard deviation of every statistic across tiles.

    Statistics that are undefined on some tiles are aggregated over the tiles
    where they are defined. The per-tile reports are kept on the result.
    """
    if not reports:
        raise ReportError("cannot aggregate an empty list of reports")
    threshold = reports[0].threshold
    bands = set(reports[0].bands)
    for report in reports[1:]:
        if report.threshold != threshold:
            raise ReportError(
                f"mixed thresholds: {threshold} and {report.threshold} cannot be aggregated"
            )
        if set(report.bands) != bands:
            raise ReportError(f"mixed bands: {sorted(bands)} and {sorted(report.bands)}")

    means: Dict[str, Dict[str, float]] = {}
    spread: Dict[str, Dict[str, float]] = {}
    for band in sorted(bands):
        means[band], spread[band] = {}, {}
        for name in STATISTICS:
            means[band][name], spread[band][name] = _mean_and_std([r.bands[band][name] for r in reports])

    logger.info("Aggregated %d tile reports", len(reports))
    return EvalReport(
        bands=means,
        n_valid=sum(r.n_valid for r in reports),
        threshold=threshold,
        spread=spread,
        tiles=list(reports),
    )
