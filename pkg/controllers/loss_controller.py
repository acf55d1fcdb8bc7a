"""Loss kernels for the two training stages, with analytic gradients.

Every kernel is a pure function of dense float64 arrays returning a
LossResult whose ``grads`` hold the gradient of ``total`` for each
differentiable input. ``finite_difference_check`` verifies those gradients
against central differences.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Union

import numpy as np

from models.loss_model import (
    CHANNELS,
    LossResult,
    StudentLossConfig,
    StudentLossInputs,
    TeacherLossConfig,
)
from utils.errors import DimensionError, InvalidParameterError, NoValidPixelsError
from utils.settings import DEFAULT_EPS, DEFAULT_SEED

logger = logging.getLogger(__name__)

Arrays = Mapping[str, np.ndarray]


def _check_shapes(**arrays: np.ndarray) -> None:
    names = list(arrays)
    reference = np.shape(arrays[names[0]])
    for name in names[1:]:
        if np.shape(arrays[name]) != reference:
            raise DimensionError(
                f"'{name}' has shape {np.shape(arrays[name])}, expected {reference} like '{names[0]}'"
            )


def _valid_count(mask: np.ndarray) -> int:
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise NoValidPixelsError("mask selects no valid pixels")
    return count


def masked_huber(pred: np.ndarray, target: np.ndarray, mask: np.ndarray,
                 delta: float = 1.0) -> LossResult:
    """
    Smooth L1 averaged over valid pixels.

    Per pixel 0.5 r²/δ for |r| < δ and |r| - 0.5 δ otherwise, with r = pred - target.
    Invalid pixels contribute neither loss nor gradient.
    """
    if not delta > 0:
        raise InvalidParameterError("huber_delta", f"must be > 0, got {delta}")
    _check_shapes(pred=pred, target=target, mask=mask)
    mask = np.asarray(mask, dtype=bool)
    n = _valid_count(mask)

    residual = np.where(mask, pred - target, 0.0)
    magnitude = np.abs(residual)
    quadratic = magnitude < delta
    per_pixel = np.where(quadratic, 0.5 * residual ** 2 / delta, magnitude - 0.5 * delta)
    total = float(per_pixel[mask].sum() / n)
    grad = np.where(mask, np.where(quadratic, residual / delta, np.sign(residual)), 0.0) / n
    return LossResult(total, {"huber": total}, {"pred": grad})


def masked_l1(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> LossResult:
    """Mean absolute error over valid pixels."""
    _check_shapes(pred=pred, target=target, mask=mask)
    mask = np.asarray(mask, dtype=bool)
    n = _valid_count(mask)

    residual = np.where(mask, pred - target, 0.0)
    total = float(np.abs(residual)[mask].sum() / n)
    grad = np.sign(residual) / n
    return LossResult(total, {"l1": total}, {"pred": grad})


def gradient_loss(pred_chm: np.ndarray, target_chm: np.ndarray, mask: np.ndarray) -> LossResult:
    """
    L1 mismatch of forward-difference gradients.

    A difference position counts only when both of its pixels are valid. The
    absolute x and y mismatches are summed and divided by the number of valid
    difference positions along both axes.
    """
    _check_shapes(pred_chm=pred_chm, target_chm=target_chm, mask=mask)
    if np.ndim(pred_chm) != 2:
        raise DimensionError(f"expected a 2-D raster, got shape {np.shape(pred_chm)}")
    height, width = np.shape(pred_chm)
    if height < 2 and width < 2:
        raise DimensionError(f"a {height}x{width} raster has no finite differences")
    mask = np.asarray(mask, dtype=bool)

    rx = np.diff(pred_chm, axis=1) - np.diff(target_chm, axis=1)
    ry = np.diff(pred_chm, axis=0) - np.diff(target_chm, axis=0)
    valid_x = mask[:, 1:] & mask[:, :-1]
    valid_y = mask[1:, :] & mask[:-1, :]
    n = int(valid_x.sum() + valid_y.sum())
    if n == 0:
        raise NoValidPixelsError("no valid gradient positions (no adjacent valid pixel pairs)")

    total = float((np.abs(rx)[valid_x].sum() + np.abs(ry)[valid_y].sum()) / n)

    sx = np.where(valid_x, np.sign(rx), 0.0) / n
    sy = np.where(valid_y, np.sign(ry), 0.0) / n
    grad = np.zeros((height, width))
    grad[:, 1:] += sx
    grad[:, :-1] -= sx
    grad[1:, :] += sy
    grad[:-1, :] -= sy
    return LossResult(total, {"gradient": total}, {"pred": grad})


def _channel_scale(reduction: str, n_channels: int) -> float:
    return 1.0 / n_channels if reduction == "mean" else 1.0


def _require_channels(name: str, arrays: Arrays, channels: Sequence[str]) -> None:
    missing = [c for c in channels if c not in arrays]
    if missing:
        raise InvalidParameterError(name, f"missing channel '{missing[0]}'")


def teacher_loss(preds: Arrays, targets: Arrays, mask: np.ndarray,
                 cfg: TeacherLossConfig = TeacherLossConfig()) -> LossResult:
    """
    Stage-one objective: per-channel masked Smooth L1 plus a weighted CHM gradient term.

    Channels are summed with equal weight (averaged when
    ``cfg.channel_reduction == "mean"``). Gradients are keyed by channel.

    Args:
        preds: Channel -> predicted raster (must include ``chm``)
        targets: Channel -> target raster
        mask: Validity mask shared by all channels
        cfg: Huber transition and gradient weight

    Returns:
        LossResult with terms ``huber_<channel>`` and ``gradient``
    """
    channels = list(preds)
    _require_channels("targets", targets, channels)
    _require_channels("preds", preds, ("chm",))
    scale = _channel_scale(cfg.channel_reduction, len(channels))

    terms: Dict[str, float] = {}
    grads: Dict[str, np.ndarray] = {}
    total = 0.0
    for channel in channels:
        result = masked_huber(preds[channel], targets[channel], mask, cfg.huber_delta)
        terms[f"huber_{channel}"] = result.total
        grads[channel] = scale * result.grads["pred"]
        total += scale * result.total

    if cfg.lambda_grad > 0:
        gradient = gradient_loss(preds["chm"], targets["chm"], mask)
        terms["gradient"] = gradient.total
        grads["chm"] = grads["chm"] + cfg.lambda_grad * gradient.grads["pred"]
        total += cfg.lambda_grad * gradient.total
    else:
        terms["gradient"] = 0.0
    return LossResult(total, terms, grads)


def kd_output_losses(student: Arrays, teacher: Arrays, targets: Arrays, mask: np.ndarray,
                     delta: float = 1.0, channel_reduction: str = "sum") -> LossResult:
    """
    Output supervision and output distillation, summed over channels.

    ``out`` is the masked L1 between student and target, ``kd`` the masked
    Smooth L1 between student and the frozen teacher. Gradients are taken
    with respect to the student only.
    """
    channels = list(student)
    _require_channels("teacher", teacher, channels)
    _require_channels("targets", targets, channels)
    scale = _channel_scale(channel_reduction, len(channels))

    out = kd = 0.0
    grads = {}
    for channel in channels:
        sup = masked_l1(student[channel], targets[channel], mask)
        distill = masked_huber(student[channel], teacher[channel], mask, delta)
        out += scale * sup.total
        kd += scale * distill.total
        grads[channel] = scale * (sup.grads["pred"] + distill.grads["pred"])
    return LossResult(out + kd, {"out": out, "kd": kd}, grads)


def feature_distill_loss(student_feat: np.ndarray, teacher_feat: np.ndarray,
                         proj: np.ndarray) -> LossResult:
    """
    Mean squared error between projected student features and teacher features.

    ``proj`` (C_t x C_s) mixes channels per pixel like a 1x1 convolution.
    Gradients cover both the student features and the projection.
    """
    if np.ndim(student_feat) != 3 or np.ndim(teacher_feat) != 3:
        raise DimensionError("features must be (channels, height, width) arrays")
    if np.shape(student_feat)[1:] != np.shape(teacher_feat)[1:]:
        raise DimensionError(
            f"student spatial dims {np.shape(student_feat)[1:]} differ from "
            f"teacher {np.shape(teacher_feat)[1:]}"
        )
    expected = (np.shape(teacher_feat)[0], np.shape(student_feat)[0])
    if np.shape(proj) != expected:
        raise DimensionError(f"projection has shape {np.shape(proj)}, expected {expected}")

    diff = np.einsum("ts,shw->thw", proj, student_feat) - teacher_feat
    n = diff.size
    total = float((diff ** 2).sum() / n)
    upstream = 2.0 * diff / n
    return LossResult(total, {"feat": total}, {
        "student_feat": np.einsum("ts,thw->shw", proj, upstream),
        "proj": np.einsum("thw,shw->ts", upstream, student_feat),
    })


def vertical_proxy_loss(student_feat: np.ndarray, teacher_feat: np.ndarray, proj: np.ndarray,
                        down_factor: int = 1) -> LossResult:
    """Average-pool the student features by down_factor, then match them to the teacher."""
    if down_factor < 1:
        raise InvalidParameterError("down_factor", f"must be >= 1, got {down_factor}")
    if np.ndim(student_feat) != 3:
        raise DimensionError("features must be (channels, height, width) arrays")
    channels, height, width = np.shape(student_feat)
    if height % down_factor or width % down_factor:
        raise DimensionError(
            f"down_factor {down_factor} does not divide student spatial dims {height}x{width}"
        )

    if down_factor == 1:
        pooled = student_feat
    else:
        pooled = np.reshape(student_feat, (channels, height // down_factor, down_factor,
                                           width // down_factor, down_factor)).mean(axis=(2, 4))
    result = feature_distill_loss(pooled, teacher_feat, proj)
    grad = result.grads["student_feat"]
    if down_factor > 1:
        grad = np.repeat(np.repeat(grad, down_factor, axis=1), down_factor, axis=2) / down_factor ** 2
    return LossResult(result.total, {"vert": result.total},
                      {"student_feat": grad, "proj": result.grads["proj"]})


def _accumulate(grads: Dict[str, np.ndarray], name: str, value: np.ndarray) -> None:
    grads[name] = grads[name] + value if name in grads else value


def student_total_loss(inputs: StudentLossInputs, cfg: StudentLossConfig = StudentLossConfig(),
                       epoch: int = 0) -> LossResult:
    """
    Stage-two objective.

    total = w_sup * out + w_kd(epoch) * kd + w_feat * feat + w_vert * vert

    During warm-up the KD term is not evaluated at all, so the result does not
    depend on the teacher predictions. Feature terms are skipped when their
    arrays are absent. ``terms`` also reports ``w_kd_effective``.
    """
    channels = list(inputs.student)
    _require_channels("targets", inputs.targets, channels)
    scale = _channel_scale(cfg.channel_reduction, len(channels))
    w_kd = cfg.effective_w_kd(epoch)

    grads: Dict[str, np.ndarray] = {}
    out = kd = 0.0
    for channel in channels:
        sup = masked_l1(inputs.student[channel], inputs.targets[channel], inputs.mask)
        out += scale * sup.total
        _accumulate(grads, channel, cfg.w_sup * scale * sup.grads["pred"])
    if w_kd > 0:
        _require_channels("teacher", inputs.teacher, channels)
        for channel in channels:
            distill = masked_huber(inputs.student[channel], inputs.teacher[channel],
                                   inputs.mask, cfg.huber_delta)
            kd += scale * distill.total
            _accumulate(grads, channel, w_kd * scale * distill.grads["pred"])

    feat = vert = 0.0
    has_features = inputs.student_feat is not None and inputs.proj is not None
    if has_features and inputs.teacher_feat is not None:
        result = feature_distill_loss(inputs.student_feat, inputs.teacher_feat, inputs.proj)
        feat = result.total
        for name, grad in result.grads.items():
            _accumulate(grads, name, cfg.w_feat * grad)
    if has_features and inputs.teacher_vert_feat is not None:
        result = vertical_proxy_loss(inputs.student_feat, inputs.teacher_vert_feat,
                                     inputs.proj, inputs.down_factor)
        vert = result.total
        for name, grad in result.grads.items():
            _accumulate(grads, name, cfg.w_vert * grad)

    total = cfg.w_sup * out + w_kd * kd + cfg.w_feat * feat + cfg.w_vert * vert
    terms = {"out": out, "kd": kd, "feat": feat, "vert": vert, "w_kd_effective": w_kd}
    return LossResult(total, terms, grads)


# --- Gradient verification -------------------------------------------------------

@dataclass(frozen=True)
class KernelSpec:
    """A loss kernel evaluated on a flat dict of named arrays.

    ``wrt`` maps each differentiable input name to the key of its gradient in
    the returned LossResult.
    """
    evaluate: Callable[[Arrays], LossResult]
    wrt: Dict[str, str]


def _split_channels(inputs: Arrays, prefix: str) -> Dict[str, np.ndarray]:
    return {c: inputs[f"{prefix}_{c}"] for c in CHANNELS if f"{prefix}_{c}" in inputs}


def _student_inputs(inputs: Arrays) -> StudentLossInputs:
    return StudentLossInputs(
        student=_split_channels(inputs, "student"),
        teacher=_split_channels(inputs, "teacher"),
        targets=_split_channels(inputs, "target"),
        mask=inputs["mask"],
        student_feat=inputs.get("student_feat"),
        teacher_feat=inputs.get("teacher_feat"),
        proj=inputs.get("proj"),
        teacher_vert_feat=inputs.get("teacher_vert_feat"),
        down_factor=VERTICAL_DOWN_FACTOR,
    )


VERTICAL_DOWN_FACTOR = 2
_CHANNEL_WRT = {f"student_{c}": c for c in CHANNELS}

KERNELS: Dict[str, KernelSpec] = {
    "masked_huber": KernelSpec(
        lambda a: masked_huber(a["pred"], a["target"], a["mask"]), {"pred": "pred"}),
    "masked_l1": KernelSpec(
        lambda a: masked_l1(a["pred"], a["target"], a["mask"]), {"pred": "pred"}),
    "gradient_loss": KernelSpec(
        lambda a: gradient_loss(a["pred"], a["target"], a["mask"]), {"pred": "pred"}),
    "teacher_loss": KernelSpec(
        lambda a: teacher_loss(_split_channels(a, "pred"), _split_channels(a, "target"), a["mask"]),
        {f"pred_{c}": c for c in CHANNELS}),
    "kd_output_losses": KernelSpec(
        lambda a: kd_output_losses(_split_channels(a, "student"), _split_channels(a, "teacher"),
                                   _split_channels(a, "target"), a["mask"]),
        dict(_CHANNEL_WRT)),
    "feature_distill_loss": KernelSpec(
        lambda a: feature_distill_loss(a["student_feat"], a["teacher_feat"], a["proj"]),
        {"student_feat": "student_feat", "proj": "proj"}),
    "vertical_proxy_loss": KernelSpec(
        lambda a: vertical_proxy_loss(a["student_feat"], a["teacher_vert_feat"], a["proj"],
                                      VERTICAL_DOWN_FACTOR),
        {"student_feat": "student_feat", "proj": "proj"}),
    "student_total_loss": KernelSpec(
        lambda a: student_total_loss(_student_inputs(a), StudentLossConfig(),
                                     StudentLossConfig().warmup_epochs),
        {**_CHANNEL_WRT, "student_feat": "student_feat", "proj": "proj"}),
}


def _residuals(rng: np.random.Generator, shape, low: float, high: float) -> np.ndarray:
    """Random magnitudes in [low, high] with random signs."""
    return rng.uniform(low, high, shape) * rng.choice([-1.0, 1.0], shape)


def _huber_residuals(rng: np.random.Generator, shape, delta: float = 1.0) -> np.ndarray:
    """Residuals at least delta/4 away from both the Huber kink and zero."""
    quadratic = rng.uniform(0.25 * delta, 0.75 * delta, shape)
    linear = rng.uniform(1.25 * delta, 2.5 * delta, shape)
    magnitude = np.where(rng.random(shape) < 0.5, quadratic, linear)
    return magnitude * rng.choice([-1.0, 1.0], shape)


def _checkerboard(rng: np.random.Generator, shape, low: float, high: float) -> np.ndarray:
    """Field whose forward differences along both axes alternate in sign like (-1)^(i+j).

    No pixel's L1 difference gradient then cancels to zero.
    """
    rows, cols = np.indices(shape)
    return np.where((rows + cols) % 2 == 0, -1.0, 1.0) * rng.uniform(low, high, shape)


def _positive_features(rng: np.random.Generator, channels: int, size: int, pooled: int):
    """Student features, projection and teachers with every residual strictly positive."""
    student = rng.uniform(0.5, 1.5, (channels, size, size))
    proj = rng.uniform(0.5, 1.5, (channels, channels))
    mapped = np.einsum("ts,shw->thw", proj, student)
    teacher = mapped - rng.uniform(0.5, 1.5, mapped.shape)
    factor = size // pooled
    pooled_student = student.reshape(channels, pooled, factor, pooled, factor).mean(axis=(2, 4))
    pooled_mapped = np.einsum("ts,shw->thw", proj, pooled_student)
    teacher_vert = pooled_mapped - rng.uniform(0.5, 1.5, pooled_mapped.shape)
    return student, proj, teacher, teacher_vert


def random_kernel_inputs(name: str, rng: np.random.Generator, size: int = 16,
                         channels: int = 8) -> Dict[str, np.ndarray]:
    """
    Random double-precision inputs for a registered kernel.

    Rasters are size x size and features channels x size x size. Residuals
    are kept clear of the Huber transition and of zero, so every sampled
    coordinate is away from a kink.
    """
    if name not in KERNELS:
        raise InvalidParameterError("kernel", f"unknown kernel {name!r}")
    shape = (size, size)
    mask = rng.random(shape) < 0.8
    pooled = size // VERTICAL_DOWN_FACTOR

    if name in ("masked_huber", "masked_l1"):
        target = rng.normal(0.0, 5.0, shape)
        return {"pred": target + _huber_residuals(rng, shape), "target": target, "mask": mask}
    if name == "gradient_loss":
        target = rng.normal(0.0, 5.0, shape)
        return {"pred": target + _checkerboard(rng, shape, 0.5, 1.5), "target": target,
                "mask": np.ones(shape, dtype=bool)}
    if name == "teacher_loss":
        inputs = {"mask": np.ones(shape, dtype=bool)}
        for channel in CHANNELS:
            target = rng.normal(0.0, 5.0, shape)
            offset = (_checkerboard(rng, shape, 0.25, 0.75) if channel == "chm"
                      else _huber_residuals(rng, shape))
            inputs[f"target_{channel}"] = target
            inputs[f"pred_{channel}"] = target + offset
        return inputs

    inputs: Dict[str, np.ndarray] = {"mask": mask}
    if name in ("kd_output_losses", "student_total_loss"):
        for channel in CHANNELS:
            target = rng.normal(0.0, 5.0, shape)
            student = target + _residuals(rng, shape, 0.05, 0.15)
            inputs[f"target_{channel}"] = target
            inputs[f"student_{channel}"] = student
            inputs[f"teacher_{channel}"] = student - _residuals(rng, shape, 0.25, 0.75)
        if name == "kd_output_losses":
            return inputs

    student_feat, proj, teacher_feat, teacher_vert = _positive_features(rng, channels, size, pooled)
    features = {"student_feat": student_feat, "proj": proj}
    if name in ("feature_distill_loss", "student_total_loss"):
        features["teacher_feat"] = teacher_feat
    if name in ("vertical_proxy_loss", "student_total_loss"):
        features["teacher_vert_feat"] = teacher_vert
    if name in ("feature_distill_loss", "vertical_proxy_loss"):
        return features
    inputs.update(features)
    return inputs


def finite_difference_check(kernel: Union[str, KernelSpec], inputs: Arrays,
                            eps: float = DEFAULT_EPS, n_coords: int = 64,
                            seed: Optional[int] = DEFAULT_SEED) -> float:
    """
    Compare analytic gradients with central differences on random coordinates.

    Args:
        kernel: Registered kernel name or a KernelSpec
        inputs: Named input arrays (left unmodified)
        eps: Central-difference step
        n_coords: Number of coordinates sampled across all differentiable inputs
        seed: Seed for the coordinate sample

    Returns:
        Maximum of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    """
    spec = KERNELS[kernel] if isinstance(kernel, str) else kernel
    if not eps > 0:
        raise InvalidParameterError("eps", f"must be > 0, got {eps}")
    analytic = spec.evaluate(inputs)

    coordinates = [(name, index) for name in spec.wrt for index in range(np.size(inputs[name]))]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(coordinates), size=min(n_coords, len(coordinates)), replace=False)

    worst = 0.0
    working = dict(inputs)
    for pick in sorted(picks):
        name, index = coordinates[pick]
        original = np.asarray(inputs[name], dtype=np.float64)
        perturbed = original.copy()
        working[name] = perturbed
        perturbed.flat[index] = original.flat[index] + eps
        upper = spec.evaluate(working).total
        perturbed.flat[index] = original.flat[index] - eps
        lower = spec.evaluate(working).total
        working[name] = inputs[name]

        numeric = (upper - lower) / (2.0 * eps)
        exact = float(analytic.grads[spec.wrt[name]].flat[index])
        error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
        worst = max(worst, error)
    logger.debug("Gradient check: %d coordinates, max relative error %.3e", len(picks), worst)
    return worst
