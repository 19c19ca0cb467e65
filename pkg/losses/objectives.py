"""
Training losses with analytic gradients.

Every loss averages over its active elements and returns a LossReport whose
gradient has the prediction's shape and is zero off the active support.
Sums run in float64 over row-major order so reported values reproduce
bit for bit.
"""
import logging
from dataclasses import dataclass

import numpy as np

from encoding.targets import OffsetField
from fields.core import DenseField

logger = logging.getLogger(__name__)

BCE_EPSILON = 1e-7
MIN_SAMPLES = 100


@dataclass(frozen=True, eq=False)
class LossReport:
    value: float
    gradient: DenseField
    num_active: int


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f'prediction shape {pred.shape} does not match target shape {target.shape}')


def _active_mask(exclude, shape):
    """Broadcast a trainable-pixel mask (1 = keep) to ``shape``."""
    if exclude is None:
        return np.ones(shape, dtype=bool)
    keep = exclude.data if isinstance(exclude, DenseField) else np.asarray(exclude)
    keep = keep > 0.5
    if keep.ndim == 2:
        keep = keep[np.newaxis]
    try:
        return np.broadcast_to(keep, shape)
    except ValueError as exc:
        raise ValueError(f'exclusion mask {keep.shape} does not fit prediction {shape}') from exc


def _l1_report(pred, target, active, count):
    if count == 0:
        raise ValueError('L1 loss has no active elements')
    diff = np.where(active, pred.astype(np.float64) - target.astype(np.float64), 0.0)
    value = float(np.abs(diff).sum() / count)
    return LossReport(value, DenseField(np.sign(diff) / count), count)


def heatmap_bce(pred, target, exclude=None):
    """
    Binary cross-entropy between predicted probabilities and {0, 1} targets.

    Predictions are clamped to [eps, 1 - eps]. Pixels where ``exclude`` is 0
    do not contribute; N counts the remaining (channel, pixel) elements.
    """
    _check_shapes(pred, target)
    active = _active_mask(exclude, pred.shape)
    count = int(active.sum())
    if count == 0:
        raise ValueError('heatmap loss has no active pixels')

    y_hat = np.clip(pred.data.astype(np.float64), BCE_EPSILON, 1.0 - BCE_EPSILON)
    y = target.data.astype(np.float64)
    log_likelihood = y * np.log(y_hat) + (1.0 - y) * np.log(1.0 - y_hat)
    value = float(-log_likelihood[active].sum() / count)
    gradient = np.where(active, (y_hat - y) / (y_hat * (1.0 - y_hat)), 0.0) / count
    return LossReport(max(value, 0.0), DenseField(gradient), count)


def keycentroid_l1(pred, target, exclude=None):
    """
    Mean L1 displacement error over valid (pixel, joint) pairs.

    ``pred`` carries the same 2 channels per joint as ``target.base``; a
    pair contributes |dx error| + |dy error|. The subgradient at zero is 0.
    """
    _check_shapes(pred, target.base)
    valid = np.repeat(target.valid_mask, 2, axis=0) & _active_mask(exclude, pred.shape)
    # each valid pair spans a dx and a dy channel
    return _l1_report(pred.data, target.base.data, valid, int(valid.sum()) // 2)


def offset_l1(pred, target, exclude=None):
    """
    Mean L1 error of predicted embeddings m + v_hat against m + v over the
    target's foreground, which equals the mean L1 offset error.
    """
    pred_field = pred.field if isinstance(pred, OffsetField) else pred
    _check_shapes(pred_field, target.field)
    active = np.broadcast_to(target.foreground[np.newaxis], pred_field.shape) & _active_mask(exclude, pred_field.shape)
    return _l1_report(pred_field.data, target.field.data, active, int(active.sum()) // 2)


def _replace(pred, data):
    if isinstance(pred, OffsetField):
        return OffsetField(DenseField(data, copy=False), pred.foreground)
    return DenseField(data, copy=False)


def finite_diff_check(loss_op, pred, target, eps=1e-4, samples=MIN_SAMPLES, rng_seed=0, **kwargs):
    """
    Largest relative error between the analytic gradient of ``loss_op`` and
    central differences at randomly drawn coordinates.

    Steps are widened to a few float32 ulps where eps is finer than that,
    and measured after rounding. Coordinates whose two one-sided slopes
    disagree (in sign, or by more than half) sit on a kink and are skipped,
    as are coordinates the loss does not depend on.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f'eps must lie in [1e-6, 1e-3], got {eps}')
    field = pred.field if isinstance(pred, OffsetField) else pred
    base = np.array(field.data, dtype=np.float32)
    analytic = loss_op(pred, target, **kwargs).gradient.data.astype(np.float64)

    def evaluate(data):
        return loss_op(_replace(pred, data), target, **kwargs).value

    centre = evaluate(base)
    order = np.random.default_rng(rng_seed).permutation(base.size)
    worst = 0.0
    accepted = 0
    for flat in order:
        if accepted >= samples:
            break
        index = np.unravel_index(flat, base.shape)
        x = base[index]
        # a step below float32 resolution would round back to x
        step = max(eps, 4.0 * float(np.spacing(np.abs(x))))
        up, down = base.copy(), base.copy()
        up[index] = np.float32(float(x) + step)
        down[index] = np.float32(float(x) - step)
        step_up = float(up[index]) - float(x)
        step_down = float(x) - float(down[index])
        f_up, f_down = evaluate(up), evaluate(down)
        slope_up = (f_up - centre) / step_up
        slope_down = (centre - f_down) / step_down
        if slope_up * slope_down < 0 or abs(slope_up - slope_down) > 0.5 * max(abs(slope_up), abs(slope_down)):
            continue
        numeric = (f_up - f_down) / (step_up + step_down)
        expected = analytic[index]
        scale = max(abs(numeric), abs(expected))
        if scale < 1e-12:
            continue
        worst = max(worst, abs(numeric - expected) / scale)
        accepted += 1

    if accepted < samples:
        logger.warning('finite-difference check used %d of %d requested coordinates', accepted, samples)
    logger.debug('finite-difference check: %d coordinates, max relative error %.3g', accepted, worst)
    return worst
