"""Training loss: L_total = l1 * cross-entropy + l2 * SIoU, both weights 2.

The classification target is the single grid cell containing the gt
center.  Box regression reads the offset/size channels at the gt cell
(soft decode) so the SIoU term stays differentiable; the SIoU formula
mirrors boxes.siou_reference on autograd scalars.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import BoundingBox
from .head import HeadOutput, encode_box
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    l_ce: float = 2.0
    l_siou: float = 2.0

    def __post_init__(self):
        if self.l_ce < 0 or self.l_siou < 0:
            raise ValueError(f"loss weights must be nonnegative: {self}")


def ce_loss(cls: Tensor, gt_row: int, gt_col: int) -> Tensor:
    """Softmax cross-entropy over all grid cells, gt cell as hard label."""
    g = cls.shape[-1]
    if not (0 <= gt_row < g and 0 <= gt_col < g):
        raise ValueError(f"gt cell ({gt_row}, {gt_col}) outside {g}x{g} grid")
    logp = T.log_softmax(T.reshape(cls, (g * g,)), axis=-1)
    return T.scale(logp[gt_row * g + gt_col], -1.0)


def siou_loss(pred_cx: Tensor, pred_cy: Tensor, pred_w: Tensor, pred_h: Tensor,
              gt: BoundingBox) -> Tensor:
    """Differentiable SIoU of a predicted center-form box against a gt box.

    Branch selection (angle swap, corner min/max) follows the current
    values; gradients flow through the selected branch.
    """
    half_w, half_h = T.scale(pred_w, 0.5), T.scale(pred_h, 0.5)
    px1, px2 = T.sub(pred_cx, half_w), T.add(pred_cx, half_w)
    py1, py2 = T.sub(pred_cy, half_h), T.add(pred_cy, half_h)

    iw = T.relu(T.sub(T.minimum(px2, gt.x2), T.maximum(px1, gt.x)))
    ih = T.relu(T.sub(T.minimum(py2, gt.y2), T.maximum(py1, gt.y)))
    inter = T.mul(iw, ih)
    union = T.sub(T.add(T.mul(pred_w, pred_h), gt.area), inter)
    iou_t = T.div(inter, union)

    s_cw = T.sub(gt.cx, pred_cx)
    s_ch = T.sub(gt.cy, pred_cy)
    sigma = T.sqrt(T.add(T.add(T.mul(s_cw, s_cw), T.mul(s_ch, s_ch)), 1e-18))
    sin_w = T.div(T.absolute(s_cw), sigma)
    sin_h = T.div(T.absolute(s_ch), sigma)
    sin_used = sin_h if float(sin_w.data) > math.sqrt(2.0) / 2.0 else sin_w
    angle = T.cos(T.sub(T.scale(T.arcsin(sin_used), 2.0), math.pi / 2.0))

    cw = T.sub(T.maximum(px2, gt.x2), T.minimum(px1, gt.x))
    ch = T.sub(T.maximum(py2, gt.y2), T.minimum(py1, gt.y))
    gamma = T.sub(2.0, angle)
    rho_x = T.power(T.div(s_cw, cw), 2.0)
    rho_y = T.power(T.div(s_ch, ch), 2.0)
    distance = T.sub(
        2.0, T.add(T.exp(T.scale(T.mul(gamma, rho_x), -1.0)),
                   T.exp(T.scale(T.mul(gamma, rho_y), -1.0)))
    )

    omega_w = T.div(T.absolute(T.sub(pred_w, gt.w)), T.maximum(pred_w, Tensor(gt.w)))
    omega_h = T.div(T.absolute(T.sub(pred_h, gt.h)), T.maximum(pred_h, Tensor(gt.h)))
    shape = T.add(
        T.power(T.sub(1.0, T.exp(T.scale(omega_w, -1.0))), 4.0),
        T.power(T.sub(1.0, T.exp(T.scale(omega_h, -1.0))), 4.0),
    )

    return T.add(T.sub(1.0, iou_t), T.scale(T.add(distance, shape), 0.5))


def total_loss(out: HeadOutput, gt_crop: BoundingBox, crop_size: int,
               weights: LossWeights = LossWeights()) -> tuple[Tensor, float, float]:
    """Weighted loss for one sample; gt box is in search-crop pixels.

    Returns (loss tensor, ce value, siou value).
    """
    g = out.grid
    row, col, _, _ = encode_box(gt_crop, g, crop_size)
    ce = ce_loss(out.cls, row, col)

    cell = crop_size / g
    pred_cx = T.scale(T.add(out.offset[0, row, col], float(col)), cell)
    pred_cy = T.scale(T.add(out.offset[1, row, col], float(row)), cell)
    pred_w = T.scale(out.size[0, row, col], float(crop_size))
    pred_h = T.scale(out.size[1, row, col], float(crop_size))
    siou = siou_loss(pred_cx, pred_cy, pred_w, pred_h, gt_crop)

    total = T.add(T.scale(ce, weights.l_ce), T.scale(siou, weights.l_siou))
    return total, float(ce.data), float(siou.data)
