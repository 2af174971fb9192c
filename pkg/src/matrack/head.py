"""Prediction head: search tokens -> classification / offset / size maps.

A shared trunk of four stacked Conv-BN-ReLU layers runs on the search
tokens reshaped into a 2-D feature map, followed by 1x1 projections:
one classification channel, two sub-cell offset channels (sigmoid, in
[0, 1)) and two normalized size channels (sigmoid, in (0, 1)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import BoundingBox
from .config import ModelConfig
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import ShapeError, Tensor


@dataclass
class HeadOutput:
    """Maps for one sample: cls [g, g], offset [2, g, g], size [2, g, g]."""

    cls: Tensor
    offset: Tensor
    size: Tensor

    @property
    def grid(self) -> int:
        return self.cls.shape[-1]


@dataclass(frozen=True)
class CropGeometry:
    """Affine map between search-crop pixels and image pixels.

    image coordinate = src + crop_coordinate / scale, where scale is
    crop pixels per image pixel.
    """

    src_x: float
    src_y: float
    scale: float
    crop_size: int

    def to_image(self, box_crop: BoundingBox) -> BoundingBox:
        return BoundingBox(
            self.src_x + box_crop.x / self.scale,
            self.src_y + box_crop.y / self.scale,
            box_crop.w / self.scale,
            box_crop.h / self.scale,
        )

    def to_crop(self, box_img: BoundingBox) -> BoundingBox:
        return BoundingBox(
            (box_img.x - self.src_x) * self.scale,
            (box_img.y - self.src_y) * self.scale,
            box_img.w * self.scale,
            box_img.h * self.scale,
        )


IDENTITY_GEOMETRY_256 = CropGeometry(0.0, 0.0, 1.0, 256)


def tokens_to_map(tokens: Tensor) -> Tensor:
    """[N, D] row-major grid tokens -> [1, D, g, g] feature map."""
    n, d = tokens.shape
    g = math.isqrt(n)
    if g * g != n:
        raise ShapeError(f"token count {n} is not a perfect square")
    return T.reshape(T.transpose(T.reshape(tokens, (g, g, d)), (2, 0, 1)), (1, d, g, g))


class PredictionHead(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d, c = config.dim, config.head_channels
        chans = [d, c, c, c, c]
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, rng) for i in range(4)]
        self.bns = [BatchNorm2d(chans[i + 1]) for i in range(4)]
        self.cls_proj = Conv2d(c, 1, 1, rng)
        self.offset_proj = Conv2d(c, 2, 1, rng)
        self.size_proj = Conv2d(c, 2, 1, rng)

    def __call__(self, feature_map: Tensor) -> list[HeadOutput]:
        """feature_map: [B, D, g, g] -> one HeadOutput per batch item."""
        x = feature_map
        for conv, bn in zip(self.convs, self.bns):
            x = T.relu(bn(conv(x)))
        cls = self.cls_proj(x)          # [B, 1, g, g]
        off = T.sigmoid(self.offset_proj(x))
        size = T.sigmoid(self.size_proj(x))
        batch = feature_map.shape[0]
        return [
            HeadOutput(cls=cls[b, 0], offset=off[b], size=size[b]) for b in range(batch)
        ]


def decode_box(out: HeadOutput, geometry: CropGeometry) -> BoundingBox:
    """Peak-score decode to image coordinates.

    Argmax ties break to the smallest flat (row-major) index.
    """
    g = out.grid
    cell = geometry.crop_size / g
    flat = int(np.argmax(out.cls.data))
    row, col = divmod(flat, g)
    cx = (col + out.offset.data[0, row, col]) * cell
    cy = (row + out.offset.data[1, row, col]) * cell
    w = out.size.data[0, row, col] * geometry.crop_size
    h = out.size.data[1, row, col] * geometry.crop_size
    return geometry.to_image(BoundingBox.from_center(cx, cy, w, h))


def encode_box(box_crop: BoundingBox, grid: int, crop_size: int) -> tuple[int, int, np.ndarray, np.ndarray]:
    """Targets for a crop-space gt box: (row, col, offset[2], size[2])."""
    cell = crop_size / grid
    col = min(int(box_crop.cx / cell), grid - 1)
    row = min(int(box_crop.cy / cell), grid - 1)
    offset = np.array([box_crop.cx / cell - col, box_crop.cy / cell - row])
    size = np.array([box_crop.w / crop_size, box_crop.h / crop_size])
    return row, col, offset, size
