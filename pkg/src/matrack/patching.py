"""Patch tokenization of template/search crops at initial and overlapped scales.

The initial scale tiles the crop with non-overlapping p x p patches (a
g x g grid).  The overlapped scale uses the same patch side and stride,
offset by half a patch in both axes, which yields a (g-1) x (g-1) grid.
Each scale has its own linear projection; positional embeddings are per
grid cell, plus a role embedding (search / static / dynamic template)
and a scale embedding so token provenance survives concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig
from .nn import Linear, Module, Parameter
from .tensor import Tensor

ROLES = ("search", "static_template", "dynamic_template")
SCALES = ("initial", "overlapped")


@dataclass
class ImageCrop:
    """RGB crop with values in [0, 1], shape [3, H, W]."""

    pixels: np.ndarray
    kind: str

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"crop must be [3, H, W], got {self.pixels.shape}")
        if self.kind not in ROLES:
            raise ValueError(f"unknown crop kind {self.kind!r}")


@dataclass
class TokenSequence:
    tokens: Tensor  # [N, D]
    role: str
    scale: str
    grid: tuple[int, int]

    def __post_init__(self):
        rows, cols = self.grid
        if rows * cols != self.tokens.shape[0]:
            raise ValueError(f"grid {self.grid} inconsistent with {self.tokens.shape[0]} tokens")


def _extract_patches(pixels: np.ndarray, patch: int, offset: int = 0) -> np.ndarray:
    """Flatten patches of side `patch` starting at (offset, offset) with
    stride `patch` into rows of length 3*patch*patch (channel-major)."""
    _, H, W = pixels.shape
    g = (H - offset) // patch
    region = pixels[:, offset : offset + g * patch, offset : offset + g * patch]
    # [3, g, p, g, p] -> [g, g, 3, p, p] -> [g*g, 3*p*p]
    return (
        region.reshape(3, g, patch, g, patch)
        .transpose(1, 3, 0, 2, 4)
        .reshape(g * g, 3 * patch * patch)
    )


class PatchEmbedder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        p, d = config.patch, config.dim
        self.proj_initial = Linear(3 * p * p, d, rng)
        self.proj_overlap = Linear(3 * p * p, d, rng)
        scale_pos = 0.02
        gs, gt = config.search_grid, config.template_grid
        self.pos_search = Parameter(rng.normal(0, scale_pos, (gs * gs, d)))
        self.pos_search_ov = Parameter(rng.normal(0, scale_pos, ((gs - 1) ** 2, d)))
        self.pos_template = Parameter(rng.normal(0, scale_pos, (gt * gt, d)))
        self.pos_template_ov = Parameter(rng.normal(0, scale_pos, ((gt - 1) ** 2, d)))
        self.role_embed = Parameter(rng.normal(0, scale_pos, (len(ROLES), d)))
        self.scale_embed = Parameter(rng.normal(0, scale_pos, (len(SCALES), d)))

    def _check(self, crop: ImageCrop):
        cfg = self.config
        expected = cfg.search_size if crop.kind == "search" else cfg.template_size
        _, H, W = crop.pixels.shape
        if H != expected or W != expected:
            raise ConfigError(
                f"{crop.kind} crop must be {expected}x{expected}, got {H}x{W}"
            )
        if H % cfg.patch != 0:
            raise ConfigError(f"crop side {H} not divisible by patch {cfg.patch}")

    def embed_initial(self, crop: ImageCrop) -> TokenSequence:
        self._check(crop)
        cfg = self.config
        flat = _extract_patches(crop.pixels, cfg.patch)
        tokens = self.proj_initial(Tensor(flat))
        pos = self.pos_search if crop.kind == "search" else self.pos_template
        g = cfg.search_grid if crop.kind == "search" else cfg.template_grid
        tokens = T.add(tokens, pos)
        tokens = T.add(tokens, self.role_embed[ROLES.index(crop.kind)])
        tokens = T.add(tokens, self.scale_embed[0])
        return TokenSequence(tokens, crop.kind, "initial", (g, g))

    def embed_overlapped(self, crop: ImageCrop) -> TokenSequence:
        self._check(crop)
        cfg = self.config
        flat = _extract_patches(crop.pixels, cfg.patch, offset=cfg.patch // 2)
        tokens = self.proj_overlap(Tensor(flat))
        pos = self.pos_search_ov if crop.kind == "search" else self.pos_template_ov
        g = (cfg.search_grid if crop.kind == "search" else cfg.template_grid) - 1
        tokens = T.add(tokens, pos)
        tokens = T.add(tokens, self.role_embed[ROLES.index(crop.kind)])
        tokens = T.add(tokens, self.scale_embed[1])
        return TokenSequence(tokens, crop.kind, "overlapped", (g, g))

    def embed_all(self, crop: ImageCrop) -> tuple[TokenSequence, TokenSequence]:
        return self.embed_initial(crop), self.embed_overlapped(crop)
