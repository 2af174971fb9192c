"""Full tracker model: patch embedding -> MHB -> backbone (+AKTG) -> head,
with the NTC branch reading the final backbone tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone
from .config import ModelConfig
from .head import HeadOutput, PredictionHead, tokens_to_map
from .mhb import MHB, SegmentMap
from .nn import Module
from .ntc import NTC, CalibrationDecision
from .patching import ImageCrop, PatchEmbedder
from .tensor import Tensor


@dataclass
class ForwardResult:
    head: HeadOutput
    f_f: Tensor
    segments: SegmentMap
    decision: CalibrationDecision | None


class MATrack(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        self.embedder = PatchEmbedder(config, rng)
        self.mhb = MHB(config, rng)
        self.backbone = Backbone(config, rng)
        self.ntc = NTC(config, rng)
        self.head = PredictionHead(config, rng)

    def extract_features(self, static: ImageCrop, dynamic: ImageCrop,
                         search: ImageCrop,
                         rng: np.random.Generator | None = None) -> tuple[Tensor, SegmentMap]:
        """Run embedding, MHB fusion and the backbone; returns (f_f, segments)."""
        s_tokens = self.embedder.embed_all(search)
        zs_tokens = self.embedder.embed_all(static)
        zd_tokens = self.embedder.embed_all(dynamic)
        ft, seg = self.mhb(s_tokens, zs_tokens, zd_tokens)
        return self.backbone(ft, rng), seg

    def search_feature_map(self, f_f: Tensor, seg: SegmentMap) -> Tensor:
        """Search-token segment of f_f as a [1, D, g, g] map for the head."""
        f_xf = f_f[seg.fR[0] : seg.fR[1]]
        return tokens_to_map(f_xf)

    def forward_single(self, static: ImageCrop, dynamic: ImageCrop, search: ImageCrop,
                       rng: np.random.Generator | None = None,
                       with_ntc: bool = True) -> ForwardResult:
        f_f, seg = self.extract_features(static, dynamic, search, rng)
        head_out = self.head(self.search_feature_map(f_f, seg))[0]
        decision = self.ntc(f_f, seg) if with_ntc else None
        return ForwardResult(head=head_out, f_f=f_f, segments=seg, decision=decision)

    def forward_batch(self, triples, rng: np.random.Generator | None = None) -> list[HeadOutput]:
        """Batched head pass over (static, dynamic, search) crop triples.

        Token stages run per item; the conv head (and its batch norm) runs
        once on the stacked feature maps.
        """
        maps = []
        for static, dynamic, search in triples:
            f_f, seg = self.extract_features(static, dynamic, search, rng)
            maps.append(self.search_feature_map(f_f, seg))
        return self.head(T.concat(maps, axis=0))
