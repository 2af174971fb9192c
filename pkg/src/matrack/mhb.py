"""Multiscale hierarchy blender.

Fuses static/dynamic template tokens within each scale by bidirectional
cross-attention, aligns search tokens to the fused templates, and
concatenates everything into one global token sequence with a recorded
segment index map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import LayerNorm, Linear, Module
from .patching import TokenSequence
from .tensor import ShapeError, Tensor


class CrossAttention(Module):
    """Multi-head cross-attention: first argument is Q, second provides K/V.

    Pre-normalization plus residual on the query stream by default; with
    residual=False the bare attention output is returned.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 residual: bool = True):
        super().__init__()
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.residual = residual
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def _heads(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return T.transpose(T.reshape(x, (n, self.heads, self.dim // self.heads)), (1, 0, 2))

    def attention_weights(self, q_tokens: Tensor, kv_tokens: Tensor) -> Tensor:
        """Attention probabilities [heads, Nq, Nk] (diagnostic path)."""
        qn, kvn = self.norm_q(q_tokens), self.norm_kv(kv_tokens)
        dh = self.dim // self.heads
        q = self._heads(self.wq(qn)) * (1.0 / np.sqrt(dh))
        k = self._heads(self.wk(kvn))
        return T.softmax(T.matmul(q, k.swapaxes(-1, -2)), axis=-1)

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor) -> Tensor:
        if q_tokens.shape[-1] != self.dim or kv_tokens.shape[-1] != self.dim:
            raise ShapeError(
                f"cross-attention dim mismatch: q {q_tokens.shape}, kv {kv_tokens.shape}, "
                f"expected last dim {self.dim}"
            )
        qn, kvn = self.norm_q(q_tokens), self.norm_kv(kv_tokens)
        dh = self.dim // self.heads
        q = self._heads(self.wq(qn)) * (1.0 / np.sqrt(dh))
        k = self._heads(self.wk(kvn))
        v = self._heads(self.wv(kvn))
        attn = T.softmax(T.matmul(q, k.swapaxes(-1, -2)), axis=-1)
        out = T.matmul(attn, v)  # [h, Nq, dh]
        nq = q_tokens.shape[0]
        merged = T.reshape(T.transpose(out, (1, 0, 2)), (nq, self.dim))
        merged = self.wo(merged)
        return T.add(q_tokens, merged) if self.residual else merged


@dataclass(frozen=True)
class SegmentMap:
    """Index ranges of the global token sequence, in concatenation order."""

    fR: tuple[int, int]
    fRo: tuple[int, int]
    fZ: tuple[int, int]
    fZo: tuple[int, int]
    fZ_static: tuple[int, int]
    fZ_dynamic: tuple[int, int]

    @property
    def total(self) -> int:
        return self.fZo[1]

    def segments(self):
        return {"fR": self.fR, "fRo": self.fRo, "fZ": self.fZ, "fZo": self.fZo}

    def partition(self, ft: Tensor) -> dict[str, Tensor]:
        sizes = [e - s for s, e in self.segments().values()]
        parts = T.split(ft, sizes, axis=0)
        return dict(zip(self.segments(), parts))


class MHB(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        mk = lambda: CrossAttention(config.dim, config.heads, rng, config.ca_residual)
        self.ca_static = mk()
        self.ca_dynamic = self.ca_static if config.share_template_ca else mk()
        self.ca_static_ov = mk()
        self.ca_dynamic_ov = self.ca_static_ov if config.share_template_ca else mk()
        self.ca_search = mk()
        self.ca_search_ov = mk()

    def template_internal_fusion(self, fZs: Tensor, fZd: Tensor,
                                 fZso: Tensor, fZdo: Tensor) -> tuple[Tensor, Tensor]:
        if fZs.shape[0] != fZd.shape[0] or fZso.shape[0] != fZdo.shape[0]:
            raise ShapeError(
                "static/dynamic template token counts differ: "
                f"{fZs.shape[0]} vs {fZd.shape[0]} (initial), "
                f"{fZso.shape[0]} vs {fZdo.shape[0]} (overlapped)"
            )
        fZs_f = self.ca_static(fZs, fZd)
        fZd_f = self.ca_dynamic(fZd, fZs)
        fZso_f = self.ca_static_ov(fZso, fZdo)
        fZdo_f = self.ca_dynamic_ov(fZdo, fZso)
        return T.concat([fZs_f, fZd_f], axis=0), T.concat([fZso_f, fZdo_f], axis=0)

    def cross_modal_alignment(self, fX: Tensor, fXo: Tensor,
                              fZ: Tensor, fZo: Tensor) -> tuple[Tensor, Tensor]:
        return self.ca_search(fX, fZ), self.ca_search_ov(fXo, fZo)

    def global_integration(self, fR: Tensor, fRo: Tensor,
                           fZ: Tensor, fZo: Tensor) -> tuple[Tensor, SegmentMap]:
        ft = T.concat([fR, fRo, fZ, fZo], axis=0)
        n_r, n_ro, n_z, n_zo = fR.shape[0], fRo.shape[0], fZ.shape[0], fZo.shape[0]
        a, b, c = n_r, n_r + n_ro, n_r + n_ro + n_z
        seg = SegmentMap(
            fR=(0, a),
            fRo=(a, b),
            fZ=(b, c),
            fZo=(c, c + n_zo),
            fZ_static=(b, b + n_z // 2),
            fZ_dynamic=(b + n_z // 2, c),
        )
        return ft, seg

    def __call__(self, search: tuple[TokenSequence, TokenSequence],
                 static: tuple[TokenSequence, TokenSequence],
                 dynamic: tuple[TokenSequence, TokenSequence]) -> tuple[Tensor, SegmentMap]:
        fX, fXo = search[0].tokens, search[1].tokens
        fZs, fZso = static[0].tokens, static[1].tokens
        fZd, fZdo = dynamic[0].tokens, dynamic[1].tokens
        fZ, fZo = self.template_internal_fusion(fZs, fZd, fZso, fZdo)
        fR, fRo = self.cross_modal_alignment(fX, fXo, fZ, fZo)
        return self.global_integration(fR, fRo, fZ, fZo)
