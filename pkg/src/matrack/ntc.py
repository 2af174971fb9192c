"""Nighttime template calibrator.

Computes an offset between the dynamic-template tokens and the search
tokens of the final backbone output via offset-attention, pools it into
a confidence score s_c in (0, 1), and gates dynamic template updates:
the template is refreshed only when theta_low < s_c < theta_high
(strict on both bounds).

Note on the offset operand: the attended values have one row per query
(dynamic-template token) while the raw value matrix has one row per
search token, so the subtraction is evaluated in query space:
offset = Q_n - Attention(Q_n, K_n, V_n).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .mhb import SegmentMap
from .nn import Linear, Module
from .tensor import Tensor


@dataclass
class CalibrationDecision:
    s_c: float
    update: bool
    f_o_mean: float = 0.0
    f_o_std: float = 0.0


class NTC(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        d, dk = config.dim, config.ntc_dim
        self.proj_q = Linear(d, dk, rng)
        self.proj_k = Linear(d, dk, rng)
        self.proj_v = Linear(d, dk, rng)
        self.offset_linear = Linear(dk, dk, rng)
        self.score_fc1 = Linear(dk, dk, rng)
        self.score_fc2 = Linear(dk, 1, rng)

    @staticmethod
    def partition_final(f_f: Tensor, seg: SegmentMap) -> tuple[Tensor, Tensor, Tensor]:
        """Search tokens (initial scale), static template half, dynamic half.

        Overlapped segments are excluded.  The static segment is returned
        for interface completeness but is not consumed downstream.
        """
        f_xf = f_f[seg.fR[0] : seg.fR[1]]
        f_zf = f_f[seg.fZ_static[0] : seg.fZ_static[1]]
        f_zdf = f_f[seg.fZ_dynamic[0] : seg.fZ_dynamic[1]]
        return f_xf, f_zf, f_zdf

    def offset_attention(self, f_zdf: Tensor, f_xf: Tensor) -> Tensor:
        qn = self.proj_q(f_zdf)
        kn = self.proj_k(f_xf)
        vn = self.proj_v(f_xf)
        dk = self.config.ntc_dim
        attn = T.softmax(T.matmul(qn, kn.swapaxes(-1, -2)) * (1.0 / np.sqrt(dk)), axis=-1)
        attended = T.matmul(attn, vn)
        offset = T.sub(qn, attended)
        return T.relu(T.instance_norm(self.offset_linear(offset)))

    def confidence(self, f_o: Tensor) -> Tensor:
        pooled = T.mean_pool(f_o, axis=0, keepdims=True)
        return T.sigmoid(self.score_fc2(T.relu(self.score_fc1(pooled))))

    def calibrate(self, f_o: Tensor) -> CalibrationDecision:
        s_c = float(self.confidence(f_o).data[0, 0])
        update = self.config.theta_low < s_c < self.config.theta_high
        return CalibrationDecision(
            s_c=s_c,
            update=update,
            f_o_mean=float(f_o.data.mean()),
            f_o_std=float(f_o.data.std()),
        )

    def __call__(self, f_f: Tensor, seg: SegmentMap) -> CalibrationDecision:
        f_xf, _, f_zdf = self.partition_final(f_f, seg)
        return self.calibrate(self.offset_attention(f_zdf, f_xf))
