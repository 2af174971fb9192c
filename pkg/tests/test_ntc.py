import numpy as np
import pytest

from matrack.config import ConfigError, ModelConfig
from matrack.gradcheck import max_rel_error, numerical_grad
from matrack.mhb import SegmentMap
from matrack.ntc import NTC
from matrack.tensor import Tensor
from matrack.tensor import _normalize


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def tiny_seg(cfg):
    a = cfg.search_tokens
    b = a + cfg.search_tokens_overlap
    c = b + 2 * cfg.template_tokens
    return SegmentMap(
        fR=(0, a), fRo=(a, b), fZ=(b, c), fZo=(c, cfg.total_tokens),
        fZ_static=(b, b + cfg.template_tokens),
        fZ_dynamic=(b + cfg.template_tokens, c),
    )


def naive_offset_attention(ntc, f_zdf, f_xf):
    """Loop oracle: per-query attention, offset in query space, then the
    linear + per-channel normalization + ReLU pipeline."""
    lin = lambda x, mod: x @ mod.weight.data + mod.bias.data
    qn, kn, vn = lin(f_zdf, ntc.proj_q), lin(f_xf, ntc.proj_k), lin(f_xf, ntc.proj_v)
    dk = ntc.config.ntc_dim
    out = np.zeros_like(qn)
    for i in range(qn.shape[0]):
        scores = np.array([qn[i] @ kn[j] / np.sqrt(dk) for j in range(kn.shape[0])])
        e = np.exp(scores - scores.max())
        w = e / e.sum()
        attended = sum(w[j] * vn[j] for j in range(kn.shape[0]))
        out[i] = qn[i] - attended
    out = lin(out, ntc.offset_linear)
    xhat, _ = _normalize(out, -2, 1e-5)
    return np.maximum(xhat, 0.0)


class TestPartition:
    def test_default_segment_sizes(self):
        cfg = ModelConfig()
        seg = tiny_seg(cfg)
        f = Tensor(rand((cfg.total_tokens, cfg.dim)))
        f_xf, f_zf, f_zdf = NTC.partition_final(f, seg)
        assert f_xf.shape[0] == 256
        assert f_zf.shape[0] == 64 and f_zdf.shape[0] == 64

    def test_partition_selects_exact_rows(self):
        cfg = ModelConfig.tiny()
        seg = tiny_seg(cfg)
        data = rand((cfg.total_tokens, cfg.dim), 1)
        f_xf, f_zf, f_zdf = NTC.partition_final(Tensor(data), seg)
        assert np.array_equal(f_xf.data, data[seg.fR[0]:seg.fR[1]])
        assert np.array_equal(f_zf.data, data[seg.fZ_static[0]:seg.fZ_static[1]])
        assert np.array_equal(f_zdf.data, data[seg.fZ_dynamic[0]:seg.fZ_dynamic[1]])
        # overlapped segments are excluded by construction
        assert f_xf.shape[0] + 2 * f_zf.shape[0] < cfg.total_tokens


class TestOffsetAttention:
    def test_matches_naive_loop_oracle(self):
        cfg = ModelConfig.tiny()
        for seed in range(20):
            ntc = NTC(cfg, np.random.default_rng(seed))
            f_zdf = rand((5, cfg.dim), seed + 50)
            f_xf = rand((5, cfg.dim), seed + 100)
            got = ntc.offset_attention(Tensor(f_zdf), Tensor(f_xf)).data
            want = naive_offset_attention(ntc, f_zdf, f_xf)
            assert np.max(np.abs(got - want)) < 1e-10

    def test_single_search_token_collapses_attention(self):
        # one key: every query's attended value equals that token's value
        # vector, so the offset is query-projection minus that one value
        cfg = ModelConfig.tiny()
        ntc = NTC(cfg, np.random.default_rng(0))
        f_zdf, f_xf = rand((4, cfg.dim), 1), rand((1, cfg.dim), 2)
        lin = lambda x, mod: x @ mod.weight.data + mod.bias.data
        qn, vn = lin(f_zdf, ntc.proj_q), lin(f_xf, ntc.proj_v)
        offset = lin(qn - vn[0], ntc.offset_linear)
        xhat, _ = _normalize(offset, -2, 1e-5)
        want = np.maximum(xhat, 0.0)
        got = ntc.offset_attention(Tensor(f_zdf), Tensor(f_xf)).data
        assert np.max(np.abs(got - want)) < 1e-12

    def test_output_nonnegative(self):
        cfg = ModelConfig.tiny()
        ntc = NTC(cfg, np.random.default_rng(3))
        out = ntc.offset_attention(Tensor(rand((6, cfg.dim), 4)),
                                   Tensor(rand((10, cfg.dim), 5))).data
        assert np.all(out >= 0.0)

    def test_gradients(self):
        cfg = ModelConfig.tiny()
        ntc = NTC(cfg, np.random.default_rng(6))
        f_zdf = Tensor(rand((3, cfg.dim), 7))
        f_xf = Tensor(rand((4, cfg.dim), 8))
        loss = lambda: ntc.confidence(ntc.offset_attention(f_zdf, f_xf)).sum()
        ntc.zero_grad()
        loss().backward()
        for name, p in ntc.named_parameters():
            num = numerical_grad(loss, p)
            err = max_rel_error(p.grad if p.grad is not None else np.zeros_like(p.data),
                                num, floor=1e-6)
            assert err < 1e-4, name


class TestCalibration:
    def _score(self, cfg, seed=0):
        ntc = NTC(cfg, np.random.default_rng(0))
        f_o = ntc.offset_attention(Tensor(rand((4, cfg.dim), seed + 1)),
                                   Tensor(rand((8, cfg.dim), seed + 2)))
        return ntc, f_o

    def test_confidence_strictly_in_unit_interval(self):
        cfg = ModelConfig.tiny()
        for seed in range(30):
            ntc, f_o = self._score(cfg, seed)
            s_c = ntc.calibrate(f_o).s_c
            assert 0.0 < s_c < 1.0

    def test_extreme_inputs_stay_in_unit_interval(self):
        # the per-channel normalization bounds f_O, so even huge token
        # values cannot saturate the sigmoid to exactly 0 or 1
        cfg = ModelConfig.tiny()
        ntc = NTC(cfg, np.random.default_rng(0))
        f_o = ntc.offset_attention(Tensor(rand((4, cfg.dim), 1) * 1e6),
                                   Tensor(rand((8, cfg.dim), 2) * 1e6))
        s_c = ntc.calibrate(f_o).s_c
        assert 0.0 < s_c < 1.0

    def test_band_semantics(self):
        cfg = ModelConfig.tiny()
        ntc, f_o = self._score(cfg)
        s = ntc.calibrate(f_o).s_c

        def decision(lo, hi):
            # same weights, different thresholds
            other = NTC(cfg.with_overrides(theta_low=lo, theta_high=hi),
                        np.random.default_rng(0))
            return other.calibrate(f_o)

        eps = 1e-9
        assert decision(min(s / 2, 0.1), min(s * 2, 0.99)).update is True
        # strict boundaries: s_c equal to either threshold means no update
        if 0.0 < s < 1.0:
            assert decision(s, min(s + 0.1, 0.999)).update is False
            assert decision(max(s - 0.1, eps), s).update is False
        # band entirely above / below the score
        if s < 0.9:
            assert decision(s + 0.05, s + 0.09).update is False

    def test_invalid_band_rejected(self):
        with pytest.raises(ConfigError, match="theta"):
            ModelConfig.tiny(theta_low=0.8, theta_high=0.3)

    def test_decision_reports_diagnostics(self):
        cfg = ModelConfig.tiny()
        ntc, f_o = self._score(cfg)
        d = ntc.calibrate(f_o)
        assert d.f_o_mean == pytest.approx(float(f_o.data.mean()))
        assert d.f_o_std == pytest.approx(float(f_o.data.std()))

    def test_full_call_deterministic(self):
        cfg = ModelConfig.tiny()
        ntc = NTC(cfg, np.random.default_rng(0))
        seg = tiny_seg(cfg)
        f_f = Tensor(rand((cfg.total_tokens, cfg.dim), 9))
        a = ntc(f_f, seg)
        b = ntc(f_f, seg)
        assert a.s_c == b.s_c and a.update == b.update
