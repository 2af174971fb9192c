import numpy as np
import pytest

from matrack.backbone import (Backbone, Block, CheckpointError, load_checkpoint,
                              load_state, save_checkpoint, save_state)
from matrack.config import ConfigError, ModelConfig
from matrack.gradcheck import max_rel_error, numerical_grad
from matrack.tensor import ShapeError, Tensor
from matrack.tensor import _normalize


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def vanilla_block(block, x, cfg, value_factor=1.0, with_mlp=True):
    """Independent plain pre-norm transformer block on raw numpy arrays."""
    def ln(arr, mod):
        xhat, _ = _normalize(arr, -1, mod.eps)
        return xhat * mod.gamma.data + mod.beta.data

    def lin(arr, mod):
        return arr @ mod.weight.data + mod.bias.data

    def heads(arr):
        n = arr.shape[0]
        return arr.reshape(n, cfg.heads, cfg.head_dim).transpose(1, 0, 2)

    xn = ln(x, block.norm1)
    q = heads(lin(xn, block.wq)) / np.sqrt(cfg.head_dim)
    k = heads(lin(xn, block.wk))
    v = heads(lin(xn, block.wv))
    scores = q @ k.transpose(0, 2, 1)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    attn = e / e.sum(axis=-1, keepdims=True)
    out = (attn @ v) * value_factor
    merged = out.transpose(1, 0, 2).reshape(x.shape[0], cfg.dim)
    x = x + lin(merged, block.wo)
    if not with_mlp:
        return x
    hidden = np.maximum(lin(ln(x, block.norm2), block.mlp_fc1), 0.0)
    return x + lin(hidden, block.mlp_fc2)


class TestBlock:
    def test_zero_map_equals_vanilla_block(self):
        cfg = ModelConfig.tiny()
        block = Block(cfg, np.random.default_rng(0), use_aktg=True)
        block.aktg.force_map = 0.0
        x = rand((10, cfg.dim), 1)
        got = block(Tensor(x)).data
        assert np.max(np.abs(got - vanilla_block(block, x, cfg))) < 1e-10

    def test_unit_map_doubles_attended_values(self):
        cfg = ModelConfig.tiny()
        block = Block(cfg, np.random.default_rng(0), use_aktg=True)
        block.aktg.force_map = 1.0
        x = rand((10, cfg.dim), 2)
        got = block(Tensor(x)).data
        assert np.max(np.abs(got - vanilla_block(block, x, cfg, value_factor=2.0))) < 1e-10

    def test_aktg_disabled_equals_vanilla_block(self):
        cfg = ModelConfig.tiny()
        block = Block(cfg, np.random.default_rng(3), use_aktg=False)
        x = rand((8, cfg.dim), 4)
        assert np.max(np.abs(block(Tensor(x)).data - vanilla_block(block, x, cfg))) < 1e-10

    def test_zeroed_mlp_projection_is_identity_sublayer(self):
        cfg = ModelConfig.tiny()
        rng = np.random.default_rng(0)
        block = Block(cfg, rng, use_aktg=False)
        x = rand((6, cfg.dim), 5)
        block.mlp_fc2.weight.data[:] = 0.0  # bias is already zero at init
        got = block(Tensor(x)).data
        attention_only = vanilla_block(block, x, cfg, with_mlp=False)
        assert np.max(np.abs(got - attention_only)) < 1e-12

    def test_alternate_map_modes_run(self):
        for mode in ("row", "elementwise"):
            cfg = ModelConfig.tiny(aktg_map_mode=mode)
            block = Block(cfg, np.random.default_rng(0), use_aktg=True)
            block.aktg.force_map = 0.0
            x = rand((6, cfg.dim), 6)
            # with the map at zero every mode reduces to vanilla attention
            assert np.max(np.abs(block(Tensor(x)).data - vanilla_block(block, x, cfg))) < 1e-10

    def test_gradients_tiny_depth2(self):
        cfg = ModelConfig.tiny()
        rng = np.random.default_rng(7)
        blocks = [Block(cfg, rng, use_aktg=True) for _ in range(2)]
        x = Tensor(rand((8, cfg.dim), 8))

        def loss():
            out = x
            noise = np.random.default_rng(99)
            for b in blocks:
                out = b(out, noise)
            return out.sum()

        for b in blocks:
            b.zero_grad()
        loss().backward()
        for i, b in enumerate(blocks):
            for name, p in b.named_parameters():
                num = numerical_grad(loss, p)
                err = max_rel_error(p.grad if p.grad is not None else np.zeros_like(p.data),
                                    num, floor=1e-5)
                assert err < 1e-3, f"block {i} {name}: {err}"


class TestBackbone:
    def test_depth_zero_rejected_at_config(self):
        with pytest.raises(ConfigError, match="depth"):
            ModelConfig.tiny(depth=0)

    def test_token_count_preserved(self):
        cfg = ModelConfig.tiny()
        bb = Backbone(cfg, np.random.default_rng(0))
        x = Tensor(rand((cfg.total_tokens, cfg.dim), 1))
        bb.eval()
        assert bb(x).shape == x.shape

    def test_wrong_token_count_rejected(self):
        cfg = ModelConfig.tiny()
        bb = Backbone(cfg, np.random.default_rng(0))
        with pytest.raises(ShapeError, match=str(cfg.total_tokens)):
            bb(Tensor(rand((10, cfg.dim))))

    def test_eval_idempotent_bit_exact(self):
        cfg = ModelConfig.tiny()
        bb = Backbone(cfg, np.random.default_rng(0))
        bb.eval()
        x = Tensor(rand((cfg.total_tokens, cfg.dim), 2))
        assert np.array_equal(bb(x).data, bb(x).data)

    def test_aktg_block_subset(self):
        cfg = ModelConfig.tiny()
        bb = Backbone(cfg, np.random.default_rng(0), aktg_blocks=[1])
        assert bb.blocks[0].aktg is None and bb.blocks[1].aktg is not None


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = ModelConfig.tiny()
        bb = Backbone(cfg, np.random.default_rng(0))
        path = tmp_path / "bb.ckpt"
        save_checkpoint(bb, path)
        bb2 = Backbone(cfg, np.random.default_rng(1))
        load_checkpoint(bb2, path)
        for (na, a), (nb, b) in zip(bb.named_parameters(), bb2.named_parameters()):
            assert na == nb and np.array_equal(a.data, b.data)

    def test_scalar_and_shape_layout(self, tmp_path):
        path = tmp_path / "s.ckpt"
        state = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(3.5)}
        save_state(state, path)
        loaded = load_state(path)
        assert np.array_equal(loaded["a"], state["a"])
        assert loaded["b"].shape == () and loaded["b"] == 3.5

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="bad magic"):
            load_state(path)

    def test_bad_version(self, tmp_path):
        import struct
        path = tmp_path / "v9.ckpt"
        path.write_bytes(b"MTRK" + struct.pack("<II", 9, 0))
        with pytest.raises(CheckpointError, match="version 9"):
            load_state(path)

    def test_state_mismatch_rejected(self, tmp_path):
        cfg = ModelConfig.tiny()
        bb = Backbone(cfg, np.random.default_rng(0))
        path = tmp_path / "bb.ckpt"
        save_checkpoint(bb, path)
        other = Backbone(cfg.with_overrides(depth=1), np.random.default_rng(0))
        with pytest.raises(KeyError, match="state mismatch"):
            load_checkpoint(other, path)
