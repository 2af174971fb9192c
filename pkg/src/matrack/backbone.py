"""Overlapped-ViT style backbone: pre-norm transformer blocks whose value
aggregation is corrected by the AKTG activation map.

Attention maps are materialized per head (N x N); at desk scale
(N = 707 by default) this quadratic memory cost is acceptable.
"""

from __future__ import annotations

import struct

import numpy as np

from . import tensor as T
from .aktg import AKTG, attention_correction, merge_heads, split_heads
from .config import ModelConfig
from .nn import LayerNorm, Linear, Module
from .tensor import ShapeError, Tensor


class Block(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, use_aktg: bool):
        super().__init__()
        d, h = config.dim, config.heads
        self.config = config
        self.norm1 = LayerNorm(d)
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.norm2 = LayerNorm(d)
        self.mlp_fc1 = Linear(d, d * config.mlp_ratio, rng)
        self.mlp_fc2 = Linear(d * config.mlp_ratio, d, rng)
        self.aktg = AKTG(d, h, rng, config.aktg_tau, config.aktg_hard) if use_aktg else None

    def _corrected_values(self, attn: Tensor, m: Tensor, v: Tensor) -> Tensor:
        mode = self.config.aktg_map_mode
        if mode == "column":
            return attention_correction(attn, m, v)
        weight = T.add(m, 1.0)
        if mode == "row":
            scaled = T.mul(attn, T.reshape(weight, weight.shape + (1,)))
        else:  # elementwise broadcast over rows
            scaled = T.mul(attn, T.reshape(weight, weight.shape[:-1] + (1, weight.shape[-1])))
        return T.matmul(scaled, v)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.config
        n = x.shape[0]
        xn = self.norm1(x)
        # 1/sqrt(dh) applied to q, not the N x N score matrix (cheaper)
        q = split_heads(self.wq(xn), cfg.heads) * (1.0 / np.sqrt(cfg.head_dim))
        k = split_heads(self.wk(xn), cfg.heads)
        v = split_heads(self.wv(xn), cfg.heads)
        attn = T.softmax(T.matmul(q, k.swapaxes(-1, -2)), axis=-1)
        if self.aktg is not None:
            m = self.aktg(x, rng)  # [heads, N]
            out = self._corrected_values(attn, m, v)
        else:
            out = T.matmul(attn, v)
        x = T.add(x, self.wo(merge_heads(out)))
        x = T.add(x, self.mlp_fc2(T.relu(self.mlp_fc1(self.norm2(x)))))
        return x


class Backbone(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 aktg_blocks: list[int] | None = None):
        super().__init__()
        self.config = config
        if aktg_blocks is None:
            aktg_blocks = list(range(config.depth)) if config.aktg_enabled else []
        self.blocks = [
            Block(config, rng, use_aktg=(i in aktg_blocks)) for i in range(config.depth)
        ]

    def __call__(self, ft: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if ft.shape[0] != self.config.total_tokens:
            raise ShapeError(
                f"backbone expects {self.config.total_tokens} tokens, got {ft.shape[0]}"
            )
        x = ft
        for block in self.blocks:
            x = block(x, rng)
        return x


# -- checkpoint format --------------------------------------------------------
#
# Flat named-tensor binary, little-endian:
#   magic   4 bytes  b"MTRK"
#   version u32      1
#   count   u32      number of entries
# then per entry:
#   name_len u16, name utf-8 bytes
#   ndim     u8, dims u32 * ndim
#   data     float64 * prod(dims), row-major

_MAGIC = b"MTRK"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_state(state: dict[str, np.ndarray], path: str):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(state)))
        for name, arr in state.items():
            # ascontiguousarray would promote 0-d arrays to 1-d
            arr = np.asarray(arr, dtype=np.float64, order="C")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_state(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        state = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(dims)
            state[name] = data.copy()
        return state


def save_checkpoint(model: Module, path: str):
    save_state(model.state_dict(), path)


def load_checkpoint(model: Module, path: str):
    model.load_state_dict(load_state(path))
