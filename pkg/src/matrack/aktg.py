"""Adaptive key token gate.

Per attention head: tokenwise local features and a pooled global feature
are blended by a sigmoid gate, mapped to two keep/drop logits per token,
and sampled into an activation map in [0, 1] via Gumbel-Softmax.  The map
then rescales the value aggregation of self-attention so that key token
j contributes with weight (1 + M[j]).

Train mode draws Gumbel noise from an injected generator (soft and
differentiable, optionally straight-through hard).  Eval mode is
deterministic: no noise, hard argmax of the logits.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ConfigError
from .nn import Linear, Module
from .tensor import ShapeError, Tensor


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[N, D] -> [heads, N, D/heads], contiguous channel split."""
    n, d = x.shape
    if d % heads != 0:
        raise ConfigError(f"model dim {d} not divisible by head count {heads}")
    return T.transpose(T.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of split_heads: [heads, N, dh] -> [N, heads*dh]."""
    h, n, dh = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, h * dh))


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(1e-12, 1.0, size=shape)
    return -np.log(-np.log(u))


def attention_correction(a_map: Tensor, m: Tensor, v: Tensor) -> Tensor:
    """(A·diag(M) + A)·V: attended values with key j rescaled by 1 + M[j].

    a_map: [..., Nq, Nk] attention probabilities; m: [..., Nk] activation
    map in [0, 1]; v: [..., Nk, Dh] values.
    """
    if a_map.shape[-1] != v.shape[-2] or a_map.shape[-1] != m.shape[-1]:
        raise ShapeError(
            f"attention_correction: A {a_map.shape}, M {m.shape}, V {v.shape} disagree"
        )
    weight = T.reshape(T.add(m, 1.0), m.shape + (1,))
    return T.matmul(a_map, T.mul(v, weight))


class AKTG(Module):
    """Produces the per-head activation map M in [0, 1]^N for one block."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 tau: float = 1.0, hard: bool = False):
        super().__init__()
        if tau <= 0:
            raise ConfigError(f"temperature must be positive, got {tau}")
        dh = dim // heads
        self.heads = heads
        self.tau = tau
        self.hard = hard
        self.local_fc1 = Linear(dh, dh, rng)
        self.local_fc2 = Linear(dh, dh, rng)
        self.global_fc1 = Linear(dh, dh, rng)
        self.global_fc2 = Linear(dh, dh, rng)
        self.gate_fc1 = Linear(2 * dh, dh, rng)
        self.gate_fc2 = Linear(dh, 1, rng)
        self.map_fc1 = Linear(dh, dh, rng)
        self.map_fc2 = Linear(dh, 2, rng)
        # test hooks: force the gate or the map to a fixed value
        self.force_alpha: float | None = None
        self.force_map: float | np.ndarray | None = None

    def dual_path(self, f: Tensor) -> tuple[Tensor, Tensor]:
        """Tokenwise local features and token-pooled global feature.

        f: [heads, N, dh] -> local [heads, N, dh], global [heads, 1, dh].
        """
        local = self.local_fc2(T.relu(self.local_fc1(f)))
        glob = T.mean_pool(self.global_fc2(T.relu(self.global_fc1(f))), axis=-2, keepdims=True)
        return local, glob

    def gated_fusion(self, local: Tensor, glob: Tensor) -> Tensor:
        glob_b = T.add(glob, T.scale(local, 0.0))  # broadcast to N tokens
        if self.force_alpha is not None:
            alpha = Tensor(np.full(local.shape[:-1] + (1,), float(self.force_alpha)))
        else:
            gin = T.concat([local, glob_b], axis=-1)
            alpha = T.sigmoid(self.gate_fc2(T.relu(self.gate_fc1(gin))))
        return T.add(T.mul(alpha, local), T.mul(T.sub(1.0, alpha), glob_b))

    def map_logits(self, fused: Tensor) -> Tensor:
        """Keep/drop logits per token: [..., N, 2], channel 0 = keep."""
        return self.map_fc2(T.relu(self.map_fc1(fused)))

    def activation_map(self, fused: Tensor, rng: np.random.Generator | None) -> Tensor:
        logits = self.map_logits(fused)
        if self.training:
            if rng is None:
                raise ValueError("train-mode activation map needs a noise generator")
            noise = Tensor(gumbel_noise(logits.shape, rng))
            y = T.softmax(T.scale(T.add(logits, noise), 1.0 / self.tau), axis=-1)
            soft = y[..., 0]
            if self.hard:
                hard_vals = (soft.data > 0.5).astype(np.float64)
                return T.add(soft, Tensor(hard_vals - soft.data))  # straight-through
            return soft
        keep = logits.data[..., 0] > logits.data[..., 1]
        return Tensor(keep.astype(np.float64))

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        """x: [N, D] block input -> activation map [heads, N]."""
        if self.force_map is not None:
            n = x.shape[0]
            forced = np.asarray(self.force_map, dtype=np.float64)
            return Tensor(np.broadcast_to(forced, (self.heads, n)).copy())
        f = split_heads(x, self.heads)
        local, glob = self.dual_path(f)
        fused = self.gated_fusion(local, glob)
        return self.activation_map(fused, rng)
