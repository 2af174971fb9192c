"""Plain-array twin of the training-loss forward pass.

Re-evaluates total_loss on raw numpy arrays, without building an
autograd graph.  Every step mirrors the graph ops operation for
operation (same numpy calls, same order), so the returned value is
bitwise identical to the graph forward.  The finite-difference gradient
check re-evaluates the loss hundreds of thousands of times, where the
graph bookkeeping would dominate the runtime; this path removes it.

Callers must not trust the mirror blindly: assert agreement with the
graph forward on the working configuration first (the gradient-check
test does exactly that before using it).
"""

from __future__ import annotations

import numpy as np

from .aktg import gumbel_noise
from .boxes import BoundingBox
from .head import encode_box
from .mhb import SegmentMap
from .model import MATrack
from .patching import ROLES, ImageCrop, _extract_patches
from .tensor import _normalize


def _affine(x, lin):
    out = x @ lin.weight.data
    if lin.bias is not None:
        out = out + lin.bias.data
    return out


def _layer_norm(x, ln):
    xhat, _ = _normalize(x, -1, ln.eps)
    return xhat * ln.gamma.data + ln.beta.data


def _softmax(x, axis=-1):
    s = x - x.max(axis=axis, keepdims=True)
    np.exp(s, out=s)  # in place: s is a private intermediate
    s /= s.sum(axis=axis, keepdims=True)
    return s


def _relu(x):
    return x * (x > 0.0)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _split_heads(x, heads):
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


class FastEvaluator:
    """Loss evaluation for one fixed (crops, gt, noise seed) tuple.

    Stage methods return intermediates so the gradient check can cache
    everything upstream of the parameter block under test.
    """

    def __init__(self, model: MATrack):
        self.model = model
        self.config = model.config
        self._scratch: dict[tuple[int, ...], np.ndarray] = {}

    def _attn(self, q, k):
        """softmax(q @ k^T) into a reused per-shape scratch buffer.

        The buffer is consumed before the next attention of the same
        shape overwrites it.
        """
        kt = k.swapaxes(-1, -2)
        shape = q.shape[:-1] + (kt.shape[-1],)
        buf = self._scratch.get(shape)
        if buf is None:
            buf = self._scratch[shape] = np.empty(shape)
        np.matmul(q, kt, out=buf)
        np.subtract(buf, buf.max(axis=-1, keepdims=True), out=buf)
        np.exp(buf, out=buf)
        buf /= buf.sum(axis=-1, keepdims=True)
        return buf

    # -- patch embedding ----------------------------------------------------

    def embed(self, crop: ImageCrop):
        emb, cfg = self.model.embedder, self.config
        role = ROLES.index(crop.kind)
        out = []
        for scale, proj, off in ((0, emb.proj_initial, 0),
                                 (1, emb.proj_overlap, cfg.patch // 2)):
            flat = _extract_patches(crop.pixels, cfg.patch, offset=off)
            if crop.kind == "search":
                pos = emb.pos_search if scale == 0 else emb.pos_search_ov
            else:
                pos = emb.pos_template if scale == 0 else emb.pos_template_ov
            tokens = _affine(flat, proj)
            tokens = tokens + pos.data
            tokens = tokens + emb.role_embed.data[role]
            tokens = tokens + emb.scale_embed.data[scale]
            out.append(tokens)
        return tuple(out)

    # -- template blending --------------------------------------------------

    def _cross_attention(self, ca, q_tokens, kv_tokens):
        qn, kvn = _layer_norm(q_tokens, ca.norm_q), _layer_norm(kv_tokens, ca.norm_kv)
        dh = ca.dim // ca.heads
        q = _split_heads(_affine(qn, ca.wq), ca.heads) * (1.0 / np.sqrt(dh))
        k = _split_heads(_affine(kvn, ca.wk), ca.heads)
        v = _split_heads(_affine(kvn, ca.wv), ca.heads)
        attn = self._attn(q, k)
        merged = _affine(_merge_heads(attn @ v), ca.wo)
        return q_tokens + merged if ca.residual else merged

    def fuse(self, search, static, dynamic):
        mhb = self.model.mhb
        fX, fXo = search
        fZs, fZso = static
        fZd, fZdo = dynamic
        fZ = np.concatenate([self._cross_attention(mhb.ca_static, fZs, fZd),
                             self._cross_attention(mhb.ca_dynamic, fZd, fZs)], axis=0)
        fZo = np.concatenate([self._cross_attention(mhb.ca_static_ov, fZso, fZdo),
                              self._cross_attention(mhb.ca_dynamic_ov, fZdo, fZso)], axis=0)
        fR = self._cross_attention(mhb.ca_search, fX, fZ)
        fRo = self._cross_attention(mhb.ca_search_ov, fXo, fZo)
        ft = np.concatenate([fR, fRo, fZ, fZo], axis=0)
        a, b = fR.shape[0], fR.shape[0] + fRo.shape[0]
        c = b + fZ.shape[0]
        seg = SegmentMap(
            fR=(0, a), fRo=(a, b), fZ=(b, c), fZo=(c, c + fZo.shape[0]),
            fZ_static=(b, b + fZ.shape[0] // 2),
            fZ_dynamic=(b + fZ.shape[0] // 2, c),
        )
        return ft, seg

    # -- backbone ------------------------------------------------------------

    def _activation_map(self, aktg, x, rng):
        f = _split_heads(x, aktg.heads)
        local = _affine(_relu(_affine(f, aktg.local_fc1)), aktg.local_fc2)
        glob = _affine(_relu(_affine(f, aktg.global_fc1)), aktg.global_fc2).mean(
            axis=-2, keepdims=True
        )
        glob_b = glob + local * 0.0
        gin = np.concatenate([local, glob_b], axis=-1)
        alpha = _sigmoid(_affine(_relu(_affine(gin, aktg.gate_fc1)), aktg.gate_fc2))
        fused = alpha * local + (1.0 - alpha) * glob_b
        logits = _affine(_relu(_affine(fused, aktg.map_fc1)), aktg.map_fc2)
        noise = gumbel_noise(logits.shape, rng)
        y = _softmax((logits + noise) * (1.0 / aktg.tau))
        soft = y[..., 0]
        if aktg.hard:
            hard_vals = (soft > 0.5).astype(np.float64)
            return soft + (hard_vals - soft)
        return soft

    def _block(self, block, x, rng):
        cfg = self.config
        xn = _layer_norm(x, block.norm1)
        q = _split_heads(_affine(xn, block.wq), cfg.heads) * (1.0 / np.sqrt(cfg.head_dim))
        k = _split_heads(_affine(xn, block.wk), cfg.heads)
        v = _split_heads(_affine(xn, block.wv), cfg.heads)
        attn = self._attn(q, k)
        if block.aktg is not None:
            m = self._activation_map(block.aktg, x, rng)
            weight = (m + 1.0).reshape(m.shape + (1,))
            mode = cfg.aktg_map_mode
            if mode == "column":
                out = attn @ (v * weight)
            elif mode == "row":
                out = (attn * weight) @ v
            else:
                out = (attn * (m + 1.0).reshape(m.shape[:-1] + (1, m.shape[-1]))) @ v
        else:
            out = attn @ v
        x = x + _affine(_merge_heads(out), block.wo)
        x = x + _affine(_relu(_affine(_layer_norm(x, block.norm2), block.mlp_fc1)),
                        block.mlp_fc2)
        return x

    def backbone(self, ft, rng, start: int = 0):
        x = ft
        for block in self.model.backbone.blocks[start:]:
            x = self._block(block, x, rng)
        return x

    def block_noise(self, rng, upto: int):
        """Advance the noise stream past the first `upto` blocks."""
        for block in self.model.backbone.blocks[:upto]:
            if block.aktg is not None:
                n = self.config.total_tokens
                gumbel_noise((block.aktg.heads, n, 2), rng)

    # -- head and loss -------------------------------------------------------

    def _conv(self, conv, x):
        w, b = conv.weight.data, None if conv.bias is None else conv.bias.data
        O, C, kh, kw = w.shape
        B, _, H, W = x.shape
        if kh == 1 and kw == 1:
            out = (w.reshape(O, C) @ x.reshape(B, C, H * W)).reshape(B, O, H, W)
            if b is not None:
                out = out + b[None, :, None, None]
            return out
        ph, pw = kh // 2, kw // 2
        kq = kh * kw
        xp = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
        xp[:, :, ph : ph + H, pw : pw + W] = x
        cols = np.empty((B, H, W, C, kq))
        q = 0
        for i in range(kh):
            for j in range(kw):
                cols[..., q] = xp[:, :, i : i + H, j : j + W].transpose(0, 2, 3, 1)
                q += 1
        out = (cols.reshape(B * H * W, C * kq) @ w.reshape(O, C * kq).T)
        out = out.reshape(B, H, W, O).transpose(0, 3, 1, 2)
        if b is not None:
            out = out + b[None, :, None, None]
        return out

    def _batch_norm(self, bn, x):
        if bn.training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        else:
            mu = bn._buffers["running_mean"].reshape(1, -1, 1, 1)
            var = bn._buffers["running_var"].reshape(1, -1, 1, 1)
            centered = x - mu
        inv = (var + bn.eps) ** -0.5
        g = bn.gamma.data.reshape(1, -1, 1, 1)
        b = bn.beta.data.reshape(1, -1, 1, 1)
        return centered * inv * g + b

    def feature_map(self, ff, seg):
        f_xf = ff[seg.fR[0] : seg.fR[1]]
        n, d = f_xf.shape
        g = int(np.sqrt(n))
        return f_xf.reshape(g, g, d).transpose(2, 0, 1).reshape(1, d, g, g)

    def head_loss(self, fmap, gt_crop: BoundingBox, l_ce: float = 2.0,
                  l_siou: float = 2.0) -> float:
        head, cfg = self.model.head, self.config
        x = fmap
        for conv, bn in zip(head.convs, head.bns):
            x = _relu(self._batch_norm(bn, self._conv(conv, x)))
        cls = self._conv(head.cls_proj, x)[0, 0]
        off = _sigmoid(self._conv(head.offset_proj, x))[0]
        size = _sigmoid(self._conv(head.size_proj, x))[0]

        g = cls.shape[-1]
        crop_size = cfg.search_size
        row, col, _, _ = encode_box(gt_crop, g, crop_size)
        flat = cls.reshape(g * g)
        shifted = flat - flat.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        ce = logp[row * g + col] * -1.0

        cell = crop_size / g
        pred_cx = (off[0, row, col] + float(col)) * cell
        pred_cy = (off[1, row, col] + float(row)) * cell
        pred_w = size[0, row, col] * float(crop_size)
        pred_h = size[1, row, col] * float(crop_size)
        siou = _siou_value(pred_cx, pred_cy, pred_w, pred_h, gt_crop)
        return float(ce * l_ce + siou * l_siou)

    # -- composed entry points ----------------------------------------------

    def loss(self, static: ImageCrop, dynamic: ImageCrop, search: ImageCrop,
             gt_crop: BoundingBox, noise_seed: int) -> float:
        ft, seg = self.fuse(self.embed(search), self.embed(static), self.embed(dynamic))
        return self.loss_from_tokens_pre_fused(ft, seg, gt_crop, noise_seed)

    def loss_from_tokens(self, search_t, static_t, dynamic_t, gt_crop, noise_seed):
        ft, seg = self.fuse(search_t, static_t, dynamic_t)
        return self.loss_from_tokens_pre_fused(ft, seg, gt_crop, noise_seed)

    def loss_from_tokens_pre_fused(self, ft, seg, gt_crop, noise_seed):
        rng = np.random.default_rng(noise_seed)
        ff = self.backbone(ft, rng)
        return self.head_loss(self.feature_map(ff, seg), gt_crop)

    def loss_from_block(self, x, seg, gt_crop, noise_seed, start: int):
        rng = np.random.default_rng(noise_seed)
        self.block_noise(rng, start)
        ff = self.backbone(x, rng, start=start)
        return self.head_loss(self.feature_map(ff, seg), gt_crop)


def _siou_value(pred_cx, pred_cy, pred_w, pred_h, gt: BoundingBox) -> float:
    """Float mirror of losses.siou_loss (same ops, same branch choices)."""
    half_w, half_h = pred_w * 0.5, pred_h * 0.5
    px1, px2 = pred_cx - half_w, pred_cx + half_w
    py1, py2 = pred_cy - half_h, pred_cy + half_h

    iw = _relu(np.minimum(px2, gt.x2) - np.maximum(px1, gt.x))
    ih = _relu(np.minimum(py2, gt.y2) - np.maximum(py1, gt.y))
    inter = iw * ih
    union = pred_w * pred_h + gt.area - inter
    iou_t = inter / union

    s_cw = gt.cx - pred_cx
    s_ch = gt.cy - pred_cy
    sigma = np.sqrt(s_cw * s_cw + s_ch * s_ch + 1e-18)
    sin_w = np.absolute(s_cw) / sigma
    sin_h = np.absolute(s_ch) / sigma
    sin_used = sin_h if float(sin_w) > np.sqrt(2.0) / 2.0 else sin_w
    angle = np.cos(np.arcsin(sin_used) * 2.0 - np.pi / 2.0)

    cw = np.maximum(px2, gt.x2) - np.minimum(px1, gt.x)
    ch = np.maximum(py2, gt.y2) - np.minimum(py1, gt.y)
    gamma = 2.0 - angle
    rho_x = (s_cw / cw) ** 2.0
    rho_y = (s_ch / ch) ** 2.0
    distance = 2.0 - (np.exp(gamma * rho_x * -1.0) + np.exp(gamma * rho_y * -1.0))

    omega_w = np.absolute(pred_w - gt.w) / np.maximum(pred_w, gt.w)
    omega_h = np.absolute(pred_h - gt.h) / np.maximum(pred_h, gt.h)
    shape = (1.0 - np.exp(omega_w * -1.0)) ** 4.0 + (1.0 - np.exp(omega_h * -1.0)) ** 4.0

    return float((1.0 - iou_t) + (distance + shape) * 0.5)
