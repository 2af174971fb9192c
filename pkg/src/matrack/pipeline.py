"""End-to-end tracking loop, crop geometry and the toy training loop."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .backbone import save_checkpoint
from .boxes import BoundingBox
from .config import ModelConfig
from .head import CropGeometry, decode_box
from .losses import LossWeights, total_loss
from .model import MATrack
from .ntc import CalibrationDecision
from .patching import ImageCrop
from .tensor import no_grad


class NumericalError(ArithmeticError):
    """Raised when training encounters a non-finite loss."""


# -- crops -------------------------------------------------------------------


def crop_with_context(frame: np.ndarray, box: BoundingBox, factor: float,
                      out_size: int, kind: str) -> tuple[ImageCrop, CropGeometry]:
    """Square crop of side factor * sqrt(w*h) around the box center,
    bilinearly resampled to out_size.  Pixels sampled outside the frame
    are filled with the per-channel mean of the in-frame part.
    """
    _, H, W = frame.shape
    side = factor * np.sqrt(box.w * box.h)
    side = max(side, 4.0)
    src_x = box.cx - side / 2.0
    src_y = box.cy - side / 2.0
    scale = out_size / side

    # sample centers of output pixels in image coordinates
    coords = (np.arange(out_size) + 0.5) / scale
    xs = src_x + coords
    ys = src_y + coords
    gx, gy = np.meshgrid(xs, ys)  # [out, out]
    inside = (gx >= 0) & (gx <= W) & (gy >= 0) & (gy <= H)

    # bilinear sample with clamped indices
    fx = np.clip(gx - 0.5, 0, W - 1)
    fy = np.clip(gy - 0.5, 0, H - 1)
    x0 = np.floor(fx).astype(int)
    y0 = np.floor(fy).astype(int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = fx - x0
    wy = fy - y0
    out = np.empty((3, out_size, out_size))
    for c in range(3):
        ch = frame[c]
        out[c] = (
            ch[y0, x0] * (1 - wx) * (1 - wy)
            + ch[y0, x1] * wx * (1 - wy)
            + ch[y1, x0] * (1 - wx) * wy
            + ch[y1, x1] * wx * wy
        )
    if not inside.all():
        for c in range(3):
            fill = out[c][inside].mean() if inside.any() else 0.0
            out[c][~inside] = fill
    return ImageCrop(out, kind), CropGeometry(src_x, src_y, scale, out_size)


# -- tracker -----------------------------------------------------------------


@dataclass
class TrackerState:
    static_template: ImageCrop
    dynamic_template: ImageCrop
    prev_box: BoundingBox
    frame_index: int = 0
    ntc_history: list[CalibrationDecision] = field(default_factory=list)


class Tracker:
    """One-pass single object tracker owning a TrackerState.

    Causal: each frame's output depends only on frames seen so far.
    Eval-mode inference is deterministic for a fixed checkpoint.
    """

    def __init__(self, model: MATrack, ntc_enabled: bool = True):
        self.model = model
        self.config = model.config
        self.ntc_enabled = ntc_enabled
        self.state: TrackerState | None = None

    def init(self, frame: np.ndarray, box: BoundingBox) -> TrackerState:
        _, H, W = frame.shape
        if box.x < 0 or box.y < 0 or box.x2 > W or box.y2 > H:
            raise ValueError(f"init box {box} outside {W}x{H} frame")
        cfg = self.config
        template, _ = crop_with_context(
            frame, box, cfg.template_context, cfg.template_size, "static_template"
        )
        dynamic = ImageCrop(template.pixels.copy(), "dynamic_template")
        self.state = TrackerState(template, dynamic, box)
        return self.state

    def track_frame(self, frame: np.ndarray) -> BoundingBox:
        if self.state is None:
            raise RuntimeError("tracker not initialized; call init() first")
        st = self.state
        cfg = self.config
        _, H, W = frame.shape
        search, geom = crop_with_context(
            frame, st.prev_box, cfg.search_context, cfg.search_size, "search"
        )
        self.model.eval()
        with no_grad():
            result = self.model.forward_single(
                st.static_template, st.dynamic_template, search, with_ntc=self.ntc_enabled
            )
        box = decode_box(result.head, geom).clamp_to(W, H)

        st.frame_index += 1
        if self.ntc_enabled and result.decision is not None:
            st.ntc_history.append(result.decision)
            if result.decision.update:
                new_crop, _ = crop_with_context(
                    frame, box, cfg.template_context, cfg.template_size, "dynamic_template"
                )
                st.dynamic_template = new_crop
        st.prev_box = box
        return box

    def track_sequence(self, frames, init_box: BoundingBox) -> list[BoundingBox]:
        """OPE protocol: init from frame 0 gt, track the remaining frames.

        The frame-0 output is the init box itself.
        """
        self.init(frames[0], init_box)
        boxes = [init_box]
        for frame in frames[1:]:
            boxes.append(self.track_frame(frame))
        return boxes


# -- optimizer ---------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        seen, unique = set(), []
        for p in params:
            if id(p) not in seen:  # shared modules may expose a param twice
                seen.add(id(p))
                unique.append(p)
        self.params = unique
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1t = 1 - self.b1**self.t
        b2t = 1 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            m_hat = self.m[i] / b1t
            v_hat = self.v[i] / b2t
            p.data = p.data - self.lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            )

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 2
    iterations: int = 200
    seed: int = 0
    # multiply lr by decay_factor once, at iteration decay_at (0 disables)
    decay_at: int = 0
    decay_factor: float = 0.1
    loss_weights: LossWeights = field(default_factory=LossWeights)


@dataclass
class TrainSample:
    """One (static template, dynamic template, search, gt-in-crop) pair."""

    static: ImageCrop
    dynamic: ImageCrop
    search: ImageCrop
    gt_crop: BoundingBox


def train(model: MATrack, dataset: list[TrainSample], config: TrainConfig,
          checkpoint_path: str | None = None,
          loss_curve_path: str | None = None) -> list[tuple[int, float, float, float]]:
    """Minimize the total loss over random batches from the dataset.

    Dynamic template updates are disabled: samples are independent pairs.
    Returns the loss curve [(iteration, total, ce, siou)]; deterministic
    under a fixed seed.  Raises NumericalError on a non-finite loss.
    """
    rng = np.random.default_rng(config.seed)
    opt = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    model.train()
    curve = []
    crop_size = model.config.search_size
    for it in range(config.iterations):
        if config.decay_at and it == config.decay_at:
            opt.lr *= config.decay_factor
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        batch = [dataset[i] for i in idx]
        outs = model.forward_batch([(s.static, s.dynamic, s.search) for s in batch], rng)
        losses, ce_vals, siou_vals = [], [], []
        for out, sample in zip(outs, batch):
            loss, ce_v, siou_v = total_loss(out, sample.gt_crop, crop_size, config.loss_weights)
            losses.append(loss)
            ce_vals.append(ce_v)
            siou_vals.append(siou_v)
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        total = total * (1.0 / len(losses))
        value = float(total.data)
        if not np.isfinite(value):
            raise NumericalError(
                f"non-finite loss at iteration {it}: total={value}, "
                f"ce={ce_vals}, siou={siou_vals}, batch indices={idx.tolist()}"
            )
        opt.zero_grad()
        total.backward()
        opt.step()
        curve.append((it, value, float(np.mean(ce_vals)), float(np.mean(siou_vals))))
    if loss_curve_path:
        with open(loss_curve_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss", "ce", "siou"])
            writer.writerows(curve)
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return curve


def make_training_samples(model_config: ModelConfig, frames, gt_boxes,
                          rng: np.random.Generator,
                          jitter: float = 0.1, scale_jitter: float = 0.3,
                          samples_per_frame: int = 1,
                          occluded=None) -> list[TrainSample]:
    """Build independent training pairs from one sequence.

    Templates come from frame 0; the search crop for frame t is centered
    on the gt box jittered by a fraction of its size, mimicking the
    tracking-time crop distribution.  The crop side is additionally
    scaled by a random factor in [1 - scale_jitter, 1 + scale_jitter]:
    without it the object would always occupy the same fraction of the
    crop and the size channels would never learn real regression, which
    lets small multiplicative size errors compound frame over frame at
    tracking time.
    """
    template, _ = crop_with_context(
        frames[0], gt_boxes[0], model_config.template_context,
        model_config.template_size, "static_template",
    )
    dynamic = ImageCrop(template.pixels.copy(), "dynamic_template")
    samples = []
    for t, (frame, gt) in enumerate(zip(frames, gt_boxes)):
        if occluded is not None and occluded[t]:
            continue
        for _ in range(samples_per_frame):
            dx = rng.uniform(-jitter, jitter) * gt.w
            dy = rng.uniform(-jitter, jitter) * gt.h
            f = rng.uniform(1.0 - scale_jitter, 1.0 + scale_jitter)
            center_box = BoundingBox.from_center(
                gt.cx + dx, gt.cy + dy, gt.w * f, gt.h * f
            )
            search, geom = crop_with_context(
                frame, center_box, model_config.search_context,
                model_config.search_size, "search",
            )
            samples.append(TrainSample(template, dynamic, search, geom.to_crop(gt)))
    return samples
