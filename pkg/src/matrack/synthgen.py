"""Deterministic synthetic nighttime sequence generator.

Renders a bright rectangular object moving along a waypoint trajectory
over a dark noisy background with optional rectangular distractors and
declared occlusion windows.  Groundtruth boxes are pixel-exact bounding
rectangles of the rendered object; everything is reproducible from the
seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import BoundingBox


class SceneSpecError(ValueError):
    pass


@dataclass
class SceneSpec:
    frame_size: tuple[int, int] = (96, 96)  # (H, W)
    num_frames: int = 30
    object_size: tuple[int, int] = (14, 14)  # (w, h) pixels
    object_intensity: float = 0.9
    object_color: tuple[float, float, float] = (1.0, 0.85, 0.6)
    waypoints: list[tuple[float, float]] = field(default_factory=list)
    jitter_sigma: float = 0.0
    illumination: float = 0.5  # background mean = illumination * 0.15
    noise_sigma: float = 0.01
    distractor_count: int = 0
    distractor_intensity: float = 0.35
    occlusion_windows: list[tuple[int, int]] = field(default_factory=list)
    seed: int = 0

    def validate(self):
        problems = []
        H, W = self.frame_size
        w, h = self.object_size
        if self.num_frames < 1:
            problems.append(f"num_frames must be >= 1, got {self.num_frames}")
        if w < 2 or h < 2 or w > W or h > H:
            problems.append(f"object size {self.object_size} invalid for frame {self.frame_size}")
        if not (0.0 < self.illumination <= 1.0):
            problems.append(f"illumination must be in (0, 1], got {self.illumination}")
        if self.noise_sigma < 0:
            problems.append(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.jitter_sigma < 0:
            problems.append(f"jitter_sigma must be >= 0, got {self.jitter_sigma}")
        for a, b in self.occlusion_windows:
            if not (0 <= a <= b < self.num_frames):
                problems.append(f"occlusion window ({a}, {b}) outside sequence")
        if problems:
            raise SceneSpecError("; ".join(problems))


@dataclass
class Sequence:
    frames: list[np.ndarray]  # [3, H, W] float64 in [0, 1]
    gt_boxes: list[BoundingBox]
    occluded: list[bool]


def _trajectory(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-frame object centers [num_frames, 2] (x, y)."""
    H, W = spec.frame_size
    w, h = spec.object_size
    pts = spec.waypoints or [(W * 0.3, H * 0.3), (W * 0.7, H * 0.7)]
    if len(pts) == 1:
        pts = pts * 2
    pts = np.asarray(pts, dtype=np.float64)
    t = np.linspace(0, len(pts) - 1, spec.num_frames)
    i = np.minimum(t.astype(int), len(pts) - 2)
    frac = (t - i)[:, None]
    centers = pts[i] * (1 - frac) + pts[i + 1] * frac
    if spec.jitter_sigma > 0:
        centers = centers + rng.normal(0, spec.jitter_sigma, centers.shape)
    # keep the object at least half inside the frame
    centers[:, 0] = np.clip(centers[:, 0], w * 0.0 + 1, W - 1)
    centers[:, 1] = np.clip(centers[:, 1], h * 0.0 + 1, H - 1)
    return centers


def _rasterize(cx: float, cy: float, w: int, h: int, W: int, H: int):
    """Integer pixel extent of a w x h rectangle centered at (cx, cy),
    clipped to the frame.  Returns (x0, y0, x1, y1) with x1/y1 exclusive."""
    x0 = int(round(cx - w / 2.0))
    y0 = int(round(cy - h / 2.0))
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x0 + w, W), min(y0 + h, H)
    return x0, y0, x1, y1


def generate(spec: SceneSpec) -> Sequence:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    H, W = spec.frame_size
    ow, oh = spec.object_size
    centers = _trajectory(spec, rng)
    base_level = spec.illumination * 0.15
    color = np.asarray(spec.object_color)[:, None, None]

    occluded = [False] * spec.num_frames
    for a, b in spec.occlusion_windows:
        for t in range(a, b + 1):
            occluded[t] = True

    distractors = []
    for _ in range(spec.distractor_count):
        distractors.append(
            (
                rng.uniform(5, W - 5),
                rng.uniform(5, H - 5),
                int(rng.integers(max(2, ow // 2), ow + 1)),
                int(rng.integers(max(2, oh // 2), oh + 1)),
            )
        )

    frames, gt_boxes = [], []
    for t in range(spec.num_frames):
        frame = np.full((3, H, W), base_level)
        frame += rng.normal(0, spec.noise_sigma, frame.shape) if spec.noise_sigma > 0 else 0.0
        for dx, dy, dw, dh in distractors:
            x0, y0, x1, y1 = _rasterize(dx, dy, dw, dh, W, H)
            frame[:, y0:y1, x0:x1] = spec.distractor_intensity
        cx, cy = centers[t]
        x0, y0, x1, y1 = _rasterize(cx, cy, ow, oh, W, H)
        if occluded[t]:
            # object removed; a distractor-bright patch sits in its place
            frame[:, y0:y1, x0:x1] = spec.distractor_intensity
        else:
            frame[:, y0:y1, x0:x1] = (spec.object_intensity * color).reshape(3, 1, 1)
        np.clip(frame, 0.0, 1.0, out=frame)
        frames.append(frame)
        gt_boxes.append(BoundingBox(float(x0), float(y0), float(x1 - x0), float(y1 - y0)))
    return Sequence(frames, gt_boxes, occluded)
