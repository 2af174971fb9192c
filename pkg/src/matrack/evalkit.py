"""One-pass evaluation harness: sequence I/O, metrics and reports.

Dataset layout: one directory per sequence holding numbered frame images
(PNG, or portable pixmap as fallback) plus groundtruth.txt with one
"x,y,w,h" line per frame and an optional occlusion.txt of 0/1 flags.

Metric definitions (pinned; stated in every report header):
  - precision curve: fraction of frames with center error <= t, for the
    51 thresholds t = 0..50 px; P reported at t = 20 px
  - normalized precision: center error components scaled by the gt box
    width/height before the Euclidean norm; 51 thresholds 0..0.5,
    reported at 0.2
  - success curve: fraction of frames with IoU >= t at the 21 thresholds
    t = 0..1 step 0.05; AUC is the unweighted mean of those 21 samples
    (not a trapezoid integral)
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import BoundingBox, cle, cle_normalized, iou
from .model import MATrack
from .pipeline import Tracker

REPORT_HEADER = (
    "# P: fraction of frames with center error <= 20 px.\n"
    "# P_Norm: center error scaled per-axis by gt box size, threshold 0.2.\n"
    "# AUC: mean of the success curve sampled at IoU thresholds 0:0.05:1.\n"
)

PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)  # 0..50 px
NORM_THRESHOLDS = np.arange(51, dtype=np.float64) / 100.0  # 0..0.5
SUCCESS_THRESHOLDS = np.arange(21, dtype=np.float64) / 20.0  # 0..1 step 0.05


class DataError(ValueError):
    """Raised for unreadable or inconsistent sequence data."""


# -- sequence I/O ------------------------------------------------------------


def save_sequence(directory: str | Path, frames, gt_boxes, occluded=None,
                  image_format: str = "png"):
    """Write frames + groundtruth in the on-disk layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        img = (np.clip(frame, 0, 1) * 255).round().astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(img).save(directory / f"{i:06d}.{image_format}")
    with open(directory / "groundtruth.txt", "w") as fh:
        for b in gt_boxes:
            fh.write(f"{b.x:.2f},{b.y:.2f},{b.w:.2f},{b.h:.2f}\n")
    if occluded is not None:
        with open(directory / "occlusion.txt", "w") as fh:
            for flag in occluded:
                fh.write(f"{int(flag)}\n")


def load_boxes(path: str | Path) -> list[BoundingBox]:
    boxes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                x, y, w, h = (float(v) for v in line.replace("\t", ",").split(","))
                boxes.append(BoundingBox(x, y, w, h))
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: bad box line {line!r}: {e}")
    return boxes


def save_boxes(path: str | Path, boxes):
    with open(path, "w") as fh:
        for b in boxes:
            fh.write(f"{b.x:.2f},{b.y:.2f},{b.w:.2f},{b.h:.2f}\n")


def load_sequence(directory: str | Path):
    """Returns (frames as [3,H,W] float64 arrays, gt boxes, occluded flags)."""
    directory = Path(directory)
    frame_files = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in (".png", ".ppm", ".pnm")
    )
    if not frame_files:
        raise DataError(f"{directory}: no frame images found")
    gt_path = directory / "groundtruth.txt"
    if not gt_path.exists():
        raise DataError(f"{directory}: missing groundtruth.txt")
    gt = load_boxes(gt_path)
    if len(gt) != len(frame_files):
        raise DataError(
            f"{directory}: {len(frame_files)} frames but {len(gt)} groundtruth lines"
        )
    frames = []
    for p in frame_files:
        img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
        frames.append(img.transpose(2, 0, 1))
    occluded = None
    occ_path = directory / "occlusion.txt"
    if occ_path.exists():
        occluded = [bool(int(line.strip())) for line in open(occ_path) if line.strip()]
    return frames, gt, occluded


# -- metrics -----------------------------------------------------------------


@dataclass
class MetricCurves:
    precision_curve: np.ndarray  # 51 points
    norm_precision_curve: np.ndarray  # 51 points
    success_curve: np.ndarray  # 21 points

    @property
    def precision(self) -> float:
        return float(self.precision_curve[20])  # CLE <= 20 px

    @property
    def norm_precision(self) -> float:
        return float(self.norm_precision_curve[20])  # normalized error <= 0.2

    @property
    def auc(self) -> float:
        return float(self.success_curve.mean())


def compute_metrics(preds, gts) -> MetricCurves:
    if len(preds) != len(gts):
        raise DataError(f"prediction count {len(preds)} != groundtruth count {len(gts)}")
    errs = np.array([cle(p, g) for p, g in zip(preds, gts)])
    nerrs = np.array([cle_normalized(p, g) for p, g in zip(preds, gts)])
    ious = np.array([iou(p, g) for p, g in zip(preds, gts)])
    return MetricCurves(
        precision_curve=(errs[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1),
        norm_precision_curve=(nerrs[None, :] <= NORM_THRESHOLDS[:, None]).mean(axis=1),
        success_curve=(ious[None, :] >= SUCCESS_THRESHOLDS[:, None]).mean(axis=1),
    )


# -- OPE protocol ------------------------------------------------------------


@dataclass
class SequenceReport:
    name: str
    frames: int
    metrics: MetricCurves
    mean_s_c: float
    update_count: int


@dataclass
class OpeReport:
    sequences: list[SequenceReport]
    skipped: list[tuple[str, str]]  # (sequence name, reason)

    def aggregate(self) -> dict[str, float]:
        if not self.sequences:
            return {"P": 0.0, "P_Norm": 0.0, "AUC": 0.0}
        return {
            "P": float(np.mean([s.metrics.precision for s in self.sequences])),
            "P_Norm": float(np.mean([s.metrics.norm_precision for s in self.sequences])),
            "AUC": float(np.mean([s.metrics.auc for s in self.sequences])),
        }


def _run_one(model: MATrack, seq_dir: Path, results_dir: Path | None) -> SequenceReport:
    frames, gt, _ = load_sequence(seq_dir)
    tracker = Tracker(model)
    preds = tracker.track_sequence(frames, gt[0])
    if results_dir is not None:
        results_dir.mkdir(parents=True, exist_ok=True)
        save_boxes(results_dir / f"{seq_dir.name}.txt", preds)
    history = tracker.state.ntc_history
    return SequenceReport(
        name=seq_dir.name,
        frames=len(frames),
        metrics=compute_metrics(preds, gt),
        mean_s_c=float(np.mean([d.s_c for d in history])) if history else 0.0,
        update_count=sum(d.update for d in history),
    )


def run_ope(model: MATrack, dataset_dir: str | Path, results_dir: str | Path | None = None,
            threads: int = 1, tracker_factory=None) -> OpeReport:
    """Track every sequence in dataset_dir from its frame-0 groundtruth.

    Unreadable sequences are skipped with a recorded reason.  The model
    checkpoint is shared read-only; with threads > 1 sequences run in
    parallel and the aggregate is identical to the sequential run.
    """
    dataset_dir = Path(dataset_dir)
    results_dir = Path(results_dir) if results_dir is not None else None
    seq_dirs = sorted(p for p in dataset_dir.iterdir() if p.is_dir())
    if not seq_dirs:
        raise DataError(f"{dataset_dir}: no sequence directories")
    runner = tracker_factory or _run_one
    reports, skipped = {}, []

    def work(seq_dir: Path):
        return seq_dir.name, runner(model, seq_dir, results_dir)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(work, d) for d in seq_dirs]
            for d, fut in zip(seq_dirs, futures):
                try:
                    name, report = fut.result()
                    reports[name] = report
                except DataError as e:
                    skipped.append((d.name, str(e)))
    else:
        for d in seq_dirs:
            try:
                name, report = work(d)
                reports[name] = report
            except DataError as e:
                skipped.append((d.name, str(e)))
    ordered = [reports[d.name] for d in seq_dirs if d.name in reports]
    return OpeReport(ordered, skipped)


def write_summary_csv(report: OpeReport, path: str | Path):
    with open(path, "w", newline="") as fh:
        fh.write(REPORT_HEADER)
        writer = csv.writer(fh)
        writer.writerow(["sequence", "frames", "P", "P_Norm", "AUC", "mean_s_c", "update_count"])
        for s in report.sequences:
            writer.writerow(
                [s.name, s.frames, f"{s.metrics.precision:.4f}",
                 f"{s.metrics.norm_precision:.4f}", f"{s.metrics.auc:.4f}",
                 f"{s.mean_s_c:.4f}", s.update_count]
            )
        agg = report.aggregate()
        writer.writerow(
            ["AGGREGATE", sum(s.frames for s in report.sequences),
             f"{agg['P']:.4f}", f"{agg['P_Norm']:.4f}", f"{agg['AUC']:.4f}", "", ""]
        )
        for name, reason in report.skipped:
            writer.writerow([f"SKIPPED:{name}", "", "", "", "", "", reason])


def plot_curves(report: OpeReport, path: str | Path):
    """Render aggregate precision and success plots (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    prec = np.mean([s.metrics.precision_curve for s in report.sequences], axis=0)
    succ = np.mean([s.metrics.success_curve for s in report.sequences], axis=0)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.plot(PRECISION_THRESHOLDS, prec)
    ax1.set_xlabel("center error threshold (px)")
    ax1.set_ylabel("precision")
    ax1.set_ylim(0, 1.05)
    ax2.plot(SUCCESS_THRESHOLDS, succ)
    ax2.set_xlabel("IoU threshold")
    ax2.set_ylabel("success rate")
    ax2.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
