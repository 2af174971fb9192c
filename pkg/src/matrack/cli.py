"""Command line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import sys
import time
from pathlib import Path

import click
import numpy as np

from .backbone import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ModelConfig, parse_config_file
from .evalkit import (DataError, compute_metrics, load_boxes, load_sequence,
                      run_ope, save_boxes, save_sequence, write_summary_csv,
                      REPORT_HEADER)
from .model import MATrack
from .pipeline import (NumericalError, TrainConfig, Tracker,
                       make_training_samples, train)
from .synthgen import SceneSpec, SceneSpecError, generate
from .tensor import NonFiniteError


def build_config(config_path: str | None, tiny: bool = False) -> ModelConfig:
    overrides = parse_config_file(config_path) if config_path else {}
    return ModelConfig.tiny(**overrides) if tiny else ModelConfig(**overrides)


def build_model(config: ModelConfig, checkpoint: str | None, seed: int) -> MATrack:
    model = MATrack(config, seed=seed)
    if checkpoint:
        load_checkpoint(model, checkpoint)
    model.eval()
    return model


@click.group()
def cli():
    """Desk-scale nighttime UAV tracker."""


config_opt = click.option("--config", "config_path", type=click.Path(exists=True),
                          default=None, help="Plain-text key=value model config file.")
tiny_opt = click.option("--tiny", is_flag=True, help="Start from the small test configuration.")
seed_opt = click.option("--seed", type=int, default=0, show_default=True)
ckpt_opt = click.option("--checkpoint", type=click.Path(exists=True), default=None,
                        help="Model checkpoint; omit for a seed-initialized model.")


@cli.command()
@click.argument("sequence_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--output", type=click.Path(), required=True,
              help="Destination file for predicted boxes, one x,y,w,h per line.")
@click.option("--diagnostics", type=click.Path(), default=None,
              help="Append per-frame calibration decisions to this file.")
@click.option("--no-ntc", is_flag=True, help="Disable dynamic template updates.")
@config_opt
@tiny_opt
@seed_opt
@ckpt_opt
def run(sequence_dir, output, diagnostics, no_ntc, config_path, tiny, seed, checkpoint):
    """Track one sequence from its frame-0 groundtruth."""
    model = build_model(build_config(config_path, tiny), checkpoint, seed)
    frames, gt, _ = load_sequence(sequence_dir)
    tracker = Tracker(model, ntc_enabled=not no_ntc)
    boxes = tracker.track_sequence(frames, gt[0])
    save_boxes(output, boxes)
    if diagnostics:
        with open(diagnostics, "a") as fh:
            for i, d in enumerate(tracker.state.ntc_history, 1):
                fh.write(f"{i} {d.s_c:.6f} {int(d.update)}\n")
    click.echo(f"tracked {len(frames)} frames -> {output}")


@cli.command("eval")
@click.argument("results_file", type=click.Path(exists=True, dir_okay=False))
@click.argument("groundtruth_file", type=click.Path(exists=True, dir_okay=False))
def eval_cmd(results_file, groundtruth_file):
    """Metrics for a results file against a groundtruth file."""
    m = compute_metrics(load_boxes(results_file), load_boxes(groundtruth_file))
    click.echo(REPORT_HEADER, nl=False)
    click.echo(f"P {m.precision:.4f}  P_Norm {m.norm_precision:.4f}  AUC {m.auc:.4f}")


@cli.command()
@click.argument("dataset_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--results-dir", type=click.Path(), default=None)
@click.option("--summary", type=click.Path(), default=None, help="Summary CSV path.")
@click.option("--threads", type=int, default=1, show_default=True)
@config_opt
@tiny_opt
@seed_opt
@ckpt_opt
def ope(dataset_dir, results_dir, summary, threads, config_path, tiny, seed, checkpoint):
    """One-pass evaluation over every sequence in a dataset directory."""
    model = build_model(build_config(config_path, tiny), checkpoint, seed)
    report = run_ope(model, dataset_dir, results_dir=results_dir, threads=threads)
    agg = report.aggregate()
    for s in report.sequences:
        click.echo(f"{s.name}: P {s.metrics.precision:.4f} "
                   f"P_Norm {s.metrics.norm_precision:.4f} AUC {s.metrics.auc:.4f}")
    for name, reason in report.skipped:
        click.echo(f"skipped {name}: {reason}", err=True)
    click.echo(f"AGGREGATE: P {agg['P']:.4f} P_Norm {agg['P_Norm']:.4f} AUC {agg['AUC']:.4f}")
    if summary:
        write_summary_csv(report, summary)


@cli.command("train")
@click.argument("dataset_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--iterations", type=int, default=200, show_default=True)
@click.option("--batch-size", type=int, default=2, show_default=True)
@click.option("--lr", type=float, default=1e-4, show_default=True)
@click.option("--checkpoint-out", type=click.Path(), required=True)
@click.option("--loss-curve", type=click.Path(), default=None)
@config_opt
@tiny_opt
@seed_opt
@ckpt_opt
def train_cmd(dataset_dir, iterations, batch_size, lr, checkpoint_out, loss_curve,
              config_path, tiny, seed, checkpoint):
    """Train on every sequence found under a dataset directory."""
    cfg = build_config(config_path, tiny)
    model = build_model(cfg, checkpoint, seed)
    rng = np.random.default_rng(seed)
    samples = []
    for seq_dir in sorted(p for p in Path(dataset_dir).iterdir() if p.is_dir()):
        frames, gt, occluded = load_sequence(seq_dir)
        samples.extend(make_training_samples(cfg, frames, gt, rng, occluded=occluded))
    if not samples:
        raise DataError(f"{dataset_dir}: no training sequences found")
    tc = TrainConfig(lr=lr, batch_size=batch_size, iterations=iterations, seed=seed)
    curve = train(model, samples, tc, checkpoint_path=checkpoint_out,
                  loss_curve_path=loss_curve)
    click.echo(f"trained {iterations} iterations on {len(samples)} samples; "
               f"final loss {curve[-1][1]:.4f} -> {checkpoint_out}")


@cli.command()
@click.argument("out_dir", type=click.Path())
@click.option("--frames", type=int, default=30, show_default=True)
@click.option("--distractors", type=int, default=0, show_default=True)
@click.option("--occlude", type=str, default=None, metavar="A:B",
              help="Occlude the object on frames A..B inclusive.")
@seed_opt
def synth(out_dir, frames, distractors, occlude, seed):
    """Generate a synthetic nighttime sequence in the dataset layout."""
    windows = []
    if occlude:
        try:
            a, b = (int(v) for v in occlude.split(":"))
        except ValueError:
            raise click.UsageError(f"--occlude expects A:B, got {occlude!r}")
        windows.append((a, b))
    spec = SceneSpec(num_frames=frames, distractor_count=distractors,
                     occlusion_windows=windows, seed=seed)
    seq = generate(spec)
    save_sequence(out_dir, seq.frames, seq.gt_boxes, seq.occluded)
    click.echo(f"wrote {frames} frames to {out_dir}")


@cli.command()
def selftest():
    """Quick invariant checks (a fast subset of the test suite)."""
    from .aktg import attention_correction
    from .boxes import BoundingBox, siou_reference
    from .gradcheck import max_rel_error, numerical_grad
    from .losses import siou_loss
    from .nn import Linear
    from .tensor import Tensor

    rng = np.random.default_rng(0)
    failures = 0

    def check(name, ok):
        nonlocal failures
        click.echo(f"  {name}: {'ok' if ok else 'FAIL'}")
        failures += 0 if ok else 1

    lin = Linear(6, 4, rng)
    x = Tensor(rng.standard_normal((5, 6)))
    loss = lambda: lin(x).sum()
    loss().backward()
    check("linear gradient", max_rel_error(lin.weight.grad,
                                           numerical_grad(loss, lin.weight)) < 1e-5)

    a = rng.uniform(size=(4, 6))
    a /= a.sum(axis=1, keepdims=True)
    m = rng.uniform(size=6)
    v = rng.standard_normal((6, 3))
    got = attention_correction(Tensor(a), Tensor(m), Tensor(v)).data
    check("attention correction", np.max(np.abs(got - (a * (1 + m)) @ v)) < 1e-12)

    b = BoundingBox(10.0, 12.0, 30.0, 20.0)
    check("siou identity", abs(siou_reference(b, b)) < 1e-12)
    t = float(siou_loss(Tensor(b.cx), Tensor(b.cy), Tensor(b.w + 5.0),
                        Tensor(b.h), b).data)
    check("siou graph/reference",
          abs(t - siou_reference(BoundingBox(b.x - 2.5, b.y, b.w + 5.0, b.h), b)) < 1e-9)

    if failures:
        raise NumericalError(f"{failures} selftest check(s) failed")
    click.echo("all selftest checks passed")


@cli.command()
@click.option("--frames", type=int, default=3, show_default=True,
              help="Frames to time per configuration.")
@seed_opt
def bench(frames, seed):
    """Report backbone tokens/sec and end-to-end frames/sec."""
    for label, cfg in (("tiny", ModelConfig.tiny()), ("default", ModelConfig())):
        model = MATrack(cfg, seed=seed)
        model.eval()
        spec = SceneSpec(frame_size=(cfg.search_size, cfg.search_size),
                         num_frames=frames + 1, seed=seed)
        seq = generate(spec)
        tracker = Tracker(model)
        tracker.init(seq.frames[0], seq.gt_boxes[0])
        tracker.track_frame(seq.frames[1])  # warm up buffers
        t0 = time.perf_counter()
        for f in seq.frames[1:]:
            tracker.track_frame(f)
        dt = time.perf_counter() - t0
        fps = frames / dt
        tokens_per_sec = fps * cfg.total_tokens * cfg.depth
        click.echo(f"{label:8s} {fps:8.2f} frames/sec  "
                   f"{tokens_per_sec:12.0f} block-tokens/sec  "
                   f"({cfg.total_tokens} tokens x depth {cfg.depth})")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as e:
        return 0 if e.exit_code == 0 else 1
    except (click.UsageError, ConfigError, SceneSpecError) as e:
        click.echo(f"usage error: {e}", err=True)
        return 1
    except (DataError, CheckpointError, OSError) as e:
        click.echo(f"data error: {e}", err=True)
        return 2
    except (NumericalError, NonFiniteError) as e:
        click.echo(f"numerical failure: {e}", err=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
