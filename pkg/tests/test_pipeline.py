import numpy as np
import pytest

from matrack.boxes import BoundingBox
from matrack.config import ModelConfig
from matrack.model import MATrack
from matrack.pipeline import (AdamW, NumericalError, TrainConfig, Tracker,
                              crop_with_context, make_training_samples, train)
from matrack.synthgen import SceneSpec, generate
from matrack.tensor import Tensor


def tiny_sequence(seed=0, frames=6):
    return generate(SceneSpec(seed=seed, num_frames=frames))


class TestCropWithContext:
    def test_unit_scale_crop_copies_pixels(self):
        # box 16x16, factor 4 -> side 64 at out_size 64: scale 1, and with
        # an integer-aligned origin the bilinear sample is an exact copy
        frame = np.random.default_rng(0).uniform(0, 1, (3, 96, 96))
        box = BoundingBox(40.0, 30.0, 16.0, 16.0)
        crop, geom = crop_with_context(frame, box, 4.0, 64, "search")
        x0, y0 = int(geom.src_x), int(geom.src_y)
        assert geom.scale == 1.0
        assert np.array_equal(crop.pixels, frame[:, y0:y0 + 64, x0:x0 + 64])

    def test_out_of_frame_mean_fill(self):
        frame = np.full((3, 40, 40), 0.25)
        box = BoundingBox(0.0, 0.0, 16.0, 16.0)  # context reaches outside
        crop, _ = crop_with_context(frame, box, 4.0, 64, "search")
        assert np.allclose(crop.pixels, 0.25)

    def test_geometry_round_trip(self):
        frame = np.zeros((3, 96, 96))
        box = BoundingBox(30.0, 40.0, 14.0, 10.0)
        _, geom = crop_with_context(frame, box, 4.0, 64, "search")
        back = geom.to_image(geom.to_crop(box))
        assert back.x == pytest.approx(box.x) and back.w == pytest.approx(box.w)

    def test_minimum_side_floor(self):
        frame = np.zeros((3, 96, 96))
        box = BoundingBox(30.0, 40.0, 2.0, 2.0)
        crop, geom = crop_with_context(frame, box, 1.0, 64, "search")
        assert crop.pixels.shape == (3, 64, 64)
        assert geom.scale == 64.0 / 4.0  # side clamped to 4 px


class TestTracker:
    def test_init_rejects_out_of_frame_box(self):
        model = MATrack(ModelConfig.tiny(), seed=0)
        tracker = Tracker(model)
        frame = np.zeros((3, 96, 96))
        with pytest.raises(ValueError, match="outside"):
            tracker.init(frame, BoundingBox(90.0, 90.0, 20.0, 20.0))

    def test_track_before_init_rejected(self):
        tracker = Tracker(MATrack(ModelConfig.tiny(), seed=0))
        with pytest.raises(RuntimeError, match="init"):
            tracker.track_frame(np.zeros((3, 96, 96)))

    def test_dynamic_template_starts_as_static_copy(self):
        seq = tiny_sequence()
        tracker = Tracker(MATrack(ModelConfig.tiny(), seed=0))
        st = tracker.init(seq.frames[0], seq.gt_boxes[0])
        assert np.array_equal(st.static_template.pixels, st.dynamic_template.pixels)
        assert st.static_template.pixels is not st.dynamic_template.pixels

    def test_sequence_protocol(self):
        seq = tiny_sequence()
        tracker = Tracker(MATrack(ModelConfig.tiny(), seed=0))
        boxes = tracker.track_sequence(seq.frames, seq.gt_boxes[0])
        assert len(boxes) == len(seq.frames)
        assert boxes[0] == seq.gt_boxes[0]
        H, W = seq.frames[0].shape[1:]
        for b in boxes:
            assert b.x >= 0 and b.y >= 0 and b.x2 <= W and b.y2 <= H

    def test_static_template_immutable_and_history_grows(self):
        seq = tiny_sequence(frames=8)
        tracker = Tracker(MATrack(ModelConfig.tiny(), seed=0), ntc_enabled=True)
        tracker.init(seq.frames[0], seq.gt_boxes[0])
        frozen = tracker.state.static_template.pixels.tobytes()
        for t, frame in enumerate(seq.frames[1:], 1):
            tracker.track_frame(frame)
            assert tracker.state.static_template.pixels.tobytes() == frozen
            assert len(tracker.state.ntc_history) == t
        updates = sum(d.update for d in tracker.state.ntc_history)
        assert 0 <= updates <= len(seq.frames) - 1

    def test_ntc_disabled_keeps_dynamic_template(self):
        seq = tiny_sequence(frames=5)
        tracker = Tracker(MATrack(ModelConfig.tiny(), seed=0), ntc_enabled=False)
        tracker.init(seq.frames[0], seq.gt_boxes[0])
        frozen = tracker.state.dynamic_template.pixels.tobytes()
        for frame in seq.frames[1:]:
            tracker.track_frame(frame)
        assert tracker.state.dynamic_template.pixels.tobytes() == frozen
        assert tracker.state.ntc_history == []

    def test_tracking_deterministic(self):
        seq = tiny_sequence(frames=5)
        runs = []
        for _ in range(2):
            tracker = Tracker(MATrack(ModelConfig.tiny(), seed=0))
            runs.append(tracker.track_sequence(seq.frames, seq.gt_boxes[0]))
        assert runs[0] == runs[1]


class TestAdamW:
    def test_deduplicates_shared_parameters(self):
        p = Tensor(np.ones(3), requires_grad=True)
        opt = AdamW([p, p, p], lr=0.1)
        assert len(opt.params) == 1
        p.grad = np.ones(3)
        opt.step()
        # a single update, not three compounded ones
        assert np.allclose(p.data, 1.0 - 0.1 * (1.0 / (1.0 + opt.eps) + 1e-4))

    def test_zero_lr_is_noop(self):
        p = Tensor(np.arange(4.0), requires_grad=True)
        before = p.data.copy()
        opt = AdamW([p], lr=0.0)
        p.grad = np.ones(4)
        opt.step()
        assert np.array_equal(p.data, before)

    def test_none_grads_skipped(self):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = AdamW([p], lr=0.1)
        opt.step()
        assert np.array_equal(p.data, np.ones(2))


class TestTraining:
    def make_dataset(self, cfg, seed=0, frames=4):
        seq = tiny_sequence(seed=seed, frames=frames)
        rng = np.random.default_rng(seed)
        return make_training_samples(cfg, seq.frames, seq.gt_boxes, rng)

    def test_deterministic_bit_exact(self):
        cfg = ModelConfig.tiny()
        tc = TrainConfig(iterations=4, batch_size=2, seed=0)
        results = []
        for _ in range(2):
            model = MATrack(cfg, seed=0)
            curve = train(model, self.make_dataset(cfg), tc)
            state = {k: v.copy() for k, v in model.state_dict().items()}
            results.append((curve, state))
        assert results[0][0] == results[1][0]
        for k in results[0][1]:
            assert np.array_equal(results[0][1][k], results[1][1][k]), k

    def test_zero_lr_keeps_parameters(self):
        cfg = ModelConfig.tiny()
        model = MATrack(cfg, seed=0)
        before = {k: v.copy() for k, v in model.state_dict().items()}
        train(model, self.make_dataset(cfg),
              TrainConfig(lr=0.0, weight_decay=0.0, iterations=2, batch_size=2))
        for k, v in model.state_dict().items():
            if k.startswith("buffer:"):
                continue  # BN running stats move in train mode by design
            assert np.array_equal(v, before[k]), k

    def test_non_finite_input_trips_the_op_guard(self):
        from matrack.tensor import NonFiniteError
        cfg = ModelConfig.tiny()
        model = MATrack(cfg, seed=0)
        model.head.cls_proj.weight.data[:] = np.nan
        with pytest.raises(NonFiniteError, match="non-finite"):
            train(model, self.make_dataset(cfg), TrainConfig(iterations=1))

    def test_non_finite_loss_aborts_with_diagnostics(self, monkeypatch):
        import matrack.pipeline as pipeline
        cfg = ModelConfig.tiny()
        model = MATrack(cfg, seed=0)
        nan_loss = lambda *a, **kw: (Tensor(np.nan), np.nan, np.nan)
        monkeypatch.setattr(pipeline, "total_loss", nan_loss)
        with pytest.raises(NumericalError, match="iteration 0"):
            train(model, self.make_dataset(cfg), TrainConfig(iterations=1))

    def test_loss_curve_and_checkpoint_files(self, tmp_path):
        cfg = ModelConfig.tiny()
        model = MATrack(cfg, seed=0)
        curve_path = tmp_path / "curve.csv"
        ckpt_path = tmp_path / "model.ckpt"
        curve = train(model, self.make_dataset(cfg),
                      TrainConfig(iterations=3, batch_size=2),
                      checkpoint_path=str(ckpt_path), loss_curve_path=str(curve_path))
        assert len(curve) == 3
        lines = curve_path.read_text().strip().splitlines()
        assert lines[0] == "iteration,loss,ce,siou" and len(lines) == 4
        from matrack.backbone import load_state
        state = load_state(ckpt_path)
        assert set(state) == set(model.state_dict())

    def test_lr_decay_applied_once(self):
        cfg = ModelConfig.tiny()
        model = MATrack(cfg, seed=0)
        ds = self.make_dataset(cfg)
        # decay at iteration 1 with factor 0: iterations >= 1 are no-ops
        opt_probe = TrainConfig(lr=1e-3, weight_decay=0.0, iterations=1,
                                batch_size=1, seed=0)
        train(model, ds, opt_probe)
        after_one = {k: v.copy() for k, v in model.state_dict().items()}
        model2 = MATrack(cfg, seed=0)
        train(model2, ds, TrainConfig(lr=1e-3, weight_decay=0.0, iterations=3,
                                      batch_size=1, seed=0, decay_at=1,
                                      decay_factor=0.0))
        for k, v in model2.state_dict().items():
            if k.startswith("buffer:"):
                continue
            assert np.allclose(v, after_one[k], atol=1e-15), k


class TestTrainingSamples:
    def test_counts_and_occlusion_skip(self):
        cfg = ModelConfig.tiny()
        seq = generate(SceneSpec(seed=1, num_frames=8, occlusion_windows=[(2, 3)]))
        samples = make_training_samples(
            cfg, seq.frames, seq.gt_boxes, np.random.default_rng(0),
            samples_per_frame=2, occluded=seq.occluded,
        )
        assert len(samples) == (8 - 2) * 2

    def test_templates_come_from_frame_zero(self):
        cfg = ModelConfig.tiny()
        seq = tiny_sequence(frames=4)
        samples = make_training_samples(cfg, seq.frames, seq.gt_boxes,
                                        np.random.default_rng(0))
        first = samples[0].static.pixels
        for s in samples:
            assert np.array_equal(s.static.pixels, first)
            assert np.array_equal(s.dynamic.pixels, first)

    def test_gt_mostly_inside_crop(self):
        cfg = ModelConfig.tiny()
        seq = tiny_sequence(frames=6)
        samples = make_training_samples(cfg, seq.frames, seq.gt_boxes,
                                        np.random.default_rng(0))
        for s in samples:
            assert 0 <= s.gt_crop.cx <= cfg.search_size
            assert 0 <= s.gt_crop.cy <= cfg.search_size
