import numpy as np
import pytest

from matrack.synthgen import SceneSpec, SceneSpecError, generate


class TestValidation:
    def test_collects_all_violations(self):
        spec = SceneSpec(num_frames=0, noise_sigma=-1.0, illumination=0.0)
        with pytest.raises(SceneSpecError) as exc:
            spec.validate()
        msg = str(exc.value)
        assert "num_frames" in msg and "noise_sigma" in msg and "illumination" in msg

    def test_occlusion_window_bounds(self):
        with pytest.raises(SceneSpecError, match="occlusion window"):
            generate(SceneSpec(num_frames=5, occlusion_windows=[(3, 7)]))

    def test_object_larger_than_frame_rejected(self):
        with pytest.raises(SceneSpecError, match="object size"):
            generate(SceneSpec(object_size=(200, 14)))


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        spec = SceneSpec(seed=7, jitter_sigma=0.5, distractor_count=2)
        a, b = generate(spec), generate(spec)
        assert a.gt_boxes == b.gt_boxes
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa, fb)

    def test_different_seed_differs(self):
        a = generate(SceneSpec(seed=0))
        b = generate(SceneSpec(seed=1))
        assert not np.array_equal(a.frames[0], b.frames[0])


class TestRendering:
    def test_gt_matches_rendered_mask_exactly(self):
        # the object is the only region at full object color; its bounding
        # rectangle must equal the reported gt box on every frame
        spec = SceneSpec(seed=3, noise_sigma=0.02)
        seq = generate(spec)
        color = np.asarray(spec.object_color) * spec.object_intensity
        for frame, gt in zip(seq.frames, seq.gt_boxes):
            mask = np.all(
                np.abs(frame - color[:, None, None]) < 1e-12, axis=0
            )
            ys, xs = np.nonzero(mask)
            assert (float(xs.min()), float(ys.min())) == (gt.x, gt.y)
            assert (float(xs.max() + 1 - xs.min()), float(ys.max() + 1 - ys.min())) == (gt.w, gt.h)

    def test_static_object_constant_frames(self):
        spec = SceneSpec(seed=0, noise_sigma=0.0, waypoints=[(48.0, 48.0)])
        seq = generate(spec)
        for frame in seq.frames[1:]:
            assert np.array_equal(frame, seq.frames[0])
        assert all(b == seq.gt_boxes[0] for b in seq.gt_boxes)

    def test_occlusion_removes_object_pixels(self):
        spec = SceneSpec(seed=2, occlusion_windows=[(3, 5)])
        seq = generate(spec)
        color = np.asarray(spec.object_color) * spec.object_intensity
        for t in range(spec.num_frames):
            has_object = np.any(
                np.all(np.abs(seq.frames[t] - color[:, None, None]) < 1e-12, axis=0)
            )
            assert seq.occluded[t] == (3 <= t <= 5)
            assert has_object != seq.occluded[t]

    def test_object_size_matches_spec_away_from_borders(self):
        spec = SceneSpec(seed=0, object_size=(12, 9),
                         waypoints=[(40.0, 40.0), (60.0, 55.0)])
        seq = generate(spec)
        for gt in seq.gt_boxes:
            assert (gt.w, gt.h) == (12.0, 9.0)

    def test_mean_intensity_monotone_in_illumination(self):
        means = [
            np.mean([f.mean() for f in generate(SceneSpec(seed=0, illumination=v)).frames])
            for v in (0.2, 0.5, 1.0)
        ]
        assert means[0] < means[1] < means[2]

    def test_boxes_stay_inside_frame(self):
        spec = SceneSpec(seed=4, waypoints=[(2.0, 2.0), (94.0, 94.0)], jitter_sigma=2.0)
        seq = generate(spec)
        H, W = spec.frame_size
        for gt in seq.gt_boxes:
            assert gt.x >= 0 and gt.y >= 0 and gt.x2 <= W and gt.y2 <= H

    def test_pixel_range(self):
        seq = generate(SceneSpec(seed=5, noise_sigma=0.2))
        for frame in seq.frames:
            assert frame.min() >= 0.0 and frame.max() <= 1.0

    def test_distractors_present(self):
        spec = SceneSpec(seed=6, noise_sigma=0.0, distractor_count=3)
        seq = generate(spec)
        frame = seq.frames[0]
        base = spec.illumination * 0.15
        distractor_pixels = np.all(
            np.abs(frame - spec.distractor_intensity) < 1e-12, axis=0
        )
        assert distractor_pixels.any()
        assert np.abs(frame[0] - base).min() < 1e-12  # background still visible
