"""Synthetic world generation, observation model, and dataset persistence."""

import json

import numpy as np
import pytest

from voxloc.containers import FormatError
from voxloc.geometry import project
from voxloc.synthworld import (ReferenceDataset, WorldConfig,
                               build_dataset, dataset_from_bytes,
                               dataset_to_bytes, generate_dataset,
                               generate_world, load_dataset, observe,
                               save_dataset, write_manifest)

SMALL = dict(num_points=150, num_ref_views=12, num_query_views=3, seed=7)


def small_config(**over):
    return WorldConfig(**{**SMALL, **over})


class TestWorldGeneration:
    def test_deterministic_per_seed(self):
        a = generate_world(small_config())
        b = generate_world(small_config())
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.descriptors, b.descriptors)
        for pa, pb in zip(a.ref_poses, b.ref_poses):
            np.testing.assert_array_equal(pa.rotation, pb.rotation)
        c = generate_world(small_config(seed=8))
        assert not np.array_equal(a.points, c.points)

    def test_points_inside_extent(self):
        cfg = small_config()
        w = generate_world(cfg)
        half = np.asarray(cfg.extent) / 2.0
        assert np.all(np.abs(w.points) <= half)

    def test_descriptors_unit_norm(self):
        w = generate_world(small_config())
        np.testing.assert_allclose(np.linalg.norm(w.descriptors, axis=1), 1.0,
                                   atol=1e-12)

    def test_queries_keep_baseline_from_references(self):
        cfg = small_config()
        w = generate_world(cfg)
        refs = np.array([p.center for p in w.ref_poses])
        for q in w.query_poses:
            dists = np.linalg.norm(refs - q.center, axis=1)
            assert dists.min() >= cfg.min_query_baseline

    def test_config_validation(self):
        with pytest.raises(ValueError):
            WorldConfig(num_points=0)
        with pytest.raises(ValueError):
            WorldConfig(extent=(1.0, -1.0, 1.0))
        with pytest.raises(ValueError):
            WorldConfig(pixel_noise_sigma=-0.1)


class TestObservation:
    def test_noiseless_pixels_match_projection(self):
        cfg = small_config(pixel_noise_sigma=0.0, descriptor_noise_sigma=0.0,
                           illumination_shift_sigma=0.0)
        w = generate_world(cfg)
        pose = w.ref_poses[0]
        view = observe(pose, w, cfg, np.random.default_rng(0))
        assert view.num_keypoints > 0
        for pix, pid in zip(view.pixels[:25], view.point_ids[:25]):
            ref = project(pose, w.intrinsics, w.points[pid])
            np.testing.assert_allclose(pix, ref, atol=1e-9)

    def test_visibility_respects_frustum_margin(self):
        cfg = small_config()
        w = generate_world(cfg)
        view = observe(w.ref_poses[0], w, cfg, np.random.default_rng(0))
        z = w.points[view.point_ids] @ w.ref_poses[0].rotation.T \
            + w.ref_poses[0].translation
        assert np.all(z[:, 2] >= cfg.min_depth)
        assert np.all(z[:, 2] <= cfg.max_depth)

    def test_observed_descriptors_unit_norm(self):
        cfg = small_config()
        w = generate_world(cfg)
        view = observe(w.ref_poses[0], w, cfg, np.random.default_rng(0))
        np.testing.assert_allclose(np.linalg.norm(view.descriptors, axis=1),
                                   1.0, atol=1e-12)

    def test_query_views_hide_pose(self):
        ds = generate_dataset(small_config())
        assert all(v.pose is None for v in ds.query_views)
        assert all(v.pose is not None for v in ds.views)


class TestTriangulatedPoints:
    def test_noiseless_triangulation_recovers_truth(self):
        cfg = small_config(pixel_noise_sigma=0.0)
        w = generate_world(cfg)
        ds = build_dataset(w, cfg)
        errs = [np.linalg.norm(p.position - w.points[pid])
                for pid, p in ds.points.items() if p.valid]
        assert len(errs) > 50
        assert max(errs) < 1e-6

    def test_noisy_triangulation_reasonable(self):
        cfg = small_config()
        w = generate_world(cfg)
        ds = build_dataset(w, cfg)
        errs = np.array([np.linalg.norm(p.position - w.points[pid])
                         for pid, p in ds.points.items() if p.valid])
        assert np.median(errs) < 0.05

    def test_single_view_tracks_invalid(self):
        ds = generate_dataset(small_config())
        seen = {}
        for v in ds.views:
            for pid in v.point_ids:
                seen[int(pid)] = seen.get(int(pid), 0) + 1
        for pid, p in ds.points.items():
            if seen.get(pid, 0) < 2:
                assert not p.valid


class TestDatasetPersistence:
    def test_roundtrip_byte_identical(self):
        ds = generate_dataset(small_config())
        blob = dataset_to_bytes(ds)
        assert dataset_to_bytes(dataset_from_bytes(blob)) == blob

    def test_roundtrip_preserves_content(self, tmp_path):
        ds = generate_dataset(small_config())
        path = tmp_path / "ds.bin"
        save_dataset(ds, path)
        loaded = load_dataset(path)
        assert loaded.config == ds.config
        assert len(loaded.views) == len(ds.views)
        np.testing.assert_array_equal(loaded.views[3].pixels,
                                      ds.views[3].pixels)
        np.testing.assert_array_equal(loaded.views[3].descriptors,
                                      ds.views[3].descriptors)
        gt_a, gt_b = ds.evaluation_ground_truth(), \
            loaded.evaluation_ground_truth()
        np.testing.assert_array_equal(gt_a.point_positions,
                                      gt_b.point_positions)
        for pa, pb in zip(gt_a.query_poses, gt_b.query_poses):
            np.testing.assert_array_equal(pa.rotation, pb.rotation)
            np.testing.assert_array_equal(pa.translation, pb.translation)

    def test_bad_magic(self):
        blob = bytearray(dataset_to_bytes(generate_dataset(small_config())))
        blob[:4] = b"QQQQ"
        with pytest.raises(FormatError):
            dataset_from_bytes(bytes(blob))

    def test_truncated(self):
        blob = dataset_to_bytes(generate_dataset(small_config()))
        with pytest.raises(FormatError):
            dataset_from_bytes(blob[: len(blob) // 2])

    def test_manifest(self, tmp_path):
        ds = generate_dataset(small_config())
        path = tmp_path / "manifest.json"
        write_manifest(ds, path)
        manifest = json.loads(path.read_text())
        assert manifest["num_reference_views"] == 12
        assert manifest["num_query_views"] == 3
        assert manifest["num_points"] == 150
        assert manifest["config"]["seed"] == 7
