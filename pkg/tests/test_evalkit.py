"""Chamfer, end-point error, surface sampling, and report output."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import ndgraph.evalkit as ev
import ndgraph.meshing as ms
from ndgraph.synthgen import GroundTruthMotion


def random_cloud(rng, n, scale=1.0, offset=0.0):
    return rng.normal(size=(n, 3)) * scale + offset


class TestNearestSquared:
    def test_matches_brute_force(self, rng):
        q = random_cloud(rng, 300)
        p = random_cloud(rng, 400)
        brute = np.min(np.sum((q[:, None] - p[None]) ** 2, axis=-1), axis=1)
        np.testing.assert_allclose(ev.nearest_squared(q, p), brute,
                                   rtol=1e-12, atol=0)

    def test_zero_for_coincident_points(self, rng):
        p = random_cloud(rng, 50)
        assert np.all(ev.nearest_squared(p, p) == 0.0)

    def test_far_queries_fall_back_exactly(self, rng):
        # queries land in empty hash cells, forcing the escalation scan
        p = random_cloud(rng, 200, scale=0.01)
        q = random_cloud(rng, 40, scale=0.01, offset=25.0)
        brute = np.min(np.sum((q[:, None] - p[None]) ** 2, axis=-1), axis=1)
        np.testing.assert_allclose(ev.nearest_squared(q, p), brute,
                                   rtol=1e-12, atol=0)

    def test_identical_points_collapse_to_one_cell(self):
        p = np.zeros((20, 3))
        q = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 2.0]])
        np.testing.assert_allclose(ev.nearest_squared(q, p), [0.0, 9.0],
                                   rtol=1e-12, atol=0)


class TestChamfer:
    def test_identical_sets_score_zero(self, rng):
        a = random_cloud(rng, 100)
        assert ev.chamfer_l2(a, a.copy()) == 0.0

    def test_single_point_worked_example(self):
        a = np.array([[0.0, 0.0, 0.0]])
        b = np.array([[0.1, 0.0, 0.0]])
        assert ev.chamfer_l2(a, b) == pytest.approx(0.01, rel=1e-12)

    def test_symmetric(self, rng):
        a = random_cloud(rng, 120)
        b = random_cloud(rng, 80)
        assert ev.chamfer_l2(a, b) == ev.chamfer_l2(b, a)

    def test_agrees_with_brute_oracle(self, rng):
        a = random_cloud(rng, 500)
        b = random_cloud(rng, 500)
        fast = ev.chamfer_l2(a, b)
        slow = ev.chamfer_l2_brute(a, b)
        assert fast == pytest.approx(slow, rel=1e-12)

    def test_agrees_on_separated_clusters(self, rng):
        a = np.concatenate([random_cloud(rng, 60, scale=0.02),
                            random_cloud(rng, 60, scale=0.02, offset=5.0)])
        b = random_cloud(rng, 70, scale=0.02, offset=2.5)
        assert ev.chamfer_l2(a, b) == pytest.approx(
            ev.chamfer_l2_brute(a, b), rel=1e-12)

    def test_rigid_motion_invariant(self, rng):
        a = random_cloud(rng, 90)
        b = random_cloud(rng, 110)
        theta = 0.83
        rot = np.array([[np.cos(theta), -np.sin(theta), 0.0],
                        [np.sin(theta), np.cos(theta), 0.0],
                        [0.0, 0.0, 1.0]])
        t = np.array([0.3, -1.2, 0.7])
        moved = ev.chamfer_l2(a @ rot.T + t, b @ rot.T + t)
        assert moved == pytest.approx(ev.chamfer_l2(a, b), rel=1e-9)

    def test_quadratic_in_scale(self, rng):
        a = random_cloud(rng, 60)
        b = random_cloud(rng, 60)
        assert ev.chamfer_l2(2 * a, 2 * b) == pytest.approx(
            4 * ev.chamfer_l2(a, b), rel=1e-12)

    def test_empty_set_rejected(self):
        good = np.zeros((3, 3))
        with pytest.raises(ev.EvalError):
            ev.chamfer_l2(np.zeros((0, 3)), good)
        with pytest.raises(ev.EvalError):
            ev.chamfer_l2(good, np.zeros((0, 3)))

    def test_bad_shape_rejected(self):
        with pytest.raises(ev.EvalError):
            ev.chamfer_l2(np.zeros((4, 2)), np.zeros((4, 3)))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_random_sets_match_oracle(self, seed):
        gen = np.random.default_rng(seed)
        a = gen.normal(size=(gen.integers(1, 80), 3)) * gen.uniform(0.01, 10)
        b = gen.normal(size=(gen.integers(1, 80), 3)) * gen.uniform(0.01, 10)
        assert ev.chamfer_l2(a, b) == pytest.approx(
            ev.chamfer_l2_brute(a, b), rel=1e-12)


class TestSampleMeshSurface:
    def tetra(self):
        verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
        tris = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
        return ms.TriangleMesh(verts, tris)

    def test_samples_lie_on_surface(self):
        mesh = self.tetra()
        pts = ev.sample_mesh_surface(mesh, 500, seed=3)
        corners = np.concatenate([
            ev.sample_mesh_surface(mesh, 2000, seed=4), mesh.vertices])
        assert np.sqrt(ev.nearest_squared(pts, corners)).max() < 0.1
        on_face = (np.abs(pts.min(axis=1)) < 1e-12) | (
            np.abs(pts.sum(axis=1) - 1) < 1e-12)
        assert on_face.all()

    def test_area_weighting(self):
        # second triangle has 8x the area of the first
        verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0],
                          [10, 0, 0], [14, 0, 0], [10, 2, 0]])
        mesh = ms.TriangleMesh(verts, np.array([[0, 1, 2], [3, 4, 5]]))
        pts = ev.sample_mesh_surface(mesh, 4000, seed=0)
        big = (pts[:, 0] > 5).mean()
        assert abs(big - 8 / 9) < 0.02

    def test_deterministic_per_seed(self):
        mesh = self.tetra()
        a = ev.sample_mesh_surface(mesh, 64, seed=9)
        b = ev.sample_mesh_surface(mesh, 64, seed=9)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, ev.sample_mesh_surface(mesh, 64, seed=10))

    def test_empty_mesh_rejected(self):
        empty = ms.TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
        with pytest.raises(ev.EvalError):
            ev.sample_mesh_surface(empty, 10)


def drifting_motion(frames=4, keyframes=(0, 2), points=5, step=0.1):
    """Points glide +step in x per frame; trajectories carry every frame."""
    rng = np.random.default_rng(11)
    base = rng.uniform(size=(len(keyframes), points, 3))
    t = np.arange(frames, dtype=np.float64)
    traj = np.zeros((len(keyframes), points, frames, 3))
    for j, k in enumerate(keyframes):
        traj[j] = base[j][:, None, :] + np.stack(
            [(t - k) * step, 0 * t, 0 * t], axis=-1)
    return GroundTruthMotion(np.array(keyframes), traj)


class TestEpe3d:
    def test_identity_warp_on_uniform_drift(self):
        gt = drifting_motion(frames=2, keyframes=(0,), step=0.1)
        err = ev.epe3d(lambda k, t, pts: pts, gt)
        assert err == pytest.approx(0.1, rel=1e-12)

    def test_perfect_warp_scores_zero(self):
        gt = drifting_motion()

        def warp(k, t, pts):
            return pts + np.array([(t - k) * 0.1, 0.0, 0.0])

        assert ev.epe3d(warp, gt) == pytest.approx(0.0, abs=1e-15)

    def test_pair_enumeration(self):
        gt = drifting_motion(frames=3, keyframes=(0, 1))
        pairs = ev.epe3d_pairs(lambda k, t, pts: pts, gt)
        assert [(k, t) for k, t, _ in pairs] == [(0, 1), (0, 2),
                                                 (1, 0), (1, 2)]

    def test_mean_over_pairs(self):
        gt = drifting_motion(frames=3, keyframes=(0,), step=0.1)
        # identity warp errors: frame 1 -> 0.1, frame 2 -> 0.2
        assert ev.epe3d(lambda k, t, pts: pts, gt) == pytest.approx(
            0.15, rel=1e-12)

    def test_bad_warp_shape_rejected(self):
        gt = drifting_motion()
        with pytest.raises(ev.EvalError):
            ev.epe3d(lambda k, t, pts: pts[:-1], gt)


class TestCorrespondenceColors:
    def unit_mesh(self):
        verts = np.array([[0.0, 0, 0], [1, 1, 1], [0.5, 0.25, 0.75]])
        return ms.TriangleMesh(verts, np.array([[0, 1, 2]]))

    def test_identity_warp_maps_bbox_to_rgb(self):
        mesh = self.unit_mesh()
        out = ev.correspondence_colors(
            mesh, (0, 0, 0), (1, 1, 1),
            lambda pts: (pts, np.ones(len(pts), dtype=bool)))
        expected = np.round(255 * mesh.vertices).astype(np.uint8)
        assert np.array_equal(out.colors, expected)
        assert np.array_equal(out.colors[0], [0, 0, 0])
        assert np.array_equal(out.colors[1], [255, 255, 255])

    def test_unsupported_vertices_go_gray(self):
        mesh = self.unit_mesh()
        mask = np.array([True, False, True])
        out = ev.correspondence_colors(
            mesh, (0, 0, 0), (1, 1, 1), lambda pts: (pts, mask))
        assert np.array_equal(out.colors[1], [128, 128, 128])
        assert np.array_equal(out.colors[0], [0, 0, 0])

    def test_out_of_box_positions_clip(self):
        mesh = ms.TriangleMesh(np.array([[-2.0, 3.0, 0.5]]),
                               np.zeros((0, 3), np.int64))
        out = ev.correspondence_colors(
            mesh, (0, 0, 0), (1, 1, 1),
            lambda pts: (pts, np.array([True])))
        assert np.array_equal(out.colors[0], [0, 255, 128])


class TestEvalReport:
    def report(self):
        return ev.EvalReport(
            per_frame_chamfer=[1e-4, 3e-4],
            per_pair_epe=[(0, 1, 0.02), (0, 2, 0.04)],
            provenance={"sequence": "demo"})

    def test_means(self):
        rep = self.report()
        assert rep.mean_chamfer == pytest.approx(2e-4)
        assert rep.mean_epe == pytest.approx(0.03)

    def test_json_key_order_is_fixed(self):
        body = json.loads(self.report().to_json())
        assert list(body) == ["mean_chamfer", "mean_chamfer_x1e4",
                              "mean_epe3d", "mean_epe3d_x1e2",
                              "per_frame_chamfer", "per_pair_epe3d",
                              "provenance"]
        assert body["mean_chamfer_x1e4"] == pytest.approx(2.0)
        assert body["mean_epe3d_x1e2"] == pytest.approx(3.0)
        assert body["per_pair_epe3d"][0] == {
            "keyframe": 0, "frame": 1, "epe3d": 0.02}

    def test_write_emits_json_and_csv(self, tmp_path):
        report_path, table_path = self.report().write(tmp_path / "out")
        assert json.loads(report_path.read_text())["provenance"] == {
            "sequence": "demo"}
        rows = table_path.read_text().strip().splitlines()
        assert rows[0] == "frame,chamfer,chamfer_x1e4"
        assert len(rows) == 3
        assert rows[1].startswith("0,0.0001,")
