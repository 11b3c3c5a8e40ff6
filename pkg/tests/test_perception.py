import math

import numpy as np
import pytest

from conftest import hover_state, pillar_scene, render_from
from mapless_mpc.errors import InvalidInputError
from mapless_mpc.perception import (NO_RETURN, CameraIntrinsics, CloudFrame, DepthImage,
                                    KeyframeManager, PerceptionConfig, Pose, build_dual_trees,
                                    camera_pose, coarse_adjust, colliding_waypoints, deproject,
                                    dilate, downsample, edge_filter, in_frustum,
                                    inflation_radius, keyframe_update, query_obstacles,
                                    query_obstacles_batch, read_depth_dump, write_depth_dump)
from mapless_mpc.simenv import Cylinder, Scene, generate_forest, render_depth
from mapless_mpc.spatial import KdTree
from mapless_mpc.waypoints import sample_waypoints


def image(depths, intr=None, pose=None):
    depths = np.asarray(depths, dtype=float)
    h, w = depths.shape
    intr = intr or CameraIntrinsics(fx=10.0, fy=10.0, cx=w / 2, cy=h / 2, width=w, height=h)
    return DepthImage(intr, depths, pose or Pose())


def kernel_formula(d_s, v_f, dt, f):
    return 2 * math.floor(0.5 * (d_s / (v_f * dt)) * f) + 1


class TestIntrinsics:
    def test_default_focal_length(self):
        intr = CameraIntrinsics.from_fov()
        assert intr.fx == pytest.approx(32.0 / math.tan(math.radians(43.5)), rel=1e-12)
        assert intr.fx == pytest.approx(33.7, abs=0.05)

    def test_depth_shape_checked(self):
        with pytest.raises(InvalidInputError):
            DepthImage(CameraIntrinsics.from_fov(), np.ones((10, 10)))


class TestDownsample:
    def test_block_size_and_focal_scaling(self):
        intr = CameraIntrinsics.from_fov(640, 480)
        out = downsample(DepthImage(intr, np.full((480, 640), 5.0)), 64, 48)
        assert out.depths.shape == (48, 64)
        assert out.intrinsics.fx == pytest.approx(intr.fx * 0.1, rel=1e-12)
        np.testing.assert_array_equal(out.depths, 5.0)

    def test_block_min_with_no_return(self):
        d = np.full((4, 4), 8.0)
        d[0, 0], d[0, 1], d[1, 0] = 4.0, 6.0, NO_RETURN
        out = downsample(image(d), 2, 2)
        assert out.depths[0, 0] == 4.0

    def test_all_no_return_block_stays_invalid(self):
        out = downsample(image(np.full((4, 4), NO_RETURN)), 2, 2)
        assert not out.valid.any()

    def test_larger_target_rejected(self):
        with pytest.raises(InvalidInputError):
            downsample(image(np.ones((4, 4))), 8, 4)


class TestInflationRadius:
    def test_reference_value(self):
        assert inflation_radius(0.15, 5.0, 0.033, 33.7) == 31

    def test_small_argument_gives_one(self):
        assert inflation_radius(0.01, 10.0, 0.033, 5.0) == 1

    def test_grid_matches_formula_and_is_odd(self):
        for d_s in np.linspace(0, 0.5, 6):
            for v in np.linspace(0.5, 15, 8):
                for dt in (0.01, 0.033, 0.05):
                    for f in (10.0, 33.7, 60.0):
                        r = inflation_radius(d_s, v, dt, f)
                        assert r == kernel_formula(d_s, v, dt, f)
                        assert r >= 1 and r % 2 == 1

    def test_monotone_in_speed(self):
        for v in np.linspace(0.5, 10, 20):
            assert inflation_radius(0.15, 2 * v, 0.033, 33.7) <= inflation_radius(0.15, v, 0.033, 33.7)

    @pytest.mark.parametrize("args", [(0.15, 0.0, 0.033, 33.7), (0.15, 1.0, 0.0, 33.7),
                                      (0.15, -1.0, 0.033, 33.7), (-0.1, 1.0, 0.033, 33.7)])
    def test_rejects_singular(self, args):
        with pytest.raises(InvalidInputError):
            inflation_radius(*args)


class TestDilate:
    def test_identity(self):
        d = np.random.default_rng(0).uniform(1, 9, (6, 8))
        np.testing.assert_array_equal(dilate(image(d), 1).depths, d)

    def test_single_pixel_block(self):
        d = np.full((7, 7), 10.0)
        d[3, 3] = 2.0
        out = dilate(image(d), 3).depths
        expected = np.full((7, 7), 10.0)
        expected[2:5, 2:5] = 2.0
        np.testing.assert_array_equal(out, expected)

    def test_even_kernel_rejected(self):
        with pytest.raises(InvalidInputError):
            dilate(image(np.ones((4, 4))), 4)

    def test_gap_filled_exhaustive(self):
        d = np.full((12, 20), 5.0)
        d[:, 4:8] = 2.0
        d[:, 10:14] = 2.5
        out = dilate(image(d), 5).depths
        for r in range(12):
            for c in range(20):
                win = d[max(0, r - 2):r + 3, max(0, c - 2):c + 3]
                assert out[r, c] == win.min()
        assert np.all(out[:, 8:10] <= 2.5)

    def test_footprint_never_shrinks(self):
        rng = np.random.default_rng(5)
        d = np.where(rng.random((24, 32)) < 0.2, rng.uniform(1, 9, (24, 32)), NO_RETURN)
        img = image(d)
        for k in (3, 5, 9):
            assert np.all(dilate(img, k).valid[img.valid])


class TestEdgeFilter:
    def test_constant_image_empty(self):
        assert edge_filter(image(np.full((8, 8), 4.0))).count == 0

    def test_rectangle_ring(self):
        d = np.full((10, 12), 10.0)
        d[3:7, 4:9] = 2.0
        mask = edge_filter(image(d)).mask
        ring = np.zeros_like(mask)
        ring[3:7, 4:9] = True
        ring[4:6, 5:8] = False
        np.testing.assert_array_equal(mask, ring)

    def test_edge_depth_is_near_side(self):
        d = np.full((10, 12), 10.0)
        d[3:7, 4:9] = 2.0
        em = edge_filter(image(d))
        np.testing.assert_array_equal(em.depths[em.mask], 2.0)

    def test_forest_count_matches_scan(self, intr):
        scene = generate_forest((50, 30), 1 / 25, 3)
        img = render_depth(scene, camera_pose(scene.start, 0.0), intr)
        dil = dilate(img, 7)
        d = np.where(dil.valid, dil.depths, np.inf)
        count = 0
        for r in range(d.shape[0]):
            for c in range(d.shape[1]):
                if not np.isfinite(d[r, c]):
                    continue
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= rr < d.shape[0] and 0 <= cc < d.shape[1] and d[rr, cc] - d[r, c] > 0.3:
                        count += 1
                        break
        assert edge_filter(dil).count == count > 0


class TestDeproject:
    def test_principal_ray(self):
        d = np.full((5, 5), NO_RETURN)
        d[2, 2] = 3.0
        intr = CameraIntrinsics(fx=4.0, fy=4.0, cx=2.0, cy=2.0, width=5, height=5)
        np.testing.assert_allclose(deproject(image(d, intr)), [[0, 0, 3]])

    def test_identity_pose_formula(self):
        rng = np.random.default_rng(1)
        d = rng.uniform(1, 9, (4, 6))
        intr = CameraIntrinsics(fx=5.0, fy=6.0, cx=2.5, cy=1.5, width=6, height=4)
        pts = deproject(image(d, intr))
        v, u = np.mgrid[0:4, 0:6]
        expected = np.column_stack([((u - 2.5) * d / 5.0).ravel(), ((v - 1.5) * d / 6.0).ravel(),
                                    d.ravel()])
        np.testing.assert_allclose(pts, expected, atol=1e-12)

    def test_forward_camera_axes(self):
        pose = camera_pose([1.0, 2.0, 1.5], 0.0)
        np.testing.assert_allclose(pose.to_world(np.array([[0.0, 0.0, 3.0]])), [[4.0, 2.0, 1.5]])
        np.testing.assert_allclose(pose.to_world(np.array([[1.0, 0.0, 0.0]])), [[1.0, 1.0, 1.5]])
        np.testing.assert_allclose(pose.to_world(np.array([[0.0, 1.0, 0.0]])), [[1.0, 2.0, 0.5]])

    def test_cylinder_points_on_surface(self, intr):
        cyl = Cylinder(6.0, 0.5, 0.4, 8.0)
        scene = Scene((cyl,), (0, -10, 0, 20, 10, 8), np.array([0, 0, 1.5]), np.array([19, 0, 1.5]), 0)
        img = render_depth(scene, camera_pose([0, 0, 1.5], 0.0), intr)
        pts = deproject(img)
        assert len(pts) > 0
        np.testing.assert_allclose(np.abs(cyl.signed_distance(pts)), 0.0, atol=1e-9)

    def test_dump_round_trip(self, tmp_path, intr):
        img = render_from(pillar_scene(), hover_state((10, 15, 1.5)), intr)
        write_depth_dump(img, tmp_path / "d.txt")
        back = read_depth_dump(tmp_path / "d.txt")
        np.testing.assert_array_equal(back.valid, img.valid)
        np.testing.assert_array_equal(back.depths[img.valid], img.depths[img.valid])


class TestDualTrees:
    def test_empty_frame(self, intr, pcfg):
        img = DepthImage(intr, np.full((48, 64), NO_RETURN))
        trees = build_dual_trees(img, hover_state(), pcfg)
        assert trees.obstacle_current.size == 0 and trees.edge.size == 0
        wps = sample_waypoints(hover_state(), [30, 15, 1.5], 3.0, 30)
        assert coarse_adjust(wps, trees) is wps

    def test_edge_points_outside_pillar(self, intr, pcfg):
        scene = pillar_scene()
        st = hover_state((15, 15, 1.5), v=(5, 0, 0))
        trees = build_dual_trees(render_from(scene, st, intr), st, pcfg)
        assert trees.edge.size > 0
        lateral = np.hypot(trees.edge.points[:, 0] - 20, trees.edge.points[:, 1] - 15)
        assert np.all(lateral >= 0.3 - 1e-9)

    def test_edge_points_outside_forest_trunks(self, intr, pcfg):
        scene = generate_forest((50, 30), 1 / 25, 4)
        st = hover_state(scene.start, v=(4, 0, 0))
        trees = build_dual_trees(render_from(scene, st, intr), st, pcfg)
        assert trees.edge.size > 0
        assert np.all(scene.clearance(trees.edge.points) >= -1e-9)

    def test_deterministic(self, intr, pcfg):
        scene = pillar_scene()
        st = hover_state((15, 15, 1.5))
        a = build_dual_trees(render_from(scene, st, intr), st, pcfg)
        b = build_dual_trees(render_from(scene, st, intr), st, pcfg)
        np.testing.assert_array_equal(a.obstacle_current.points, b.obstacle_current.points)
        np.testing.assert_array_equal(a.edge.points, b.edge.points)

    def test_resolution_checked(self, pcfg):
        img = DepthImage(CameraIntrinsics.from_fov(32, 24), np.ones((24, 32)))
        with pytest.raises(InvalidInputError):
            build_dual_trees(img, hover_state(), pcfg)


class TestKeyframes:
    def frame(self, pts, p=(0, 0, 0)):
        return CloudFrame(points=np.asarray(pts, float), pose=camera_pose(p, 0.0))

    def test_first_frame_promoted(self, pcfg):
        cur = self.frame([[5, 0, 0], [6, 1, 0]])
        kfs = keyframe_update(cur, [], hover_state((0, 0, 0)), pcfg)
        assert len(kfs) == 1 and kfs[0].is_keyframe

    def test_static_scene_idempotent(self, pcfg):
        st = hover_state((0, 0, 0))
        pts = np.random.default_rng(0).uniform([2, -3, 0], [9, 3, 3], (200, 3))
        kfs = keyframe_update(self.frame(pts), [], st, pcfg)
        for _ in range(3):
            again = keyframe_update(self.frame(pts), kfs, st, pcfg)
            assert len(again) == 1
            np.testing.assert_array_equal(again[0].points, kfs[0].points)
            kfs = again

    def test_new_view_promoted_and_previous_pruned(self, pcfg):
        st = hover_state((0, 0, 0))
        old = np.array([[5, 0, 0], [5, 0.05, 0], [5, 3, 0]], float)
        kfs = keyframe_update(self.frame(old), [], st, pcfg)
        new = np.array([[5, 0, 0], [9, 5, 0], [9, 6, 0], [9, 7, 0]], float)
        kfs = keyframe_update(self.frame(new), kfs, st, pcfg)
        assert len(kfs) == 2
        np.testing.assert_array_equal(kfs[0].points, [[5, 3, 0]])

    def test_keyframe_behind_dropped(self, pcfg):
        mgr = KeyframeManager(pcfg)
        mgr.update(self.frame([[5, 0, 1], [5, 0.3, 1]]), hover_state((0, 0, 1)))
        mgr.update(self.frame([[12, 2, 1]]), hover_state((4, 0, 1)))
        assert len(mgr.keyframes) == 2
        mgr.update(self.frame([[12, 2, 1]]), hover_state((6, 0, 1)))
        assert len(mgr.keyframes) == 1
        np.testing.assert_array_equal(mgr.keyframes[0].points, [[12, 2, 1]])

    def test_passing_pillar_closed_loop(self, intr, pcfg):
        scene = pillar_scene()
        mgr = KeyframeManager(pcfg)
        for x in np.arange(12.0, 24.0, 0.5):
            st = hover_state((x, 14.0, 1.5))
            build_dual_trees(render_from(scene, st, intr), st, pcfg, mgr)
        for kf in mgr.keyframes:
            assert np.any((kf.points - [23.5, 14.0, 1.5]) @ [1, 0, 0] >= 0)


class TestQueryObstacles:
    def trees_with_keyframe(self, intr, pcfg):
        scene = pillar_scene()
        mgr = KeyframeManager(pcfg)
        st = hover_state((15, 15, 1.5))
        build_dual_trees(render_from(scene, st, intr), st, pcfg, mgr)
        st2 = hover_state((15, 15, 1.5), yaw=math.pi / 2)
        return build_dual_trees(render_from(scene, st2, intr), st2, pcfg, mgr)

    def test_in_frustum_equals_current_knn(self, intr, pcfg):
        st = hover_state((15, 15, 1.5))
        trees = build_dual_trees(render_from(pillar_scene(), st, intr), st, pcfg)
        q = np.array([18.0, 15.2, 1.5])
        res = query_obstacles(trees, q, 3)
        d, i = trees.obstacle_current.query(q[None], 3)
        np.testing.assert_array_equal([r[1] for r in res], d[0])
        np.testing.assert_array_equal(np.array([r[0] for r in res]), trees.obstacle_current.points[i[0]])

    def test_out_of_view_uses_keyframe(self, intr, pcfg):
        trees = self.trees_with_keyframe(intr, pcfg)
        assert trees.obstacle_current.size == 0
        assert len(trees.keyframes) == 1
        res = query_obstacles(trees, [19.0, 15.0, 1.5], 2)
        assert len(res) == 2
        assert np.hypot(res[0][0][0] - 20, res[0][0][1] - 15) == pytest.approx(0.3, abs=1e-6)

    def test_merged_equals_union_oracle(self, intr, pcfg):
        scene = generate_forest((50, 30), 1 / 25, 1)
        mgr = KeyframeManager(pcfg)
        trees = None
        for k, yaw in enumerate((0.0, 0.6, -0.6, 1.2)):
            st = hover_state(scene.start + [3 * k, 0, 0], yaw=yaw)
            trees = build_dual_trees(render_from(scene, st, intr), st, pcfg, mgr)
        union = np.vstack([trees.obstacle_current.points] + [t.points for t, _ in trees.keyframes])
        rng = np.random.default_rng(0)
        qs = scene.start + rng.uniform([-2, -6, -1], [14, 6, 1], (200, 3))
        obs, dist = query_obstacles_batch(trees, qs, 3, fov_check=False)
        for q, o, d in zip(qs, obs, dist):
            od = np.sort(np.linalg.norm(union - q, axis=1))[:3]
            np.testing.assert_array_equal(d, od)
            np.testing.assert_allclose(np.linalg.norm(o - q, axis=1), d, rtol=0, atol=0)

    def test_all_empty(self, intr, pcfg):
        img = DepthImage(intr, np.full((48, 64), NO_RETURN))
        trees = build_dual_trees(img, hover_state(), pcfg)
        assert query_obstacles(trees, [1, 2, 3], 3) == []

    def test_m_validated(self, intr, pcfg):
        img = DepthImage(intr, np.full((48, 64), NO_RETURN))
        with pytest.raises(InvalidInputError):
            query_obstacles(build_dual_trees(img, hover_state(), pcfg), [0, 0, 0], 0)


class TestCoarseAdjust:
    def setup(self, intr, pcfg, y=15.0):
        st = hover_state((15, y, 1.5), v=(5, 0, 0))
        trees = build_dual_trees(render_from(pillar_scene(), st, intr), st, pcfg)
        wps = sample_waypoints(st, [30, y, 1.5], 3.0, 30)
        return trees, wps

    def test_free_path_untouched(self, intr, pcfg):
        trees, wps = self.setup(intr, pcfg, y=22.0)
        out = coarse_adjust(wps, trees)
        np.testing.assert_array_equal(out.positions, wps.positions)

    def test_pillar_path_moves_to_edge_ring(self, intr, pcfg):
        trees, wps = self.setup(intr, pcfg)
        hit = colliding_waypoints(wps, trees.dilated)
        assert hit.any()
        out = coarse_adjust(wps, trees)
        np.testing.assert_array_equal(out.positions[~hit], wps.positions[~hit])
        np.testing.assert_array_equal(out.yaws, wps.yaws)
        np.testing.assert_array_equal(out.velocities, wps.velocities)
        moved = out.positions[hit]
        lateral = np.hypot(moved[:, 0] - 20, moved[:, 1] - 15)
        assert np.all(lateral - 0.3 >= 0.15)
        assert set(map(tuple, moved)) <= set(map(tuple, trees.edge.points))

    def test_out_of_frustum_never_adjusted(self, intr, pcfg):
        trees, wps = self.setup(intr, pcfg)
        behind = wps.with_positions(wps.positions - [20, 0, 0])
        assert not colliding_waypoints(behind, trees.dilated).any()

    def test_empty_edge_tree_flags(self, intr, pcfg):
        trees, wps = self.setup(intr, pcfg)
        from dataclasses import replace
        bare = replace(trees, edge=KdTree(np.empty((0, 3))))
        out = coarse_adjust(wps, bare)
        hit = colliding_waypoints(wps, trees.dilated)
        np.testing.assert_array_equal(out.unresolved, hit)
        np.testing.assert_array_equal(out.positions, wps.positions)
