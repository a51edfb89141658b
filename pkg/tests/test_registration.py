import numpy as np
import pytest

from splatslam.cloud import PointCloud, SpatialIndex, estimate_covariances
from splatslam.geometry import Pose, se3_exp
from splatslam.registration import (
    RegistrationParams,
    gicp,
    point_to_plane_refine,
)

from helpers import (
    pose_error,
    random_small_transform,
    room_cloud_with_covariances,
)


@pytest.fixture(scope="module")
def room():
    return room_cloud_with_covariances(n=1500, seed=0)


class TestGicp:
    def test_identity_on_identical_clouds(self, room):
        res = gicp(room, room, Pose.identity())
        assert res.converged
        assert res.fitness == pytest.approx(1.0)
        assert res.inlier_rmse < 1e-9
        t_err, r_err = pose_error(res.pose, Pose.identity())
        assert t_err < 1e-9 and r_err < 1e-7

    def test_transform_recovery(self, room):
        rng = np.random.default_rng(1)
        T = random_small_transform(rng, max_angle_deg=10.0, max_trans=0.1)
        target = room.transformed(T)
        res = gicp(room, target, Pose.identity())
        assert res.converged
        t_err, r_err = pose_error(res.pose, T)
        assert t_err < 1e-3
        assert r_err < 0.1

    def test_disjoint_clouds_flagged(self):
        rng = np.random.default_rng(2)
        a = estimate_covariances(PointCloud(rng.uniform(0, 1, (200, 3))), k=10)
        b_pts = rng.uniform(0, 1, (200, 3)) + 10.0
        b = estimate_covariances(PointCloud(b_pts), k=10)
        res = gicp(a, b, Pose.identity())
        assert not res.converged
        assert res.fitness < 0.2

    def test_objective_monotone_per_iteration(self, room):
        rng = np.random.default_rng(3)
        T = random_small_transform(rng)
        res = gicp(room, room.transformed(T), Pose.identity())
        for before, after in res.objective_history:
            assert after <= before + 1e-9

    def test_equivariance(self, room):
        rng = np.random.default_rng(4)
        T = random_small_transform(rng, max_angle_deg=8.0, max_trans=0.1)
        target = room.transformed(T)
        base = gicp(room, target, Pose.identity())
        A = se3_exp([0.4, -0.3, 0.8, 1.0, -2.0, 0.5])
        res = gicp(room.transformed(A), target.transformed(A), Pose.identity())
        expected = A.compose(base.pose).compose(A.inverse())
        t_err, r_err = pose_error(res.pose, expected)
        assert t_err < 1e-4
        assert r_err < 0.01

    def test_requires_covariances(self):
        pc = PointCloud(np.random.default_rng(0).uniform(0, 1, (50, 3)))
        with pytest.raises(ValueError):
            gicp(pc, pc, Pose.identity())


def planar_map_index(n=800, seed=5):
    rng = np.random.default_rng(seed)
    pts = np.zeros((n, 3))
    pts[:, :2] = rng.uniform(-2, 2, (n, 2))
    cloud = estimate_covariances(PointCloud(pts), k=12)
    return SpatialIndex(cloud)


class TestPointToPlane:
    def test_aligned_cloud_stays(self, room):
        index = SpatialIndex(estimate_covariances(
            PointCloud(room.points), k=20))
        res = point_to_plane_refine(room, index, Pose.identity())
        t_err, r_err = pose_error(res.pose, Pose.identity())
        assert t_err < 1e-9 and r_err < 1e-7
        assert res.inlier_rmse < 1e-9

    def test_normal_offset_recovered_tangent_not(self):
        index = planar_map_index()
        rng = np.random.default_rng(6)
        src_pts = np.zeros((300, 3))
        src_pts[:, :2] = rng.uniform(-1.5, 1.5, (300, 2))
        src = PointCloud(src_pts)
        # offset along the plane normal: fully recovered
        init = Pose(t=np.array([0.0, 0.0, 0.05]))
        res = point_to_plane_refine(src, index, init)
        assert abs(res.pose.t[2]) < 1e-4
        # offset tangent to the plane: unobservable, stays at init
        init_t = Pose(t=np.array([0.05, 0.0, 0.0]))
        res_t = point_to_plane_refine(src, index, init_t,
                                      RegistrationParams(max_iter=10))
        assert res_t.pose.t[0] == pytest.approx(0.05, abs=1e-6)

    def test_transform_recovery(self, room):
        index = SpatialIndex(room)
        rng = np.random.default_rng(7)
        T = random_small_transform(rng, max_angle_deg=15.0, max_trans=0.2)
        # map holds the transformed scene; recover where the cloud sits in it
        target_index = SpatialIndex(room.transformed(T))
        res = point_to_plane_refine(PointCloud(room.points), target_index,
                                    Pose.identity())
        assert res.converged
        t_err, r_err = pose_error(res.pose, T)
        assert t_err < 1e-3

    def test_objective_monotone(self, room):
        rng = np.random.default_rng(8)
        T = random_small_transform(rng)
        index = SpatialIndex(room.transformed(T))
        res = point_to_plane_refine(PointCloud(room.points), index, Pose.identity())
        for before, after in res.objective_history:
            assert after <= before + 1e-9

    def test_requires_normals(self):
        pc = PointCloud(np.random.default_rng(0).uniform(0, 1, (50, 3)))
        with pytest.raises(ValueError):
            point_to_plane_refine(pc, SpatialIndex(pc), Pose.identity())


class TestPerturbationConvergence:
    def test_small_perturbations_converge_to_identity(self, room):
        rng = np.random.default_rng(9)
        for _ in range(5):
            T = random_small_transform(rng, max_angle_deg=15.0, max_trans=0.2)
            res = gicp(room, room, T)
            t_err, r_err = pose_error(res.pose, Pose.identity())
            assert t_err < 1e-3
            assert r_err < 0.1
