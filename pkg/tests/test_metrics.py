import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_sim3
from sim3recon.formats import Trajectory
from sim3recon.metrics import align_trajectory, ate_rmse, cloud_metrics, icp


def walk(rng, n=200):
    return np.cumsum(rng.normal(size=(n, 3)), axis=0)


class TestAte:
    def test_identical_is_zero(self, rng):
        p = walk(rng)
        for mode in ("sim3", "se3", "none"):
            assert ate_rmse(p, p, mode) == 0.0

    def test_similarity_removed(self, rng):
        p = walk(rng)
        S = random_sim3(rng)
        assert ate_rmse(S.act(p), p) < 1e-9
        assert ate_rmse(S.act(p), p, "none") > 0.1

    def test_constant_offset(self, rng):
        p = walk(rng)
        assert ate_rmse(p + [3.0, 4.0, 0.0], p, "none") == pytest.approx(5.0)
        assert ate_rmse(p + [3.0, 4.0, 0.0], p, "se3") < 1e-9

    def test_single_pose_perturbation(self, rng):
        p = walk(rng, 64)
        q = p.copy()
        q[17] += [0.0, 0.6, 0.8]
        assert ate_rmse(q, p, "none") == pytest.approx(1.0 / np.sqrt(64))

    def test_trajectory_objects(self, rng):
        p = walk(rng, 10)
        q = np.tile([0, 0, 0, 1.0], (10, 1))
        t = Trajectory(np.arange(10), p, q)
        assert ate_rmse(t, Trajectory(np.arange(10), p + 1.0, q), "none") == pytest.approx(np.sqrt(3))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_alignment_ordering(self, seed):
        rng = np.random.default_rng(seed)
        ref = walk(rng, 50)
        est = random_sim3(rng).act(ref + rng.normal(size=ref.shape) * 0.5)
        a, b, c = (ate_rmse(est, ref, m) for m in ("sim3", "se3", "none"))
        assert a <= b * (1 + 1e-9) + 1e-12
        assert b <= c * (1 + 1e-9) + 1e-12

    def test_errors(self, rng):
        p = walk(rng, 5)
        with pytest.raises(ValueError):
            ate_rmse(p, p[:4])
        with pytest.raises(ValueError):
            ate_rmse(p[:1], p[:1])
        with pytest.raises(ValueError):
            align_trajectory(p, p, "affine")


class TestCloud:
    def test_identical(self, rng):
        p = rng.normal(size=(500, 3))
        m = cloud_metrics(p, p)
        assert m.accuracy == 0 and m.completeness == 0 and m.chamfer == 0

    def test_translation_removed_by_icp(self, rng):
        p = rng.uniform(-5, 5, size=(2000, 3))
        m = cloud_metrics(p + [0.05, -0.03, 0.02], p)
        assert m.chamfer < 1e-6
        raw = cloud_metrics(p + [0.05, -0.03, 0.02], p, icp_iterations=0)
        assert raw.chamfer > 0.01

    def test_subsampled_prediction(self, rng):
        p = rng.uniform(-5, 5, size=(4000, 3))
        m = cloud_metrics(p[::4], p, icp_iterations=0)
        assert m.accuracy == 0
        assert m.completeness > 0

    def test_chamfer_symmetry(self, rng):
        a = rng.normal(size=(300, 3))
        b = rng.normal(size=(400, 3)) + 0.1
        ab = cloud_metrics(a, b, icp_iterations=0)
        ba = cloud_metrics(b, a, icp_iterations=0)
        assert ab.chamfer == pytest.approx(ba.chamfer)
        assert ab.accuracy == pytest.approx(ba.completeness)

    def test_icp_costs_non_increasing(self, rng):
        q = rng.uniform(-5, 5, size=(3000, 3))
        S = random_sim3(rng, max_angle=0.1, log_scale=(0.0, 0.0), trans=0.1)
        _, run, costs = icp(S.act(q[::2]), q, iterations=30)
        assert run >= 1
        assert all(b <= a + 1e-15 for a, b in zip(costs, costs[1:]))

    def test_empty(self):
        with pytest.raises(ValueError):
            cloud_metrics(np.zeros((0, 3)), np.zeros((3, 3)))
