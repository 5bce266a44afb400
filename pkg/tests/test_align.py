import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from sklearn.base import clone

from conftest import random_sim3
from sim3recon.align import (
    CorrespondenceSet, IrlsConfig, RobustSim3Aligner, combine_confidence, confidence_gate, huber_weight,
    irls_align, mad_delta, weighted_umeyama,
)
from sim3recon.exceptions import DegenerateConfigurationError, InsufficientCorrespondencesError
from sim3recon.sim3 import Sim3


def weighted_cost(S, src, tgt, w):
    return float(np.sum(w * np.sum((tgt - S.act(src)) ** 2, axis=1)))


class TestUmeyama:
    def test_identity(self, rng):
        p = rng.normal(size=(30, 3))
        assert weighted_umeyama(p, p).allclose(Sim3.identity(), 1e-10)

    def test_recover(self, rng):
        for _ in range(20):
            S = random_sim3(rng)
            src = rng.normal(size=(50, 3)) * 3
            assert weighted_umeyama(src, S.act(src)).allclose(S, 1e-8)

    def test_exact_cost(self, rng):
        S = random_sim3(rng)
        src = rng.normal(size=(40, 3)) * 10
        tgt = S.act(src)
        extent = np.ptp(tgt, axis=0).max()
        assert weighted_cost(weighted_umeyama(src, tgt), src, tgt, np.ones(40)) < 1e-16 * extent**2 * 40

    def test_weighted_cluster_against_local_search(self, rng):
        """Zero weights on one cluster: the fit equals a direct minimisation of the weighted cost."""
        src = np.vstack([rng.normal(size=(5, 3)), rng.normal(size=(5, 3)) + 10])
        tgt = np.vstack([random_sim3(rng).act(src[:5]) + rng.normal(size=(5, 3)) * 0.05,
                         rng.normal(size=(5, 3)) * 4])
        w = np.r_[rng.uniform(0.5, 2.0, 5), np.zeros(5)]
        S = weighted_umeyama(src, tgt, w)
        best = weighted_cost(S, src, tgt, w)

        def f(x):
            return weighted_cost(S @ Sim3.exp(x), src, tgt, w)

        # a grid of starting perturbations refined by Nelder-Mead never beats the closed form
        for start in itertools.product((-0.05, 0.05), repeat=3):
            x0 = np.r_[np.zeros(3), start, 0.0]
            res = minimize(f, x0, method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000})
            assert res.fun >= best - 1e-10
        # the unweighted cluster does not influence the result
        tgt2 = tgt.copy()
        tgt2[5:] = rng.normal(size=(5, 3)) * 100
        assert weighted_umeyama(src, tgt2, w).allclose(S, 1e-10)

    def test_reflection_fix(self, rng):
        src = rng.normal(size=(20, 3))
        tgt = src * np.array([1, 1, -1])  # mirror image: best proper rotation must have det +1
        S = weighted_umeyama(src, tgt)
        assert abs(np.linalg.det(S.rotation) - 1) < 1e-12

    def test_rigid_mode(self, rng):
        S = random_sim3(rng)
        src = rng.normal(size=(30, 3))
        assert weighted_umeyama(src, S.act(src), with_scale=False).scale == 1.0

    def test_errors(self, rng):
        p = rng.normal(size=(10, 3))
        with pytest.raises(InsufficientCorrespondencesError):
            weighted_umeyama(p[:2], p[:2])
        with pytest.raises(InsufficientCorrespondencesError):
            weighted_umeyama(p, p, np.r_[1.0, 1.0, np.zeros(8)])
        line = np.outer(np.arange(10.0), [1, 2, 3])
        with pytest.raises(DegenerateConfigurationError):
            weighted_umeyama(line, line)
        with pytest.raises(ValueError):
            weighted_umeyama(p, p[:5])
        with pytest.raises(ValueError):
            weighted_umeyama(p, p, -np.ones(10))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        src = rng.normal(size=(25, 3)) * 3
        tgt = random_sim3(rng).act(src) + rng.normal(size=(25, 3)) * 0.1
        w = rng.uniform(0.1, 1, 25)
        G = random_sim3(rng, log_scale=(0.0, 0.0))
        A = weighted_umeyama(src, tgt, w)
        B = weighted_umeyama(G.act(src), G.act(tgt), w)
        assert B.allclose(G @ A @ G.inverse(), 1e-8)


class TestIrls:
    def test_noiseless_matches_umeyama(self, rng):
        S = random_sim3(rng)
        src = rng.normal(size=(100, 3))
        corr = CorrespondenceSet(src, S.act(src), np.ones(100))
        res = irls_align(corr)
        assert res.transform.allclose(weighted_umeyama(src, S.act(src)), 1e-10)
        assert res.transform.allclose(S, 1e-8)
        assert res.iterations_used <= 2

    def test_infinite_delta_equals_weighted_solve(self, rng):
        src = rng.normal(size=(60, 3))
        tgt = random_sim3(rng).act(src) + rng.normal(size=(60, 3)) * 0.3
        c = rng.uniform(0.1, 1.0, 60)
        res = irls_align(CorrespondenceSet(src, tgt, c), IrlsConfig(max_iterations=1, huber_delta=1e30))
        assert res.transform.allclose(weighted_umeyama(src, tgt, c), 1e-14)

    def test_weights_non_increasing_in_residual(self, rng):
        src = rng.normal(size=(200, 3)) * 5
        tgt = random_sim3(rng).act(src) + rng.normal(size=(200, 3)) * 0.1
        tgt[:40] += rng.normal(size=(40, 3)) * 10
        c = np.ones(200)
        for iters in (1, 2, 5):
            res = irls_align(CorrespondenceSet(src, tgt, c), IrlsConfig(max_iterations=iters))
            order = np.argsort(res.residuals)
            assert np.all(np.diff(res.final_weights[order]) <= 1e-15)

    def test_outliers_downweighted(self, rng):
        S = random_sim3(rng)
        src = rng.normal(size=(500, 3)) * 5
        tgt = S.act(src) + rng.normal(size=(500, 3)) * 0.01
        tgt[:100] = rng.uniform(-50, 50, size=(100, 3))
        res = irls_align(CorrespondenceSet(src, tgt, np.ones(500)))
        assert res.final_weights[:100].mean() < 0.1 * res.final_weights[100:].mean()

    def test_huber_pieces(self):
        np.testing.assert_array_equal(huber_weight([0.5, 1.0, 4.0], 1.0), [1.0, 1.0, 0.25])
        assert mad_delta(np.zeros(10), 1.345) == 1e-9
        r = np.array([1.0, 2.0, 3.0, 4.0, 100.0])
        assert mad_delta(r, 1.0) == pytest.approx(1.4826 * 1.0)

    def test_fixed_count_mode(self, rng):
        src = rng.normal(size=(100, 3))
        tgt = random_sim3(rng).act(src) + rng.normal(size=(100, 3)) * 0.05
        corr = CorrespondenceSet(src, tgt, np.ones(100))
        assert irls_align(corr, IrlsConfig(max_iterations=7, convergence_tol=0.0)).iterations_used == 7
        assert irls_align(corr, IrlsConfig(max_iterations=50, convergence_tol=1e-6)).iterations_used < 50

    def test_config_validation(self):
        with pytest.raises(ValueError):
            IrlsConfig(convergence_tol=-1.0)
        with pytest.raises(ValueError):
            IrlsConfig(max_iterations=0)
        with pytest.raises(ValueError):
            IrlsConfig(huber_delta=-1.0)
        with pytest.raises(ValueError):
            IrlsConfig(min_points=2)

    def test_too_few(self, rng):
        p = rng.normal(size=(2, 3))
        with pytest.raises(InsufficientCorrespondencesError):
            irls_align(CorrespondenceSet(p, p, np.ones(2)))


class TestConfidenceGate:
    def test_all_equal_keeps_all(self, rng):
        p = rng.normal(size=(50, 3))
        assert len(confidence_gate(p, np.ones(50), p, np.ones(50))) == 50

    def test_half_low_dropped(self, rng):
        p = rng.normal(size=(100, 3))
        conf = np.r_[np.ones(50), np.full(50, 0.001)]
        corr = confidence_gate(p, conf, p, conf, 0.1)
        assert len(corr) == 50
        np.testing.assert_array_equal(corr.source_points, p[:50])

    def test_factor_zero(self, rng):
        p = rng.normal(size=(100, 3))
        conf = np.r_[np.ones(50), np.full(50, 0.001)]
        assert len(confidence_gate(p, conf, p, conf, 0.0)) == 100

    def test_combination(self):
        np.testing.assert_allclose(combine_confidence(np.array([4.0]), np.array([1.0])), [2.0])
        np.testing.assert_allclose(combine_confidence(np.array([4.0]), np.array([1.0]), "min"), [1.0])
        with pytest.raises(ValueError):
            combine_confidence(np.ones(1), np.ones(1), "mean")

    def test_either_side_gates(self, rng):
        p = rng.normal(size=(10, 3))
        ca = np.ones(10)
        cb = np.ones(10)
        cb[3] = 0.01
        corr = confidence_gate(p, ca, p, cb, 0.1)
        assert len(corr) == 9

    def test_everything_gated(self, rng):
        p = rng.normal(size=(4, 3))
        with pytest.raises(InsufficientCorrespondencesError):
            confidence_gate(p, np.ones(4), p, np.ones(4), 0.5, median_a=10.0)


class TestEstimator:
    def test_fit_transform(self, rng):
        S = random_sim3(rng)
        X = rng.normal(size=(80, 3))
        y = S.act(X)
        est = RobustSim3Aligner().fit(X, y)
        np.testing.assert_allclose(est.transform(X), y, atol=1e-8)
        np.testing.assert_allclose(est.inverse_transform(y), X, atol=1e-8)
        assert est.score(X, y) > -1e-8
        assert est.transform_.allclose(S, 1e-8)

    def test_params(self):
        est = RobustSim3Aligner(irls=False, max_iter=3)
        assert est.get_params()["max_iter"] == 3
        assert clone(est).get_params() == est.get_params()
        assert est.set_params(tol=1e-6).tol == 1e-6

    def test_not_fitted(self, rng):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            RobustSim3Aligner().transform(rng.normal(size=(3, 3)))

    def test_no_irls_single_solve(self, rng):
        X = rng.normal(size=(50, 3))
        y = random_sim3(rng).act(X) + rng.normal(size=(50, 3))
        est = RobustSim3Aligner(irls=False).fit(X, y)
        assert est.n_iter_ == 1
        assert est.transform_.allclose(weighted_umeyama(X, y), 1e-14)
