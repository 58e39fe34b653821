import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from gpfa.exceptions import NumericalError
from gpfa.kernels import (
    SEKernelParams,
    condition_gram,
    condition_grams,
    delta_gram,
    factorize,
    jitter_ladder,
    se_gram,
    se_gram_grad_loglengthscale,
    time_grams,
)


class SEKernelParamsTests(SimpleTestCase):
    def test_rejects_non_positive_lengthscales(self):
        with self.assertRaises(ValueError):
            SEKernelParams((1.0, 0.0))
        with self.assertRaises(ValueError):
            SEKernelParams((np.inf,))

    def test_scalar_is_promoted(self):
        self.assertEqual(SEKernelParams(2.0).lengthscales, (2.0,))


class SEGramTests(SimpleTestCase):
    def test_zero_distance_is_one(self):
        assert_allclose(se_gram([[0.0]], [[0.0]], SEKernelParams((3.0,))), [[1.0]])

    def test_distance_sqrt2_lengthscale_gives_exp_minus_one(self):
        K = se_gram([[0.0]], [[np.sqrt(2.0)]], SEKernelParams((1.0,)))
        assert_allclose(K, [[np.exp(-1.0)]], rtol=1e-12)

    def test_huge_lengthscale_is_constant(self):
        points = np.array([[0.0], [1.0], [5.0]])
        K = se_gram(points, points, SEKernelParams((1e8,)))
        assert_allclose(K, np.ones((3, 3)), atol=1e-12)

    def test_symmetric_psd_unit_diagonal(self):
        rng = np.random.default_rng(3)
        points = rng.normal(size=(12, 2))
        K = se_gram(points, points, SEKernelParams((0.7, 1.3)))
        assert_allclose(K, K.T)
        assert_allclose(np.diag(K), 1.0)
        self.assertGreaterEqual(np.linalg.eigvalsh(K).min(), -1e-10)

    def test_translation_invariance(self):
        rng = np.random.default_rng(4)
        points = rng.normal(size=(6, 2))
        params = SEKernelParams((0.5, 2.0))
        assert_allclose(se_gram(points, points, params), se_gram(points + 3.5, points + 3.5, params))

    def test_dimension_mismatch(self):
        with self.assertRaises(ValueError):
            se_gram(np.zeros((2, 2)), np.zeros((2, 2)), SEKernelParams((1.0,)))


class GradientTests(SimpleTestCase):
    def test_single_point_has_zero_gradient(self):
        assert_allclose(se_gram_grad_loglengthscale([[0.3]], SEKernelParams((1.0,))), [[[0.0]]])

    def test_two_points_at_one_lengthscale(self):
        grad = se_gram_grad_loglengthscale([[0.0], [2.0]], SEKernelParams((2.0,)))
        assert_allclose(grad[0, 0, 1], np.exp(-0.5), rtol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        points = rng.normal(size=(7, 2))
        ell = np.array([0.8, 1.7])
        grad = se_gram_grad_loglengthscale(points, SEKernelParams(tuple(ell)))
        h = 1e-6
        for k in range(2):
            step = np.zeros(2)
            step[k] = h
            up = se_gram(points, points, SEKernelParams(tuple(ell * np.exp(step))))
            down = se_gram(points, points, SEKernelParams(tuple(ell * np.exp(-step))))
            fd = (up - down) / (2 * h)
            assert_allclose(grad[k], fd, rtol=1e-6, atol=1e-9)

    def test_tiny_lengthscale_stays_finite(self):
        grad = se_gram_grad_loglengthscale(np.arange(5.0)[:, None], SEKernelParams((1e-200,)))
        self.assertTrue(np.all(np.isfinite(grad)))
        assert_allclose(grad, 0.0)

    def test_small_lengthscale_matches_closed_form(self):
        grad = se_gram_grad_loglengthscale([[0.0], [1.0]], SEKernelParams((0.05,)))
        assert_allclose(grad[0, 0, 1], 400.0 * np.exp(-200.0), rtol=1e-10)


class FactorizeTests(SimpleTestCase):
    def test_identity_needs_no_jitter(self):
        grams = factorize(np.eye(4), 1e-8)
        assert_allclose(grams.chol, np.eye(4))
        self.assertEqual(grams.jitter_used, 0.0)
        self.assertAlmostEqual(grams.log_det, 0.0)

    def test_rank_deficient_matrix_gets_jitter(self):
        K = np.ones((3, 3))
        grams = factorize(K, 1e-8)
        self.assertGreater(grams.jitter_used, 0.0)
        rebuilt = grams.chol @ grams.chol.T
        assert_allclose(rebuilt, K + grams.jitter_used * np.eye(3), atol=1e-10)

    def test_nan_raises(self):
        K = np.eye(2)
        K[0, 1] = np.nan
        with self.assertRaises(NumericalError):
            factorize(K, 1e-8)

    def test_indefinite_matrix_fails_every_level(self):
        with self.assertRaises(NumericalError):
            factorize(-np.eye(3), 1e-8)

    def test_ladder(self):
        ladder = jitter_ladder(1e-8)
        self.assertEqual(ladder[0], 0.0)
        assert_allclose(ladder[1:], [1e-8 * 10.0 ** k for k in range(7)])

    def test_solve_and_log_det(self):
        rng = np.random.default_rng(6)
        A = rng.normal(size=(5, 5))
        K = A @ A.T + 5 * np.eye(5)
        grams = factorize(K, 1e-8)
        b = rng.normal(size=5)
        assert_allclose(K @ grams.solve(b), b, rtol=1e-10)
        self.assertAlmostEqual(grams.log_det, np.linalg.slogdet(K)[1], places=10)


class ModelGramTests(SimpleTestCase):
    def test_time_grams_one_per_latent(self):
        grams = time_grams(20, [2.0, 5.0], 1e-8)
        self.assertEqual(len(grams), 2)
        self.assertEqual(grams[0].K.shape, (20, 20))
        assert_allclose(grams[1].K[0, 5], np.exp(-0.5))

    def test_condition_grams(self):
        grams = condition_grams(np.linspace(0, 1, 4)[:, None], (0.5,), 1e-8)
        self.assertEqual(grams.size, 4)
        assert_allclose(np.diag(grams.K), 1.0)

    def test_identity_condition_grams(self):
        grams = condition_grams(np.linspace(0, 1, 4)[:, None], (0.5,), 1e-8, kind='identity')
        assert_allclose(grams.K, np.eye(4))
        self.assertEqual(grams.jitter_used, 0.0)


class ConditionKernelTests(SimpleTestCase):
    def test_delta_gram_matches_exact_points(self):
        A = np.array([[0.0, 1.0], [0.5, 0.5]])
        B = np.array([[0.5, 0.5], [0.0, 1.0], [0.0, 1.5]])
        assert_allclose(delta_gram(A, B), [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])

    def test_identity_ignores_lengthscales(self):
        points = np.array([[0.0], [0.1]])
        assert_allclose(condition_gram(points, points, (1e6,), 'identity'), np.eye(2))

    def test_se_matches_se_gram(self):
        points = np.array([[0.0], [0.3], [0.9]])
        assert_allclose(condition_gram(points, points, (0.4,)), se_gram(points, points, SEKernelParams((0.4,))))

    def test_unknown_kind(self):
        with self.assertRaises(ValueError):
            condition_gram([[0.0]], [[0.0]], (1.0,), 'matern')
