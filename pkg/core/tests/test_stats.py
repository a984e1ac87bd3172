import math
import random
import unittest

from django.test import SimpleTestCase

from core.exceptions import DegenerateVariance, InsufficientSamples, SingularFit
from core.stats import (
    efficiency_ratio,
    linear_fit,
    mean_se,
    predicted_ratio,
    regularized_beta,
    t_two_sided_p,
    welch_t,
)

try:
    from scipy import stats as scipy_stats
except ImportError:  # scipy is a dev extra
    scipy_stats = None


class MeanSETestCase(SimpleTestCase):
    def test_values(self):
        mean, se = mean_se([1.0, 2.0, 3.0, 4.0])
        self.assertEqual(mean, 2.5)
        self.assertAlmostEqual(se, math.sqrt(5 / 3) / 2, places=12)

    def test_too_few(self):
        with self.assertRaises(InsufficientSamples):
            mean_se([1.0])


class RegularizedBetaTestCase(SimpleTestCase):
    def test_bounds(self):
        self.assertEqual(regularized_beta(0.0, 2, 3), 0.0)
        self.assertEqual(regularized_beta(1.0, 2, 3), 1.0)

    def test_symmetric_midpoint(self):
        self.assertAlmostEqual(regularized_beta(0.5, 4, 4), 0.5, places=12)

    def test_closed_form(self):
        # I_x(1, b) = 1 - (1 - x)^b
        self.assertAlmostEqual(regularized_beta(0.3, 1, 5), 1 - 0.7**5, places=12)


class WelchTTestCase(SimpleTestCase):
    def test_identical_samples(self):
        result = welch_t([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        self.assertEqual(result.t, 0.0)
        self.assertAlmostEqual(result.p_two_sided, 1.0, places=12)

    def test_zero_variance_equal_means(self):
        result = welch_t([2.0, 2.0], [2.0, 2.0, 2.0])
        self.assertEqual(tuple(result), (0.0, 3.0, 1.0))

    def test_zero_variance_different_means(self):
        with self.assertRaises(DegenerateVariance):
            welch_t([1.0, 1.0], [2.0, 2.0])

    def test_too_few(self):
        with self.assertRaises(InsufficientSamples):
            welch_t([1.0], [1.0, 2.0])

    def test_p_shrinks_as_groups_separate(self):
        base = [1.0, 2.0, 3.0, 4.0, 5.0]
        ps = [welch_t(base, [x + shift for x in base]).p_two_sided for shift in (0.5, 1, 2, 4)]
        self.assertEqual(ps, sorted(ps, reverse=True))
        self.assertLess(ps[-1], ps[0])

    def test_p_equals_one_at_t_zero(self):
        self.assertEqual(t_two_sided_p(0.0, 7.0), 1.0)
        self.assertEqual(t_two_sided_p(float("inf"), 7.0), 0.0)

    @unittest.skipUnless(scipy_stats, "scipy not installed")
    def test_matches_scipy(self):
        cases = [([1, 2, 3, 4, 5], [6, 7, 8, 9, 10])]
        rng = random.Random(1)
        for _ in range(20):
            cases.append((
                [rng.gauss(0, 1) for _ in range(rng.randint(2, 30))],
                [rng.gauss(rng.uniform(-2, 2), rng.uniform(0.2, 3)) for _ in range(rng.randint(2, 30))],
            ))
        for a, b in cases:
            ours = welch_t(a, b)
            theirs = scipy_stats.ttest_ind(a, b, equal_var=False)
            self.assertAlmostEqual(ours.t, float(theirs.statistic), delta=1e-6)
            self.assertAlmostEqual(ours.p_two_sided, float(theirs.pvalue), delta=1e-6)


class LinearFitTestCase(SimpleTestCase):
    def test_exact_line(self):
        fit = linear_fit([(1, 2), (2, 4), (3, 6)])
        self.assertAlmostEqual(fit.slope, 2.0, places=12)
        self.assertAlmostEqual(fit.intercept, 0.0, places=12)
        self.assertAlmostEqual(fit.r_squared, 1.0, places=12)

    def test_noisy_line(self):
        fit = linear_fit([(1, 2.1), (2, 3.9), (3, 6.2), (4, 7.8)])
        self.assertLess(fit.r_squared, 1.0)
        self.assertGreater(fit.r_squared, 0.95)

    def test_singular(self):
        with self.assertRaises(SingularFit):
            linear_fit([(3, 1), (3, 2)])
        with self.assertRaises(SingularFit):
            linear_fit([(1, 1)])


class RatioTestCase(SimpleTestCase):
    def test_observed_ratios(self):
        self.assertAlmostEqual(efficiency_ratio(1191, 561), 2.12, places=2)
        self.assertAlmostEqual(efficiency_ratio(2883, 816), 3.53, places=2)

    def test_zero_focus(self):
        with self.assertRaises(ZeroDivisionError):
            efficiency_ratio(100, 0)

    def test_predicted_ratio_limit(self):
        self.assertAlmostEqual(predicted_ratio(500, 25, 10**6), 20.0, delta=0.01)

    def test_predicted_ratio_increasing(self):
        ratios = [predicted_ratio(500, 25, n) for n in range(1, 200)]
        self.assertTrue(all(a < b for a, b in zip(ratios, ratios[1:])))
        self.assertLess(ratios[-1], 500 / 25)

    def test_predicted_ratio_bad_args(self):
        with self.assertRaises(ValueError):
            predicted_ratio(0, 25, 3)
