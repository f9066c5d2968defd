# -*- coding: utf-8 -*-
import sys
import unittest
from pathlib import Path

from hypothesis import given
from hypothesis import strategies as st

# 添加项目根目录到Python路径
sys.path.append(str(Path(__file__).parent.parent))

from src.api.Errors import ModelDomainError
from src.tipScripts.Controller import ControllerConfig, FractionEstimator, adaptive_k, observe
from src.tipScripts.DelayModel import p_star

CANONICAL = ControllerConfig(0.1, 4.0, 8)


class TestFractionEstimator(unittest.TestCase):
    def test_counting(self):
        estimator = FractionEstimator(window=10.0)
        self.assertEqual(estimator.current_estimate, 0.0)
        for t in range(4):
            observe(estimator, 0, float(t))
        self.assertEqual(estimator.current_estimate, 0.0)

        estimator = FractionEstimator(window=10.0)
        for t in range(4):
            observe(estimator, 1, float(t))
        self.assertEqual(estimator.current_estimate, 1.0)

        estimator = FractionEstimator(window=10.0)
        for t, cls in enumerate([1, 0, 1, 1]):
            observe(estimator, cls, float(t))
        self.assertEqual(estimator.current_estimate, 0.75)

    def test_eviction(self):
        """早于 t - window 的样本被淘汰"""
        estimator = FractionEstimator(window=5.0)
        observe(estimator, 1, 0.0)
        observe(estimator, 1, 1.0)
        observe(estimator, 0, 5.0)
        self.assertAlmostEqual(estimator.current_estimate, 2 / 3)
        observe(estimator, 0, 6.0)
        self.assertEqual(len(estimator.samples), 3)
        self.assertAlmostEqual(estimator.current_estimate, 1 / 3)
        observe(estimator, 0, 20.0)
        self.assertEqual(estimator.current_estimate, 0.0)

    def test_value_class_index(self):
        estimator = FractionEstimator(window=5.0, value_class=2)
        observe(estimator, 1, 0.0)
        observe(estimator, 2, 0.5)
        self.assertEqual(estimator.current_estimate, 0.5)

    def test_errors(self):
        estimator = FractionEstimator(window=5.0)
        observe(estimator, 0, 3.0)
        with self.assertRaises(ModelDomainError):
            observe(estimator, 0, 2.0)
        with self.assertRaises(ModelDomainError):
            FractionEstimator(window=0.0)
        with self.assertRaises(ModelDomainError):
            ControllerConfig(0.1, 4.0, 1)

    def test_default_window(self):
        self.assertAlmostEqual(CANONICAL.default_window, 41.0)


class TestAdaptiveK(unittest.TestCase):
    def test_examples(self):
        self.assertEqual(adaptive_k(0.0, CANONICAL), 2)
        self.assertEqual(adaptive_k(0.5, CANONICAL), 4)
        self.assertEqual(adaptive_k(0.9, CANONICAL), 8)
        self.assertEqual(adaptive_k(0.9, ControllerConfig(0.1, 4.0, 5)), 5)
        with self.assertRaises(ModelDomainError):
            adaptive_k(1.5, CANONICAL)

    def test_equality_stops_loop(self):
        """p*(k) 恰好等于 p̄ 时停在 k"""
        self.assertEqual(adaptive_k(p_star(0.1, 4.0, 3), CANONICAL), 3)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_monotone(self, a, b):
        low, high = sorted((a, b))
        self.assertLessEqual(adaptive_k(low, CANONICAL), adaptive_k(high, CANONICAL))

    @given(st.floats(0.0, 1.0), st.floats(0.01, 1.0), st.floats(0.0, 20.0), st.integers(2, 12))
    def test_minimality(self, p_bar, h, d_q, k_max):
        config = ControllerConfig(h, d_q, k_max)
        k = adaptive_k(p_bar, config)
        self.assertTrue(2 <= k <= k_max)
        if k < k_max:
            self.assertGreaterEqual(p_star(h, d_q, k), p_bar)
        if k > 2:
            self.assertLess(p_star(h, d_q, k - 1), p_bar)
        if p_bar < p_star(h, d_q, 2):
            self.assertEqual(k, 2)
        if k_max == 2 or p_bar > p_star(h, d_q, k_max - 1):
            self.assertEqual(k, k_max)

    def test_zero_quarantine_stays_at_two(self):
        """d_Q=0 时 p*(k) 恒为 0，p̄=0 不满足 p*(k) < p̄，停在 k=2"""
        config = ControllerConfig(1.0, 0.0, 3)
        self.assertEqual(adaptive_k(0.0, config), 2)
        self.assertEqual(adaptive_k(0.1, config), 3)


if __name__ == "__main__":
    unittest.main()
