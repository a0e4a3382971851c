import numpy as np
import pytest

from quailora.calibration import CorrelationMatrix
from quailora.errors import ShapeError
from quailora.initializer import (
    LoraPair,
    baseline_init,
    calibrated_objective,
    init_uncalibrated,
    quailora_init,
    uncalibrated_objective,
    update_a,
    update_b,
)
from quailora.quantizer import quantize_blockwise


def corr(matrix, samples=0):
    m = np.asarray(matrix, dtype=np.float64)
    return CorrelationMatrix(h=0.5 * (m + m.T), samples=samples)


def random_spd_corr(rng, n):
    g = rng.standard_normal((n, n))
    return corr(g @ g.T + np.eye(n), samples=n)


def zero_pair(m, n, r, alpha=16.0):
    return LoraPair(a=np.zeros((m, r)), b=np.zeros((n, r)), rank=r, alpha=alpha)


class TestObjectives:
    def test_uncalibrated_zero_residual(self):
        rng = np.random.default_rng(0)
        pair = LoraPair(a=rng.standard_normal((5, 2)), b=rng.standard_normal((4, 2)), rank=2)
        assert uncalibrated_objective(pair.product(), pair) <= 1e-24

    def test_uncalibrated_diagonal(self):
        delta = np.diag([3.0, 2.0, 1.0])
        assert uncalibrated_objective(delta, zero_pair(3, 3, 1)) == pytest.approx(7.0)

    def test_calibrated_zero_residual(self):
        rng = np.random.default_rng(1)
        pair = LoraPair(a=rng.standard_normal((5, 2)), b=rng.standard_normal((4, 2)), rank=2)
        h = random_spd_corr(rng, 4)
        assert calibrated_objective(pair.product(), pair, h) == 0.0

    def test_identity_weighting_equals_uncalibrated(self):
        rng = np.random.default_rng(2)
        delta = rng.standard_normal((6, 5))
        pair = LoraPair(a=rng.standard_normal((6, 2)), b=rng.standard_normal((5, 2)), rank=2)
        cal = calibrated_objective(delta, pair, corr(np.eye(5)))
        unc = uncalibrated_objective(delta, pair)
        assert cal == pytest.approx(unc, rel=1e-12)

    def test_scalar_case(self):
        assert calibrated_objective([[1.0]], zero_pair(1, 1, 1), corr([[4.0]])) == 2.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            uncalibrated_objective(np.ones((3, 3)), zero_pair(2, 3, 1))
        with pytest.raises(ShapeError):
            calibrated_objective(np.ones((2, 3)), zero_pair(2, 3, 1), corr(np.eye(2)))


class TestInitUncalibrated:
    def test_exact_recovery_low_rank(self):
        rng = np.random.default_rng(3)
        delta = rng.standard_normal((8, 2)) @ rng.standard_normal((2, 6))
        pair = init_uncalibrated(delta, 3)
        bound = 1e-9 * np.linalg.norm(delta) ** 2
        assert uncalibrated_objective(delta, pair) <= bound
        assert calibrated_objective(delta, pair, corr(np.eye(6))) <= bound

    def test_diagonal_eckart_young(self):
        pair = init_uncalibrated(np.diag([3.0, 2.0, 1.0]), 2)
        assert np.allclose(pair.product(), np.diag([3.0, 2.0, 0.0]), atol=1e-12)
        assert uncalibrated_objective(np.diag([3.0, 2.0, 1.0]), pair) == pytest.approx(0.5)

    def test_beats_random_competitors(self):
        rng = np.random.default_rng(4)
        delta = rng.standard_normal((16, 12))
        pair = init_uncalibrated(delta, 4)
        best = uncalibrated_objective(delta, pair)
        for _ in range(100):
            rival = LoraPair(
                a=rng.standard_normal((16, 4)), b=rng.standard_normal((12, 4)), rank=4
            )
            assert best <= uncalibrated_objective(delta, rival)

    def test_objective_equals_tail_singular_values(self):
        rng = np.random.default_rng(5)
        delta = rng.standard_normal((10, 6))
        pair = init_uncalibrated(delta, 2)
        sigma = np.linalg.svd(delta, compute_uv=False)
        expected = 0.5 * np.sum(sigma[2:] ** 2)
        assert uncalibrated_objective(delta, pair) == pytest.approx(expected, rel=1e-9)

    def test_rank_out_of_range(self):
        with pytest.raises(ShapeError):
            init_uncalibrated(np.ones((4, 3)), 4)


class TestUpdateA:
    def test_scalar(self):
        a = update_a([[2.0]], [[1.0]], corr([[1.0]]))
        assert a.shape == (1, 1)
        assert a[0, 0] == pytest.approx(2.0)

    def test_identity_weighting_keeps_svd_init_fixed(self):
        rng = np.random.default_rng(6)
        delta = rng.standard_normal((9, 7))
        pair = init_uncalibrated(delta, 3)
        a_new = update_a(delta, pair.b, corr(np.eye(7)))
        before = pair.product()
        after = a_new @ pair.b.T
        assert np.linalg.norm(after - before) <= 1e-9 * np.linalg.norm(before)

    def test_matches_least_squares_oracle(self):
        rng = np.random.default_rng(7)
        delta = rng.standard_normal((8, 6))
        b = rng.standard_normal((6, 2))
        h = random_spd_corr(rng, 6)
        a = update_a(delta, b, h)
        # oracle: whiten with the Cholesky factor and solve by lstsq
        ell = np.linalg.cholesky(h.h)
        oracle = np.linalg.lstsq((b.T @ ell).T, (delta @ ell).T, rcond=None)[0].T
        assert np.linalg.norm(a - oracle) <= 1e-8 * np.linalg.norm(oracle)


class TestUpdateB:
    def test_scalar(self):
        b = update_b([[2.0]], [[1.0]])
        assert b.shape == (1, 1)
        assert b[0, 0] == pytest.approx(2.0)

    def test_orthonormal_columns(self):
        rng = np.random.default_rng(8)
        q, _ = np.linalg.qr(rng.standard_normal((7, 3)))
        delta = rng.standard_normal((7, 5))
        b = update_b(delta, q)
        assert np.allclose(b, delta.T @ q, atol=1e-12)

    def test_matches_oracle_and_weighting_independence(self):
        rng = np.random.default_rng(9)
        delta = rng.standard_normal((8, 6))
        a = rng.standard_normal((8, 2))
        b = update_b(delta, a)
        oracle = np.linalg.lstsq(a, delta, rcond=None)[0].T
        assert np.linalg.norm(b - oracle) <= 1e-10 * np.linalg.norm(oracle)
        # optimal under any nonsingular weighting: no perturbation improves it
        for h in (random_spd_corr(rng, 6), random_spd_corr(rng, 6)):
            base = calibrated_objective(delta, LoraPair(a=a, b=b, rank=2), h)
            for _ in range(20):
                shift = 1e-4 * rng.standard_normal(b.shape)
                rival = LoraPair(a=a, b=b + shift, rank=2)
                assert calibrated_objective(delta, rival, h) >= base - 1e-12 * abs(base)


class TestQuailoraInit:
    def _instance(self, rng, m, n, block_size=16):
        w = rng.standard_normal((m, n))
        q = quantize_blockwise(w, 4, block_size=block_size)
        return w, q

    def test_scaled_identity_equivalence(self):
        rng = np.random.default_rng(10)
        w, q = self._instance(rng, 12, 9)
        c = 3.0
        h = corr(c * np.eye(9))
        pair, report = quailora_init(w, q, h, r=3, iters=20)
        from quailora.quantizer import quant_error

        delta = quant_error(w, q)
        svd_pair = init_uncalibrated(delta, 3)
        expected = c * uncalibrated_objective(delta, svd_pair)
        assert report.objective_trace[0] == pytest.approx(expected, rel=1e-9)
        spread = max(report.objective_trace) - min(report.objective_trace)
        assert spread <= 1e-9 * report.objective_trace[0]

    def test_low_rank_error_recovered_exactly(self):
        rng = np.random.default_rng(11)
        w = rng.standard_normal((10, 4)) @ rng.standard_normal((4, 8))
        q = quantize_blockwise(np.zeros((10, 8)), 4, block_size=8)  # delta == w
        h = random_spd_corr(rng, 8)
        pair, report = quailora_init(w, q, h, r=4, iters=5)
        baseline = calibrated_objective(w, zero_pair(10, 8, 4), h)
        assert report.objective_trace[-1] <= 1e-9 * baseline

    def test_zero_iters_returns_svd_init(self):
        rng = np.random.default_rng(12)
        w, q = self._instance(rng, 8, 6)
        h = random_spd_corr(rng, 6)
        pair, report = quailora_init(w, q, h, r=2, iters=0)
        from quailora.quantizer import quant_error

        svd_pair = init_uncalibrated(quant_error(w, q), 2)
        assert np.array_equal(pair.a, svd_pair.a)
        assert np.array_equal(pair.b, svd_pair.b)
        assert len(report.objective_trace) == 1

    def test_trace_monotone_and_improves_on_zero_pair(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            m, n = int(rng.integers(6, 20)), int(rng.integers(6, 20))
            r = int(rng.integers(1, 5))
            w, q = self._instance(rng, m, n, block_size=8)
            h = random_spd_corr(rng, n)
            _, report = quailora_init(w, q, h, r=r, iters=20)
            trace = report.objective_trace
            assert len(trace) == 21
            for k in range(len(trace) - 1):
                assert trace[k + 1] <= trace[k] * (1 + 1e-9)
            from quailora.quantizer import quant_error

            zero_obj = calibrated_objective(quant_error(w, q), zero_pair(m, n, r), h)
            assert trace[-1] <= zero_obj * (1 + 1e-12)

    def test_half_step_perturbation_optimality(self):
        rng = np.random.default_rng(14)
        delta = rng.standard_normal((10, 8))
        h = random_spd_corr(rng, 8)
        pair = init_uncalibrated(delta, 3)
        a = update_a(delta, pair.b, h)
        base_a = calibrated_objective(delta, LoraPair(a=a, b=pair.b, rank=3), h)
        for _ in range(50):
            shift = 1e-4 * rng.standard_normal(a.shape)
            rival = LoraPair(a=a + shift, b=pair.b, rank=3)
            assert calibrated_objective(delta, rival, h) >= base_a - 1e-12 * base_a
        b = update_b(delta, a)
        base_b = calibrated_objective(delta, LoraPair(a=a, b=b, rank=3), h)
        for _ in range(50):
            shift = 1e-4 * rng.standard_normal(b.shape)
            rival = LoraPair(a=a, b=b + shift, rank=3)
            assert calibrated_objective(delta, rival, h) >= base_b - 1e-12 * base_b

    def test_matches_gradient_descent_oracle(self):
        # Both optimizers start from the SVD warm start; run the
        # alternating scheme to convergence and compare against 10000
        # plain gradient steps.
        for seed in (2024, 2025, 2026):
            rng = np.random.default_rng(seed)
            m, n, r = 32, 24, 4
            w, q = self._instance(rng, m, n, block_size=8)
            h = random_spd_corr(rng, n)
            from quailora.quantizer import quant_error

            delta = quant_error(w, q)
            pair0 = init_uncalibrated(delta, r)
            svd_obj = calibrated_objective(delta, pair0, h)

            _, report = quailora_init(w, q, h, r=r, iters=200)
            als_obj = report.objective_trace[-1]
            assert als_obj <= svd_obj * (1 + 1e-12)

            lam = np.linalg.eigvalsh(h.h).max()
            lr = 0.5 / (lam * max(np.linalg.norm(pair0.a, 2), np.linalg.norm(pair0.b, 2)) ** 2)
            a, b = pair0.a.copy(), pair0.b.copy()
            for _ in range(10000):
                resid = delta - a @ b.T
                rh = resid @ h.h
                a, b = a + lr * (rh @ b), b + lr * (rh.T @ a)
            gd_obj = calibrated_objective(delta, LoraPair(a=a, b=b, rank=r), h)
            assert als_obj == pytest.approx(gd_obj, rel=1e-6)

    def test_rank_monotonicity(self):
        rng = np.random.default_rng(15)
        w, q = self._instance(rng, 24, 20, block_size=10)
        h = random_spd_corr(rng, 20)
        finals = []
        for r in (1, 2, 4, 8):
            _, report = quailora_init(w, q, h, r=r, iters=20)
            finals.append(report.objective_trace[-1])
        for lo, hi in zip(finals[1:], finals[:-1]):
            assert lo <= hi * (1 + 1e-9)


class TestBaselineInit:
    def test_b_is_exactly_zero(self):
        pair = baseline_init(6, 5, 3, seed=0)
        assert np.array_equal(pair.b, np.zeros((5, 3)))
        assert np.array_equal(pair.product(), np.zeros((6, 5)))

    def test_deterministic(self):
        first = baseline_init(7, 4, 2, seed=99)
        second = baseline_init(7, 4, 2, seed=99)
        assert np.array_equal(first.a, second.a)
        assert not np.array_equal(first.a, baseline_init(7, 4, 2, seed=100).a)

    def test_entry_variance_near_inverse_rank(self):
        pair = baseline_init(1024, 1024, 64, seed=1)
        variance = pair.a.var()
        assert abs(variance - 1.0 / 64) <= 0.2 / 64

    def test_alpha_metadata(self):
        assert baseline_init(2, 2, 1, seed=0).alpha == 16.0
        assert baseline_init(2, 2, 1, seed=0, alpha=32.0).alpha == 32.0
