import os
import tempfile
import unittest

import numpy as np
from scipy.linalg import expm

from soap3d.common import (ArgumentException, ValidationException,
                           NumericException, InvalidStateException)
from soap3d.head import (StageFlags, HeadParams, soap_pool, soap_max_pool,
                         soap_max_pool_backward, logm_spd,
                         logm_spd_backward, power_normalize,
                         power_normalize_backward, encode_features,
                         forward_from_encoding, head_forward, head_backward,
                         save_checkpoint, load_checkpoint, sidecar_path)

STEP = 1e-5
RTOL = 1e-4
FLOOR = 1e-6

def random_spd(rng, c, low=0.1, high=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((c, c)))
    return (Q * rng.uniform(low, high, c)) @ Q.T

def random_symmetric(rng, c):
    A = rng.standard_normal((c, c))
    return 0.5 * (A + A.T)

def well_conditioned_features(rng, n, c, flags):
    # Keep log entries away from 0, where |v|^h has unbounded derivatives,
    # and max-pooled entries away from ties between rows.
    while True:
        F = rng.standard_normal((n, c))
        if np.abs(encode_features(F, flags).L).min() <= 0.05:
            continue
        if flags.pooling == 'max':
            top = np.sort(F[:, :, None] * F[:, None, :], axis=0)
            if (top[-1] - top[-2]).min() <= 0.05:
                continue
        return F

def numeric_gradient(f, x):
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + STEP
        up = f(x)
        x[idx] = orig - STEP
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * STEP)
    return grad


class GradientCase(unittest.TestCase):
    def assertGradClose(self, analytic, numeric):
        analytic = np.asarray(analytic, dtype=np.float64)
        numeric = np.asarray(numeric, dtype=np.float64)
        err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric),
                                                       FLOOR)
        self.assertLessEqual(err, RTOL)


class TestPooling(unittest.TestCase):
    def test_average_of_outer_products(self):
        F = np.array([[1.0, 2.0], [3.0, 4.0]])
        self.assertTrue(np.allclose(soap_pool(F), [[5.0, 7.0], [7.0, 10.0]]))

    def test_permutation_bit_identical(self):
        rng = np.random.default_rng(0)
        p = HeadParams.initial(8, d=16, seed=1)
        for _ in range(50):
            F = rng.standard_normal((30, 8))
            D, _ = head_forward(F, p)
            D_perm, _ = head_forward(F[rng.permutation(30)], p)
            self.assertTrue(np.array_equal(D, D_perm))

    def test_duplication_invariant(self):
        rng = np.random.default_rng(1)
        p = HeadParams.initial(8, d=16, seed=2)
        for _ in range(50):
            F = rng.standard_normal((30, 8))
            D, _ = head_forward(F, p)
            D_dup, _ = head_forward(np.vstack([F, F]), p)
            self.assertLessEqual(np.abs(D - D_dup).max(), 1e-12)

    def test_positive_semidefinite(self):
        rng = np.random.default_rng(2)
        for trial in range(100):
            # Fewer rows than columns gives a singular matrix.
            n = 5 if trial % 4 == 0 else 40
            S = soap_pool(rng.standard_normal((n, 16)) * rng.uniform(0.1, 5))
            self.assertTrue(np.array_equal(S, S.T))
            self.assertGreaterEqual(np.linalg.eigvalsh(S).min(), -1e-10)

    def test_max_of_outer_products(self):
        F = np.array([[1.0, 2.0], [3.0, -1.0]])
        S, rows = soap_max_pool(F)
        self.assertEqual(S.tolist(), [[9.0, 2.0], [2.0, 4.0]])
        self.assertEqual(rows.tolist(), [[1, 0], [0, 0]])

    def test_max_pool_permutation_and_duplication(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            F = rng.standard_normal((30, 8))
            S, _ = soap_max_pool(F)
            self.assertTrue(np.array_equal(S, soap_max_pool(
                F[rng.permutation(30)])[0]))
            self.assertTrue(np.array_equal(S, soap_max_pool(
                np.vstack([F, F]))[0]))

    def test_max_pool_backward_routes_to_attaining_rows(self):
        F = np.array([[1.0, 2.0], [3.0, -1.0]])
        _, rows = soap_max_pool(F)
        dF = soap_max_pool_backward(F, rows, np.array([[1.0, 0.0],
                                                        [0.0, 0.0]]))
        # d(f_10^2) = 2 f_10, nothing else.
        self.assertEqual(dF.tolist(), [[0.0, 0.0], [6.0, 0.0]])


class TestLogm(GradientCase):
    def test_identity(self):
        L, _ = logm_spd(np.eye(5), eps=0.0)
        self.assertLessEqual(np.abs(L).max(), 1e-12)

    def test_diagonal(self):
        L, _ = logm_spd(np.diag([np.e, 1.0]), eps=0.0)
        self.assertTrue(np.allclose(L, np.diag([1.0, 0.0]), atol=1e-12))

    def test_expm_roundtrip(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            S = random_spd(rng, 16)
            L, _ = logm_spd(S, eps=0.0)
            err = np.linalg.norm(expm(L) - S) / np.linalg.norm(S)
            self.assertLessEqual(err, 1e-8)

    def test_singular_without_eps(self):
        with self.assertRaises(NumericException):
            logm_spd(np.zeros((3, 3)), eps=0.0)

    def test_regularized_singular(self):
        L, cache = logm_spd(np.diag([1.0, 0.0]))
        self.assertTrue(np.isfinite(L).all())
        self.assertGreater(cache.lam.min(), 0.0)

    def test_not_symmetric(self):
        with self.assertRaises(ArgumentException):
            logm_spd(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_backward_identity(self):
        _, cache = logm_spd(np.eye(3), eps=0.0)
        self.assertTrue(np.allclose(logm_spd_backward(cache, np.eye(3)),
                                    np.eye(3)))

    def check_backward(self, c, eps):
        rng = np.random.default_rng(c)
        for _ in range(20):
            S = random_spd(rng, c)
            G = rng.standard_normal((c, c))
            _, cache = logm_spd(S, eps)
            analytic = logm_spd_backward(cache, G)
            # Directional derivatives along symmetric perturbations.
            for _ in range(3):
                V = random_symmetric(rng, c)
                up = np.sum(G * logm_spd(S + STEP * V, eps)[0])
                down = np.sum(G * logm_spd(S - STEP * V, eps)[0])
                self.assertGradClose(np.sum(analytic * V),
                                     (up - down) / (2 * STEP))

    def test_backward_c4(self):
        self.check_backward(4, 0.0)

    def test_backward_c16(self):
        self.check_backward(16, 0.0)

    def test_backward_with_shift(self):
        self.check_backward(4, 1e-2)

    def test_backward_repeated_eigenvalues(self):
        rng = np.random.default_rng(7)
        Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        S = (Q * np.array([2.0, 2.0, 0.5, 0.5])) @ Q.T
        G = random_symmetric(rng, 4)
        _, cache = logm_spd(S, 0.0)
        analytic = logm_spd_backward(cache, G)
        V = random_symmetric(rng, 4)
        up = np.sum(G * logm_spd(S + STEP * V, 0.0)[0])
        down = np.sum(G * logm_spd(S - STEP * V, 0.0)[0])
        self.assertGradClose(np.sum(analytic * V), (up - down) / (2 * STEP))


class TestPowerNorm(GradientCase):
    def test_values(self):
        out = power_normalize(np.array([4.0, -9.0, 0.0]), 0.5)
        self.assertEqual(out.tolist(), [2.0, -3.0, 0.0])

    def test_identity_at_one(self):
        M = np.array([[1.5, -0.2], [0.0, 3.0]])
        self.assertTrue(np.array_equal(power_normalize(M, 1.0), M))

    def test_zero_entries_have_zero_gradient(self):
        dM, dh = power_normalize_backward(np.zeros((2, 2)), 0.75,
                                          np.ones((2, 2)))
        self.assertTrue(np.all(dM == 0.0))
        self.assertEqual(dh, 0.0)

    def test_backward(self):
        for c in (4, 16):
            rng = np.random.default_rng(c)
            for _ in range(20):
                M = rng.uniform(0.1, 2.0, (c, c)) * rng.choice([-1.0, 1.0],
                                                               (c, c))
                G = rng.standard_normal((c, c))
                h = rng.uniform(0.3, 1.0)
                dM, dh = power_normalize_backward(M, h, G)
                self.assertGradClose(dM, numeric_gradient(
                    lambda x: np.sum(G * power_normalize(x, h)), M))
                hp, hm = min(h + STEP, 1.0), h - STEP
                numeric_h = (np.sum(G * power_normalize(M, hp)) -
                             np.sum(G * power_normalize(M, hm))) / (hp - hm)
                self.assertGradClose(dh, numeric_h)

    def test_bad_exponent(self):
        with self.assertRaises(ArgumentException):
            power_normalize(np.ones(2), 0.0)


class TestComposedHead(GradientCase):
    def check_composed(self, flags):
        rng = np.random.default_rng(11)
        for seed in range(20):
            F = well_conditioned_features(rng, 10, 4, flags)
            p = HeadParams.initial(4, d=8, h=rng.uniform(0.5, 0.9),
                                   flags=flags, seed=seed)
            r = rng.standard_normal(p.d)
            D, cache = head_forward(F, p)
            dF, dW, dh = head_backward(cache, p, r)

            self.assertGradClose(dF, numeric_gradient(
                lambda x: r @ head_forward(x, p)[0], F))
            if flags.use_fc:
                self.assertGradClose(dW, numeric_gradient(
                    lambda w: r @ head_forward(F, p.evolve(W=w))[0], p.W))
            if flags.use_pn:
                up = r @ head_forward(F, p.evolve(h=p.h + STEP))[0]
                down = r @ head_forward(F, p.evolve(h=p.h - STEP))[0]
                self.assertGradClose(dh, (up - down) / (2 * STEP))

    def test_full_head(self):
        self.check_composed(StageFlags(True, True, True))

    def test_fc_log(self):
        self.check_composed(StageFlags(True, False, True))

    def test_fc_only(self):
        self.check_composed(StageFlags(False, False, True))

    def test_no_fc(self):
        self.check_composed(StageFlags(True, True, False))

    def test_max_pooling(self):
        self.check_composed(StageFlags(False, True, True, pooling='max'))

    def test_max_pooling_fc_only(self):
        self.check_composed(StageFlags(False, False, True, pooling='max'))

    def test_unit_norm(self):
        rng = np.random.default_rng(3)
        p = HeadParams.initial(16, seed=4)
        D, _ = head_forward(rng.standard_normal((50, 16)), p)
        self.assertEqual(D.shape, (256,))
        self.assertAlmostEqual(np.linalg.norm(D), 1.0, places=12)

    def test_pool_only_descriptor(self):
        p = HeadParams(2, flags=StageFlags(False, False, False))
        D, _ = head_forward(np.array([[1.0, 0.0]]), p)
        self.assertEqual(D.tolist(), [1.0, 0.0, 0.0, 0.0])

    def test_encoding_reuse(self):
        rng = np.random.default_rng(5)
        F = rng.standard_normal((20, 4))
        p = HeadParams.initial(4, d=8, seed=0)
        enc = encode_features(F, p.flags)
        self.assertTrue(np.array_equal(forward_from_encoding(enc, p)[0],
                                       head_forward(F, p)[0]))

    def test_stale_cache(self):
        rng = np.random.default_rng(6)
        p = HeadParams.initial(4, d=8, seed=0)
        _, cache = head_forward(rng.standard_normal((20, 4)), p)
        with self.assertRaises(InvalidStateException):
            head_backward(cache, p.evolve(h=0.5), np.zeros(8))
        with self.assertRaises(InvalidStateException):
            head_backward(cache, p, np.zeros(3))

    def test_frozen_features(self):
        rng = np.random.default_rng(8)
        p = HeadParams.initial(4, d=8, seed=0)
        D, cache = head_forward(rng.standard_normal((20, 4)), p)
        dF, dW, _ = head_backward(cache, p, D, wrt_features=False)
        self.assertIsNone(dF)
        self.assertEqual(dW.shape, p.W.shape)


class TestHeadParams(unittest.TestCase):
    def test_bad_h(self):
        with self.assertRaises(ValidationException):
            HeadParams(4, h=0.0, W=np.zeros((8, 16)))
        with self.assertRaises(ValidationException):
            HeadParams(4, h=1.5, W=np.zeros((8, 16)))

    def test_bad_weights(self):
        with self.assertRaises(ValidationException):
            HeadParams(4, W=np.zeros((8, 15)))
        with self.assertRaises(ValidationException):
            HeadParams(4, W=None)

    def test_initial_range_and_seed(self):
        p = HeadParams.initial(4, d=8, seed=9)
        self.assertTrue(np.all(np.abs(p.W) <= 0.25))
        self.assertTrue(np.array_equal(p.W, HeadParams.initial(4, d=8,
                                                               seed=9).W))
        self.assertEqual(p.d, 8)
        self.assertEqual(HeadParams.initial(
            4, flags=StageFlags(use_fc=False)).d, 16)

    def test_flags_byte(self):
        for byte in range(8):
            self.assertEqual(StageFlags.from_byte(byte).to_byte(), byte)
        self.assertEqual(StageFlags().label, 'FC+LOG+PN')
        self.assertEqual(StageFlags(False, False, False).label, 'pool')
        for byte in range(8, 16):
            if byte & 1:
                continue
            flags = StageFlags.from_byte(byte)
            self.assertEqual(flags.pooling, 'max')
            self.assertEqual(flags.to_byte(), byte)
        self.assertEqual(StageFlags(False, True, True, 'max').label,
                         'max+FC+PN')

    def test_max_pooling_excludes_log(self):
        with self.assertRaises(ValidationException):
            StageFlags(pooling='max')
        with self.assertRaises(ValidationException):
            StageFlags(False, True, True, pooling='median')

    def test_checkpoint_roundtrip(self):
        p = HeadParams.initial(4, d=8, h=0.6, seed=3)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'head.soapm')
            save_checkpoint(p, path, {'train.seed': 3})
            self.assertTrue(os.path.exists(sidecar_path(path)))
            back = load_checkpoint(path)
        self.assertEqual(back.h, 0.6)
        self.assertEqual(back.flags, p.flags)
        self.assertTrue(np.array_equal(back.W, p.W))

if __name__ == '__main__':
    unittest.main()
