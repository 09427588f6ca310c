"""
Unit Tests for the subsampled Fourier operator, sampling masks and noise
"""

import math
import unittest

import numpy as np
import numpy.testing

import pyqmrirecon.core as core
import pyqmrirecon.forward as forward


def random_complex(generator, shape):
    return generator.standard_normal(shape) + \
        1j * generator.standard_normal(shape)


class FourierTests(unittest.TestCase):
    """
    tests for the unitary FFT and the masked operator
    """

    def setUp(self):
        self.generator = np.random.default_rng(101)
        self.grid = core.Grid(16, 12)

    def test_round_trip(self):
        """
        the inverse FFT undoes the FFT
        """
        image = random_complex(self.generator, (3,) + self.grid.shape)
        back = forward.ifft2_unitary(forward.fft2_unitary(image))
        self.assertLessEqual(np.abs(back - image).max(), 1e-12)

    def test_parseval(self):
        """
        the FFT keeps the Euclidean norm
        """
        image = random_complex(self.generator, self.grid.shape)
        self.assertAlmostEqual(
            np.linalg.norm(forward.fft2_unitary(image)),
            np.linalg.norm(image), places=10)

    def test_dc_row(self):
        """
        row 0, column 0 holds the scaled image sum
        """
        image = self.generator.standard_normal(self.grid.shape)
        coeffs = forward.fft2_unitary(image)
        self.assertAlmostEqual(coeffs[0, 0].real,
                               image.sum() / math.sqrt(self.grid.size),
                               places=12)

    def test_adjoint_identity(self):
        """
        <A u, y> = <u, A^H y> over 100 random trials
        """
        for _ in range(100):
            masks = self.generator.random((2,) + self.grid.shape) > 0.6
            operator = forward.MaskedFourier(masks)
            image = random_complex(self.generator, masks.shape)
            data = random_complex(self.generator, masks.shape)
            left = np.vdot(operator.forward(image), data)
            right = np.vdot(image, operator.adjoint(data))
            self.assertLessEqual(abs(left - right), 1e-10 * abs(left) + 1e-12)

    def test_forward_adjoint_data_space(self):
        """
        A A^H is the identity on sampled data
        """
        pattern = forward.make_cartesian_masks(self.grid, 4, 5, seed=1)
        full = random_complex(self.generator, (5,) + self.grid.shape)
        kspace = core.KSpaceData.from_full(self.grid, full, pattern.masks)
        again = forward.apply_forward(forward.apply_adjoint(kspace), pattern)
        for first, second in zip(kspace.coeffs, again.coeffs):
            self.assertLessEqual(np.abs(first - second).max(), 1e-12)

    def test_data_prox_optimality(self):
        """
        the data prox satisfies (p - v) + tau A^H (A p - y) = 0
        """
        masks = self.generator.random(self.grid.shape) > 0.5
        operator = forward.MaskedFourier(masks)
        point = random_complex(self.generator, self.grid.shape)
        data = masks * random_complex(self.generator, self.grid.shape)
        tau = 0.7
        prox = operator.data_prox(point, data, tau)
        gradient = prox - point + tau * operator.adjoint(
            operator.forward(prox) - data)
        self.assertLessEqual(np.abs(gradient).max(), 1e-12)

    def test_operator_norm(self):
        """
        a masked unitary FFT has norm one
        """
        masks = self.generator.random(self.grid.shape) > 0.5
        norm = forward.operator_norm(forward.MaskedFourier(masks),
                                     self.grid.shape)
        self.assertAlmostEqual(norm, 1.0, places=6)

    def test_strongly_convex(self):
        """
        only full sampling makes the data term strongly convex
        """
        self.assertTrue(forward.MaskedFourier(
            np.ones(self.grid.shape, bool)).strongly_convex)
        masks = np.ones(self.grid.shape, bool)
        masks[3, 3] = False
        self.assertFalse(forward.MaskedFourier(masks).strongly_convex)

    def test_frame_mismatch(self):
        """
        series and masks must have the same number of frames
        """
        pattern = forward.full_sampling(self.grid, 3)
        series = core.ImageSeries(self.grid, np.zeros((2,) + self.grid.shape))
        with self.assertRaises(core.GridMismatch):
            forward.apply_forward(series, pattern)


class SamplingTests(unittest.TestCase):
    """
    tests for Cartesian undersampling masks
    """

    def setUp(self):
        self.grid = core.Grid(32, 32)

    def test_rows_per_frame(self):
        """
        every frame keeps ceil(ny / factor) full rows including row 0
        """
        pattern = forward.make_cartesian_masks(self.grid, 8, 10, seed=3)
        rows = pattern.masks.all(axis=2)
        numpy.testing.assert_array_equal(rows.sum(axis=1), 4)
        self.assertTrue(rows[:, 0].all())
        numpy.testing.assert_array_equal(pattern.counts(), 4 * 32)

    def test_uneven_factor(self):
        """
        non dividing factors round the kept rows up
        """
        pattern = forward.make_cartesian_masks(self.grid, 5, 2, seed=3)
        numpy.testing.assert_array_equal(pattern.masks.all(axis=2).sum(axis=1),
                                         7)

    def test_deterministic(self):
        """
        the same seed gives the same masks
        """
        first = forward.make_cartesian_masks(self.grid, 8, 6, seed=4)
        second = forward.make_cartesian_masks(self.grid, 8, 6, seed=4)
        numpy.testing.assert_array_equal(first.masks, second.masks)

    def test_complementary(self):
        """
        complementary masks change from frame to frame, fixed ones do not
        """
        varying = forward.make_cartesian_masks(self.grid, 8, 6, seed=4)
        fixed = forward.make_cartesian_masks(self.grid, 8, 6, seed=4,
                                             complementary=False)
        self.assertGreater(len({frame.tobytes()
                                for frame in varying.masks}), 1)
        self.assertEqual(len({frame.tobytes() for frame in fixed.masks}), 1)

    def test_factor_one(self):
        """
        factor 1 samples everything
        """
        pattern = forward.make_cartesian_masks(self.grid, 1, 2, seed=0)
        self.assertTrue(pattern.masks.all())

    def test_bad_factor(self):
        """
        factors below 1 or above ny are rejected
        """
        with self.assertRaises(forward.InvalidSampling):
            forward.make_cartesian_masks(self.grid, 0.5, 2, seed=0)
        with self.assertRaises(forward.InvalidSampling):
            forward.make_cartesian_masks(self.grid, 64, 2, seed=0)


class NoiseTests(unittest.TestCase):
    """
    tests for complex Gaussian noise
    """

    def setUp(self):
        self.grid = core.Grid(64, 64)
        pattern = forward.full_sampling(self.grid, 2)
        series = core.ImageSeries(self.grid,
                                  np.zeros((2,) + self.grid.shape))
        self.clean = forward.apply_forward(series, pattern)

    def test_zero_sigma(self):
        """
        sigma 0 leaves the data unchanged
        """
        noisy = forward.add_noise(self.clean, 0.0, core.Rng(1))
        numpy.testing.assert_array_equal(noisy.to_full(), self.clean.to_full())

    def test_negative_sigma(self):
        """
        negative noise levels are rejected
        """
        with self.assertRaises(forward.InvalidNoise):
            forward.add_noise(self.clean, -1.0, core.Rng(1))

    def test_deterministic(self):
        """
        the same seed gives the same noise
        """
        first = forward.add_noise(self.clean, 0.1, core.Rng(5))
        second = forward.add_noise(self.clean, 0.1, core.Rng(5))
        numpy.testing.assert_array_equal(first.to_full(), second.to_full())

    def test_noise_level(self):
        """
        the per component standard deviation matches sigma and is found
        again by the MAD estimate
        """
        noisy = forward.add_noise(self.clean, 0.5, core.Rng(5))
        values = np.concatenate([frame for frame in noisy.coeffs])
        parts = np.concatenate([values.real, values.imag])
        self.assertAlmostEqual(float(parts.std()), 0.5, delta=0.025)
        self.assertAlmostEqual(forward.estimate_sigma(noisy), 0.5,
                               delta=0.05)


if __name__ == '__main__':
    unittest.main()
