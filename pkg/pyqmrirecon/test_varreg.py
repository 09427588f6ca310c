"""
Unit Tests for the variational frame reconstruction and the two step
parameter fit
"""

import os
import tempfile
import unittest

import numpy as np
import numpy.testing

import pyqmrirecon.bloch as bloch
import pyqmrirecon.core as core
import pyqmrirecon.forward as forward
import pyqmrirecon.mrf as mrf
import pyqmrirecon.rawarray as rawarray
import pyqmrirecon.varreg as varreg


def box():
    return core.AdmissibleBox(0.0, 2.0, 0.05, 5.0, 0.005, 2.5)


def taut_string(data, weight):
    """
    exact minimiser of 1/2 ||u - y||^2 + weight sum |u[i+1] - u[i]|: the
    slopes of the shortest path from (0, 0) to (n, sum y) that stays
    within weight of the running sums of y
    """
    data = np.asarray(data, dtype=float)
    count = data.size
    running = np.concatenate([[0.0], np.cumsum(data)])
    lower = running - weight
    upper = running + weight
    lower[[0, count]] = upper[[0, count]] = running[[0, count]]
    string = np.zeros(count + 1)
    string[count] = running[count]
    anchor = 0
    while anchor < count:
        low, high = -np.inf, np.inf
        low_at = high_at = anchor
        kink = None
        for point in range(anchor + 1, count + 1):
            span = point - anchor
            rising = (lower[point] - string[anchor]) / span
            falling = (upper[point] - string[anchor]) / span
            if rising > high:
                kink = (high_at, high)
                break
            if falling < low:
                kink = (low_at, low)
                break
            if rising > low:
                low, low_at = rising, point
            if falling < high:
                high, high_at = falling, point
        if kink is None:
            kink = (count, (running[count] - string[anchor]) / (count - anchor))
        end, slope = kink
        for point in range(anchor + 1, end + 1):
            string[point] = string[anchor] + slope * (point - anchor)
        anchor = end
    return np.diff(string)


class DifferenceOperatorTests(unittest.TestCase):
    """
    tests for the discrete gradients and their adjoints
    """

    def setUp(self):
        self.generator = np.random.default_rng(31)
        self.shape = (7, 9)

    def test_grad_div_adjoint(self):
        """
        <grad u, p> = -<u, div p>
        """
        for _ in range(20):
            image = self.generator.standard_normal(self.shape) + \
                1j * self.generator.standard_normal(self.shape)
            field = self.generator.standard_normal((2,) + self.shape) + \
                1j * self.generator.standard_normal((2,) + self.shape)
            left = np.vdot(varreg.grad(image), field)
            right = -np.vdot(image, varreg.div(field))
            self.assertLessEqual(abs(left - right), 1e-10 * abs(left))

    def test_constant_has_no_gradient(self):
        """
        constant images have zero gradient and zero TV
        """
        image = np.full(self.shape, 3.5)
        self.assertEqual(np.abs(varreg.grad(image)).max(), 0.0)
        energy = varreg.tv_energy(image, image, forward.Identity(), 1.0)
        self.assertEqual(energy, 0.0)

    def test_sym_grad_adjoint(self):
        """
        sym_grad_adjoint is the adjoint of sym_grad on the restricted
        subspace
        """
        for _ in range(20):
            field = varreg.project_field(
                self.generator.standard_normal((2,) + self.shape))
            tensor = self.generator.standard_normal((3,) + self.shape)
            left = varreg.sym_inner(varreg.sym_grad(field), tensor)
            right = float(np.sum(field * varreg.sym_grad_adjoint(tensor)))
            self.assertAlmostEqual(left, right, places=9)

    def test_affine_gradient_in_kernel(self):
        """
        the gradient of an affine image has zero symmetrised gradient
        """
        ys, xs = np.mgrid[0:self.shape[0], 0:self.shape[1]]
        field = varreg.grad(0.3 * xs - 0.7 * ys + 2.0)
        numpy.testing.assert_array_equal(varreg.project_field(field), field)
        self.assertLessEqual(np.abs(varreg.sym_grad(field)).max(), 1e-14)


class WeightFieldTests(unittest.TestCase):
    """
    tests for regularisation weights
    """

    def test_beta_default(self):
        """
        beta defaults to twice alpha
        """
        weights = varreg.WeightField(0.25, shape=(3, 4))
        numpy.testing.assert_array_equal(weights.beta, 0.5)
        self.assertEqual(weights.alpha.shape, (3, 4))

    def test_floor(self):
        """
        weights below the floor are rejected
        """
        with self.assertRaises(varreg.InvalidWeights):
            varreg.WeightField(0.0)
        with self.assertRaises(varreg.InvalidWeights):
            varreg.WeightField(np.array([[1.0, 1e-9]]))
        with self.assertRaises(varreg.InvalidWeights):
            varreg.WeightField(1.0, beta=np.nan)

    def test_from_raw(self):
        """
        spatial weight maps are read from raw arrays
        """
        alpha = np.linspace(0.1, 1.0, 12).reshape(3, 4)
        with tempfile.TemporaryDirectory() as folder:
            path = os.path.join(folder, 'alpha.raw')
            rawarray.write_raw(path, alpha)
            weights = varreg.WeightField.from_raw(path)
        numpy.testing.assert_array_equal(weights.alpha, alpha)
        numpy.testing.assert_array_equal(weights.beta, 2 * alpha)


class PrimalDualTests(unittest.TestCase):
    """
    tests for the TV and TGV primal-dual solvers
    """

    def setUp(self):
        self.generator = np.random.default_rng(41)

    def test_tv_denoise_step(self):
        """
        1D TV denoising of a step shrinks each level by alpha over its
        length
        """
        data = np.concatenate([np.zeros(10), np.ones(10)])[None, :]
        result = varreg.pdhg_tv(data, forward.Identity(),
                                varreg.WeightField(1.0), iters=30000)
        expected = np.concatenate([np.full(10, 0.1), np.full(10, 0.9)])
        numpy.testing.assert_allclose(result.image.real[0], expected,
                                      atol=1e-6)

    def test_taut_string_reference(self):
        """
        1D TV denoising of piecewise constant signals agrees with the taut
        string solution to 1e-6
        """
        numpy.testing.assert_allclose(
            taut_string(np.concatenate([np.zeros(10), np.ones(10)]), 1.0),
            np.concatenate([np.full(10, 0.1), np.full(10, 0.9)]), atol=1e-12)
        for _ in range(3):
            edges = np.sort(self.generator.choice(np.arange(3, 21), 3,
                                                  replace=False))
            levels = self.generator.uniform(-2.0, 2.0, 4)
            data = np.repeat(levels, np.diff(np.concatenate([[0], edges,
                                                             [24]])))
            result = varreg.pdhg_tv(data[None, :], forward.Identity(),
                                    varreg.WeightField(0.3), iters=30000)
            numpy.testing.assert_allclose(result.image.real[0],
                                          taut_string(data, 0.3), atol=1e-6)

    def test_tv_heavy_weight(self):
        """
        a very large weight gives the constant mean image
        """
        data = self.generator.standard_normal((1, 16))
        result = varreg.pdhg_tv(data, forward.Identity(),
                                varreg.WeightField(100.0), iters=5000)
        numpy.testing.assert_allclose(result.image.real, data.mean(),
                                      atol=1e-4)

    def test_scaling(self):
        """
        scaling data and weight by c scales the solution by c
        """
        data = self.generator.standard_normal((8, 8))
        first = varreg.pdhg_tv(data, forward.Identity(),
                               varreg.WeightField(0.3), iters=100).image
        second = varreg.pdhg_tv(4 * data, forward.Identity(),
                                varreg.WeightField(1.2), iters=100).image
        numpy.testing.assert_allclose(second, 4 * first, rtol=1e-10,
                                      atol=1e-12)

    def test_energy_trend(self):
        """
        the final energy is below the starting energy and energies are
        recorded every 50 steps
        """
        grid = core.Grid(16, 16)
        masks = forward.make_cartesian_masks(grid, 2, 1, seed=2).masks[0]
        operator = forward.MaskedFourier(masks)
        image = self.generator.standard_normal(grid.shape)
        data = operator.forward(image) + 0.1 * masks * \
            self.generator.standard_normal(grid.shape)
        result = varreg.pdhg_tv(data, operator, varreg.WeightField(0.05),
                                iters=200)
        self.assertEqual(len(result.energies), 4)
        start = varreg.tv_energy(operator.adjoint(data), data, operator, 0.05)
        self.assertLessEqual(result.energies[-1], start)

    def test_tgv_keeps_affine(self):
        """
        TGV denoising leaves an affine image unchanged
        """
        ys, xs = np.mgrid[0:10, 0:12]
        data = 0.2 * xs + 0.1 * ys + 1.0
        result = varreg.pdhg_tgv(data, forward.Identity(),
                                 varreg.WeightField(0.5), iters=100)
        self.assertLessEqual(np.abs(result.image - data).max(), 1e-6)
        self.assertLessEqual(result.energies[-1], 1e-10)

    def test_zero_iterations(self):
        """
        without iterations the solver returns A^H y
        """
        data = self.generator.standard_normal((6, 6))
        result = varreg.pdhg_tv(data, forward.Identity(),
                                varreg.WeightField(0.1), iters=0)
        numpy.testing.assert_array_equal(result.image, data)
        self.assertEqual(len(result.energies), 1)


class TwoStepTests(unittest.TestCase):
    """
    tests for the two step reconstruction
    """

    def setUp(self):
        self.grid = core.Grid(5, 4)
        self.seq = bloch.default_sequence(10, seed=2)
        self.dictionary = bloch.build_dictionary([0.5, 1.0, 2.0],
                                                 [0.05, 0.1, 0.3], self.seq)
        pick = np.random.default_rng(8).integers(0, len(self.dictionary),
                                                 self.grid.size)
        rho = np.linspace(0.5, 1.5, self.grid.size).reshape(self.grid.shape)
        self.truth = core.ParamMap(
            self.grid, rho, self.dictionary.t1[pick].reshape(self.grid.shape),
            self.dictionary.t2[pick].reshape(self.grid.shape))
        pattern = forward.full_sampling(self.grid, self.seq.frames)
        self.kspace = forward.apply_forward(
            bloch.bloch_map(self.truth, self.seq), pattern)

    def test_full_sampling_recovery(self):
        """
        noiseless full sampling without regularisation steps recovers an
        on grid map
        """
        qmap = varreg.two_step_reconstruct(
            self.kspace, self.seq, self.dictionary, varreg.WeightField(1e-3),
            box(), iters=0, steps=5)
        numpy.testing.assert_allclose(qmap.stack(), self.truth.stack(),
                                      rtol=1e-6)

    def test_sequence_mismatch(self):
        """
        a dictionary of another sequence is rejected
        """
        other = bloch.build_dictionary([0.5, 1.0], [0.05],
                                       bloch.default_sequence(10, seed=3))
        with self.assertRaises(mrf.SequenceMismatch):
            varreg.two_step_reconstruct(self.kspace, self.seq, other,
                                        varreg.WeightField(1e-3), box(),
                                        iters=0)

    def test_unknown_regulariser(self):
        """
        only tv and tgv are known
        """
        with self.assertRaises(core.ConfigError):
            varreg.reconstruct_frames(self.kspace, varreg.WeightField(1e-3),
                                      iters=1, regulariser='wavelet')

    def test_workers(self):
        """
        threaded frames give the same series
        """
        pattern = forward.make_cartesian_masks(self.grid, 2, self.seq.frames,
                                               seed=1)
        kspace = forward.apply_forward(bloch.bloch_map(self.truth, self.seq),
                                       pattern)
        weights = varreg.WeightField(1e-2)
        single = varreg.reconstruct_frames(kspace, weights, iters=20)
        threaded = varreg.reconstruct_frames(kspace, weights, iters=20,
                                             workers=3)
        numpy.testing.assert_array_equal(single.data, threaded.data)

    def test_empty_voxels(self):
        """
        all zero series give rho 0 and the box midpoint
        """
        series = np.zeros((3, self.seq.frames), dtype=complex)
        stacked = varreg.fit_series(series, self.seq, self.dictionary, box())
        numpy.testing.assert_array_equal(stacked[0], 0.0)
        numpy.testing.assert_array_equal(stacked[1], box().midpoint[1])
        numpy.testing.assert_array_equal(stacked[2], box().midpoint[2])


if __name__ == '__main__':
    unittest.main()
