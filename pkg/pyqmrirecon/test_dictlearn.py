"""
Unit Tests for blind compressed sensing on frames and parameter maps
"""

import unittest
import unittest.mock

import numpy as np
import numpy.testing

import pyqmrirecon.bloch as bloch
import pyqmrirecon.core as core
import pyqmrirecon.dictlearn as dictlearn
import pyqmrirecon.forward as forward
import pyqmrirecon.integrated as integrated


def random_complex(generator, shape):
    return generator.standard_normal(shape) + \
        1j * generator.standard_normal(shape)


def random_unitary(generator, size):
    """
    Q factor of a complex Gaussian matrix
    """
    q, r = np.linalg.qr(random_complex(generator, (size, size)))
    return q * (np.diag(r) / np.abs(np.diag(r)))


class PatchTests(unittest.TestCase):
    """
    tests for patch extraction and its adjoint
    """

    def setUp(self):
        self.generator = np.random.default_rng(51)
        self.shape = (6, 7)

    def test_adjoint(self):
        """
        <R u, P> = <u, R^T P>
        """
        for patch in (1, 2, 3):
            image = random_complex(self.generator, self.shape)
            patches = random_complex(self.generator,
                                     (patch * patch, image.size))
            left = np.vdot(dictlearn.patch_extract(image, patch), patches)
            right = np.vdot(image, dictlearn.patch_adjoint(
                patches, self.shape, patch))
            self.assertLessEqual(abs(left - right), 1e-10 * abs(left))

    def test_periodic_cover(self):
        """
        every voxel is covered by p^2 wrapped patches
        """
        image = random_complex(self.generator, self.shape)
        again = dictlearn.patch_adjoint(dictlearn.patch_extract(image, 3),
                                        self.shape, 3)
        numpy.testing.assert_allclose(again, 9 * image)

    def test_channels(self):
        """
        channels are laid side by side
        """
        channels = random_complex(self.generator, (3,) + self.shape)
        patches = dictlearn.patch_extract(channels, 2)
        self.assertEqual(patches.shape, (4, 3 * 6 * 7))
        numpy.testing.assert_array_equal(patches[0], channels.reshape(-1))

    def test_bad_patch(self):
        """
        patches larger than the grid are rejected
        """
        with self.assertRaises(dictlearn.InvalidPatch):
            dictlearn.patch_extract(np.zeros(self.shape), 7)
        with self.assertRaises(dictlearn.InvalidPatch):
            dictlearn.patch_extract(np.zeros(self.shape), 0)


class UpdateTests(unittest.TestCase):
    """
    tests for the block updates
    """

    def setUp(self):
        self.generator = np.random.default_rng(52)

    def test_dct_unitary(self):
        """
        the DCT basis is unitary
        """
        for patch in (2, 4, 8):
            transform = dictlearn.dct_basis(patch)
            numpy.testing.assert_allclose(transform.conj().T @ transform,
                                          np.eye(patch * patch), atol=1e-12)

    def test_procrustes(self):
        """
        the transform update is unitary and beats random unitaries on
        Re tr(D^H M)
        """
        patches = random_complex(self.generator, (9, 40))
        coeffs = random_complex(self.generator, (9, 40))
        previous = random_unitary(self.generator, 9)
        transform = dictlearn.transform_update(patches, coeffs, previous, 0.1)
        numpy.testing.assert_allclose(transform.conj().T @ transform,
                                      np.eye(9), atol=1e-10)
        target = patches @ coeffs.conj().T + 0.1 * previous
        best = np.trace(transform.conj().T @ target).real
        for _ in range(200):
            other = random_unitary(self.generator, 9)
            self.assertLessEqual(np.trace(other.conj().T @ target).real,
                                 best + 1e-9)

    def test_soft_threshold_minimiser(self):
        """
        the l1 code update minimises its scalar objective
        """
        lam, lam_c = 0.3, 0.2
        values = np.array([[-1.0, -0.2, 0.05, 0.4, 2.0]])
        previous = np.array([[0.5, 0.0, -0.3, 0.1, 1.0]])
        coeffs = dictlearn.sparse_code_update(values, np.eye(1), previous,
                                              lam, lam_c, sparsity=1).real
        candidates = np.linspace(-3, 3, 60001)
        for column in range(values.shape[1]):
            objective = 0.5 * (values[0, column] - candidates) ** 2 + \
                0.5 * lam_c * (candidates - previous[0, column]) ** 2 + \
                lam * np.abs(candidates)
            self.assertAlmostEqual(coeffs[0, column],
                                   candidates[np.argmin(objective)],
                                   delta=2e-4)

    def test_hard_threshold(self):
        """
        the l0 code update keeps large entries and zeroes small ones
        """
        values = np.array([[0.01, 3.0]])
        coeffs = dictlearn.sparse_code_update(values, np.eye(1),
                                              np.zeros((1, 2)), 0.5, 0.0)
        numpy.testing.assert_array_equal(coeffs, [[0.0, 3.0]])

    def test_bad_sparsity(self):
        """
        only l0 and l1 penalties exist
        """
        with self.assertRaises(core.ConfigError):
            dictlearn.sparse_code_update(np.ones((1, 1)), np.eye(1),
                                         np.zeros((1, 1)), 0.1, 0.1, 2)

    def test_image_update_normal_equation(self):
        """
        the image update solves its normal equation exactly
        """
        shape, patch = (8, 8), 2
        masks = self.generator.random(shape) > 0.5
        operator = forward.MaskedFourier(masks)
        data = operator.forward(random_complex(self.generator, shape))
        transform = dictlearn.dct_basis(patch)
        coeffs = random_complex(self.generator, (patch * patch, 64))
        previous = random_complex(self.generator, shape)
        mu, lam_u = 2.0, 0.1
        image = dictlearn.image_update(data, masks, transform, coeffs,
                                       previous, mu, lam_u, patch)
        lhs = mu * operator.normal(image) + dictlearn.patch_adjoint(
            dictlearn.patch_extract(image, patch), shape, patch) + \
            lam_u * image
        rhs = mu * operator.adjoint(data) + dictlearn.patch_adjoint(
            transform @ coeffs, shape, patch) + lam_u * previous
        self.assertLessEqual(np.abs(lhs - rhs).max(), 1e-10)

    def test_schedule(self):
        """
        proximal weights must be positive
        """
        with self.assertRaises(dictlearn.InvalidSchedule):
            dictlearn.ProximalSchedule(lam_c=0.0)

    def test_ksvd_objective(self):
        """
        fit and largest column sparsity are reported
        """
        coeffs = np.array([[1.0, 0.0], [2.0, 0.0]])
        fit, sparsity = dictlearn.ksvd_objective(np.zeros((2, 2)), np.eye(2),
                                                 coeffs)
        self.assertEqual(fit, 5.0)
        self.assertEqual(sparsity, 2)


class FrameReconstructionTests(unittest.TestCase):
    """
    tests for blind compressed sensing of single frames
    """

    def setUp(self):
        generator = np.random.default_rng(53)
        self.grid = core.Grid(16, 16)
        ys, xs = np.mgrid[0:16, 0:16]
        image = ((xs - 8) ** 2 + (ys - 8) ** 2 < 30).astype(float) + \
            0.05 * generator.standard_normal(self.grid.shape)
        self.masks = forward.make_cartesian_masks(self.grid, 2, 1,
                                                  seed=3).masks[0]
        self.data = forward.MaskedFourier(self.masks).forward(image)

    def test_descent(self):
        """
        every sweep lowers or keeps the objective, for l0 and l1
        """
        for sparsity in (0, 1):
            result = dictlearn.bcs_reconstruct(self.data, self.masks, patch=4,
                                               lam=1e-2, sparsity=sparsity,
                                               sweeps=6)
            self.assertEqual(len(result.objectives), 7)
            for before, after in zip(result.objectives[:-1],
                                     result.objectives[1:]):
                self.assertLessEqual(after, before * (1 + 1e-12) + 1e-12)

    def test_transform_stays_unitary(self):
        """
        the learned transform is unitary
        """
        result = dictlearn.bcs_reconstruct(self.data, self.masks, patch=4,
                                           sweeps=3)
        numpy.testing.assert_allclose(
            result.transform.conj().T @ result.transform, np.eye(16),
            atol=1e-10)

    def test_series(self):
        """
        a series is reconstructed frame by frame
        """
        masks = np.stack([self.masks, self.masks])
        kspace = core.KSpaceData.from_full(
            self.grid, np.stack([self.data, self.data]), masks)
        series = dictlearn.bcs_series(kspace, patch=4, sweeps=2)
        self.assertEqual(series.frames, 2)
        numpy.testing.assert_allclose(series.data[0], series.data[1])


class ParameterReconstructionTests(unittest.TestCase):
    """
    tests for blind compressed sensing on parameter maps
    """

    def setUp(self):
        self.grid = core.Grid(6, 6)
        self.seq = bloch.default_sequence(8, seed=5)
        self.box = core.AdmissibleBox(0.0, 2.0, 0.05, 5.0, 0.005, 2.5)
        rho = np.ones(self.grid.shape)
        t1 = np.full(self.grid.shape, 1.0)
        t2 = np.full(self.grid.shape, 0.1)
        t1[:, 3:] = 1.6
        self.truth = core.ParamMap(self.grid, rho, t1, t2)
        pattern = forward.make_cartesian_masks(self.grid, 2, self.seq.frames,
                                               seed=2)
        self.kspace = forward.apply_forward(
            bloch.bloch_map(self.truth, self.seq), pattern)

    def test_normalise_channels(self):
        """
        the box corners map to 0 and 1
        """
        corners = np.stack([self.box.lower, self.box.upper], axis=1)
        numpy.testing.assert_allclose(
            dictlearn.normalise_channels(corners, self.box),
            [[0.0, 1.0]] * 3)

    def test_descent(self):
        """
        the parameter objective does not increase and maps stay in the
        box
        """
        start = core.ParamMap.from_stack(
            self.grid, self.truth.stack() * np.array([0.9, 1.1, 1.2])
            [:, None, None])
        result = dictlearn.bcs_qmri_reconstruct(
            self.kspace, self.seq, self.box, patch=2, sweeps=4, q0=start)
        self.assertEqual(len(result.objectives), 5)
        for before, after in zip(result.objectives[:-1],
                                 result.objectives[1:]):
            self.assertLessEqual(after, before * (1 + 1e-12) + 1e-12)
        self.assertLessEqual(result.objectives[-1], result.objectives[0])
        stacked = result.qmap.stack()
        self.assertTrue(np.all(stacked >= self.box.lower[:, None, None]))
        self.assertTrue(np.all(stacked <= self.box.upper[:, None, None]))

    def test_needs_start(self):
        """
        without a start map a dictionary is required
        """
        with self.assertRaises(core.ConfigError):
            dictlearn.bcs_qmri_reconstruct(self.kspace, self.seq, self.box,
                                           patch=2, sweeps=1)

    def test_line_search_gives_up(self):
        """
        a q update that never lowers the objective stops the
        reconstruction
        """
        calls = []

        def worse(stacked, *args):
            calls.append(1)
            candidate = stacked.copy()
            candidate[0] = 2.0
            return candidate

        with unittest.mock.patch.object(dictlearn, 'parameter_update', worse):
            with self.assertRaises(dictlearn.ObjectiveIncrease):
                dictlearn.bcs_qmri_reconstruct(
                    self.kspace, self.seq, self.box, patch=2, sweeps=1,
                    q0=self.truth)
        self.assertEqual(len(calls), dictlearn.MAX_DOUBLINGS + 1)

    def test_single_voxel_matches_lm(self):
        """
        without the patch term a 1 x 1 map follows the damped
        Levenberg-Marquardt steps
        """
        grid = core.Grid(1, 1)
        seq = bloch.default_sequence(20, seed=9)
        truth = core.ParamMap(grid, np.full((1, 1), 0.9),
                              np.full((1, 1), 1.3), np.full((1, 1), 0.12))
        kspace = forward.apply_forward(bloch.bloch_map(truth, seq),
                                       forward.full_sampling(grid,
                                                             seq.frames))
        damping = 0.5
        schedule = dictlearn.ProximalSchedule(lam_u=damping)
        lm_cfg = integrated.LMConfig(lambda0=damping, max_iters=1, sigma=0.0,
                                     rtol=0.0)
        current = core.ParamMap(grid, np.full((1, 1), 0.8),
                                np.full((1, 1), 1.5), np.full((1, 1), 0.1))
        for _ in range(5):
            result = dictlearn.bcs_qmri_reconstruct(
                kspace, seq, self.box, patch=1, alpha=0.0, sweeps=1,
                q0=current, schedule=schedule)
            reference = integrated.lm_reconstruct(kspace, seq, current,
                                                  self.box, lm_cfg)
            self.assertLess(result.objectives[1], result.objectives[0])
            numpy.testing.assert_allclose(result.qmap.stack(),
                                          reference.qmap.stack(), rtol=1e-8)
            current = reference.qmap


if __name__ == '__main__':
    unittest.main()
