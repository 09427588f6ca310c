"""
Unit Tests for dictionary matching, MRF and BLIP
"""

import unittest

import numpy as np
import numpy.testing

import pyqmrirecon.bloch as bloch
import pyqmrirecon.core as core
import pyqmrirecon.forward as forward
import pyqmrirecon.mrf as mrf


def on_grid_map(grid, dictionary, seed):
    """
    a map whose relaxation pairs are dictionary entries
    """
    generator = np.random.default_rng(seed)
    pick = generator.integers(0, len(dictionary), grid.size)
    rho = generator.uniform(0.5, 1.5, grid.shape)
    return core.ParamMap(grid, rho,
                         dictionary.t1[pick].reshape(grid.shape),
                         dictionary.t2[pick].reshape(grid.shape))


class MatchTests(unittest.TestCase):
    """
    tests for voxel series matching
    """

    def setUp(self):
        self.seq = bloch.default_sequence(12, seed=4)
        self.dictionary = bloch.build_dictionary([0.3, 0.8, 1.5, 3.0],
                                                 [0.02, 0.08, 0.2, 1.0],
                                                 self.seq)

    def test_exact_entry(self):
        """
        a scaled fingerprint matches its own entry and scale
        """
        for index in range(len(self.dictionary)):
            result = mrf.mrf_match(1.7 * self.dictionary.entries[index],
                                   self.dictionary)
            self.assertEqual(result.dict_index, index)
            self.assertAlmostEqual(result.rho, 1.7, places=10)
            self.assertEqual(result.t1, self.dictionary.t1[index])

    def test_projection_scale(self):
        """
        the projection scale is the least squares rho
        """
        series = 0.6 * self.dictionary.entries[2]
        _, rho, _ = mrf.match_series(series[None, :], self.dictionary,
                                     'projection')
        self.assertAlmostEqual(float(rho[0]), 0.6, places=10)

    def test_tie_smallest_index(self):
        """
        parallel entries tie and the smallest index wins
        """
        entry = self.dictionary.entries[3]
        other = self.dictionary.entries[5]
        dictionary = bloch.FingerprintDictionary(
            [1.0, 2.0, 3.0], [0.1], [1.0, 2.0, 3.0], [0.1, 0.1, 0.1],
            np.stack([other, entry, 2 * entry]), self.seq)
        result = mrf.mrf_match(entry, dictionary)
        self.assertEqual(result.dict_index, 1)

    def test_zero_series(self):
        """
        an all zero series goes to entry 0 with rho 0
        """
        index, rho, _ = mrf.match_series(np.zeros((2, self.seq.frames)),
                                         self.dictionary)
        numpy.testing.assert_array_equal(index, 0)
        numpy.testing.assert_array_equal(rho, 0.0)

    def test_workers_and_blocks(self):
        """
        threads and block sizes do not change the matches
        """
        generator = np.random.default_rng(6)
        series = generator.standard_normal((50, self.seq.frames)) + \
            1j * generator.standard_normal((50, self.seq.frames))
        single = mrf.match_series(series, self.dictionary)
        threaded = mrf.match_series(series, self.dictionary, block=7,
                                    workers=4)
        for first, second in zip(single, threaded):
            numpy.testing.assert_array_equal(first, second)

    def test_projection_idempotent(self):
        """
        projecting a projected series changes nothing
        """
        generator = np.random.default_rng(8)
        series = generator.standard_normal((40, self.seq.frames)) + \
            1j * generator.standard_normal((40, self.seq.frames))
        once, _, _ = mrf.project_series(series, self.dictionary)
        twice, _, _ = mrf.project_series(once, self.dictionary)
        numpy.testing.assert_allclose(twice, once, rtol=1e-12,
                                      atol=1e-12 * np.abs(once).max())

    def test_length_mismatch(self):
        """
        series of the wrong length are rejected
        """
        with self.assertRaises(mrf.SequenceMismatch):
            mrf.match_series(np.zeros((1, 5)), self.dictionary)

    def test_unknown_scale(self):
        """
        only norm and projection scales exist
        """
        with self.assertRaises(core.ConfigError):
            mrf.match_series(np.zeros((1, 12)), self.dictionary, 'peak')


class ReconstructionTests(unittest.TestCase):
    """
    tests for MRF and BLIP reconstructions
    """

    def setUp(self):
        self.grid = core.Grid(8, 8)
        self.seq = bloch.default_sequence(16, seed=7)
        self.dictionary = bloch.build_dictionary([0.3, 0.8, 1.5, 3.0],
                                                 [0.02, 0.08, 0.2, 1.0],
                                                 self.seq)
        self.truth = on_grid_map(self.grid, self.dictionary, 3)
        self.series = bloch.bloch_map(self.truth, self.seq)

    def test_mrf_full_sampling(self):
        """
        noiseless fully sampled data of an on grid map is matched exactly
        """
        kspace = forward.apply_forward(
            self.series, forward.full_sampling(self.grid, self.seq.frames))
        qmap = mrf.mrf_reconstruct(kspace, self.dictionary)
        numpy.testing.assert_array_equal(qmap.t1, self.truth.t1)
        numpy.testing.assert_array_equal(qmap.t2, self.truth.t2)
        numpy.testing.assert_allclose(qmap.rho, self.truth.rho, rtol=1e-10)

    def test_refined_dictionary(self):
        """
        refining the dictionary grid never raises the error on noiseless
        data of an on grid map
        """
        coarse = bloch.build_dictionary([0.5, 1.0, 2.0], [0.05, 0.1, 0.2],
                                        self.seq)
        fine = bloch.build_dictionary([0.5, 0.7, 1.0, 1.4, 2.0],
                                      [0.05, 0.07, 0.1, 0.14, 0.2], self.seq)
        truth = on_grid_map(self.grid, fine, 5)
        kspace = forward.apply_forward(
            bloch.bloch_map(truth, self.seq),
            forward.full_sampling(self.grid, self.seq.frames))
        mask = np.ones(self.grid.shape, bool)
        coarse_errors = core.rel_error_map(
            mrf.mrf_reconstruct(kspace, coarse), truth, mask).means
        fine_errors = core.rel_error_map(
            mrf.mrf_reconstruct(kspace, fine), truth, mask).means
        for name in ('rho', 't1', 't2'):
            self.assertLessEqual(fine_errors[name], coarse_errors[name])
        self.assertEqual(fine_errors['t1'], 0.0)
        self.assertEqual(fine_errors['t2'], 0.0)

    def test_frame_mismatch(self):
        """
        data with another frame count is rejected
        """
        kspace = forward.apply_forward(
            self.series, forward.full_sampling(self.grid, self.seq.frames))
        other = bloch.build_dictionary([0.5, 1.0], [0.05],
                                       bloch.default_sequence(8))
        with self.assertRaises(mrf.SequenceMismatch):
            mrf.mrf_reconstruct(kspace, other)

    def test_blip_zero_steps(self):
        """
        BLIP without steps is the MRF map
        """
        pattern = forward.make_cartesian_masks(self.grid, 4, self.seq.frames,
                                               seed=1)
        kspace = forward.apply_forward(self.series, pattern)
        result = mrf.blip_reconstruct(kspace, self.dictionary, steps=0)
        expected = mrf.mrf_reconstruct(kspace, self.dictionary)
        numpy.testing.assert_array_equal(result.qmap.stack(),
                                         expected.stack())
        self.assertEqual(len(result.residuals), 1)

    def test_blip_residual_monotone(self):
        """
        for mu <= 1 the data residual never increases
        """
        pattern = forward.make_cartesian_masks(self.grid, 4, self.seq.frames,
                                               seed=1)
        kspace = forward.add_noise(forward.apply_forward(self.series, pattern),
                                   0.01, core.Rng(2))
        for mu in (1.0, 0.5):
            residuals = mrf.blip_reconstruct(kspace, self.dictionary,
                                             steps=15, mu=mu).residuals
            self.assertEqual(len(residuals), 16)
            for before, after in zip(residuals[:-1], residuals[1:]):
                self.assertLessEqual(after, before * (1 + 1e-10) + 1e-14)

    def test_blip_beats_mrf(self):
        """
        BLIP lowers the data residual of the MRF start
        """
        pattern = forward.make_cartesian_masks(self.grid, 4, self.seq.frames,
                                               seed=1)
        kspace = forward.apply_forward(self.series, pattern)
        residuals = mrf.blip_reconstruct(kspace, self.dictionary,
                                         steps=20).residuals
        self.assertLess(residuals[-1], residuals[0])

    def test_bad_step(self):
        """
        step sizes outside (0, 2) are rejected
        """
        kspace = forward.apply_forward(
            self.series, forward.full_sampling(self.grid, self.seq.frames))
        for mu in (0.0, 2.0, -1.0):
            with self.assertRaises(mrf.InvalidStepSize):
                mrf.blip_reconstruct(kspace, self.dictionary, mu=mu)


if __name__ == '__main__':
    unittest.main()
