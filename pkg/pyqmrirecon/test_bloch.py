"""
Unit Tests for the Bloch simulator, the Ernst signal and fingerprint
dictionaries
"""

import os
import tempfile
import unittest

import numpy as np
import numpy.testing

import pyqmrirecon.bloch as bloch
import pyqmrirecon.core as core


RK4_STEP = 1e-5


def rk4_relax(mag, t1, t2, m_eq, duration):
    """
    integrate free relaxation of the Bloch equation with classic RK4
    """

    def rate(state):
        return np.stack([-state[0] / t2, -state[1] / t2,
                         -(state[2] - m_eq) / t1])

    steps = int(round(duration / RK4_STEP))
    for _ in range(steps):
        k1 = rate(mag)
        k2 = rate(mag + 0.5 * RK4_STEP * k1)
        k3 = rate(mag + 0.5 * RK4_STEP * k2)
        k4 = rate(mag + RK4_STEP * k3)
        mag = mag + RK4_STEP / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return mag


def rk4_fingerprints(t1, t2, seq):
    """
    reference readouts: instantaneous pulses and RK4 relaxation
    """
    mag = np.zeros((3, t1.size))
    mag[2] = -seq.m_eq if seq.inversion else seq.m_eq
    readouts = np.empty((t1.size, seq.frames), dtype=complex)
    for frame, angle in enumerate(seq.pulse_angles()):
        cosa, sina = np.cos(angle), np.sin(angle)
        mag = np.stack([mag[0], cosa * mag[1] - sina * mag[2],
                        sina * mag[1] + cosa * mag[2]])
        readouts[:, frame] = mag[0] + 1j * mag[1]
        mag = rk4_relax(mag, t1, t2, seq.m_eq, seq.tr[frame])
    return readouts


class SequenceTests(unittest.TestCase):
    """
    tests for sequence descriptions
    """

    def test_default_sequence_deterministic(self):
        """
        the default train only depends on its seed
        """
        first = bloch.default_sequence(40, seed=5)
        second = bloch.default_sequence(40, seed=5)
        numpy.testing.assert_array_equal(first.flip_angles,
                                         second.flip_angles)
        self.assertEqual(first.digest(), second.digest())
        self.assertNotEqual(first.digest(),
                            bloch.default_sequence(40, seed=6).digest())

    def test_default_flip_range(self):
        """
        default flip angles lie in [10, 60] degrees
        """
        angles = np.rad2deg(bloch.default_sequence(200).flip_angles)
        self.assertTrue(np.all(angles >= 10) and np.all(angles <= 60))

    def test_bad_angles(self):
        """
        flip angles above pi are rejected
        """
        with self.assertRaises(bloch.InvalidSequence):
            bloch.SequenceSpec([0.5, 4.0])

    def test_bad_tr(self):
        """
        non positive repetition times are rejected
        """
        with self.assertRaises(bloch.InvalidSequence):
            bloch.SequenceSpec([0.5], tr=0.0)

    def test_alternating(self):
        """
        alternating sequences flip the sign of every second pulse
        """
        seq = bloch.SequenceSpec([0.1, 0.2, 0.3], alternating=True)
        numpy.testing.assert_array_equal(seq.pulse_angles(), [0.1, -0.2, 0.3])

    def test_save_load(self):
        """
        a saved sequence loads with the same digest
        """
        seq = bloch.default_sequence(12)
        with tempfile.TemporaryDirectory() as folder:
            path = os.path.join(folder, 'seq.json')
            seq.save(path)
            self.assertEqual(bloch.SequenceSpec.load(path).digest(),
                             seq.digest())

    def test_load_missing(self):
        """
        a missing sequence file is a sequence error
        """
        with self.assertRaises(bloch.InvalidSequence):
            bloch.SequenceSpec.load('/nonexistent/seq.json')


class BlochSimulationTests(unittest.TestCase):
    """
    tests for the discrete Bloch recursion
    """

    def setUp(self):
        self.seq = bloch.default_sequence(8, seed=3)
        generator = np.random.default_rng(21)
        self.t1 = generator.uniform(0.2, 3.0, 20)
        self.t2 = self.t1 * generator.uniform(0.05, 0.9, 20)

    def test_against_rk4(self):
        """
        the recursion matches an RK4 integration of the relaxation
        """
        signals = bloch.simulate_many(self.t1, self.t2, self.seq)
        reference = rk4_fingerprints(self.t1, self.t2, self.seq)
        scale = np.abs(reference).max(axis=1, keepdims=True)
        self.assertLessEqual(
            float(np.max(np.abs(signals - reference) / scale)), 1e-6)

    def test_jacobian_finite_differences(self):
        """
        forward mode derivatives agree with central differences
        """
        _, jac = bloch.signals_and_jacobians(self.t1, self.t2, self.seq)
        zero = np.zeros_like(self.t1)
        shifts = ((self.t1 * 1e-6, zero), (zero, self.t2 * 1e-6))
        for column, (dt1, dt2) in enumerate(shifts):
            step = dt1 + dt2
            plus = bloch.simulate_many(self.t1 + dt1, self.t2 + dt2, self.seq)
            minus = bloch.simulate_many(self.t1 - dt1, self.t2 - dt2,
                                        self.seq)
            central = (plus - minus) / (2 * step[:, None])
            scale = np.abs(jac[..., column]).max()
            self.assertLessEqual(
                float(np.abs(central - jac[..., column]).max() / scale), 1e-5)

    def test_single_pulse(self):
        """
        a 90 degree pulse on inverted magnetization reads out i
        """
        seq = bloch.SequenceSpec([np.pi / 2], inversion=True)
        numpy.testing.assert_allclose(
            bloch.simulate_bloch(1.0, 0.1, seq).values, [1j], atol=1e-15)
        seq = bloch.SequenceSpec([np.pi / 2], inversion=False)
        numpy.testing.assert_allclose(
            bloch.simulate_bloch(1.0, 0.1, seq).values, [-1j], atol=1e-15)

    def test_zero_flip(self):
        """
        without excitation there is no transverse signal
        """
        seq = bloch.SequenceSpec(np.zeros(5))
        fingerprint = bloch.simulate_bloch(1.0, 0.1, seq)
        self.assertEqual(fingerprint.norm, 0.0)
        numpy.testing.assert_array_equal(bloch.bloch_jacobian(1.0, 0.1, seq),
                                         0.0)

    def test_single_jacobian(self):
        """
        the single spin Jacobian is a row of the batched one
        """
        _, jac = bloch.signals_and_jacobians(self.t1, self.t2, self.seq)
        single = bloch.bloch_jacobian(self.t1[4], self.t2[4], self.seq)
        self.assertEqual(single.shape, (self.seq.frames, 2))
        numpy.testing.assert_allclose(single, jac[4], rtol=1e-12, atol=1e-15)

    def test_states(self):
        """
        the state history starts at the inverted equilibrium
        """
        states = bloch.magnetization_states(1.0, 0.1, self.seq)
        self.assertEqual(states.shape, (self.seq.frames + 1, 3))
        numpy.testing.assert_array_equal(states[0], [0.0, 0.0, -1.0])

    def test_non_positive(self):
        """
        non positive relaxation times are rejected
        """
        with self.assertRaises(bloch.NonPositiveRelaxation):
            bloch.simulate_bloch(1.0, 0.0, self.seq)

    def test_bloch_map_linear_in_rho(self):
        """
        the Bloch map scales with rho and is zero where rho is zero
        """
        grid = core.Grid(3, 2)
        rho = np.array([[0.0, 1.0, 2.0], [0.5, 0.0, 1.0]])
        qmap = core.ParamMap(grid, rho, np.full(grid.shape, 1.0),
                             np.full(grid.shape, 0.1))
        series = bloch.bloch_map(qmap, self.seq).data
        single = bloch.simulate_bloch(1.0, 0.1, self.seq).values
        numpy.testing.assert_allclose(series[:, 0, 2], 2 * single)
        numpy.testing.assert_array_equal(series[:, 1, 1], 0)

    def test_param_jacobian(self):
        """
        the rho column is the fingerprint and the others scale with rho
        """
        rho = np.full(self.t1.size, 0.7)
        series, jac = bloch.param_jacobian(rho, self.t1, self.t2, self.seq)
        signals, relax = bloch.signals_and_jacobians(self.t1, self.t2,
                                                     self.seq)
        numpy.testing.assert_allclose(jac[..., 0], signals)
        numpy.testing.assert_allclose(jac[..., 1:], 0.7 * relax)
        numpy.testing.assert_allclose(series, 0.7 * signals)


class ErnstSignalTests(unittest.TestCase):
    """
    tests for the FLASH steady state signal
    """

    def test_ernst_angle(self):
        """
        the signal peaks at the Ernst angle arccos(exp(-TR R1))
        """
        tr, r1 = 0.02, 1.0
        angles = np.linspace(0.001, 1.0, 20001)
        signals = bloch.ernst_signal(1.0, angles, tr, 0.0, r1, 0.0)
        best = angles[np.argmax(signals)]
        self.assertAlmostEqual(best, np.arccos(np.exp(-tr * r1)), places=3)

    def test_echo_decay(self):
        """
        the echo time enters as exp(-TE R2*)
        """
        base = bloch.ernst_signal(2.0, 0.3, 0.02, 0.0, 1.0, 30.0)
        echo = bloch.ernst_signal(2.0, 0.3, 0.02, 0.01, 1.0, 30.0)
        self.assertAlmostEqual(echo / base, np.exp(-0.3), places=14)

    def test_degenerate(self):
        """
        zero angle and zero relaxation is 0 / 0
        """
        with self.assertRaises(bloch.SignalModelError):
            bloch.ernst_signal(1.0, 0.0, 0.02, 0.0, 0.0, 0.0)

    def test_estatics_signal(self):
        """
        ESTATICS echoes decay exponentially from the intercept
        """
        self.assertAlmostEqual(bloch.estatics_signal(3.0, 20.0, 0.01),
                               3.0 * np.exp(-0.2), places=14)


class DictionaryTests(unittest.TestCase):
    """
    tests for fingerprint dictionaries
    """

    def setUp(self):
        self.seq = bloch.default_sequence(10, seed=9)
        self.t1_grid = [0.2, 0.5, 1.0, 2.0]
        self.t2_grid = [0.05, 0.3, 1.5]
        self.dictionary = bloch.build_dictionary(self.t1_grid, self.t2_grid,
                                                 self.seq)

    def test_only_physical_pairs(self):
        """
        entries with T2 > T1 are left out
        """
        self.assertTrue(np.all(self.dictionary.t2 <= self.dictionary.t1))
        self.assertEqual(len(self.dictionary), 1 + 2 + 2 + 3)

    def test_t1_major_order(self):
        """
        entries are ordered by T1 then T2
        """
        pairs = list(zip(self.dictionary.t1, self.dictionary.t2))
        self.assertEqual(pairs, sorted(pairs))

    def test_entries_are_simulations(self):
        """
        every entry is the simulated fingerprint of its pair
        """
        expected = bloch.simulate_many(self.dictionary.t1, self.dictionary.t2,
                                       self.seq)
        numpy.testing.assert_array_equal(self.dictionary.entries, expected)

    def test_workers_do_not_change_order(self):
        """
        threaded blocks give the same dictionary
        """
        threaded = bloch.build_dictionary(self.t1_grid, self.t2_grid,
                                          self.seq, workers=3, block=2)
        numpy.testing.assert_array_equal(threaded.entries,
                                         self.dictionary.entries)

    def test_normalized(self):
        """
        normalized entries have unit norm
        """
        numpy.testing.assert_allclose(
            np.linalg.norm(self.dictionary.normalized, axis=1), 1.0)

    def test_empty(self):
        """
        grids without a T2 <= T1 pair give no dictionary
        """
        with self.assertRaises(bloch.EmptyDictionary):
            bloch.build_dictionary([0.1], [0.5], self.seq)

    def test_bad_grid(self):
        """
        grids must be strictly increasing
        """
        with self.assertRaises(bloch.InvalidDictionaryGrid):
            bloch.build_dictionary([0.5, 0.2], [0.05], self.seq)

    def test_distinguishable(self):
        """
        different entries of a small dictionary are not parallel
        """
        self.assertLess(bloch.check_distinguishable(self.dictionary), 1.0)

    def test_save_load(self):
        """
        a saved dictionary loads with the same entries and digest
        """
        with tempfile.TemporaryDirectory() as folder:
            path = os.path.join(folder, 'dict.raw')
            self.dictionary.save(path)
            loaded = bloch.FingerprintDictionary.load(path)
        numpy.testing.assert_array_equal(loaded.entries,
                                         self.dictionary.entries)
        self.assertEqual(loaded.digest, self.seq.digest())


if __name__ == '__main__':
    unittest.main()
