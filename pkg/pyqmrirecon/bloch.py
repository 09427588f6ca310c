"""
signal models: discrete IR-bSSFP Bloch dynamics, the Ernst (FLASH)
equation, ESTATICS echoes and fingerprint dictionaries
"""

import concurrent.futures
import hashlib
import json
import logging

import numpy as np

import pyqmrirecon.core as core
import pyqmrirecon.rawarray as rawarray


LOGGER = logging.getLogger(__name__)

DEFAULT_SEED = 20230101
DEFAULT_TR = 0.015
DEFAULT_FLIP_RANGE_DEG = (10.0, 60.0)
DEFAULT_FRAMES = 40


class InvalidSequence(core.ConfigError):
    """
    raise if a sequence description is not valid
    """


class NonPositiveRelaxation(core.ConfigError):
    """
    raise when a relaxation time is zero or negative
    """


class SignalModelError(core.NumericalFailure):
    """
    raise when a closed form signal model is undefined (0/0)
    """


class EmptyDictionary(core.ConfigError):
    """
    raise when a dictionary would have (or has) no entries
    """


class InvalidDictionaryGrid(core.ConfigError):
    """
    raise if a dictionary grid is not strictly increasing and positive
    """


class SequenceSpec():
    """
    excitation sequence description

    Args:
        flip_angles(array like): flip angle per frame in radians
        tr(float or array like): repetition time per frame in seconds
        te(float): echo time in seconds (FLASH / ESTATICS variants)
        inversion(bool): start from an inverted magnetization
        m_eq(float): equilibrium magnetization
        alternating(bool): flip the sign of the pulse on even frames

    Raises:
        InvalidSequence: if the frames, angles or repetition times are bad
    """

    def __init__(self, flip_angles, tr=DEFAULT_TR, te=0.0, inversion=True,
                 m_eq=1.0, alternating=False):
        self.flip_angles = core.frozen_array(np.atleast_1d(flip_angles), float)
        frames = self.flip_angles.size
        self.tr = core.frozen_array(
            np.broadcast_to(np.asarray(tr, dtype=float), (frames,)), float)
        self.te = float(te)
        self.inversion = bool(inversion)
        self.m_eq = float(m_eq)
        self.alternating = bool(alternating)
        if frames < 1:
            raise InvalidSequence('a sequence needs at least one frame')
        if (self.flip_angles < 0).any() or (self.flip_angles > np.pi).any():
            raise InvalidSequence('flip angles must lie in [0, pi]')
        if (self.tr <= 0).any():
            raise InvalidSequence('repetition times must be positive')
        if self.te < 0:
            raise InvalidSequence('echo time must be >= 0')

    @property
    def frames(self):
        """
        number of frames L
        """
        return self.flip_angles.size

    def pulse_angles(self):
        """
        signed flip angles actually applied, sign flipped on even frames
        (counting from 1) when alternating is set
        """
        angles = np.array(self.flip_angles)
        if self.alternating:
            angles[1::2] *= -1
        return angles

    def to_dict(self):
        """
        JSON friendly representation
        """
        return {'flip_angles': self.flip_angles.tolist(),
                'tr': self.tr.tolist(), 'te': self.te,
                'inversion': self.inversion, 'm_eq': self.m_eq,
                'alternating': self.alternating}

    @classmethod
    def from_dict(cls, seqdict):
        """
        build a sequence from a dictionary made by to_dict

        Args:
            seqdict(dict): sequence fields

        Returns:
            seq(SequenceSpec): the sequence
        """
        try:
            return cls(**seqdict)
        except TypeError as err:
            raise InvalidSequence('bad sequence description') from err

    def digest(self):
        """
        SHA-256 of the canonical JSON description, used to tie
        dictionaries and surrogates to the sequence they came from
        """
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode('utf-8')).hexdigest()

    def save(self, outpath):
        """
        write the sequence as JSON

        Args:
            outpath(str): where to write
        """
        with open(outpath, 'w') as seqfile:
            json.dump(self.to_dict(), seqfile, indent=1, sort_keys=True)

    @classmethod
    def load(cls, inpath):
        """
        read a sequence written by save

        Args:
            inpath(str): JSON file

        Returns:
            seq(SequenceSpec): the sequence
        """
        try:
            with open(inpath, 'r') as seqfile:
                return cls.from_dict(json.load(seqfile))
        except (OSError, ValueError) as err:
            raise InvalidSequence('cannot read sequence {}'.format(inpath)) \
                from err


def default_sequence(frames=DEFAULT_FRAMES, seed=DEFAULT_SEED, tr=DEFAULT_TR):
    """
    the default IR-bSSFP train: pseudo random flip angles in [10, 60]
    degrees from a fixed seed and a constant TR of 15 ms

    Args:
        frames(int): number of frames L
        seed(int): seed of the flip angle stream
        tr(float): repetition time in seconds

    Returns:
        seq(SequenceSpec): the sequence
    """
    generator = core.Rng(seed).generator()
    low, high = DEFAULT_FLIP_RANGE_DEG
    angles = np.deg2rad(generator.uniform(low, high, size=int(frames)))
    return SequenceSpec(angles, tr=tr, inversion=True)


class Fingerprint():
    """
    transverse magnetization readouts for one (T1, T2) pair

    Args:
        values(array like): complex length L vector
    """

    def __init__(self, values):
        self.values = core.frozen_array(values, complex)
        self.norm = float(np.linalg.norm(self.values))


def _check_relaxation(t1, t2):
    t1 = np.atleast_1d(np.asarray(t1, dtype=float))
    t2 = np.atleast_1d(np.asarray(t2, dtype=float))
    if (t1 <= 0).any() or (t2 <= 0).any():
        raise NonPositiveRelaxation('relaxation times must be positive')
    return np.broadcast_arrays(t1, t2)


def _recursion(t1, t2, seq, derivatives=False, states=False):
    """
    run the discrete dynamics for many spins at once

    m+ = R_x(a) m, readout = m+_x + i m+_y, then
    m = (E2 m+_x, E2 m+_y, m_eq + E1 (m+_z - m_eq))
    """
    t1, t2 = _check_relaxation(t1, t2)
    spins = t1.size
    t1 = t1.ravel()
    t2 = t2.ravel()
    m_eq = seq.m_eq
    mag = np.zeros((3, spins))
    mag[2] = -m_eq if seq.inversion else m_eq
    dmag = np.zeros((3, 2, spins))
    signal = np.empty((spins, seq.frames), dtype=complex)
    jac = np.empty((spins, seq.frames, 2), dtype=complex) if derivatives \
        else None
    history = [mag.T.copy()] if states else None
    for frame, angle in enumerate(seq.pulse_angles()):
        cosa, sina = np.cos(angle), np.sin(angle)
        mxp = mag[0]
        myp = cosa * mag[1] - sina * mag[2]
        mzp = sina * mag[1] + cosa * mag[2]
        signal[:, frame] = mxp + 1j * myp
        tr = seq.tr[frame]
        e1 = np.exp(-tr / t1)
        e2 = np.exp(-tr / t2)
        if derivatives:
            dxp = dmag[0]
            dyp = cosa * dmag[1] - sina * dmag[2]
            dzp = sina * dmag[1] + cosa * dmag[2]
            jac[:, frame, :] = (dxp + 1j * dyp).T
            de1 = e1 * tr / t1 ** 2
            de2 = e2 * tr / t2 ** 2
            newd = np.empty_like(dmag)
            newd[0] = e2 * dxp
            newd[0, 1] += de2 * mxp
            newd[1] = e2 * dyp
            newd[1, 1] += de2 * myp
            newd[2] = e1 * dzp
            newd[2, 0] += de1 * (mzp - m_eq)
            dmag = newd
        mag = np.stack([e2 * mxp, e2 * myp, m_eq + e1 * (mzp - m_eq)])
        if states:
            history.append(mag.T.copy())
    if states:
        history = np.stack(history, axis=1)
    return signal, jac, history


def simulate_many(t1, t2, seq):
    """
    fingerprints for many (T1, T2) pairs

    Args:
        t1(array like): T1 values in seconds
        t2(array like): T2 values in seconds
        seq(SequenceSpec): the sequence

    Raises:
        NonPositiveRelaxation: if any relaxation time is <= 0

    Returns:
        signals(numpy.ndarray): complex array of shape (n, L)
    """
    signal, _, _ = _recursion(t1, t2, seq)
    return signal


def signals_and_jacobians(t1, t2, seq):
    """
    fingerprints and their (T1, T2) sensitivities by forward mode
    differentiation of the recursion

    Args:
        t1(array like): T1 values in seconds
        t2(array like): T2 values in seconds
        seq(SequenceSpec): the sequence

    Returns:
        signals(numpy.ndarray): complex array of shape (n, L)
        jacobians(numpy.ndarray): complex array of shape (n, L, 2), last
                                  axis is (d/dT1, d/dT2)
    """
    signal, jac, _ = _recursion(t1, t2, seq, derivatives=True)
    return signal, jac


def simulate_bloch(t1, t2, seq):
    """
    simulate one fingerprint

    Args:
        t1(float): T1 in seconds
        t2(float): T2 in seconds
        seq(SequenceSpec): the sequence

    Raises:
        NonPositiveRelaxation: if t1 or t2 <= 0

    Returns:
        fingerprint(Fingerprint): the L readouts
    """
    return Fingerprint(simulate_many(t1, t2, seq)[0])


def bloch_jacobian(t1, t2, seq):
    """
    sensitivity of one fingerprint to T1 and T2

    Args:
        t1(float): T1 in seconds
        t2(float): T2 in seconds
        seq(SequenceSpec): the sequence

    Returns:
        jacobian(numpy.ndarray): complex (L, 2) matrix (dB/dT1, dB/dT2)
    """
    return signals_and_jacobians(t1, t2, seq)[1][0]


def magnetization_states(t1, t2, seq):
    """
    full magnetization vectors m_0 ... m_L for one spin

    Returns:
        states(numpy.ndarray): array of shape (L + 1, 3)
    """
    return _recursion(t1, t2, seq, states=True)[2][0]


def bloch_map(qmap, seq):
    """
    the Bloch solution map u = rho * B(T1, T2), voxelwise

    Args:
        qmap(core.ParamMap): tissue parameters
        seq(SequenceSpec): the sequence

    Returns:
        series(core.ImageSeries): L frames over the grid
    """
    rho = qmap.rho.ravel()
    tissue = np.flatnonzero(rho != 0)
    series = np.zeros((qmap.grid.size, seq.frames), dtype=complex)
    if tissue.size:
        signals = simulate_many(qmap.t1.ravel()[tissue],
                                qmap.t2.ravel()[tissue], seq)
        series[tissue] = rho[tissue, None] * signals
    data = series.T.reshape((seq.frames,) + qmap.grid.shape)
    return core.ImageSeries(qmap.grid, data)


def param_jacobian(rho, t1, t2, seq):
    """
    per voxel signal and L x 3 Jacobian [B, rho dB/dT1, rho dB/dT2]
    with respect to q = (rho, T1, T2)

    Args:
        rho(numpy.ndarray): flat proton densities
        t1(numpy.ndarray): flat T1 values
        t2(numpy.ndarray): flat T2 values
        seq(SequenceSpec): the sequence

    Returns:
        series(numpy.ndarray): complex (n, L) rho * B
        jacobian(numpy.ndarray): complex (n, L, 3)
    """
    signal, jac = signals_and_jacobians(t1, t2, seq)
    rho = np.asarray(rho, dtype=float).ravel()
    full = np.empty(jac.shape[:2] + (3,), dtype=complex)
    full[..., 0] = signal
    full[..., 1:] = rho[:, None, None] * jac
    return rho[:, None] * signal, full


def ernst_signal(scale, angle, tr, te, r1, r2star):
    """
    FLASH steady state signal given by the Ernst equation

    Args:
        scale(float or numpy.ndarray): C = c * rho with c = 1
        angle(float or numpy.ndarray): flip angle in radians
        tr(float): repetition time in seconds, > 0
        te(float): echo time in seconds, >= 0
        r1(float or numpy.ndarray): 1 / T1 in 1/s
        r2star(float or numpy.ndarray): 1 / T2* in 1/s

    Raises:
        InvalidSequence: if tr <= 0 or te < 0
        SignalModelError: if a = 0 and r1 * tr = 0 (0/0)

    Returns:
        signal(float or numpy.ndarray): the Ernst signal
    """
    if np.any(np.asarray(tr) <= 0) or np.any(np.asarray(te) < 0):
        raise InvalidSequence('tr must be > 0 and te >= 0')
    angle = np.asarray(angle, dtype=float)
    decay = np.asarray(r1, dtype=float) * tr
    if np.any((angle == 0) & (decay == 0)):
        raise SignalModelError('Ernst signal is 0/0 for a = 0 and r1 * tr = 0')
    e1 = np.exp(-decay)
    signal = scale * np.sin(angle) * (1 - e1) / (1 - np.cos(angle) * e1)
    return signal * np.exp(-np.asarray(r2star) * te)


def estatics_signal(u_w, r2star, te):
    """
    ESTATICS echo, u_w * exp(-R2* TE), with the same R2* for every
    weighting

    Args:
        u_w(float or numpy.ndarray): weighting intercept
        r2star(float or numpy.ndarray): decay rate in 1/s
        te(float or numpy.ndarray): echo time in seconds

    Returns:
        signal(float or numpy.ndarray): the echo amplitude
    """
    if np.any(np.asarray(te) < 0):
        raise InvalidSequence('echo times must be >= 0')
    return u_w * np.exp(-np.asarray(r2star) * te)


class FingerprintDictionary():
    """
    simulated fingerprints on a (T1, T2) grid, entries with T2 > T1 left
    out

    Args:
        t1_grid(array like): strictly increasing T1 values
        t2_grid(array like): strictly increasing T2 values
        t1(array like): T1 of each entry
        t2(array like): T2 of each entry
        entries(numpy.ndarray): complex (n, L) fingerprints
        sequence(SequenceSpec): the sequence used to simulate them

    Attributes:
        norms(numpy.ndarray): Euclidean norm of every entry
        normalized(numpy.ndarray): entries divided by their norms
        digest(str): digest of the sequence
    """

    def __init__(self, t1_grid, t2_grid, t1, t2, entries, sequence):
        self.t1_grid = core.frozen_array(t1_grid, float)
        self.t2_grid = core.frozen_array(t2_grid, float)
        self.t1 = core.frozen_array(t1, float)
        self.t2 = core.frozen_array(t2, float)
        self.entries = core.frozen_array(entries, complex)
        self.sequence = sequence
        self.digest = sequence.digest()
        if self.entries.shape[0] == 0:
            raise EmptyDictionary('dictionary has no entries')
        self.norms = core.frozen_array(
            np.linalg.norm(self.entries, axis=1), float)
        if (self.norms <= 0).any():
            raise EmptyDictionary('dictionary entries must have positive norm')
        self.normalized = core.frozen_array(
            self.entries / self.norms[:, None], complex)

    def __len__(self):
        return self.entries.shape[0]

    @property
    def frames(self):
        """
        fingerprint length L
        """
        return self.entries.shape[1]

    def fingerprint(self, index):
        """
        entry number index as a Fingerprint
        """
        return Fingerprint(self.entries[index])

    def save(self, rawpath):
        """
        write the entries as a raw array, grids and sequence in the header

        Args:
            rawpath(str): where to write
        """
        meta = {'kind': 'dictionary', 't1_grid': self.t1_grid.tolist(),
                't2_grid': self.t2_grid.tolist(), 't1': self.t1.tolist(),
                't2': self.t2.tolist(), 'sequence': self.sequence.to_dict(),
                'sequence_digest': self.digest}
        rawarray.write_raw(rawpath, self.entries, meta)

    @classmethod
    def load(cls, rawpath):
        """
        read a dictionary written by save

        Args:
            rawpath(str): the raw file

        Raises:
            rawarray.RawFormatError: if the stored digest does not match
                                     the stored sequence

        Returns:
            dictionary(FingerprintDictionary): the dictionary
        """
        entries, meta = rawarray.read_raw(rawpath)
        if meta.get('kind') != 'dictionary':
            raise rawarray.RawFormatError('{} is not a dictionary'.format(
                rawpath))
        sequence = SequenceSpec.from_dict(meta['sequence'])
        if sequence.digest() != meta['sequence_digest']:
            raise rawarray.RawFormatError(
                'sequence digest mismatch in {}'.format(rawpath))
        return cls(meta['t1_grid'], meta['t2_grid'], meta['t1'], meta['t2'],
                   entries, sequence)


def _check_grid(values, name):
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0 or (values <= 0).any() or \
            (np.diff(values) <= 0).any():
        raise InvalidDictionaryGrid(
            '{} grid must be positive and strictly increasing'.format(name))
    return values


def default_grids():
    """
    the default dictionary grids, T1 from 0.1 s to 4 s in 0.1 s steps and
    T2 from 10 ms to 300 ms in 10 ms steps then to 2 s in 50 ms steps

    Returns:
        t1_grid(numpy.ndarray): T1 values in seconds
        t2_grid(numpy.ndarray): T2 values in seconds
    """
    t1_grid = np.round(np.arange(1, 41) * 0.1, 6)
    t2_grid = np.round(np.concatenate([
        np.arange(1, 31) * 0.01, 0.30 + np.arange(1, 35) * 0.05]), 6)
    return t1_grid, t2_grid


def build_dictionary(t1_grid, t2_grid, seq, workers=1, block=4096,
                     check=False):
    """
    simulate every (T1, T2) pair of the grids with T2 <= T1

    Note:
        entries are ordered T1 major then T2, the order does not depend on
        the number of workers

    Args:
        t1_grid(array like): strictly increasing positive T1 values
        t2_grid(array like): strictly increasing positive T2 values
        seq(SequenceSpec): the sequence
        workers(int): number of threads for the simulation blocks
        block(int): number of pairs per simulation block
        check(bool): warn if two normalised entries are indistinguishable

    Raises:
        InvalidDictionaryGrid: if a grid is not strictly increasing
        EmptyDictionary: if no pair has T2 <= T1

    Returns:
        dictionary(FingerprintDictionary): the dictionary
    """
    t1_grid = _check_grid(t1_grid, 'T1')
    t2_grid = _check_grid(t2_grid, 'T2')
    t1_all, t2_all = np.meshgrid(t1_grid, t2_grid, indexing='ij')
    keep = (t2_all <= t1_all).ravel()
    t1 = t1_all.ravel()[keep]
    t2 = t2_all.ravel()[keep]
    if t1.size == 0:
        raise EmptyDictionary('no grid pair has T2 <= T1')
    starts = range(0, t1.size, block)
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(
                lambda start: simulate_many(t1[start:start + block],
                                            t2[start:start + block], seq),
                starts))
    else:
        parts = [simulate_many(t1[start:start + block],
                               t2[start:start + block], seq)
                 for start in starts]
    entries = np.concatenate(parts)
    norms = np.linalg.norm(entries, axis=1)
    nonzero = norms > 0
    if not nonzero.all():
        LOGGER.warning('dropping %d dictionary entries with zero norm',
                       int((~nonzero).sum()))
    if not nonzero.any():
        raise EmptyDictionary('every fingerprint has zero norm')
    dictionary = FingerprintDictionary(
        t1_grid, t2_grid, t1[nonzero], t2[nonzero], entries[nonzero], seq)
    LOGGER.info('built dictionary with %d entries of length %d',
                len(dictionary), dictionary.frames)
    if check:
        check_distinguishable(dictionary)
    return dictionary


def check_distinguishable(dictionary, tolerance=1e-9, block=1024):
    """
    largest correlation between two different normalised entries

    Args:
        dictionary(FingerprintDictionary): the dictionary
        tolerance(float): warn when the correlation exceeds 1 - tolerance
        block(int): rows per Gram block

    Returns:
        worst(float): max |<b_i, b_j>| over i != j, 0 for one entry
    """
    atoms = dictionary.normalized
    worst = 0.0
    for start in range(0, len(dictionary), block):
        gram = np.abs(atoms[start:start + block].conj() @ atoms.T)
        rows = np.arange(gram.shape[0])
        gram[rows, start + rows] = 0.0
        worst = max(worst, float(gram.max()))
    if worst > 1 - tolerance:
        LOGGER.warning('dictionary has indistinguishable entries '
                       '(correlation %.12f)', worst)
    return worst


def default_dictionary(seq, workers=1):
    """
    dictionary on the default grids, checked for distinguishable entries
    """
    t1_grid, t2_grid = default_grids()
    return build_dictionary(t1_grid, t2_grid, seq, workers=workers,
                            check=True)
