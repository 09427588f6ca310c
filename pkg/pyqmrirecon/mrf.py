"""
dictionary matching: MRF reconstruction and the BLIP projected
Landweber iteration
"""

import collections
import concurrent.futures
import logging

import numpy as np

import pyqmrirecon.core as core
import pyqmrirecon.forward as forward


LOGGER = logging.getLogger(__name__)

SCALES = ('norm', 'projection')


class SequenceMismatch(core.ConfigError):
    """
    raise when data and a dictionary were made with different sequences
    """


class InvalidStepSize(core.ConfigError):
    """
    raise if a Landweber step size is outside (0, 2)
    """


MatchResult = collections.namedtuple(
    'MatchResult', ['t1', 't2', 'rho', 'correlation', 'dict_index'])

BlipResult = collections.namedtuple(
    'BlipResult', ['qmap', 'series', 'residuals'])


def _match_block(block, dictionary, scale):
    corr = (block.conj() @ dictionary.normalized.T).real
    index = np.argmax(corr, axis=1)
    best = corr[np.arange(block.shape[0]), index]
    norms = dictionary.norms[index]
    if scale == 'norm':
        rho = np.where(best > 0, np.linalg.norm(block, axis=1) / norms, 0.0)
    else:
        rho = np.maximum(best, 0.0) / norms
    return index, rho, best


def match_series(series, dictionary, scale='norm', block=2048, workers=1):
    """
    match many voxel series against the dictionary at once

    Note:
        the objective 1/2 ||B / ||B|| - u||^2 is minimised by the maximum
        of Re <u, B / ||B||> with <a, b> = sum conj(a) b; ties go to the
        smallest index

    Args:
        series(numpy.ndarray): complex array of shape (n, L)
        dictionary(bloch.FingerprintDictionary): the dictionary
        scale(str): 'norm' gives rho = ||u|| / ||B||, 'projection' gives
                    the least squares rho = Re <u, B / ||B||>+ / ||B||
        block(int): voxels per matrix product
        workers(int): number of threads, results do not depend on it

    Raises:
        SequenceMismatch: if the series length is not the fingerprint length
        core.ConfigError: if scale is unknown

    Returns:
        index(numpy.ndarray): dictionary index per voxel
        rho(numpy.ndarray): proton density per voxel, >= 0
        correlation(numpy.ndarray): Re <u, B / ||B||> per voxel
    """
    if scale not in SCALES:
        raise core.ConfigError('unknown scale {}'.format(scale))
    series = np.atleast_2d(np.asarray(series, dtype=complex))
    if series.shape[1] != dictionary.frames:
        raise SequenceMismatch('series of length {} vs fingerprints of {}'
                               .format(series.shape[1], dictionary.frames))
    starts = range(0, series.shape[0], block)
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(
                lambda start: _match_block(series[start:start + block],
                                           dictionary, scale), starts))
    else:
        parts = [_match_block(series[start:start + block], dictionary, scale)
                 for start in starts]
    if not parts:
        return np.zeros(0, int), np.zeros(0), np.zeros(0)
    index, rho, corr = (np.concatenate(part) for part in zip(*parts))
    return index, rho, corr


def mrf_match(series, dictionary, scale='norm'):
    """
    match one voxel series

    Args:
        series(array like): complex length L series
        dictionary(bloch.FingerprintDictionary): the dictionary
        scale(str): 'norm' or 'projection', see match_series

    Returns:
        result(MatchResult): the best entry and its scale
    """
    index, rho, corr = match_series(np.asarray(series)[None, :], dictionary,
                                    scale)
    best = int(index[0])
    return MatchResult(float(dictionary.t1[best]), float(dictionary.t2[best]),
                       float(rho[0]), float(corr[0]), best)


def matches_to_map(grid, index, rho, dictionary):
    """
    assemble a ParamMap from per voxel matches

    Args:
        grid(core.Grid): the voxel grid
        index(numpy.ndarray): dictionary index per voxel
        rho(numpy.ndarray): proton density per voxel
        dictionary(bloch.FingerprintDictionary): the dictionary

    Returns:
        qmap(core.ParamMap): the parameters
    """
    return core.ParamMap(grid, np.reshape(rho, grid.shape),
                         dictionary.t1[index].reshape(grid.shape),
                         dictionary.t2[index].reshape(grid.shape))


def project_series(series, dictionary, workers=1):
    """
    nearest point of the model set {rho B(q): rho >= 0, q in the
    dictionary} voxel by voxel

    Args:
        series(numpy.ndarray): complex (n, L) voxel series
        dictionary(bloch.FingerprintDictionary): the dictionary
        workers(int): matching threads

    Returns:
        projected(numpy.ndarray): complex (n, L) rho B(q) per voxel
        index(numpy.ndarray): dictionary index per voxel
        rho(numpy.ndarray): proton density per voxel
    """
    index, rho, _ = match_series(series, dictionary, 'projection',
                                 workers=workers)
    return rho[:, None] * dictionary.entries[index], index, rho


def _check_frames(kspace, dictionary):
    if kspace.frames != dictionary.frames:
        raise SequenceMismatch('{} data frames vs fingerprints of length {}'
                               .format(kspace.frames, dictionary.frames))


def mrf_reconstruct(kspace, dictionary, workers=1):
    """
    MRF: zero fill every frame then match every voxel series

    Args:
        kspace(core.KSpaceData): the measurements
        dictionary(bloch.FingerprintDictionary): the dictionary
        workers(int): matching threads

    Raises:
        SequenceMismatch: if the frame count differs from the fingerprints

    Returns:
        qmap(core.ParamMap): the matched parameters
    """
    _check_frames(kspace, dictionary)
    series = forward.zero_fill(kspace).voxel_series()
    index, rho, _ = match_series(series, dictionary, 'norm', workers=workers)
    LOGGER.info('matched %d voxels against %d fingerprints', series.shape[0],
                len(dictionary))
    return matches_to_map(kspace.grid, index, rho, dictionary)


def _to_voxels(frames):
    return frames.reshape(frames.shape[0], -1).T


def _to_frames(voxels, grid):
    return voxels.T.reshape((voxels.shape[1],) + grid.shape)


def blip_reconstruct(kspace, dictionary, steps=50, mu=1.0, init=None,
                     workers=1):
    """
    BLIP: projected Landweber iteration u <- P(u - mu A^H (A u - y)) where
    P is the voxelwise nearest point on the dictionary model set

    Note:
        with steps = 0 the map is the MRF reconstruction. For mu <= 1 the
        data residual does not increase from step to step

    Args:
        kspace(core.KSpaceData): the measurements
        dictionary(bloch.FingerprintDictionary): the dictionary
        steps(int): number of Landweber steps
        mu(float): step size in (0, 2)
        init(core.ImageSeries): starting series, the projected zero fill if
                                None
        workers(int): matching threads

    Raises:
        InvalidStepSize: if mu is not in (0, 2)
        SequenceMismatch: if the frame count differs from the fingerprints

    Returns:
        result(BlipResult): qmap(core.ParamMap), series(core.ImageSeries)
                            the final projected series and residuals(list)
                            ||A u_k - y|| for k = 0 .. steps
    """
    if not 0 < mu < 2:
        raise InvalidStepSize('mu must lie in (0, 2), got {}'.format(mu))
    _check_frames(kspace, dictionary)
    grid = kspace.grid
    operator = forward.MaskedFourier(kspace.masks)
    data = kspace.to_full()
    if init is None:
        start = forward.zero_fill(kspace).data
    else:
        start = init.data
    voxels, index, rho = project_series(_to_voxels(start), dictionary,
                                        workers)
    if steps == 0 and init is None:
        qmap = mrf_reconstruct(kspace, dictionary, workers)
    else:
        qmap = matches_to_map(grid, index, rho, dictionary)
    series = _to_frames(voxels, grid)
    residuals = [float(np.linalg.norm(operator.forward(series) - data))]
    for step in range(steps):
        update = series - mu * operator.adjoint(operator.forward(series) -
                                                data)
        voxels, index, rho = project_series(_to_voxels(update), dictionary,
                                            workers)
        series = _to_frames(voxels, grid)
        residuals.append(float(np.linalg.norm(operator.forward(series) -
                                              data)))
        LOGGER.debug('blip step %d residual %.6e', step + 1, residuals[-1])
        qmap = matches_to_map(grid, index, rho, dictionary)
    LOGGER.info('blip finished after %d steps, residual %.6e', steps,
                residuals[-1])
    return BlipResult(qmap, core.ImageSeries(grid, series), residuals)
