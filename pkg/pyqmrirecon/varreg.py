"""
variational reconstruction of single frames with (weighted) TV or TGV
by the first order primal-dual method, and the two step qMRI pipeline

Note:
    images are complex (ny, nx) arrays. Differences are forward with
    Neumann boundaries. The TGV field w = (w_x, w_y) lives on the subspace
    where the last column of w_x and the last row of w_y are zero, which
    matches the support of grad u, so TGV of an affine image is exactly 0
"""

import collections
import concurrent.futures
import logging

import numpy as np

import pyqmrirecon.bloch as bloch
import pyqmrirecon.core as core
import pyqmrirecon.forward as forward
import pyqmrirecon.integrated as integrated
import pyqmrirecon.mrf as mrf
import pyqmrirecon.rawarray as rawarray


LOGGER = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-8
ENERGY_EVERY = 50
POWER_ITERATIONS = 50
NORM_INFLATION = 1.01
STEP_FRACTION = 0.99
STRONG_CONVEXITY = 0.5
GN_DAMPING = 1e-10


class InvalidWeights(core.ConfigError):
    """
    raise if regularisation weights are not bounded away from zero
    """


PDResult = collections.namedtuple('PDResult', ['image', 'energies'])


class WeightField():
    """
    regularisation weights, scalars or per voxel maps

    Args:
        alpha(float or array like): first order weight
        beta(float or array like): second order weight (TGV only)
        shape(tuple): grid shape (ny, nx) to broadcast onto

    Raises:
        InvalidWeights: if a weight is below 1e-8 or not finite
    """

    def __init__(self, alpha, beta=None, shape=None):
        alpha = np.asarray(alpha, dtype=float)
        beta = np.asarray(2 * alpha if beta is None else beta, dtype=float)
        if shape is not None:
            alpha = np.broadcast_to(alpha, shape)
            beta = np.broadcast_to(beta, shape)
        for name, values in (('alpha', alpha), ('beta', beta)):
            if not np.isfinite(values).all() or \
                    (values < WEIGHT_FLOOR).any():
                raise InvalidWeights('{} must be finite and >= {}'.format(
                    name, WEIGHT_FLOOR))
        self.alpha = core.frozen_array(alpha, float)
        self.beta = core.frozen_array(beta, float)

    @classmethod
    def from_raw(cls, alphapath, betapath=None):
        """
        read externally computed weight maps from raw arrays

        Args:
            alphapath(str): raw (ny, nx) alpha map
            betapath(str): raw (ny, nx) beta map, 2 alpha if None

        Returns:
            weights(WeightField): the weights
        """
        alpha, _ = rawarray.read_raw(alphapath)
        beta = rawarray.read_raw(betapath)[0] if betapath else None
        return cls(alpha, beta)


def _span(ndim, axis, start, stop):
    index = [slice(None)] * ndim
    index[axis] = slice(start, stop)
    return tuple(index)


def _fdiff(arr, axis, length):
    """
    forward differences along axis over the first length entries, zero
    from entry length - 1 on
    """
    out = np.zeros_like(arr)
    if length < 2:
        return out
    ndim = arr.ndim
    out[_span(ndim, axis, 0, length - 1)] = \
        arr[_span(ndim, axis, 1, length)] - arr[_span(ndim, axis, 0, length - 1)]
    return out


def _fdiff_adjoint(arr, axis, length):
    out = np.zeros_like(arr)
    if length < 2:
        return out
    ndim = arr.ndim
    head = arr[_span(ndim, axis, 0, length - 1)]
    out[_span(ndim, axis, 0, length - 1)] -= head
    out[_span(ndim, axis, 1, length)] += head
    return out


def grad(image):
    """
    forward difference gradient with Neumann boundary

    Args:
        image(numpy.ndarray): array of shape (ny, nx)

    Returns:
        gradient(numpy.ndarray): shape (2, ny, nx), (d/dx, d/dy)
    """
    ny, nx = image.shape[-2:]
    return np.stack([_fdiff(image, -1, nx), _fdiff(image, -2, ny)])


def div(field):
    """
    discrete divergence, the negative adjoint of grad

    Args:
        field(numpy.ndarray): shape (2, ny, nx)

    Returns:
        divergence(numpy.ndarray): shape (ny, nx)
    """
    ny, nx = field.shape[-2:]
    return -(_fdiff_adjoint(field[0], -1, nx) +
             _fdiff_adjoint(field[1], -2, ny))


def project_field(field):
    """
    zero the last column of w_x and the last row of w_y
    """
    field = np.array(field)
    field[0][..., -1] = 0
    field[1][..., -1, :] = 0
    return field


def sym_grad(field):
    """
    symmetrised gradient of a vector field on the restricted subspace

    Args:
        field(numpy.ndarray): shape (2, ny, nx)

    Returns:
        tensor(numpy.ndarray): shape (3, ny, nx), (xx, yy, xy)
    """
    ny, nx = field.shape[-2:]
    return np.stack([
        _fdiff(field[0], -1, nx - 1),
        _fdiff(field[1], -2, ny - 1),
        0.5 * (_fdiff(field[0], -2, ny) + _fdiff(field[1], -1, nx))])


def sym_inner(left, right):
    """
    inner product of symmetric tensor fields, off diagonal counted twice
    """
    weights = np.array([1.0, 1.0, 2.0]).reshape((3,) + (1,) * (left.ndim - 1))
    return float(np.sum(weights * (left.conj() * right).real))


def sym_grad_adjoint(tensor):
    """
    adjoint of sym_grad for the inner product of sym_inner

    Args:
        tensor(numpy.ndarray): shape (3, ny, nx)

    Returns:
        field(numpy.ndarray): shape (2, ny, nx) on the restricted subspace
    """
    ny, nx = tensor.shape[-2:]
    wx = _fdiff_adjoint(tensor[0], -1, nx - 1) + \
        _fdiff_adjoint(tensor[2], -2, ny)
    wy = _fdiff_adjoint(tensor[1], -2, ny - 1) + \
        _fdiff_adjoint(tensor[2], -1, nx)
    return project_field(np.stack([wx, wy]))


def _vector_magnitude(field):
    return np.sqrt(np.sum(np.abs(field) ** 2, axis=0))


def _tensor_magnitude(tensor):
    return np.sqrt(np.abs(tensor[0]) ** 2 + np.abs(tensor[1]) ** 2 +
                   2 * np.abs(tensor[2]) ** 2)


def _project_ball(dual, magnitude, radius):
    return dual / np.maximum(1.0, magnitude / radius)


def _data_misfit(image, data, operator):
    return 0.5 * float(np.sum(np.abs(operator.forward(image) - data) ** 2))


def tv_energy(image, data, operator, alpha):
    """
    1/2 ||A u - y||^2 + sum alpha |grad u|

    Args:
        image(numpy.ndarray): the frame u
        data(numpy.ndarray): full size data y, zero off the mask
        operator(object): forward.MaskedFourier or forward.Identity
        alpha(float or numpy.ndarray): weights

    Returns:
        energy(float): the objective value
    """
    return _data_misfit(image, data, operator) + \
        float(np.sum(alpha * _vector_magnitude(grad(image))))


def tgv_energy(image, field, data, operator, alpha, beta):
    """
    1/2 ||A u - y||^2 + sum alpha |grad u - w| + sum beta |E w|
    """
    return _data_misfit(image, data, operator) + \
        float(np.sum(alpha * _vector_magnitude(grad(image) - field))) + \
        float(np.sum(beta * _tensor_magnitude(sym_grad(field))))


def _step_size(normal, shape):
    generator = core.Rng(0).generator()
    vec = [generator.standard_normal(part) for part in shape]
    eigen = 0.0
    for _ in range(POWER_ITERATIONS):
        size = np.sqrt(sum(np.sum(np.abs(part) ** 2) for part in vec))
        vec = [part / size for part in vec]
        vec = normal(*vec)
        eigen = np.sqrt(sum(np.sum(np.abs(part) ** 2) for part in vec))
    norm = np.sqrt(eigen) * NORM_INFLATION
    return STEP_FRACTION / max(norm, 1e-12)


def _check_finite(energy, iteration):
    if not np.isfinite(energy):
        raise integrated.SolverDiverged(
            'energy is {} at iteration {}'.format(energy, iteration))


def pdhg_tv(data, operator, weights, iters=500, init=None):
    """
    minimise 1/2 ||A u - y||^2 + sum alpha |grad u| for one frame

    Note:
        the data term is kept in the primal through its closed form
        proximal map. When it is strongly convex (denoising or full
        sampling) the accelerated step size rule is used

    Args:
        data(numpy.ndarray): full size data y of shape (ny, nx)
        operator(object): forward.MaskedFourier or forward.Identity
        weights(WeightField): alpha is used
        iters(int): number of primal-dual steps
        init(numpy.ndarray): starting image, A^H y if None

    Raises:
        integrated.SolverDiverged: if the energy becomes NaN

    Returns:
        result(PDResult): image(numpy.ndarray) and energies(list) recorded
                          every 50 steps and at the end
    """
    data = np.asarray(data, dtype=complex)
    alpha = weights.alpha
    image = operator.adjoint(data) if init is None else \
        np.array(init, dtype=complex)
    shape = image.shape
    tau = sigma = _step_size(lambda u: [-div(grad(u))], [shape])
    accelerate = operator.strongly_convex
    dual = np.zeros((2,) + shape, dtype=complex)
    extra = image.copy()
    energies = []
    for iteration in range(iters):
        dual = dual + sigma * grad(extra)
        dual = _project_ball(dual, _vector_magnitude(dual), alpha)
        previous = image
        image = operator.data_prox(image + tau * div(dual), data, tau)
        theta = 1.0
        if accelerate:
            theta = 1.0 / np.sqrt(1 + 2 * STRONG_CONVEXITY * tau)
            tau *= theta
            sigma /= theta
        extra = image + theta * (image - previous)
        if (iteration + 1) % ENERGY_EVERY == 0:
            energy = tv_energy(image, data, operator, alpha)
            _check_finite(energy, iteration + 1)
            energies.append(energy)
            LOGGER.debug('tv iteration %d energy %.10e', iteration + 1, energy)
    energy = tv_energy(image, data, operator, alpha)
    _check_finite(energy, iters)
    if iters % ENERGY_EVERY or not energies:
        energies.append(energy)
    return PDResult(image, energies)


def pdhg_tgv(data, operator, weights, iters=500, init=None):
    """
    minimise 1/2 ||A u - y||^2 + sum alpha |grad u - w| + sum beta |E w|
    for one frame, saddle point form in (u, w)

    Args:
        data(numpy.ndarray): full size data y of shape (ny, nx)
        operator(object): forward.MaskedFourier or forward.Identity
        weights(WeightField): alpha and beta are used
        iters(int): number of primal-dual steps
        init(numpy.ndarray): starting image, A^H y if None

    Raises:
        integrated.SolverDiverged: if the energy becomes NaN

    Returns:
        result(PDResult): image(numpy.ndarray) and energies(list)
    """
    data = np.asarray(data, dtype=complex)
    alpha, beta = weights.alpha, weights.beta
    image = operator.adjoint(data) if init is None else \
        np.array(init, dtype=complex)
    shape = image.shape
    field = project_field(grad(image))

    def normal(u, w):
        diff = grad(u) - w
        return [-div(diff),
                project_field(-diff + sym_grad_adjoint(sym_grad(w)))]

    tau = sigma = _step_size(normal, [shape, (2,) + shape])
    dual = np.zeros((2,) + shape, dtype=complex)
    tensor_dual = np.zeros((3,) + shape, dtype=complex)
    extra, extra_field = image.copy(), field.copy()
    energies = []
    for iteration in range(iters):
        dual = dual + sigma * (grad(extra) - extra_field)
        dual = _project_ball(dual, _vector_magnitude(dual), alpha)
        tensor_dual = tensor_dual + sigma * sym_grad(extra_field)
        tensor_dual = _project_ball(tensor_dual,
                                    _tensor_magnitude(tensor_dual), beta)
        previous, previous_field = image, field
        image = operator.data_prox(image + tau * div(dual), data, tau)
        field = project_field(
            field + tau * (dual - sym_grad_adjoint(tensor_dual)))
        extra = 2 * image - previous
        extra_field = 2 * field - previous_field
        if (iteration + 1) % ENERGY_EVERY == 0:
            energy = tgv_energy(image, field, data, operator, alpha, beta)
            _check_finite(energy, iteration + 1)
            energies.append(energy)
            LOGGER.debug('tgv iteration %d energy %.10e', iteration + 1,
                         energy)
    energy = tgv_energy(image, field, data, operator, alpha, beta)
    _check_finite(energy, iters)
    if iters % ENERGY_EVERY or not energies:
        energies.append(energy)
    return PDResult(image, energies)


REGULARISERS = {'tv': pdhg_tv, 'tgv': pdhg_tgv}


def reconstruct_frames(kspace, weights, iters=500, regulariser='tv',
                       workers=1):
    """
    stage one: reconstruct every frame on its own

    Args:
        kspace(core.KSpaceData): the measurements
        weights(WeightField): regularisation weights
        iters(int): primal-dual steps per frame
        regulariser(str): 'tv' or 'tgv'
        workers(int): frames solved in parallel threads

    Returns:
        series(core.ImageSeries): the reconstructed frames
    """
    try:
        solver = REGULARISERS[regulariser]
    except KeyError as err:
        raise core.ConfigError('unknown regulariser {}'.format(
            regulariser)) from err
    full = kspace.to_full()

    def solve(frame):
        operator = forward.MaskedFourier(kspace.masks[frame])
        return solver(full[frame], operator, weights, iters).image

    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(workers) as pool:
            frames = list(pool.map(solve, range(kspace.frames)))
    else:
        frames = [solve(frame) for frame in range(kspace.frames)]
    return core.ImageSeries(kspace.grid, np.stack(frames))


def _misfit(series, stacked, seq):
    model, jac = bloch.param_jacobian(stacked[0], stacked[1], stacked[2], seq)
    return np.sum(np.abs(model - series) ** 2, axis=1), model, jac


def fit_series(series, seq, dictionary, box, steps=20, workers=1):
    """
    stage two: per voxel dictionary match refined by projected
    Gauss-Newton steps on 1/2 ||rho B(T1, T2) - u||^2

    Note:
        a step is kept only for voxels whose misfit decreases, so no
        voxel ends worse than its dictionary match. Voxels with an all
        zero series get rho = 0 and the box midpoint for T1 and T2

    Args:
        series(numpy.ndarray): complex (n, L) voxel series
        seq(bloch.SequenceSpec): the sequence
        dictionary(bloch.FingerprintDictionary): the dictionary
        box(core.AdmissibleBox): the admissible set
        steps(int): Gauss-Newton step budget
        workers(int): matching threads

    Returns:
        stacked(numpy.ndarray): (3, n) fitted parameters
    """
    index, rho, _ = mrf.match_series(series, dictionary, 'projection',
                                     workers=workers)
    stacked = box.clip(np.stack([rho, dictionary.t1[index],
                                 dictionary.t2[index]]))
    empty = ~np.any(series != 0, axis=1)
    midpoint = box.midpoint
    stacked[0, empty] = 0.0
    stacked[1, empty] = midpoint[1]
    stacked[2, empty] = midpoint[2]
    active = ~empty
    misfit, model, jac = _misfit(series, stacked, seq)
    rejected = 0
    for step in range(steps):
        if not active.any():
            break
        gram = integrated.normal_matrices(jac[active])
        damping = GN_DAMPING * (1 + np.trace(gram, axis1=1, axis2=2))
        update = integrated.damped_normal_step(
            jac[active], series[active] - model[active], damping[:, None])
        trial = stacked.copy()
        trial[:, active] = box.clip(stacked[:, active] + update.T)
        trial_misfit, trial_model, trial_jac = _misfit(series, trial, seq)
        better = active & (trial_misfit < misfit)
        rejected += int((active & ~better).sum())
        stacked[:, better] = trial[:, better]
        misfit[better] = trial_misfit[better]
        model[better] = trial_model[better]
        jac[better] = trial_jac[better]
        active = better
        LOGGER.debug('gauss-newton step %d improved %d voxels', step + 1,
                     int(better.sum()))
    if rejected:
        LOGGER.debug('%d voxel steps rejected, kept previous values',
                     rejected)
    return stacked


def two_step_reconstruct(kspace, seq, dictionary, weights, box, iters=500,
                         steps=20, regulariser='tv', workers=1):
    """
    two step qMRI: variational frames first, then a per voxel
    nonlinear regression for (rho, T1, T2)

    Args:
        kspace(core.KSpaceData): the measurements
        seq(bloch.SequenceSpec): the sequence
        dictionary(bloch.FingerprintDictionary): used to initialise stage 2
        weights(WeightField): stage 1 weights
        box(core.AdmissibleBox): the admissible set
        iters(int): primal-dual steps per frame
        steps(int): Gauss-Newton steps per voxel
        regulariser(str): 'tv' or 'tgv'
        workers(int): parallel threads

    Raises:
        mrf.SequenceMismatch: if the dictionary was built for another
                              sequence

    Returns:
        qmap(core.ParamMap): the parameters
    """
    if dictionary.digest != seq.digest():
        raise mrf.SequenceMismatch('dictionary was built for another sequence')
    frames = reconstruct_frames(kspace, weights, iters, regulariser, workers)
    LOGGER.info('stage one done, %d frames', frames.frames)
    stacked = fit_series(frames.voxel_series(), seq, dictionary, box, steps,
                         workers)
    return core.ParamMap.from_stack(
        kspace.grid, stacked.reshape((3,) + kspace.grid.shape))
