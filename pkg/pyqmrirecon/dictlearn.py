"""
blind compressed sensing with a learned orthogonal patch transform, for
single frames and for parameter maps

Note:
    patches are p x p with stride 1 and periodic wrap around, so every
    pixel lies in exactly P = p * p patches and R^T R = P I. This makes the
    image update an exact diagonal solve in k-space
"""

import collections
import logging

import numpy as np
import scipy.fft
import scipy.linalg

import pyqmrirecon.bloch as bloch
import pyqmrirecon.core as core
import pyqmrirecon.forward as forward
import pyqmrirecon.integrated as integrated
import pyqmrirecon.mrf as mrf


LOGGER = logging.getLogger(__name__)

OBJECTIVE_SLACK = 1e-12
MAX_DOUBLINGS = 60
DEFAULT_PROXIMAL_WEIGHT = 1e-2


class InvalidPatch(core.ConfigError):
    """
    raise if a patch size does not fit the grid
    """


class InvalidSchedule(core.ConfigError):
    """
    raise if a proximal weight is not bounded away from zero
    """


class ObjectiveIncrease(core.NumericalFailure):
    """
    raise when a sweep increases the objective, the block updates are
    exact minimisers so this is a contract violation
    """


BCSResult = collections.namedtuple(
    'BCSResult', ['image', 'transform', 'coeffs', 'objectives'])

QBCSResult = collections.namedtuple(
    'QBCSResult', ['qmap', 'transform', 'coeffs', 'objectives'])


class ProximalSchedule():
    """
    constant proximal weights for the C, D and u (or q) updates

    Args:
        lam_c(float): weight of ||C - C_k||^2
        lam_d(float): weight of ||D - D_k||^2
        lam_u(float): weight of ||u - u_k||^2, start value of the line
                      search for parameter maps

    Raises:
        InvalidSchedule: if a weight is <= 0
    """

    def __init__(self, lam_c=DEFAULT_PROXIMAL_WEIGHT,
                 lam_d=DEFAULT_PROXIMAL_WEIGHT,
                 lam_u=DEFAULT_PROXIMAL_WEIGHT):
        self.lam_c = float(lam_c)
        self.lam_d = float(lam_d)
        self.lam_u = float(lam_u)
        if min(self.lam_c, self.lam_d, self.lam_u) <= 0:
            raise InvalidSchedule('proximal weights must be > 0')


def _check_patch(shape, patch):
    if not 1 <= patch <= min(shape[-2:]):
        raise InvalidPatch('patch size {} does not fit grid {}'.format(
            patch, shape[-2:]))


def patch_extract(image, patch):
    """
    all p x p patches with periodic wrap, one column per patch origin

    Args:
        image(numpy.ndarray): (ny, nx) image or (c, ny, nx) channels
        patch(int): patch side p

    Raises:
        InvalidPatch: if p is larger than the grid

    Returns:
        patches(numpy.ndarray): (P, N) with N = ny * nx, channels side by
                                side giving (P, c * N)
    """
    _check_patch(image.shape, patch)
    rows = []
    for dy in range(patch):
        for dx in range(patch):
            shifted = np.roll(image, (-dy, -dx), axis=(-2, -1))
            rows.append(shifted.reshape(-1))
    return np.stack(rows)


def patch_adjoint(patches, shape, patch):
    """
    scatter-add patches back onto the grid, the adjoint of patch_extract

    Args:
        patches(numpy.ndarray): (P, N) or (P, c * N) matrix
        shape(tuple): (ny, nx) or (c, ny, nx)
        patch(int): patch side p

    Returns:
        image(numpy.ndarray): array of the given shape
    """
    _check_patch(shape, patch)
    image = np.zeros(shape, dtype=patches.dtype)
    for row, (dy, dx) in enumerate(
            (dy, dx) for dy in range(patch) for dx in range(patch)):
        image += np.roll(patches[row].reshape(shape), (dy, dx),
                         axis=(-2, -1))
    return image


def dct_basis(patch):
    """
    orthonormal separable 2D DCT basis, atoms as columns

    Args:
        patch(int): patch side p

    Returns:
        transform(numpy.ndarray): complex (P, P) unitary matrix
    """
    cosines = scipy.fft.dct(np.eye(patch), norm='ortho', axis=0)
    return np.kron(cosines, cosines).T.astype(complex)


def _shrink(values, threshold, sparsity):
    magnitude = np.abs(values)
    if sparsity == 0:
        return np.where(magnitude > np.sqrt(2 * threshold), values, 0)
    scale = np.maximum(magnitude - threshold, 0) / np.maximum(magnitude,
                                                              1e-300)
    return values * scale


def sparse_code_update(patches, transform, coeffs, lam, lam_c, sparsity=0):
    """
    minimise 1/2 ||R u - D C||^2 + lam_c/2 ||C - C_k||^2 + lam ||C||_s
    for orthogonal D, entrywise

    Args:
        patches(numpy.ndarray): R u
        transform(numpy.ndarray): unitary D
        coeffs(numpy.ndarray): previous coefficients C_k
        lam(float): sparsity weight
        lam_c(float): proximal weight
        sparsity(int): 0 for hard thresholding, 1 for soft thresholding

    Returns:
        coeffs(numpy.ndarray): the new C
    """
    if sparsity not in (0, 1):
        raise core.ConfigError('sparsity must be 0 or 1')
    values = (transform.conj().T @ patches + lam_c * coeffs) / (1 + lam_c)
    return _shrink(values, lam / (1 + lam_c), sparsity)


def transform_update(patches, coeffs, transform, lam_d):
    """
    maximise Re tr(D^H M) over unitary D, M = R u C^H + lam_d D_k

    Args:
        patches(numpy.ndarray): R u
        coeffs(numpy.ndarray): C
        transform(numpy.ndarray): previous D_k
        lam_d(float): proximal weight

    Returns:
        transform(numpy.ndarray): U V^H from the SVD of M
    """
    target = patches @ coeffs.conj().T + lam_d * transform
    left, _, right = scipy.linalg.svd(target)
    return left @ right


def image_update(data, masks, transform, coeffs, previous, mu, lam_u,
                 patch):
    """
    exact solve of (mu A^H A + R^T R + lam_u I) u = mu A^H y + R^T(DC)
    + lam_u u_k in k-space

    Args:
        data(numpy.ndarray): full size k-space y, zero off the mask
        masks(numpy.ndarray): boolean sampling mask
        transform(numpy.ndarray): D
        coeffs(numpy.ndarray): C
        previous(numpy.ndarray): u_k
        mu(float): data weight
        lam_u(float): proximal weight
        patch(int): patch side p

    Returns:
        image(numpy.ndarray): the new u
    """
    shape = previous.shape
    operator = forward.MaskedFourier(masks)
    rhs = mu * operator.adjoint(data) + \
        patch_adjoint(transform @ coeffs, shape, patch) + lam_u * previous
    scale = mu * masks + patch * patch + lam_u
    return forward.ifft2_unitary(forward.fft2_unitary(rhs) / scale)


def _penalty(coeffs, sparsity):
    if sparsity == 0:
        return float(np.count_nonzero(coeffs))
    return float(np.sum(np.abs(coeffs)))


def bcs_objective(image, data, masks, transform, coeffs, mu, lam, sparsity,
                  patch):
    """
    mu/2 ||A u - y||^2 + 1/2 ||R u - D C||^2 + lam ||C||_s
    """
    operator = forward.MaskedFourier(masks)
    misfit = np.sum(np.abs(operator.forward(image) - data) ** 2)
    fit = np.sum(np.abs(patch_extract(image, patch) - transform @ coeffs)
                 ** 2)
    return float(0.5 * mu * misfit + 0.5 * fit +
                 lam * _penalty(coeffs, sparsity))


def ksvd_objective(samples, transform, coeffs):
    """
    sparse representation diagnostics for a fixed transform

    Args:
        samples(numpy.ndarray): (P, N) training patches
        transform(numpy.ndarray): D
        coeffs(numpy.ndarray): C

    Returns:
        fit(float): ||Y - D C||_F^2
        sparsity(int): largest number of nonzeros in a column of C
    """
    fit = float(np.sum(np.abs(samples - transform @ coeffs) ** 2))
    nonzeros = np.count_nonzero(coeffs, axis=0)
    return fit, int(nonzeros.max()) if nonzeros.size else 0


def _check_descent(objectives, sweep):
    if len(objectives) < 2:
        return
    previous, current = objectives[-2], objectives[-1]
    if not np.isfinite(current):
        raise integrated.SolverDiverged('objective is {} at sweep {}'.format(
            current, sweep))
    if current > previous + OBJECTIVE_SLACK * max(1.0, abs(previous)):
        raise ObjectiveIncrease(
            'objective rose from {!r} to {!r} at sweep {}'.format(
                previous, current, sweep))


def bcs_reconstruct(data, masks, patch=8, mu=1.0, lam=1e-3, sparsity=0,
                    sweeps=30, schedule=None):
    """
    blind compressed sensing of one frame, cyclic (C, D, u) updates from
    u = A^H y, D = DCT and C = 0

    Args:
        data(numpy.ndarray): full size k-space y of shape (ny, nx)
        masks(numpy.ndarray): boolean sampling mask (ny, nx)
        patch(int): patch side p
        mu(float): data weight
        lam(float): sparsity weight
        sparsity(int): 0 for l0, 1 for l1
        sweeps(int): number of full sweeps
        schedule(ProximalSchedule): proximal weights, defaults if None

    Raises:
        ObjectiveIncrease: if a sweep increases the objective

    Returns:
        result(BCSResult): image, transform, coeffs and the objective after
                           every sweep (entry 0 is the start)
    """
    schedule = schedule or ProximalSchedule()
    data = np.asarray(data, dtype=complex)
    masks = np.asarray(masks, dtype=bool)
    image = forward.MaskedFourier(masks).adjoint(data)
    _check_patch(image.shape, patch)
    transform = dct_basis(patch)
    coeffs = np.zeros((patch * patch, image.size), dtype=complex)
    objectives = [bcs_objective(image, data, masks, transform, coeffs, mu,
                                lam, sparsity, patch)]
    for sweep in range(sweeps):
        patches = patch_extract(image, patch)
        coeffs = sparse_code_update(patches, transform, coeffs, lam,
                                    schedule.lam_c, sparsity)
        transform = transform_update(patches, coeffs, transform,
                                     schedule.lam_d)
        image = image_update(data, masks, transform, coeffs, image, mu,
                             schedule.lam_u, patch)
        objectives.append(bcs_objective(image, data, masks, transform, coeffs,
                                        mu, lam, sparsity, patch))
        _check_descent(objectives, sweep + 1)
        LOGGER.debug('bcs sweep %d objective %.10e', sweep + 1,
                     objectives[-1])
    return BCSResult(image, transform, coeffs, objectives)


def bcs_series(kspace, patch=8, mu=1.0, lam=1e-3, sparsity=0, sweeps=30,
               schedule=None):
    """
    blind compressed sensing of every frame of a series

    Returns:
        series(core.ImageSeries): the reconstructed frames
    """
    full = kspace.to_full()
    frames = [bcs_reconstruct(full[frame], kspace.masks[frame], patch, mu,
                              lam, sparsity, sweeps, schedule).image
              for frame in range(kspace.frames)]
    return core.ImageSeries(kspace.grid, np.stack(frames))


def normalise_channels(stacked, box):
    """
    map (rho, t1, t2) channels to z = (q - lower) / width
    """
    shape = (3,) + (1,) * (stacked.ndim - 1)
    return (stacked - box.lower.reshape(shape)) / box.width.reshape(shape)


def parameter_update(stacked, jac, target, anchor, box, mu, alpha, patch,
                     lam_q):
    """
    one box projected linearised step on the parameter maps

    Note:
        solves (mu Re J^H J + alpha P S^2 + lam_q I) h = mu Re J^H d
        + alpha P S (g - z_k) per voxel with S = diag(1 / width), where
        g = Re R^T(DC) / P is the patch average target in normalised units

    Args:
        stacked(numpy.ndarray): (3, n) current parameters q_k
        jac(numpy.ndarray): complex (n, L, 3) Jacobians at q_k
        target(numpy.ndarray): complex (n, L) zero filled data residual d
        anchor(numpy.ndarray): (3, n) patch average target g
        box(core.AdmissibleBox): the admissible set
        mu(float): data weight
        alpha(float): weight of the patch term
        patch(int): patch side p
        lam_q(float): damping

    Returns:
        stacked(numpy.ndarray): (3, n) projected q_{k+1}
    """
    inverse_width = 1.0 / box.width
    coupling = alpha * patch * patch
    gram = mu * integrated.normal_matrices(jac)
    columns = np.arange(3)
    gram[:, columns, columns] += coupling * inverse_width ** 2 + lam_q
    zk = normalise_channels(stacked, box)
    rhs = mu * np.einsum('nli,nl->ni', jac.conj(), target).real + \
        coupling * inverse_width[None, :] * (anchor - zk).T
    step = np.linalg.solve(gram, rhs[..., None])[..., 0]
    return box.clip(stacked + step.T)


def qmri_objective(stacked, kspace, seq, transform, coeffs, box, mu, alpha,
                   lam, sparsity, patch):
    """
    mu/2 ||A(rho B) - y||^2 + alpha/2 ||R z(q) - D C||^2 + lam ||C||_s
    """
    grid = kspace.grid
    qmap = core.ParamMap.from_stack(grid, stacked.reshape((3,) + grid.shape))
    misfit = integrated.residual_norm(qmap, kspace, seq) ** 2
    channels = normalise_channels(stacked, box).reshape((3,) + grid.shape)
    fit = np.sum(np.abs(patch_extract(channels, patch) - transform @ coeffs)
                 ** 2)
    return float(0.5 * mu * misfit + 0.5 * alpha * fit +
                 lam * _penalty(coeffs, sparsity))


def bcs_qmri_reconstruct(kspace, seq, box, patch=4, mu=1.0, alpha=1.0,
                         lam=1e-3, sparsity=0, sweeps=10, q0=None,
                         schedule=None, dictionary=None):
    """
    blind compressed sensing on the parameter maps, cyclic (C, D, q)
    updates with a backtracking line search on the q damping

    Note:
        the three channels are normalised by the box widths and their
        patches share one transform. The q damping is doubled until the
        objective does not increase and halved after a success. The search
        gives up after 60 doublings

    Args:
        kspace(core.KSpaceData): the measurements
        seq(bloch.SequenceSpec): the sequence
        box(core.AdmissibleBox): the admissible set
        patch(int): patch side p
        mu(float): data weight
        alpha(float): weight of the patch term
        lam(float): sparsity weight
        sparsity(int): 0 for l0, 1 for l1
        sweeps(int): number of full sweeps
        q0(core.ParamMap): start, the MRF match with dictionary if None
        schedule(ProximalSchedule): proximal weights, lam_u starts the q
                                    damping
        dictionary(bloch.FingerprintDictionary): used when q0 is None

    Raises:
        ObjectiveIncrease: if a sweep increases the objective or the line
                           search finds no descent
        integrated.SolverDiverged: if the objective becomes NaN

    Returns:
        result(QBCSResult): qmap, transform, coeffs and the objectives
    """
    schedule = schedule or ProximalSchedule()
    grid = kspace.grid
    if q0 is None:
        if dictionary is None:
            raise core.ConfigError('need a start map or a dictionary')
        q0 = mrf.mrf_reconstruct(kspace, dictionary)
    _check_patch(grid.shape, patch)
    stacked = box.clip(q0.stack()).reshape(3, -1)
    transform = dct_basis(patch)
    coeffs = np.zeros((patch * patch, 3 * grid.size), dtype=complex)
    operator = forward.MaskedFourier(kspace.masks)
    data = kspace.to_full()
    lam_q = schedule.lam_u

    def objective(candidate):
        return qmri_objective(candidate, kspace, seq, transform, coeffs, box,
                              mu, alpha, lam, sparsity, patch)

    objectives = [objective(stacked)]
    for sweep in range(sweeps):
        channels = normalise_channels(stacked, box).reshape((3,) + grid.shape)
        patches = patch_extract(channels, patch)
        if alpha > 0:
            coeffs = sparse_code_update(patches, transform, coeffs,
                                        lam / alpha, schedule.lam_c / alpha,
                                        sparsity)
            transform = transform_update(patches, coeffs, transform,
                                         schedule.lam_d / alpha)
        else:
            coeffs = _shrink(coeffs, lam / schedule.lam_c, sparsity)
        anchor = (patch_adjoint(transform @ coeffs, (3,) + grid.shape,
                                patch).real / (patch * patch)).reshape(3, -1)
        current = objective(stacked)
        series, jac = bloch.param_jacobian(stacked[0], stacked[1],
                                           stacked[2], seq)
        frames = series.T.reshape((seq.frames,) + grid.shape)
        target = operator.adjoint(data - operator.forward(frames)) \
            .reshape(seq.frames, -1).T
        for _ in range(MAX_DOUBLINGS + 1):
            candidate = parameter_update(stacked, jac, target, anchor, box,
                                         mu, alpha, patch, lam_q)
            value = objective(candidate)
            if not np.isfinite(value):
                raise integrated.SolverDiverged(
                    'objective is {} in the line search'.format(value))
            if value <= current + OBJECTIVE_SLACK * max(1.0, abs(current)):
                stacked = candidate
                lam_q = max(lam_q / 2, schedule.lam_u)
                break
            lam_q *= 2
        else:
            raise ObjectiveIncrease(
                'line search found no descent after {} doublings at sweep '
                '{}, damping {:.3e}'.format(MAX_DOUBLINGS, sweep + 1, lam_q))
        objectives.append(objective(stacked))
        _check_descent(objectives, sweep + 1)
        LOGGER.debug('bcs-qmri sweep %d objective %.10e damping %.3e',
                     sweep + 1, objectives[-1], lam_q)
    qmap = core.ParamMap.from_stack(grid, stacked.reshape((3,) + grid.shape))
    return QBCSResult(qmap, transform, coeffs, objectives)
