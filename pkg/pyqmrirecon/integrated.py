"""
integrated physics reconstruction, a projected Levenberg-Marquardt
iteration on the reduced formulation y = A(rho B(T1, T2))
"""

import collections
import logging

import numpy as np

import pyqmrirecon.bloch as bloch
import pyqmrirecon.core as core
import pyqmrirecon.forward as forward


LOGGER = logging.getLogger(__name__)

LAMBDA0_FRACTION = 0.1


class InvalidLMConfig(core.ConfigError):
    """
    raise if Levenberg-Marquardt settings are out of range
    """


class SolverDiverged(core.NumericalFailure):
    """
    raise when an iteration produces NaN or infinite values
    """


LMResult = collections.namedtuple('LMResult', ['qmap', 'trace'])


class LMConfig():
    """
    settings of the Levenberg-Marquardt iteration

    Args:
        lambda0(float): initial damping, None for a tenth of the median of
                        the diagonals of J^H J at the start
        decay(float): lambda_{n+1} = decay * lambda_n, in (0, 1)
        max_iters(int): iteration budget
        tau(float): discrepancy factor, >= 1
        sigma(float): noise standard deviation per real component, None to
                      estimate it from the data
        rtol(float): stop when the step is below rtol * ||q||

    Raises:
        InvalidLMConfig: if a value is out of range
    """

    def __init__(self, lambda0=None, decay=0.7, max_iters=30, tau=1.05,
                 sigma=None, rtol=1e-12):
        self.lambda0 = lambda0
        self.decay = float(decay)
        self.max_iters = int(max_iters)
        self.tau = float(tau)
        self.sigma = sigma
        self.rtol = float(rtol)
        if lambda0 is not None and lambda0 <= 0:
            raise InvalidLMConfig('lambda0 must be > 0')
        if not 0 < self.decay < 1:
            raise InvalidLMConfig('decay must lie in (0, 1)')
        if self.tau < 1:
            raise InvalidLMConfig('tau must be >= 1')
        if self.max_iters < 0:
            raise InvalidLMConfig('max_iters must be >= 0')
        if sigma is not None and sigma < 0:
            raise InvalidLMConfig('sigma must be >= 0')

    def to_dict(self):
        """
        JSON friendly representation
        """
        return {'lambda0': self.lambda0, 'decay': self.decay,
                'max_iters': self.max_iters, 'tau': self.tau,
                'sigma': self.sigma, 'rtol': self.rtol}


def normal_matrices(jac):
    """
    real parts of the per voxel Gram matrices J^H J

    Args:
        jac(numpy.ndarray): complex (n, L, k) Jacobians

    Returns:
        gram(numpy.ndarray): real (n, k, k)
    """
    return np.einsum('nli,nlj->nij', jac.conj(), jac).real


def damped_normal_step(jac, target, damping):
    """
    solve (Re J^H J + D) h = Re J^H d for every voxel

    Args:
        jac(numpy.ndarray): complex (n, L, k) Jacobians
        target(numpy.ndarray): complex (n, L) right hand sides d
        damping(float or numpy.ndarray): scalar, (k,) or (n, k) diagonal D

    Returns:
        step(numpy.ndarray): real (n, k) minimisers of
                             ||J h - d||^2 + h^T D h
    """
    jac = np.asarray(jac)
    gram = normal_matrices(jac)
    rhs = np.einsum('nli,nl->ni', jac.conj(), target).real
    diag = np.broadcast_to(np.asarray(damping, dtype=float), rhs.shape)
    columns = np.arange(rhs.shape[1])
    gram[:, columns, columns] += diag
    return np.linalg.solve(gram, rhs[..., None])[..., 0]


def _series_and_jacobian(stacked, seq):
    rho, t1, t2 = (channel.ravel() for channel in stacked)
    return bloch.param_jacobian(rho, t1, t2, seq)


def residual_norm(qmap, kspace, seq):
    """
    data misfit ||A(rho B(T1, T2)) - y|| over the sampled locations

    Args:
        qmap(core.ParamMap): the parameters
        kspace(core.KSpaceData): the measurements
        seq(bloch.SequenceSpec): the sequence

    Returns:
        residual(float): the Euclidean norm of the misfit
    """
    series = bloch.bloch_map(qmap, seq)
    operator = forward.MaskedFourier(kspace.masks)
    return float(np.linalg.norm(operator.forward(series.data) -
                                kspace.to_full()))


def discrepancy_level(kspace, cfg):
    """
    tau * sigma * sqrt(number of real samples)
    """
    sigma = cfg.sigma
    if sigma is None:
        sigma = forward.estimate_sigma(kspace)
        LOGGER.info('estimated noise sigma %.6e', sigma)
    return cfg.tau * sigma * np.sqrt(2 * kspace.sample_count)


def lm_reconstruct(kspace, seq, q0, box, cfg=None):
    """
    projected Levenberg-Marquardt iteration

    Note:
        A^+ is the zero fill, so the linearised problem splits into one
        damped 3 x 3 normal system per voxel

    Args:
        kspace(core.KSpaceData): the measurements
        seq(bloch.SequenceSpec): the sequence
        q0(core.ParamMap): the start, projected into the box first
        box(core.AdmissibleBox): the admissible set
        cfg(LMConfig): settings, defaults if None

    Raises:
        core.GridMismatch: if q0 and the data are on different grids
        SolverDiverged: if the residual becomes NaN

    Returns:
        result(LMResult): qmap(core.ParamMap) the final iterate and
                          trace(list) of dicts with the iteration,
                          residual, damping and step norm, the last
                          record belongs to the returned iterate
    """
    cfg = cfg or LMConfig()
    grid = kspace.grid
    if q0.grid != grid:
        raise core.GridMismatch('{} vs {}'.format(q0.grid, grid))
    if kspace.frames != seq.frames:
        raise core.GridMismatch('{} data frames for {} sequence frames'
                                .format(kspace.frames, seq.frames))
    operator = forward.MaskedFourier(kspace.masks)
    data = kspace.to_full()
    level = discrepancy_level(kspace, cfg)
    stacked = box.clip(q0.stack())
    damping = cfg.lambda0
    trace = []
    small_step = False
    for iteration in range(cfg.max_iters + 1):
        series, jac = _series_and_jacobian(stacked, seq)
        frames = series.T.reshape((seq.frames,) + grid.shape)
        misfit = data - operator.forward(frames)
        residual = float(np.linalg.norm(misfit))
        if not np.isfinite(residual):
            raise SolverDiverged('residual is {} at iteration {}'.format(
                residual, iteration))
        record = {'iteration': iteration, 'residual': residual,
                  'damping': damping, 'step_norm': 0.0}
        trace.append(record)
        if residual <= level:
            LOGGER.info('discrepancy reached at iteration %d, residual %.6e',
                        iteration, residual)
            break
        if small_step:
            LOGGER.info('step below tolerance before iteration %d, '
                        'residual %.6e', iteration, residual)
            break
        if iteration == cfg.max_iters:
            LOGGER.info('iteration budget spent, residual %.6e', residual)
            break
        if damping is None:
            diagonals = np.diagonal(normal_matrices(jac), axis1=1, axis2=2)
            positive = diagonals[diagonals > 0]
            damping = LAMBDA0_FRACTION * float(np.median(positive)) \
                if positive.size else 1.0
            record['damping'] = damping
        target = operator.adjoint(misfit).reshape(seq.frames, -1).T
        step = damped_normal_step(jac, target, damping)
        updated = box.clip(stacked + step.T.reshape(stacked.shape))
        step_norm = float(np.linalg.norm(updated - stacked))
        record['step_norm'] = step_norm
        LOGGER.debug('lm iteration %d residual %.6e damping %.3e step %.3e',
                     iteration, residual, damping, step_norm)
        stacked = updated
        damping *= cfg.decay
        small_step = step_norm <= cfg.rtol * np.linalg.norm(stacked)
    return LMResult(core.ParamMap.from_stack(grid, stacked), trace)
