"""
ESTATICS multi echo fitting, R1 and PD maps from the Ernst equation and
(patchwise) adaptive weights smoothing of the estimates
"""

import collections
import json
import logging
import math
import os

import numpy as np
import scipy.ndimage

import pyqmrirecon.bloch as bloch
import pyqmrirecon.core as core
import pyqmrirecon.integrated as integrated
import pyqmrirecon.rawarray as rawarray


LOGGER = logging.getLogger(__name__)

GN_STEPS = 15
LOG_CLAMP = 1e-12
BANDWIDTH_GROWTH = 1.25
CONDITION_LIMIT = 1e12
DEFAULT_HMAX = 4.0
DEFAULT_LAMBDA = 100.0
DEFAULT_ECHO_TIMES = (0.0023, 0.0046, 0.0069, 0.0092, 0.0115, 0.0138)
DEFAULT_FLASH_TR = 0.0185
DEFAULT_ANGLE_T1 = math.radians(21.0)
DEFAULT_ANGLE_PD = math.radians(6.0)


class InvalidEchoes(core.ConfigError):
    """
    raise when an echo set cannot identify R2*
    """


class DegenerateFlipAngles(core.ConfigError):
    """
    raise if both weightings use the same flip angle
    """


class InvalidAWSConfig(core.ConfigError):
    """
    raise if smoothing settings are out of range
    """


AWSResult = collections.namedtuple(
    'AWSResult', ['theta', 'counts', 'weights', 'offsets', 'singular'])

DerivedMaps = collections.namedtuple('DerivedMaps', ['r1', 'pd', 'flags'])


class EchoSet():
    """
    multi echo FLASH images of a T1 weighted and a PD weighted sequence

    Args:
        t1w(array like): (n_t1, ny, nx) real echoes of the T1w sequence
        pdw(array like): (n_pd, ny, nx) real echoes of the PDw sequence
        te_t1(array like): echo times of the T1w echoes in seconds
        te_pd(array like): echo times of the PDw echoes in seconds
        a_t1(float): T1w flip angle in radians
        a_pd(float): PDw flip angle in radians
        tr(float): shared repetition time in seconds
        sigma(float): noise standard deviation

    Raises:
        InvalidEchoes: if a weighting has fewer than two distinct echo times
    """

    def __init__(self, t1w, pdw, te_t1, te_pd, a_t1, a_pd, tr, sigma=0.0):
        self.t1w = core.frozen_array(t1w, float)
        self.pdw = core.frozen_array(pdw, float)
        self.te_t1 = core.frozen_array(np.atleast_1d(te_t1), float)
        self.te_pd = core.frozen_array(np.atleast_1d(te_pd), float)
        self.a_t1 = float(a_t1)
        self.a_pd = float(a_pd)
        self.tr = float(tr)
        self.sigma = float(sigma)
        for name, echoes, times in (('T1w', self.t1w, self.te_t1),
                                    ('PDw', self.pdw, self.te_pd)):
            if echoes.ndim != 3 or echoes.shape[0] != times.size:
                raise InvalidEchoes('{} echoes do not match {} echo times'
                                    .format(name, times.size))
            if np.unique(times).size < 2:
                raise InvalidEchoes('{} needs two distinct echo times'.format(
                    name))
        if self.t1w.shape[1:] != self.pdw.shape[1:]:
            raise core.GridMismatch('T1w and PDw echoes on different grids')
        self.grid = core.Grid(self.t1w.shape[2], self.t1w.shape[1])

    def design(self):
        """
        echo times and weighting index of every echo, T1w first
        """
        times = np.concatenate([self.te_t1, self.te_pd])
        weighting = np.concatenate([np.zeros(self.te_t1.size, int),
                                    np.ones(self.te_pd.size, int)])
        return times, weighting

    def stacked(self):
        """
        all echoes as one (n, ny, nx) array, T1w first
        """
        return np.concatenate([self.t1w, self.pdw])

    def to_dict(self):
        """
        acquisition settings as a JSON friendly dict
        """
        return {'te_t1': self.te_t1.tolist(), 'te_pd': self.te_pd.tolist(),
                'a_t1': self.a_t1, 'a_pd': self.a_pd, 'tr': self.tr,
                'sigma': self.sigma}

    def save(self, jsonpath):
        """
        write the settings as JSON and the echoes as raw arrays next to it

        Args:
            jsonpath(str): the JSON file, echoes go to jsonpath + '.t1w.raw'
                           and jsonpath + '.pdw.raw'
        """
        description = self.to_dict()
        for name in ('t1w', 'pdw'):
            rawpath = '{}.{}.raw'.format(jsonpath, name)
            rawarray.write_raw(rawpath, getattr(self, name), {'kind': name})
            description[name] = os.path.basename(rawpath)
        with open(jsonpath, 'w') as echofile:
            json.dump(description, echofile, indent=1, sort_keys=True)

    @classmethod
    def load(cls, jsonpath):
        """
        read an echo set, raw paths in the JSON are relative to its folder

        Raises:
            InvalidEchoes: if the description is unreadable
        """
        try:
            with open(jsonpath, 'r') as echofile:
                description = json.load(echofile)
            folder = os.path.dirname(str(jsonpath))
            t1w, _ = rawarray.read_raw(os.path.join(folder,
                                                    description['t1w']))
            pdw, _ = rawarray.read_raw(os.path.join(folder,
                                                    description['pdw']))
            return cls(t1w, pdw, description['te_t1'], description['te_pd'],
                       description['a_t1'], description['a_pd'],
                       description['tr'], description.get('sigma', 0.0))
        except (OSError, ValueError, KeyError, TypeError) as err:
            raise InvalidEchoes('cannot read echo set {}'.format(
                jsonpath)) from err


class EstaticsFit():
    """
    ESTATICS estimates and their covariance

    Args:
        u_t1(numpy.ndarray): T1w intercept map
        u_pd(numpy.ndarray): PDw intercept map
        r2star(numpy.ndarray): R2* map in 1/s
        covariance(numpy.ndarray): (ny, nx, 3, 3) covariance of
                                   (u_t1, u_pd, r2star)
        background(numpy.ndarray): boolean map of skipped voxels
    """

    def __init__(self, u_t1, u_pd, r2star, covariance, background):
        self.u_t1 = core.frozen_array(u_t1, float)
        self.u_pd = core.frozen_array(u_pd, float)
        self.r2star = core.frozen_array(r2star, float)
        self.covariance = core.frozen_array(covariance, float)
        self.background = core.frozen_array(background, bool)

    def theta(self):
        """
        the estimates as one (3, ny, nx) vector map
        """
        return np.stack([self.u_t1, self.u_pd, self.r2star])


def simulate_echoes(u_t1, u_pd, r2star, te_t1, te_pd, a_t1, a_pd, tr,
                    sigma=0.0, rng=None):
    """
    noisy ESTATICS echoes from known maps

    Args:
        u_t1(numpy.ndarray): T1w intercept map
        u_pd(numpy.ndarray): PDw intercept map
        r2star(numpy.ndarray): R2* map in 1/s
        te_t1(array like): T1w echo times
        te_pd(array like): PDw echo times
        a_t1(float): T1w flip angle
        a_pd(float): PDw flip angle
        tr(float): repetition time
        sigma(float): Gaussian noise level
        rng(core.Rng): noise streams, stream 0 for T1w and 1 for PDw

    Returns:
        echoes(EchoSet): the simulated echoes
    """
    te_t1 = np.atleast_1d(np.asarray(te_t1, dtype=float))
    te_pd = np.atleast_1d(np.asarray(te_pd, dtype=float))
    t1w = bloch.estatics_signal(np.asarray(u_t1)[None], np.asarray(r2star)[None],
                                te_t1[:, None, None])
    pdw = bloch.estatics_signal(np.asarray(u_pd)[None], np.asarray(r2star)[None],
                                te_pd[:, None, None])
    if sigma > 0:
        rng = rng or core.Rng(0)
        t1w = t1w + sigma * rng.generator(0).standard_normal(t1w.shape)
        pdw = pdw + sigma * rng.generator(1).standard_normal(pdw.shape)
    return EchoSet(t1w, pdw, te_t1, te_pd, a_t1, a_pd, tr, sigma)


def echoes_from_qmap(qmap, te_t1=DEFAULT_ECHO_TIMES, te_pd=DEFAULT_ECHO_TIMES,
                     a_t1=DEFAULT_ANGLE_T1, a_pd=DEFAULT_ANGLE_PD,
                     tr=DEFAULT_FLASH_TR, sigma=0.0, rng=None):
    """
    ESTATICS echoes of a (rho, T1, T2) phantom, intercepts from the Ernst
    equation and R2* taken as 1 / T2

    Returns:
        echoes(EchoSet): the simulated echoes
    """
    r1 = 1 / qmap.t1
    r2star = 1 / qmap.t2
    u_t1 = bloch.ernst_signal(qmap.rho, a_t1, tr, 0.0, r1, 0.0)
    u_pd = bloch.ernst_signal(qmap.rho, a_pd, tr, 0.0, r1, 0.0)
    return simulate_echoes(u_t1, u_pd, r2star, te_t1, te_pd, a_t1, a_pd, tr,
                           sigma, rng)


def _model(params, times, weighting):
    intercept = params[:, weighting]
    decay = np.exp(-params[:, 2:3] * times[None, :])
    signal = intercept * decay
    jac = np.zeros(signal.shape + (3,))
    jac[:, weighting == 0, 0] = decay[:, weighting == 0]
    jac[:, weighting == 1, 1] = decay[:, weighting == 1]
    jac[..., 2] = -times[None, :] * signal
    return signal, jac


def estatics_fit(echoes):
    """
    per voxel least squares fit of (u_t1, u_pd, R2*) over all echoes

    Note:
        starts from the joint log-linear regression and refines by up to
        15 Gauss-Newton steps, R2* kept >= 0. Voxels whose echoes are all
        zero are flagged as background and skipped

    Args:
        echoes(EchoSet): the echoes

    Returns:
        fit(EstaticsFit): estimates and covariance sigma^2 (J^T J)^-1
    """
    times, weighting = echoes.design()
    data = echoes.stacked().reshape(times.size, -1).T
    background = ~np.any(data != 0, axis=1)
    fore = np.flatnonzero(~background)
    params = np.zeros((data.shape[0], 3))
    covariance = np.zeros((data.shape[0], 3, 3))
    if fore.size:
        design = np.stack([weighting == 0, weighting == 1, -times], axis=1) \
            .astype(float)
        logs = np.log(np.maximum(np.abs(data[fore]), 1e-300)).T
        solution = np.linalg.lstsq(design, logs, rcond=None)[0].T
        current = np.column_stack([np.exp(solution[:, 0]),
                                   np.exp(solution[:, 1]),
                                   np.maximum(solution[:, 2], 0.0)])
        for step in range(GN_STEPS):
            signal, jac = _model(current, times, weighting)
            scale = np.trace(integrated.normal_matrices(jac), axis1=1, axis2=2)
            update = integrated.damped_normal_step(
                jac, data[fore] - signal, 1e-15 * scale[:, None])
            current = current + update
            current[:, 2] = np.maximum(current[:, 2], 0.0)
            size = np.max(np.abs(update) / (np.abs(current) + 1e-300))
            if size < 1e-15:
                break
        LOGGER.debug('estatics fit stopped after %d steps', step + 1)
        _, jac = _model(current, times, weighting)
        gram = integrated.normal_matrices(jac)
        covariance[fore] = echoes.sigma ** 2 * np.linalg.pinv(gram)
        params[fore] = current
    shape = echoes.grid.shape
    return EstaticsFit(params[:, 0].reshape(shape), params[:, 1].reshape(shape),
                       params[:, 2].reshape(shape),
                       covariance.reshape(shape + (3, 3)),
                       background.reshape(shape))


def derive_r1_pd(fit, a_t1, a_pd, tr):
    """
    R1 and the amplitude A from the two ESTATICS intercepts

    Args:
        fit(EstaticsFit): the intercept maps (any object with u_t1, u_pd)
        a_t1(float): T1w flip angle
        a_pd(float): PDw flip angle
        tr(float): shared repetition time

    Raises:
        DegenerateFlipAngles: if a_t1 == a_pd

    Returns:
        maps(DerivedMaps): r1 and pd maps and a boolean flag map where the
                           log argument had to be clamped
    """
    if a_t1 == a_pd:
        raise DegenerateFlipAngles('flip angles of both weightings are equal')
    ratio = np.sin(a_t1) / np.sin(a_pd)
    u_t1 = np.asarray(fit.u_t1, dtype=float)
    u_pd = np.asarray(fit.u_pd, dtype=float)
    with np.errstate(divide='ignore', invalid='ignore'):
        argument = (u_t1 - u_pd * ratio) / \
            (u_t1 * np.cos(a_t1) - u_pd * ratio * np.cos(a_pd))
    flags = ~((argument >= LOG_CLAMP) & (argument <= 1 - LOG_CLAMP))
    clamped = np.clip(np.nan_to_num(argument, nan=LOG_CLAMP), LOG_CLAMP,
                      1 - LOG_CLAMP)
    r1 = -np.log(clamped) / tr
    e1 = np.exp(-r1 * tr)
    amplitude = (1 - np.cos(a_t1) * e1) / (np.sin(a_t1) * (1 - e1)) * u_t1
    if flags.any():
        LOGGER.info('%d voxels needed a clamped log argument',
                    int(flags.sum()))
    return DerivedMaps(r1, amplitude, flags)


class AWSConfig():
    """
    adaptive weights smoothing settings

    Args:
        hmax(float): largest bandwidth in voxels
        lam(float): adaptation parameter lambda, > 0
        patch_radius(int): 0 for pointwise, r for (2r + 1)^2 patches

    Raises:
        InvalidAWSConfig: if a value is out of range
    """

    def __init__(self, hmax=DEFAULT_HMAX, lam=DEFAULT_LAMBDA,
                 patch_radius=0):
        self.hmax = float(hmax)
        self.lam = float(lam)
        self.patch_radius = int(patch_radius)
        if self.hmax < 1:
            raise InvalidAWSConfig('hmax must be >= 1')
        if not self.lam > 0:
            raise InvalidAWSConfig('lambda must be > 0')
        if self.patch_radius < 0:
            raise InvalidAWSConfig('patch radius must be >= 0')

    def bandwidths(self):
        """
        the increasing schedule h_k = 1.25^(k/2), the last one equal to
        hmax
        """
        return bandwidth_schedule(self.hmax)


def bandwidth_schedule(hmax):
    """
    geometric bandwidths h_k = 1.25^(k/2), k = 1 .. k*, capped at hmax

    Args:
        hmax(float): final bandwidth

    Returns:
        bandwidths(list): increasing floats ending with hmax
    """
    steps = max(1, math.ceil(2 * math.log(hmax) / math.log(BANDWIDTH_GROWTH)))
    return [min(BANDWIDTH_GROWTH ** (k / 2), hmax) for k in range(1, steps + 1)]


def location_kernel(distance):
    """
    K_loc(x) = (1 - x^2)+
    """
    return np.maximum(1 - np.square(distance), 0)


def statistical_kernel(penalty):
    """
    K_st(x) = (1 - x)+
    """
    return np.maximum(1 - penalty, 0)


def neighbourhood(bandwidth):
    """
    integer offsets with nonzero location weight, i.e. closer than the
    bandwidth, and their weights
    """
    reach = int(math.ceil(bandwidth))
    offsets = []
    weights = []
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            weight = float(location_kernel(math.hypot(dy, dx) / bandwidth))
            if weight > 0:
                offsets.append((dy, dx))
                weights.append(weight)
    return offsets, weights


def _shift(arr, dy, dx, fill=0):
    """
    out[..., y, x] = arr[..., y + dy, x + dx], fill outside the grid
    """
    out = np.full_like(arr, fill)
    ny, nx = arr.shape[-2:]
    ys, ye = max(0, -dy), min(ny, ny - dy)
    xs, xe = max(0, -dx), min(nx, nx - dx)
    if ys < ye and xs < xe:
        out[..., ys:ye, xs:xe] = arr[..., ys + dy:ye + dy, xs + dx:xe + dx]
    return out


def _inverse_covariance(covariance):
    shape = covariance.shape
    flat = covariance.reshape(-1, shape[-2], shape[-1])
    singular = ~np.isfinite(flat).all(axis=(1, 2))
    ok = np.flatnonzero(~singular)
    conditions = np.full(flat.shape[0], np.inf)
    conditions[ok] = np.linalg.cond(flat[ok])
    singular |= ~(conditions < CONDITION_LIMIT)
    inverse = np.zeros_like(flat)
    good = np.flatnonzero(~singular)
    inverse[good] = np.linalg.inv(flat[good])
    return inverse.reshape(shape), singular.reshape(shape[:-2])


def _smooth_pass(theta0, previous, counts, inverse, bandwidth, lam,
                 patch_radius, mask):
    offsets, kernel = neighbourhood(bandwidth)
    numerator = np.zeros_like(theta0)
    denominator = np.zeros(theta0.shape[1:])
    weights = np.zeros((len(offsets),) + theta0.shape[1:])
    for number, ((dy, dx), loc) in enumerate(zip(offsets, kernel)):
        valid = _shift(mask, dy, dx, False) & mask
        if lam is None:
            penalty = np.zeros(theta0.shape[1:])
        else:
            diff = previous - _shift(previous, dy, dx)
            quad = np.einsum('iyx,yxij,jyx->yx', diff, inverse, diff)
            penalty = counts * quad / lam
            if patch_radius:
                penalty = scipy.ndimage.maximum_filter(
                    penalty, size=2 * patch_radius + 1, mode='nearest')
        weight = loc * statistical_kernel(penalty) * valid
        weights[number] = weight
        numerator += weight * _shift(theta0, dy, dx)
        denominator += weight
    return numerator, denominator, weights, offsets


def aws_smooth(theta0, covariance, cfg=None, mask=None):
    """
    propagation-separation smoothing of a vector valued map

    Note:
        w_ij = K_loc(|i - j| / h_k) K_st(s_ij) with
        s_ij = N_i (theta_i - theta_j)^T Sigma_i^-1 (theta_i - theta_j) / lam
        using the previous estimates, and the new estimate is the weighted
        mean of the original estimates. Voxels with a singular covariance
        get s_ij = 0 and are reported in singular

    Args:
        theta0(numpy.ndarray): (d, ny, nx) original estimates
        covariance(numpy.ndarray): (ny, nx, d, d) covariance per voxel
        cfg(AWSConfig): settings, defaults if None
        mask(numpy.ndarray): voxels taking part, all if None

    Returns:
        result(AWSResult): theta the smoothed map, counts N_i, weights of
                           the last pass per offset, offsets and singular
    """
    cfg = cfg or AWSConfig()
    theta0 = np.asarray(theta0, dtype=float)
    shape = theta0.shape[1:]
    mask = np.ones(shape, bool) if mask is None else \
        np.asarray(mask, dtype=bool)
    inverse, singular = _inverse_covariance(np.asarray(covariance, float))
    if (singular & mask).any():
        LOGGER.warning('%d voxels have a singular covariance, smoothed '
                       'without adaptation', int((singular & mask).sum()))
    theta = theta0.copy()
    counts = np.ones(shape)
    weights, offsets = None, None
    for bandwidth in cfg.bandwidths():
        numerator, denominator, weights, offsets = _smooth_pass(
            theta0, theta, counts, inverse, bandwidth, cfg.lam,
            cfg.patch_radius, mask)
        theta = np.where(mask, numerator / np.maximum(denominator, 1e-300),
                         theta0)
        counts = np.where(mask, denominator, 1.0)
        LOGGER.debug('aws bandwidth %.3f mean count %.3f', bandwidth,
                     float(counts[mask].mean()) if mask.any() else 0.0)
    return AWSResult(theta, counts, weights, offsets, singular)


def nonadaptive_smooth(theta0, bandwidth, mask=None):
    """
    plain location kernel smoothing with K_loc at one bandwidth

    Args:
        theta0(numpy.ndarray): (d, ny, nx) estimates
        bandwidth(float): kernel bandwidth in voxels
        mask(numpy.ndarray): voxels taking part, all if None

    Returns:
        theta(numpy.ndarray): the smoothed map
    """
    theta0 = np.asarray(theta0, dtype=float)
    shape = theta0.shape[1:]
    mask = np.ones(shape, bool) if mask is None else \
        np.asarray(mask, dtype=bool)
    numerator, denominator, _, _ = _smooth_pass(
        theta0, theta0, None, None, bandwidth, None, 0, mask)
    return np.where(mask, numerator / np.maximum(denominator, 1e-300), theta0)


def smooth_qmaps(fit, a_t1, a_pd, tr, cfg=None):
    """
    smooth (u_t1, u_pd, R2*) jointly and derive R1 and A from the result

    Args:
        fit(EstaticsFit): the ESTATICS estimates
        a_t1(float): T1w flip angle
        a_pd(float): PDw flip angle
        tr(float): repetition time
        cfg(AWSConfig): smoothing settings, defaults if None

    Returns:
        smoothed(EstaticsFit): smoothed estimates, same covariance
        derived(DerivedMaps): R1, A and clamp flags
    """
    result = aws_smooth(fit.theta(), fit.covariance, cfg, ~fit.background)
    smoothed = EstaticsFit(result.theta[0], result.theta[1], result.theta[2],
                           fit.covariance, fit.background)
    return smoothed, derive_r1_pd(smoothed, a_t1, a_pd, tr)
