"""
the measurement operator A = P F: per frame Cartesian subsampling of the
unitary 2D Fourier transform, its adjoint (zero filling), sampling masks
and measurement noise

Note:
    k-space is kept unshifted, row 0 is the DC row
"""

import math

import numpy as np
import scipy.fft

import pyqmrirecon.core as core


HIGH_FREQUENCY_RADIUS = 0.35
MAD_TO_SIGMA = 0.6744897501960817


class InvalidSampling(core.ConfigError):
    """
    raise if an undersampling factor or mask is not valid
    """


class InvalidNoise(core.ConfigError):
    """
    raise if a noise level is negative
    """


def fft2_unitary(image):
    """
    unitary 2D FFT over the last two axes

    Args:
        image(numpy.ndarray): array of shape (..., ny, nx)

    Returns:
        kspace(numpy.ndarray): complex array, same shape
    """
    return scipy.fft.fft2(image, axes=(-2, -1), norm='ortho')


def ifft2_unitary(kspace):
    """
    inverse of fft2_unitary

    Args:
        kspace(numpy.ndarray): array of shape (..., ny, nx)

    Returns:
        image(numpy.ndarray): complex array, same shape
    """
    return scipy.fft.ifft2(kspace, axes=(-2, -1), norm='ortho')


class SamplingPattern():
    """
    per frame Cartesian sampling masks

    Args:
        masks(array like): boolean array of shape (L, ny, nx)
        factor(float): undersampling factor the masks were made with

    Attributes:
        grid(core.Grid): the grid the masks live on
    """

    def __init__(self, masks, factor=1):
        self.masks = core.frozen_array(masks, bool)
        if self.masks.ndim != 3:
            raise InvalidSampling('masks must have shape (L, ny, nx)')
        self.grid = core.Grid(self.masks.shape[2], self.masks.shape[1])
        self.factor = factor

    @property
    def frames(self):
        """
        number of frames L
        """
        return self.masks.shape[0]

    def counts(self):
        """
        number of sampled locations per frame
        """
        return self.masks.reshape(self.frames, -1).sum(axis=1)


def make_cartesian_masks(grid, factor, frames, seed, complementary=True):
    """
    keep ceil(ny / factor) full rows per frame, the DC row always and the
    rest drawn without replacement

    Args:
        grid(core.Grid): the voxel grid
        factor(float): undersampling factor, 1 <= factor <= ny
        frames(int): number of frames L
        seed(int): seed of the row streams
        complementary(bool): draw different rows for every frame, otherwise
                             every frame uses the rows of frame 0

    Raises:
        InvalidSampling: if the factor is out of range

    Returns:
        pattern(SamplingPattern): the masks
    """
    if not 1 <= factor <= grid.ny:
        raise InvalidSampling('factor {} not in [1, {}]'.format(
            factor, grid.ny))
    if frames < 1:
        raise InvalidSampling('need at least one frame')
    rows_kept = math.ceil(grid.ny / factor)
    rng = core.Rng(seed)
    masks = np.zeros((frames,) + grid.shape, dtype=bool)
    for frame in range(frames):
        stream = frame if complementary else 0
        extra = rng.generator(stream).choice(
            np.arange(1, grid.ny), size=rows_kept - 1, replace=False)
        masks[frame, 0, :] = True
        masks[frame, extra, :] = True
    return SamplingPattern(masks, factor)


def full_sampling(grid, frames):
    """
    every location sampled in every frame
    """
    return SamplingPattern(np.ones((frames,) + grid.shape, dtype=bool), 1)


class MaskedFourier():
    """
    A = P F on full size arrays, with zeros at the unsampled locations

    Note:
        masks broadcast against the leading axes of the images, a single
        (ny, nx) mask gives the operator of one frame

    Args:
        masks(numpy.ndarray): boolean array of shape (..., ny, nx)
    """

    def __init__(self, masks):
        self.masks = np.asarray(masks, dtype=bool)

    @property
    def strongly_convex(self):
        """
        True if A^H A = I, i.e. every location is sampled
        """
        return bool(self.masks.all())

    def forward(self, images):
        """
        A u, zero where not sampled
        """
        return self.masks * fft2_unitary(images)

    def adjoint(self, kspace):
        """
        A^H y, equal to the zero filled reconstruction
        """
        return ifft2_unitary(self.masks * kspace)

    def normal(self, images):
        """
        A^H A u
        """
        return self.adjoint(fft2_unitary(images))

    def data_prox(self, images, kspace, tau):
        """
        proximal map of tau / 2 ||A u - y||^2, diagonal in k-space

        Args:
            images(numpy.ndarray): the point v
            kspace(numpy.ndarray): full size data y, zero off the masks
            tau(float): step size

        Returns:
            prox(numpy.ndarray): argmin_u ||u - v||^2 / 2 + tau/2 ||Au - y||^2
        """
        coeffs = (fft2_unitary(images) + tau * self.masks * kspace) / \
            (1 + tau * self.masks)
        return ifft2_unitary(coeffs)


class Identity():
    """
    the identity as a forward operator (denoising)
    """

    strongly_convex = True

    def forward(self, images):
        """
        u
        """
        return np.asarray(images)

    def adjoint(self, data):
        """
        y
        """
        return np.asarray(data)

    def normal(self, images):
        """
        u
        """
        return np.asarray(images)

    def data_prox(self, images, data, tau):
        """
        proximal map of tau / 2 ||u - y||^2
        """
        return (images + tau * data) / (1 + tau)


def apply_forward(series, pattern):
    """
    subsampled unitary FFT of every frame

    Args:
        series(core.ImageSeries): L image frames
        pattern(SamplingPattern): L masks

    Raises:
        core.GridMismatch: if frames or grids do not match

    Returns:
        kspace(core.KSpaceData): the sampled coefficients
    """
    if series.frames != pattern.frames or series.grid != pattern.grid:
        raise core.GridMismatch('{} frames on {} vs {} masks on {}'.format(
            series.frames, series.grid, pattern.frames, pattern.grid))
    full = fft2_unitary(series.data)
    return core.KSpaceData.from_full(series.grid, full, pattern.masks)


def apply_adjoint(kspace):
    """
    embed the coefficients into k-space and invert the FFT, A^H = A^+

    Args:
        kspace(core.KSpaceData): sampled coefficients

    Returns:
        series(core.ImageSeries): L image frames
    """
    return core.ImageSeries(kspace.grid, ifft2_unitary(kspace.to_full()))


def zero_fill(kspace):
    """
    the zero filling reconstruction, identical to apply_adjoint
    """
    return apply_adjoint(kspace)


def add_noise(kspace, sigma, rng):
    """
    add complex Gaussian noise at the sampled locations

    Note:
        each frame draws a full grid of noise from its own stream so the
        value at a location only depends on (seed, frame, location)

    Args:
        kspace(core.KSpaceData): the clean data
        sigma(float): standard deviation per real component
        rng(core.Rng): random streams, stream id = frame

    Raises:
        InvalidNoise: if sigma < 0

    Returns:
        noisy(core.KSpaceData): the noisy data
    """
    if sigma < 0:
        raise InvalidNoise('sigma must be >= 0, got {}'.format(sigma))
    if sigma == 0:
        return kspace
    coeffs = []
    for frame in range(kspace.frames):
        draws = rng.generator(frame).standard_normal((2,) + kspace.grid.shape)
        noise = sigma * (draws[0] + 1j * draws[1])
        coeffs.append(kspace.coeffs[frame] + noise[kspace.masks[frame]])
    return core.KSpaceData(kspace.grid, kspace.masks, coeffs)


def estimate_sigma(kspace):
    """
    noise level from the median absolute deviation of the real and
    imaginary parts of the highest frequency samples

    Args:
        kspace(core.KSpaceData): the data

    Returns:
        sigma(float): estimated standard deviation per real component
    """
    fy = np.fft.fftfreq(kspace.grid.ny)[:, None]
    fx = np.fft.fftfreq(kspace.grid.nx)[None, :]
    high = np.hypot(fx, fy) >= HIGH_FREQUENCY_RADIUS
    full = kspace.to_full()
    picks = kspace.masks & high
    if not picks.any():
        picks = kspace.masks
    values = full[picks]
    if values.size == 0:
        return 0.0
    parts = np.concatenate([values.real, values.imag])
    return float(np.median(np.abs(parts - np.median(parts))) / MAD_TO_SIGMA)


def operator_norm(operator, shape, iters=50, seed=0):
    """
    power iteration estimate of ||A|| from A^H A

    Args:
        operator(object): something with a normal(images) method
        shape(tuple): shape of the images
        iters(int): number of power iterations
        seed(int): seed of the random start

    Returns:
        norm(float): the estimated operator norm
    """
    generator = core.Rng(seed).generator()
    vec = generator.standard_normal(shape) + \
        1j * generator.standard_normal(shape)
    vec /= np.linalg.norm(vec)
    eigen = 0.0
    for _ in range(iters):
        image = operator.normal(vec)
        eigen = np.linalg.norm(image)
        if eigen == 0:
            return 0.0
        vec = image / eigen
    return float(np.sqrt(eigen))
