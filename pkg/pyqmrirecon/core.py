"""
shared domain types, the admissible set projection and deterministic
random number streams
"""

import collections

import numpy as np


RELATIVE_ERROR_FLOOR = 1e-12
PARAMETERS = ('rho', 't1', 't2')


class ConfigError(Exception):
    """
    raise when inputs or configuration are invalid
    """


class NumericalFailure(Exception):
    """
    raise when a numerical procedure fails (divergence, NaN, contract
    violation)
    """


class InvalidGrid(ConfigError):
    """
    raise if a grid has non positive dimensions
    """


class InvalidBox(ConfigError):
    """
    raise if an admissible box is malformed
    """


class InvalidParamMap(ConfigError):
    """
    raise if a parameter map has the wrong shape or non finite values
    """


class GridMismatch(ConfigError):
    """
    raise when two objects that should share a grid do not
    """


def frozen_array(values, dtype):
    """
    copy values into a new read only array

    Args:
        values(array like): the values to copy
        dtype(numpy.dtype): dtype of the new array

    Returns:
        arr(numpy.ndarray): read only copy
    """
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


class Grid():
    """
    a rectangular 2D voxel grid

    Note:
        arrays over a grid have shape (ny, nx) and voxels are linearised
        row major, voxel index i = y * nx + x

    Args:
        nx(int): number of voxels along x (columns)
        ny(int): number of voxels along y (rows)

    Raises:
        InvalidGrid: if nx or ny is less than 1
    """

    def __init__(self, nx, ny):
        if int(nx) < 1 or int(ny) < 1:
            raise InvalidGrid('grid dimensions must be >= 1, got {}x{}'.format(
                nx, ny))
        self.nx = int(nx)
        self.ny = int(ny)

    @property
    def shape(self):
        """
        array shape of one image over this grid
        """
        return (self.ny, self.nx)

    @property
    def size(self):
        """
        total number of voxels
        """
        return self.nx * self.ny

    def index(self, x, y):
        """
        linear voxel index of the voxel at column x and row y

        Args:
            x(int or numpy.ndarray): column
            y(int or numpy.ndarray): row

        Returns:
            index(int or numpy.ndarray): row major linear index
        """
        return np.ravel_multi_index((y, x), self.shape)

    def coords(self, index):
        """
        column and row of a linear voxel index

        Args:
            index(int or numpy.ndarray): row major linear index

        Returns:
            x(int or numpy.ndarray): column
            y(int or numpy.ndarray): row
        """
        y, x = np.unravel_index(index, self.shape)
        return x, y

    def check(self, array, name='array'):
        """
        check the trailing dimensions of an array match this grid

        Args:
            array(numpy.ndarray): array to check
            name(str): used in the error message

        Raises:
            GridMismatch: if the trailing two dimensions are not (ny, nx)
        """
        if tuple(np.shape(array)[-2:]) != self.shape:
            raise GridMismatch('{} has shape {} but the grid is {}'.format(
                name, np.shape(array), self.shape))

    def to_dict(self):
        """
        JSON friendly representation
        """
        return {'nx': self.nx, 'ny': self.ny}

    def __eq__(self, other):
        return isinstance(other, Grid) and \
            (self.nx, self.ny) == (other.nx, other.ny)

    def __hash__(self):
        return hash((self.nx, self.ny))

    def __repr__(self):
        return 'Grid(nx={}, ny={})'.format(self.nx, self.ny)


class AdmissibleBox():
    """
    the admissible set of tissue parameters, a box in (rho, t1, t2)

    Args:
        rho_min(float): lower proton density bound, must be >= 0
        rho_max(float): upper proton density bound
        t1_min(float): lower T1 bound in seconds
        t1_max(float): upper T1 bound in seconds
        t2_min(float): lower T2 bound in seconds, must be > 0
        t2_max(float): upper T2 bound in seconds

    Raises:
        InvalidBox: if any interval is empty or the bounds are not physical
    """

    def __init__(self, rho_min, rho_max, t1_min, t1_max, t2_min, t2_max):
        self.rho_min, self.rho_max = float(rho_min), float(rho_max)
        self.t1_min, self.t1_max = float(t1_min), float(t1_max)
        self.t2_min, self.t2_max = float(t2_min), float(t2_max)
        if not (self.lower < self.upper).all():
            raise InvalidBox('box minimum must be below maximum: {} {}'.format(
                self.lower, self.upper))
        if self.rho_min < 0 or self.t2_min <= 0 or self.t1_min <= 0:
            raise InvalidBox('rho_min must be >= 0 and relaxation minima > 0')

    @property
    def lower(self):
        """
        lower bounds as an array ordered (rho, t1, t2)
        """
        return np.array([self.rho_min, self.t1_min, self.t2_min])

    @property
    def upper(self):
        """
        upper bounds as an array ordered (rho, t1, t2)
        """
        return np.array([self.rho_max, self.t1_max, self.t2_max])

    @property
    def width(self):
        """
        interval widths ordered (rho, t1, t2)
        """
        return self.upper - self.lower

    @property
    def midpoint(self):
        """
        box centre ordered (rho, t1, t2)
        """
        return 0.5 * (self.lower + self.upper)

    def clip(self, stacked):
        """
        clamp a stacked parameter array into the box

        Args:
            stacked(numpy.ndarray): array with leading dimension 3
                                    ordered (rho, t1, t2)

        Returns:
            clipped(numpy.ndarray): new array inside the box
        """
        shape = (3,) + (1,) * (np.ndim(stacked) - 1)
        return np.clip(stacked, self.lower.reshape(shape),
                       self.upper.reshape(shape))

    def to_dict(self):
        """
        JSON friendly representation
        """
        return {'rho_min': self.rho_min, 'rho_max': self.rho_max,
                't1_min': self.t1_min, 't1_max': self.t1_max,
                't2_min': self.t2_min, 't2_max': self.t2_max}

    @classmethod
    def from_dict(cls, boxdict):
        """
        build a box from a dictionary made by to_dict

        Args:
            boxdict(dict): the six bounds

        Returns:
            box(AdmissibleBox): the box
        """
        try:
            return cls(**boxdict)
        except TypeError as err:
            raise InvalidBox('bad box description {}'.format(boxdict)) \
                from err


class ParamMap():
    """
    per voxel tissue parameters q = (rho, t1, t2)

    Args:
        grid(Grid): the voxel grid
        rho(array like): proton density, shape (ny, nx)
        t1(array like): T1 in seconds, shape (ny, nx)
        t2(array like): T2 in seconds, shape (ny, nx)

    Raises:
        InvalidParamMap: if values are not finite
        GridMismatch: if a map does not match the grid
    """

    def __init__(self, grid, rho, t1, t2):
        self.grid = grid
        self.rho = frozen_array(rho, float)
        self.t1 = frozen_array(t1, float)
        self.t2 = frozen_array(t2, float)
        for name in PARAMETERS:
            arr = getattr(self, name)
            if arr.shape != grid.shape:
                raise GridMismatch('{} map has shape {} but grid is {}'.format(
                    name, arr.shape, grid.shape))
            if not np.isfinite(arr).all():
                raise InvalidParamMap('{} map has non finite values'.format(
                    name))

    def stack(self):
        """
        the three maps as one array of shape (3, ny, nx)
        """
        return np.stack([self.rho, self.t1, self.t2])

    @classmethod
    def from_stack(cls, grid, stacked):
        """
        build a map from an array of shape (3, ny, nx)

        Args:
            grid(Grid): the voxel grid
            stacked(numpy.ndarray): rho, t1 and t2 stacked

        Returns:
            qmap(ParamMap): the new map
        """
        return cls(grid, stacked[0], stacked[1], stacked[2])

    def physical(self):
        """
        mask of voxels that obey T2 <= T1 or carry no tissue

        Returns:
            mask(numpy.ndarray): boolean array over the grid
        """
        return (self.rho <= 0) | (self.t2 <= self.t1)


class ImageSeries():
    """
    L complex image frames over a grid

    Args:
        grid(Grid): the voxel grid
        data(array like): complex array of shape (L, ny, nx)
    """

    def __init__(self, grid, data):
        self.grid = grid
        self.data = frozen_array(data, complex)
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise GridMismatch('image series must have shape (L, ny, nx)')
        grid.check(self.data, 'image series')
        if not np.isfinite(self.data).all():
            raise InvalidParamMap('image series has non finite values')

    @property
    def frames(self):
        """
        number of frames L
        """
        return self.data.shape[0]

    def voxel_series(self):
        """
        the series as a (number of voxels, L) array in row major voxel order
        """
        return self.data.reshape(self.frames, -1).T


class KSpaceData():
    """
    L frames of subsampled Fourier coefficients and their sampling masks

    Note:
        coefficients of a frame are stored in the row major order of the
        sampled locations of its mask

    Args:
        grid(Grid): the voxel grid
        masks(array like): boolean array of shape (L, ny, nx)
        coeffs(list): one 1D complex array per frame

    Raises:
        GridMismatch: if the masks and coefficients are inconsistent
    """

    def __init__(self, grid, masks, coeffs):
        self.grid = grid
        self.masks = frozen_array(masks, bool)
        if self.masks.ndim != 3:
            raise GridMismatch('masks must have shape (L, ny, nx)')
        grid.check(self.masks, 'masks')
        if len(coeffs) != self.masks.shape[0]:
            raise GridMismatch('{} coefficient frames for {} masks'.format(
                len(coeffs), self.masks.shape[0]))
        self.coeffs = tuple(frozen_array(frame, complex) for frame in coeffs)
        for mask, frame in zip(self.masks, self.coeffs):
            if frame.shape != (int(mask.sum()),):
                raise GridMismatch(
                    'frame has {} coefficients but mask samples {}'.format(
                        frame.size, int(mask.sum())))

    @property
    def frames(self):
        """
        number of frames L
        """
        return self.masks.shape[0]

    @property
    def sample_count(self):
        """
        total number of complex coefficients over all frames
        """
        return int(sum(frame.size for frame in self.coeffs))

    def to_full(self):
        """
        embed the coefficients into full k-space, zero where not sampled

        Returns:
            full(numpy.ndarray): complex array of shape (L, ny, nx)
        """
        full = np.zeros(self.masks.shape, dtype=complex)
        for frame in range(self.frames):
            full[frame][self.masks[frame]] = self.coeffs[frame]
        return full

    @classmethod
    def from_full(cls, grid, full, masks):
        """
        pick the sampled locations out of full k-space frames

        Args:
            grid(Grid): the voxel grid
            full(numpy.ndarray): complex array of shape (L, ny, nx)
            masks(numpy.ndarray): boolean array of shape (L, ny, nx)

        Returns:
            kspace(KSpaceData): the sampled data
        """
        masks = np.asarray(masks, dtype=bool)
        coeffs = [full[frame][masks[frame]] for frame in range(masks.shape[0])]
        return cls(grid, masks, coeffs)

    def norm(self):
        """
        Euclidean norm of all stored coefficients
        """
        return float(np.sqrt(sum(np.vdot(frame, frame).real
                                 for frame in self.coeffs)))


class Rng():
    """
    counter based random streams, identical draws for identical
    (seed, stream) regardless of call order or thread count

    Args:
        seed(int): 64 bit seed
        stream(int): stream id, e.g. the frame index
    """

    MASK64 = (1 << 64) - 1

    def __init__(self, seed, stream=0):
        self.seed = int(seed) & self.MASK64
        self.stream = int(stream) & self.MASK64

    def generator(self, stream=None):
        """
        a numpy generator for one stream

        Args:
            stream(int): stream id, defaults to this object's stream

        Returns:
            generator(numpy.random.Generator): Philox generator keyed by
                                               (seed, stream)
        """
        if stream is None:
            stream = self.stream
        key = np.array([self.seed, int(stream) & self.MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def spawn(self, stream):
        """
        a new Rng with the same seed on another stream
        """
        return Rng(self.seed, stream)


def project_box(qmap, box):
    """
    projection onto the admissible set, every component clamped into
    its interval

    Args:
        qmap(ParamMap): the parameters to project
        box(AdmissibleBox): the admissible set

    Returns:
        projected(ParamMap): the projected parameters
    """
    return ParamMap.from_stack(qmap.grid, box.clip(qmap.stack()))


ErrorMaps = collections.namedtuple('ErrorMaps', ['maps', 'means'])


def rel_error_map(q_hat, q_true, mask):
    """
    per voxel relative errors |q_hat - q| / max(|q|, eps)

    Args:
        q_hat(ParamMap): the estimate
        q_true(ParamMap): the ground truth
        mask(numpy.ndarray): boolean foreground mask over the grid

    Raises:
        GridMismatch: if the maps do not share a grid

    Returns:
        errors(ErrorMaps): maps(dict) of per voxel error arrays and
                           means(dict) of foreground means keyed by
                           parameter name
    """
    if q_hat.grid != q_true.grid:
        raise GridMismatch('{} vs {}'.format(q_hat.grid, q_true.grid))
    mask = np.asarray(mask, dtype=bool)
    q_true.grid.check(mask, 'foreground mask')
    maps = {}
    means = {}
    for name in PARAMETERS:
        truth = getattr(q_true, name)
        err = np.abs(getattr(q_hat, name) - truth) / \
            np.maximum(np.abs(truth), RELATIVE_ERROR_FLOOR)
        maps[name] = err
        means[name] = float(err[mask].mean()) if mask.any() else 0.0
    return ErrorMaps(maps, means)
