"""
piecewise constant ellipse phantoms
"""

import collections

import numpy as np

import pyqmrirecon.core as core
import pyqmrirecon.rawarray as rawarray


DEFAULT_BOX = {'rho_min': 0.0, 'rho_max': 2.0, 't1_min': 0.05,
               't1_max': 5.0, 't2_min': 0.005, 't2_max': 2.5}


class InvalidPhantom(core.ConfigError):
    """
    raise if a phantom description is malformed
    """


Phantom = collections.namedtuple('Phantom', ['qmap', 'labels', 'names'])


def default_phantom_spec(nx=64, ny=64):
    """
    the desk phantom: CSF, gray and white matter rings and two lesions

    Note:
        ellipse centres and radii are in [-1, 1] grid coordinates, angles
        in degrees. Tissues are painted in order, later ellipses win

    Args:
        nx(int): grid width
        ny(int): grid height

    Returns:
        spec(dict): the phantom description
    """
    return {
        'grid': {'nx': nx, 'ny': ny},
        'tissues': [
            {'name': 'csf', 'rho': 1.0, 't1': 3.5, 't2': 1.0,
             'ellipses': [{'cx': 0.0, 'cy': 0.0, 'rx': 0.9, 'ry': 0.95}]},
            {'name': 'gray', 'rho': 0.8, 't1': 1.3, 't2': 0.08,
             'ellipses': [{'cx': 0.0, 'cy': 0.0, 'rx': 0.8, 'ry': 0.86}]},
            {'name': 'white', 'rho': 0.65, 't1': 0.8, 't2': 0.07,
             'ellipses': [{'cx': 0.0, 'cy': 0.0, 'rx': 0.6, 'ry': 0.66},
                          ]},
            {'name': 'csf', 'rho': 1.0, 't1': 3.5, 't2': 1.0,
             'ellipses': [{'cx': -0.12, 'cy': 0.0, 'rx': 0.07, 'ry': 0.25,
                           'angle': 10.0},
                          {'cx': 0.12, 'cy': 0.0, 'rx': 0.07, 'ry': 0.25,
                           'angle': -10.0}]},
            {'name': 'lesion', 'rho': 0.9, 't1': 1.8, 't2': 0.15,
             'ellipses': [{'cx': -0.35, 'cy': 0.3, 'rx': 0.12, 'ry': 0.08,
                           'angle': 30.0},
                          {'cx': 0.35, 'cy': -0.3, 'rx': 0.1, 'ry': 0.14,
                           'angle': -20.0}]}]}


def grid_coordinates(grid):
    """
    voxel centres mapped to [-1, 1]

    Returns:
        xs(numpy.ndarray): x coordinate per voxel, shape (ny, nx)
        ys(numpy.ndarray): y coordinate per voxel, shape (ny, nx)
    """
    xs = (np.arange(grid.nx) + 0.5) / grid.nx * 2 - 1
    ys = (np.arange(grid.ny) + 0.5) / grid.ny * 2 - 1
    return np.meshgrid(xs, ys)


def inside_ellipse(xs, ys, ellipse):
    """
    membership of points in a rotated ellipse, boundary included

    Args:
        xs(numpy.ndarray): x coordinates
        ys(numpy.ndarray): y coordinates
        ellipse(dict): cx, cy, rx, ry and optional angle in degrees

    Returns:
        inside(numpy.ndarray): boolean mask
    """
    try:
        cx, cy = float(ellipse['cx']), float(ellipse['cy'])
        rx, ry = float(ellipse['rx']), float(ellipse['ry'])
    except (KeyError, TypeError, ValueError) as err:
        raise InvalidPhantom('bad ellipse {}'.format(ellipse)) from err
    if rx <= 0 or ry <= 0:
        raise InvalidPhantom('ellipse radii must be positive')
    angle = np.deg2rad(float(ellipse.get('angle', 0.0)))
    dx, dy = xs - cx, ys - cy
    along = np.cos(angle) * dx + np.sin(angle) * dy
    across = -np.sin(angle) * dx + np.cos(angle) * dy
    return (along / rx) ** 2 + (across / ry) ** 2 <= 1


def make_phantom(spec):
    """
    paint tissues onto a background of zeros

    Note:
        label 0 is background with rho = 0 and T1, T2 set to the first
        tissue values (or 1 s) so the maps stay inside any sensible box.
        Tissue k gets label k + 1, later ellipses override earlier ones

    Args:
        spec(dict): grid and list of tissues with rho, t1, t2 and ellipses

    Raises:
        InvalidPhantom: if the description is malformed

    Returns:
        phantom(Phantom): qmap, labels and the tissue names by label
    """
    try:
        grid = core.Grid(**spec.get('grid', {'nx': 64, 'ny': 64}))
        tissues = list(spec.get('tissues', []))
    except (AttributeError, TypeError) as err:
        raise InvalidPhantom('bad phantom description') from err
    xs, ys = grid_coordinates(grid)
    labels = np.zeros(grid.shape, dtype=int)
    values = [(0.0, 1.0, 1.0)]
    names = ['background']
    for number, tissue in enumerate(tissues):
        try:
            values.append((float(tissue['rho']), float(tissue['t1']),
                           float(tissue['t2'])))
            names.append(str(tissue.get('name', 'tissue{}'.format(number))))
            for ellipse in tissue.get('ellipses', []):
                labels[inside_ellipse(xs, ys, ellipse)] = number + 1
        except (KeyError, TypeError, ValueError) as err:
            raise InvalidPhantom('bad tissue {}'.format(tissue)) from err
    if len(values) > 1:
        values[0] = (0.0, values[1][1], values[1][2])
    table = np.array(values)
    stacked = np.moveaxis(table[labels], -1, 0)
    return Phantom(core.ParamMap.from_stack(grid, stacked), labels, names)


def foreground(phantom):
    """
    voxels that carry tissue
    """
    return phantom.labels > 0


def read_phantom_file(rawpath):
    """
    use externally prepared (rho, T1, T2) maps as the phantom

    Note:
        labels are 1 wherever rho > 0

    Args:
        rawpath(str): raw parameter map written by rawarray.write_param_map

    Returns:
        phantom(Phantom): the phantom
    """
    qmap, _ = rawarray.read_param_map(rawpath)
    labels = (qmap.rho > 0).astype(int)
    return Phantom(qmap, labels, ['background', 'tissue'])
