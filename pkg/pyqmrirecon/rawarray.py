"""
reading and writing raw little endian arrays with a JSON sidecar header

Note:
    the array at 'maps.raw' is described by 'maps.raw.json' which holds
    {dtype, shape, order: 'row-major', complex, meta}
    complex arrays are stored as interleaved (re, im) pairs
    boolean masks are stored as packed bitmaps (dtype 'bitmap')
"""

import json
import os

import numpy as np

import pyqmrirecon.core as core


DTYPES = {'float64': '<f8', 'float32': '<f4', 'bitmap': 'u1'}


class RawFormatError(core.ConfigError):
    """
    raise if a raw array or its header is unreadable or inconsistent
    """


def header_path(rawpath):
    """
    path of the JSON header that goes with a raw array

    Args:
        rawpath(str): path to the raw binary file

    Returns:
        path(str): the sidecar path
    """
    return str(rawpath) + '.json'


def write_raw(rawpath, array, meta=None, single=False):
    """
    write an array and its JSON header

    Args:
        rawpath(str): where to write the binary data
        array(numpy.ndarray): real, complex or boolean array
        meta(dict): extra JSON serialisable header fields
        single(bool): store floats in single precision (exports only)
    """
    array = np.asarray(array)
    header = {'shape': list(array.shape), 'order': 'row-major',
              'complex': bool(np.iscomplexobj(array)), 'meta': meta or {}}
    if array.dtype == bool:
        header['dtype'] = 'bitmap'
        payload = np.packbits(array.ravel(order='C'))
    else:
        header['dtype'] = 'float32' if single else 'float64'
        values = np.ascontiguousarray(array)
        if header['complex']:
            values = np.stack([values.real, values.imag], axis=-1)
        payload = values.astype(DTYPES[header['dtype']]).ravel(order='C')
    with open(rawpath, 'wb') as rawfile:
        rawfile.write(payload.tobytes())
    with open(header_path(rawpath), 'w') as headerfile:
        json.dump(header, headerfile, indent=1, sort_keys=True)


def read_header(rawpath):
    """
    read the JSON header of a raw array

    Args:
        rawpath(str): path to the raw binary file

    Raises:
        RawFormatError: if the header is missing or malformed

    Returns:
        header(dict): the decoded header
    """
    try:
        with open(header_path(rawpath), 'r') as headerfile:
            header = json.load(headerfile)
    except (OSError, ValueError) as err:
        raise RawFormatError('cannot read header for {}'.format(rawpath)) \
            from err
    for key in ('dtype', 'shape', 'complex'):
        if key not in header:
            raise RawFormatError('header for {} has no {}'.format(
                rawpath, key))
    if header.get('order', 'row-major') != 'row-major':
        raise RawFormatError('only row-major arrays are supported')
    if header['dtype'] not in DTYPES:
        raise RawFormatError('unknown dtype {}'.format(header['dtype']))
    return header


def read_raw(rawpath):
    """
    read a raw array written by write_raw

    Args:
        rawpath(str): path to the raw binary file

    Raises:
        RawFormatError: if the payload size does not match the header

    Returns:
        array(numpy.ndarray): the array, float64/complex128/bool
        meta(dict): the extra header fields
    """
    header = read_header(rawpath)
    shape = tuple(header['shape'])
    count = int(np.prod(shape, dtype=np.int64))
    try:
        payload = np.fromfile(rawpath, dtype=DTYPES[header['dtype']])
    except OSError as err:
        raise RawFormatError('cannot read {}'.format(rawpath)) from err
    if header['dtype'] == 'bitmap':
        bits = np.unpackbits(payload)
        if bits.size < count:
            raise RawFormatError('{} is truncated'.format(rawpath))
        return bits[:count].astype(bool).reshape(shape), header['meta']
    expected = count * (2 if header['complex'] else 1)
    if payload.size != expected:
        raise RawFormatError('{} holds {} values, header says {}'.format(
            rawpath, payload.size, expected))
    values = payload.astype(np.float64)
    if header['complex']:
        pairs = values.reshape(shape + (2,))
        return pairs[..., 0] + 1j * pairs[..., 1], header['meta']
    return values.reshape(shape), header['meta']


def write_param_map(rawpath, qmap, meta=None):
    """
    write a ParamMap as one (3, ny, nx) raw array

    Args:
        rawpath(str): where to write
        qmap(core.ParamMap): the map
        meta(dict): extra header fields
    """
    meta = dict(meta or {})
    meta['kind'] = 'parammap'
    meta['channels'] = list(core.PARAMETERS)
    write_raw(rawpath, qmap.stack(), meta)


def read_param_map(rawpath):
    """
    read a ParamMap written by write_param_map

    Args:
        rawpath(str): the raw file

    Raises:
        RawFormatError: if the array is not a (3, ny, nx) stack

    Returns:
        qmap(core.ParamMap): the map
        meta(dict): header meta fields
    """
    stacked, meta = read_raw(rawpath)
    if stacked.ndim != 3 or stacked.shape[0] != 3 or \
            np.iscomplexobj(stacked):
        raise RawFormatError('{} is not a (3, ny, nx) parameter map'.format(
            rawpath))
    grid = core.Grid(stacked.shape[2], stacked.shape[1])
    return core.ParamMap.from_stack(grid, stacked), meta


def write_kspace(rawpath, kspace, meta=None):
    """
    write KSpaceData as a flat complex coefficient array plus a packed
    mask file next to it

    Args:
        rawpath(str): where to write the coefficients
        kspace(core.KSpaceData): the data
        meta(dict): extra header fields
    """
    maskpath = str(rawpath) + '.masks'
    write_raw(maskpath, kspace.masks, {'kind': 'masks'})
    meta = dict(meta or {})
    meta.update({'kind': 'kspace', 'masks': os.path.basename(maskpath),
                 'counts': [frame.size for frame in kspace.coeffs],
                 'grid': kspace.grid.to_dict()})
    flat = np.concatenate(kspace.coeffs) if kspace.coeffs else \
        np.zeros(0, complex)
    write_raw(rawpath, flat.astype(complex), meta)


def read_kspace(rawpath):
    """
    read KSpaceData written by write_kspace

    Args:
        rawpath(str): the coefficient file

    Returns:
        kspace(core.KSpaceData): the data
        meta(dict): header meta fields
    """
    flat, meta = read_raw(rawpath)
    if meta.get('kind') != 'kspace':
        raise RawFormatError('{} is not k-space data'.format(rawpath))
    maskpath = os.path.join(os.path.dirname(str(rawpath)), meta['masks'])
    masks, _ = read_raw(maskpath)
    grid = core.Grid(**meta['grid'])
    splits = np.cumsum(meta['counts'])[:-1]
    coeffs = np.split(np.asarray(flat, dtype=complex).ravel(), splits)
    return core.KSpaceData(grid, masks, coeffs), meta
