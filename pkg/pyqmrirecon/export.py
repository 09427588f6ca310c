"""
code for exporting reconstructions, traces and metrics to different formats
"""

import csv
import json

import numpy as np

import pyqmrirecon.core as core


PGM_LEVELS = 255
MIDGRAY = 128
CONFIG_HASH_LABEL = '# config_hash'
SUMMARY_FLOAT = '{:.6g}'
SUMMARY_INDENT = '   '


class InvalidExport(core.ConfigError):
    """
    raise if values cannot be exported
    """


def _summary_value(value):
    if isinstance(value, float):
        return SUMMARY_FLOAT.format(value)
    if isinstance(value, (list, tuple)):
        return ', '.join(_summary_value(item) for item in value)
    if value is None:
        return '-'
    return str(value)


def summary_lines(summary, depth=0):
    """
    one 'key: value' line per entry, nested dictionaries indented below
    their key

    Args:
        summary(dict): metrics, stats or settings
        depth(int): indent level of the top entries

    Yields:
        line(str): the next line
    """
    pad = SUMMARY_INDENT * depth
    for key in sorted(summary, key=str):
        value = summary[key]
        if isinstance(value, dict):
            yield '{}{}:'.format(pad, key)
            yield from summary_lines(value, depth + 1)
        else:
            yield '{}{}: {}'.format(pad, key, _summary_value(value))


def create_summary_text(summary):
    """
    format a metrics or stats dictionary so it can be printed to screen or
    written to a plain text file

    Args:
        summary(dict): the data to format

    Returns:
        textsummary(str): one line per entry, floats to 6 significant digits
    """
    return '\n'.join(summary_lines(summary))


def write_csv_file(rows, outpath, config_hash=None, dialect='excel'):
    """
    write rows of metrics or trace values to a csv file

    Note:
        with a config hash the first row is ['# config_hash', hash]. Floats
        are written with repr precision, so the same values always give
        the same bytes

    Args:
        rows(list): list of rows, each row is a list
        outpath(str): full path to write the csv file to
        config_hash(str): hash of the run configuration
        dialect(str): 'excel' for CSV, 'excel-tab' for TSV
    """
    with open(outpath, 'w', newline='') as outfile:
        csvwriter = csv.writer(outfile, dialect=dialect)
        if config_hash is not None:
            csvwriter.writerow([CONFIG_HASH_LABEL, config_hash])
        csvwriter.writerows(rows)


def records_to_rows(records, headers=None):
    """
    turn a list of dictionaries (e.g. a solver trace) into csv rows

    Args:
        records(list): dictionaries sharing the same keys
        headers(list): column order, defaults to the keys of the first record

    Returns:
        rows(list): header row followed by one row per record
    """
    if not records:
        return [list(headers or [])]
    if headers is None:
        headers = list(records[0].keys())
    rows = [list(headers)]
    for record in records:
        rows.append([record.get(header, '') for header in headers])
    return rows


def write_trace(records, outpath, config_hash=None):
    """
    write a solver trace, one row per iteration record

    Args:
        records(list): trace dictionaries, e.g. LMResult.trace
        outpath(str): where to write
        config_hash(str): hash of the run configuration
    """
    write_csv_file(records_to_rows(records), outpath, config_hash)


def write_json_file(data, outpath):
    """
    write settings or metrics as sorted, indented JSON

    Args:
        data(dict): JSON serialisable values
        outpath(str): path to write to
    """
    with open(outpath, 'w') as outfile:
        json.dump(data, outfile, indent=1, sort_keys=True)
        outfile.write('\n')


def write_summary_file(summary, outpath):
    """
    write the text summary of a metrics or stats dictionary

    Args:
        summary(dict): the data to summarise
        outpath(str): path to write to
    """
    with open(outpath, 'w') as outfile:
        outfile.write(create_summary_text(summary) + '\n')


def quantize(image, window=None):
    """
    linear windowing to 8 bit grey levels

    Note:
        pixel = floor((v - lo) / (hi - lo) * 255 + 0.5) clipped to [0, 255],
        so halves round up. A degenerate window (lo == hi) maps everything
        to mid grey 128

    Args:
        image(numpy.ndarray): real 2D values, all finite
        window(tuple): (lo, hi), defaults to the image min and max

    Raises:
        InvalidExport: if the image has non finite values or is not 2D

    Returns:
        pixels(numpy.ndarray): uint8 array with the image shape
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise InvalidExport('can only export 2D maps, got {}'.format(
            image.shape))
    if not np.all(np.isfinite(image)):
        raise InvalidExport('cannot export non finite values')
    if window is None:
        window = (float(image.min()), float(image.max()))
    lo, hi = float(window[0]), float(window[1])
    if hi == lo:
        return np.full(image.shape, MIDGRAY, dtype=np.uint8)
    scaled = np.floor((image - lo) / (hi - lo) * PGM_LEVELS + 0.5)
    return np.clip(scaled, 0, PGM_LEVELS).astype(np.uint8)


def export_pgm(image, outpath, window=None, comment=None):
    """
    write a map as a binary (P5) portable graymap

    Args:
        image(numpy.ndarray): real (ny, nx) values
        outpath(str): where to write
        window(tuple): (lo, hi) display window
        comment(str): single line stored as a '#' comment in the header,
                      used for the config hash
    """
    pixels = quantize(image, window)
    ny, nx = pixels.shape
    header = 'P5\n'
    if comment:
        header += '# {}\n'.format(' '.join(str(comment).splitlines()))
    header += '{} {}\n{}\n'.format(nx, ny, PGM_LEVELS)
    with open(outpath, 'wb') as pgmfile:
        pgmfile.write(header.encode('ascii'))
        pgmfile.write(pixels.tobytes(order='C'))


def read_pgm(pgmpath):
    """
    read back a P5 file written by export_pgm

    Returns:
        pixels(numpy.ndarray): uint8 (ny, nx) array
        comment(str): the header comment or None
    """
    with open(pgmpath, 'rb') as pgmfile:
        data = pgmfile.read()
    fields = []
    comment = None
    pos = 0
    while len(fields) < 4:
        end = data.index(b'\n', pos)
        line = data[pos:end].decode('ascii')
        pos = end + 1
        if line.startswith('#'):
            comment = line[1:].strip()
            continue
        fields.extend(line.split())
    if fields[0] != 'P5':
        raise InvalidExport('{} is not a binary graymap'.format(pgmpath))
    nx, ny = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(data[pos:pos + nx * ny], dtype=np.uint8)
    return pixels.reshape(ny, nx), comment


def export_param_map(qmap, outprefix, windows=None, comment=None):
    """
    one PGM preview per parameter channel

    Args:
        qmap(core.ParamMap): the map
        outprefix(str): files are written to outprefix + '_<channel>.pgm'
        windows(dict): optional display window per channel name
        comment(str): header comment

    Returns:
        paths(list): the written files
    """
    windows = windows or {}
    paths = []
    for name in core.PARAMETERS:
        outpath = '{}_{}.pgm'.format(outprefix, name)
        export_pgm(getattr(qmap, name), outpath, windows.get(name), comment)
        paths.append(outpath)
    return paths
