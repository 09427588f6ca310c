"""
experiment configuration and orchestration: phantom, simulated data,
reconstructions, metrics and artifacts
"""

import collections
import copy
import hashlib
import json
import logging
import os
import time

import numpy as np

import pyqmrirecon.allmethods as allmethods
import pyqmrirecon.bloch as bloch
import pyqmrirecon.core as core
import pyqmrirecon.export as export
import pyqmrirecon.forward as forward
import pyqmrirecon.integrated as integrated
import pyqmrirecon.mrf as mrf
import pyqmrirecon.phantom as phantom
import pyqmrirecon.rawarray as rawarray


LOGGER = logging.getLogger(__name__)

NOISE_STREAM_OFFSET = 1 << 32
CONFIG_FILENAME = 'config.json'
METRICS_FILENAME = 'metrics.csv'
METRICS_HEADERS = ['method', 'rho_rel_err', 't1_rel_err', 't2_rel_err',
                   'residual']
FLOAT_FORMAT = '{:.12e}'

DEFAULTS = {
    'seed': bloch.DEFAULT_SEED,
    'grid': {'nx': 64, 'ny': 64},
    'phantom': None,
    'phantom_file': None,
    'sequence': {'frames': bloch.DEFAULT_FRAMES, 'tr': bloch.DEFAULT_TR,
                 'file': None},
    'sampling': {'factor': 8, 'complementary': True},
    'sigma': 1e-3,
    'box': phantom.DEFAULT_BOX,
    'dictionary': {'file': None, 't1_grid': None, 't2_grid': None},
    'methods': ['mrf', 'blip', 'lm'],
    'params': {},
    'workers': 1}

DICTLEARN_OVERRIDES = {
    'grid': {'nx': 32, 'ny': 32},
    'sequence': {'frames': 200},
    'sampling': {'factor': 16},
    'methods': ['bcs', 'bcs-qmri']}


class ConfigMismatch(core.ConfigError):
    """
    raise if an output directory holds artifacts of another configuration
    """


def _merge(base, override):
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class ExperimentConfig():
    """
    a validated experiment configuration, missing keys take DEFAULTS

    Args:
        settings(dict): overrides of DEFAULTS

    Raises:
        core.ConfigError: if a key is unknown, a value is out of range, a
                          referenced file is missing or method parameters do
                          not fit the method

    Attributes:
        settings(dict): the merged settings
    """

    def __init__(self, settings=None):
        settings = settings or {}
        if not isinstance(settings, dict):
            raise core.ConfigError('configuration must be a JSON object')
        unknown = set(settings) - set(DEFAULTS)
        if unknown:
            raise core.ConfigError('unknown configuration keys: {}'.format(
                ', '.join(sorted(unknown))))
        self.settings = _merge(DEFAULTS, settings)
        self.validate()

    def __getitem__(self, key):
        return self.settings[key]

    def validate(self):
        """
        check values, files and method parameters
        """
        settings = self.settings
        core.Grid(**settings['grid'])
        core.AdmissibleBox.from_dict(settings['box'])
        if settings['sigma'] is None or float(settings['sigma']) < 0:
            raise forward.InvalidNoise('sigma must be >= 0')
        if int(settings['workers']) < 1:
            raise core.ConfigError('workers must be >= 1')
        if int(settings['sequence']['frames']) < 1:
            raise bloch.InvalidSequence('need at least one frame')
        if not settings['methods']:
            raise core.ConfigError('no methods to run')
        for name in settings['params']:
            if name not in settings['methods']:
                raise core.ConfigError('parameters given for {} which is not '
                                       'run'.format(name))
        for name in settings['methods']:
            allmethods.validate(name, settings['params'].get(name))
        for path in (settings['phantom_file'], settings['sequence']['file'],
                     settings['dictionary']['file']):
            if path is not None and not os.path.isfile(path):
                raise core.ConfigError('{} does not exist'.format(path))

    def config_hash(self):
        """
        SHA-256 of the canonical (sorted keys) JSON settings
        """
        text = json.dumps(self.settings, sort_keys=True)
        return hashlib.sha256(text.encode('utf-8')).hexdigest()

    def to_json(self):
        """
        canonical JSON text
        """
        return json.dumps(self.settings, indent=1, sort_keys=True)

    @classmethod
    def from_file(cls, jsonpath, overrides=None):
        """
        read a JSON configuration file

        Args:
            jsonpath(str): the file
            overrides(dict): applied after the file, e.g. a command line seed

        Returns:
            cfg(ExperimentConfig): the configuration
        """
        try:
            with open(jsonpath, 'r') as cfgfile:
                settings = json.load(cfgfile)
        except (OSError, ValueError) as err:
            raise core.ConfigError('cannot read configuration {}'.format(
                jsonpath)) from err
        if not isinstance(settings, dict):
            raise core.ConfigError('configuration must be a JSON object')
        settings.update(overrides or {})
        return cls(settings)

    @classmethod
    def dictlearn(cls, overrides=None):
        """
        the dictionary learning experiment: 32 x 32, 200 frames, factor 16
        """
        return cls(_merge(DICTLEARN_OVERRIDES, overrides or {}))


def build_phantom(cfg):
    """
    phantom from file or description, checked against the box
    """
    if cfg['phantom_file']:
        result = phantom.read_phantom_file(cfg['phantom_file'])
    else:
        spec = cfg['phantom'] or phantom.default_phantom_spec(
            cfg['grid']['nx'], cfg['grid']['ny'])
        result = phantom.make_phantom(spec)
    box = core.AdmissibleBox.from_dict(cfg['box'])
    stacked = result.qmap.stack()
    if not np.array_equal(box.clip(stacked), stacked):
        raise phantom.InvalidPhantom('phantom values leave the admissible box')
    return result


def build_sequence(cfg):
    """
    the sequence from file or the default train seeded by the config seed
    """
    seqcfg = cfg['sequence']
    if seqcfg['file']:
        return bloch.SequenceSpec.load(seqcfg['file'])
    return bloch.default_sequence(int(seqcfg['frames']), int(cfg['seed']),
                                  float(seqcfg['tr']))


def build_dictionary(cfg, seq):
    """
    load a dictionary or simulate one on the configured grids
    """
    dictcfg = cfg['dictionary']
    if dictcfg['file']:
        dictionary = bloch.FingerprintDictionary.load(dictcfg['file'])
        if dictionary.digest != seq.digest():
            raise mrf.SequenceMismatch('dictionary {} was built for another '
                                       'sequence'.format(dictcfg['file']))
        return dictionary
    t1_grid, t2_grid = bloch.default_grids()
    if dictcfg['t1_grid'] is not None:
        t1_grid = dictcfg['t1_grid']
    if dictcfg['t2_grid'] is not None:
        t2_grid = dictcfg['t2_grid']
    return bloch.build_dictionary(t1_grid, t2_grid, seq,
                                  workers=int(cfg['workers']))


def simulate_data(cfg, qmap, seq):
    """
    Bloch map, Cartesian sampling and noise

    Returns:
        kspace(core.KSpaceData): the noisy measurements
    """
    seed = int(cfg['seed'])
    sampling = cfg['sampling']
    series = bloch.bloch_map(qmap, seq)
    pattern = forward.make_cartesian_masks(
        qmap.grid, float(sampling['factor']), seq.frames, seed,
        bool(sampling['complementary']))
    clean = forward.apply_forward(series, pattern)
    return forward.add_noise(clean, float(cfg['sigma']),
                             core.Rng(seed + NOISE_STREAM_OFFSET))


def compute_metrics(estimate, truth, mask, kspace, seq):
    """
    foreground mean relative errors and the data residual

    Args:
        estimate(core.ParamMap): the reconstruction
        truth(core.ParamMap): the phantom
        mask(numpy.ndarray): foreground voxels
        kspace(core.KSpaceData): the measurements
        seq(bloch.SequenceSpec): the sequence

    Returns:
        metrics(dict): rho, t1, t2 mean relative errors, residual and the
                       error maps
    """
    errors = core.rel_error_map(estimate, truth, mask)
    metrics = dict(errors.means)
    metrics['residual'] = integrated.residual_norm(estimate, kspace, seq)
    metrics['maps'] = errors.maps
    return metrics


def metrics_row(name, metrics):
    """
    one csv row, floats at fixed precision
    """
    return [name] + [FLOAT_FORMAT.format(metrics[key])
                     for key in ('rho', 't1', 't2', 'residual')]


def prepare_output_dir(outdir, cfg):
    """
    create the directory and record the configuration

    Raises:
        ConfigMismatch: if the directory was used by another configuration
    """
    os.makedirs(outdir, exist_ok=True)
    cfgpath = os.path.join(outdir, CONFIG_FILENAME)
    if os.path.isfile(cfgpath):
        try:
            with open(cfgpath, 'r') as cfgfile:
                previous = json.load(cfgfile).get('config_hash')
        except (OSError, ValueError, AttributeError) as err:
            raise ConfigMismatch('unreadable {}'.format(cfgpath)) from err
        if previous != cfg.config_hash():
            raise ConfigMismatch('{} holds results of config {}'.format(
                outdir, previous))
    export.write_json_file(
        {'config_hash': cfg.config_hash(), 'settings': cfg.settings}, cfgpath)


class ExperimentManager():
    """
    class to keep track of one experiment: the phantom, the simulated data
    and every reconstruction with its metrics

    Attributes:
        cfg(ExperimentConfig): the configuration
        phantom(phantom.Phantom): ground truth
        seq(bloch.SequenceSpec): the sequence
        dictionary(bloch.FingerprintDictionary): the dictionary
        kspace(core.KSpaceData): the measurements
        outputs(collections.OrderedDict): method name -> MethodOutput
        metrics(collections.OrderedDict): method name -> metrics dict
        runtimes(dict): method name -> seconds, logged only
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.clear_data()

    def clear_data(self):
        """
        clear and start afresh
        """
        self.phantom = None
        self.seq = None
        self.dictionary = None
        self.kspace = None
        self.outputs = collections.OrderedDict()
        self.metrics = collections.OrderedDict()
        self.runtimes = {}

    def prepare(self):
        """
        phantom, sequence, dictionary and measurements
        """
        self.phantom = build_phantom(self.cfg)
        self.seq = build_sequence(self.cfg)
        self.dictionary = build_dictionary(self.cfg, self.seq)
        self.kspace = simulate_data(self.cfg, self.phantom.qmap, self.seq)
        LOGGER.info('prepared %s with %d frames, %d samples, %d fingerprints',
                    self.kspace.grid, self.kspace.frames,
                    self.kspace.sample_count, len(self.dictionary))

    def inputs(self):
        """
        the shared method inputs
        """
        return allmethods.ReconInputs(
            self.kspace, self.seq, self.dictionary,
            core.AdmissibleBox.from_dict(self.cfg['box']),
            float(self.cfg['sigma']), int(self.cfg['workers']),
            int(self.cfg['seed']))

    def run_method(self, name):
        """
        run one method and score it against the phantom

        Args:
            name(str): registry key

        Returns:
            metrics(dict): see compute_metrics
        """
        if self.kspace is None:
            self.prepare()
        started = time.perf_counter()
        output = allmethods.run_method(name, self.inputs(),
                                       self.cfg['params'].get(name))
        self.runtimes[name] = time.perf_counter() - started
        self.outputs[name] = output
        self.metrics[name] = compute_metrics(
            output.qmap, self.phantom.qmap, phantom.foreground(self.phantom),
            self.kspace, self.seq)
        LOGGER.info('%s done in %.1f s: rho %.4e t1 %.4e t2 %.4e', name,
                    self.runtimes[name], self.metrics[name]['rho'],
                    self.metrics[name]['t1'], self.metrics[name]['t2'])
        return self.metrics[name]

    def run_all(self):
        """
        run every configured method in order
        """
        for name in self.cfg['methods']:
            self.run_method(name)

    def metrics_table(self):
        """
        csv rows, header first
        """
        rows = [METRICS_HEADERS]
        for name, metrics in self.metrics.items():
            rows.append(metrics_row(name, metrics))
        return rows

    def stats(self):
        """
        a summary of the experiment

        Returns:
            stats(dict): configuration and per method errors
        """
        summary = {
            'config_hash': self.cfg.config_hash(),
            'grid': self.cfg['grid'],
            'frames': self.seq.frames if self.seq else None,
            'sampling factor': self.cfg['sampling']['factor'],
            'noise sigma': self.cfg['sigma'],
            'samples': self.kspace.sample_count if self.kspace else 0,
            'methods': {}}
        for name, metrics in self.metrics.items():
            summary['methods'][name] = {
                key: metrics[key] for key in ('rho', 't1', 't2', 'residual')}
        return summary

    def write_artifacts(self, outdir):
        """
        maps, error maps, traces, metrics and previews, each tagged with
        the config hash

        Args:
            outdir(str): output directory, prepared by prepare_output_dir
        """
        cfghash = self.cfg.config_hash()
        meta = {'config_hash': cfghash}
        comment = 'config {}'.format(cfghash)
        truth = self.phantom.qmap
        windows = {name: (float(truth.stack()[number].min()),
                          float(truth.stack()[number].max()))
                   for number, name in enumerate(core.PARAMETERS)}
        rawarray.write_param_map(os.path.join(outdir, 'truth.raw'), truth,
                                 meta)
        export.export_param_map(truth, os.path.join(outdir, 'truth'),
                                windows, comment)
        for name, output in self.outputs.items():
            prefix = os.path.join(outdir, name)
            rawarray.write_param_map(prefix + '_map.raw', output.qmap, meta)
            errors = np.stack([self.metrics[name]['maps'][key]
                               for key in core.PARAMETERS])
            rawarray.write_raw(prefix + '_errors.raw', errors,
                               dict(meta, channels=list(core.PARAMETERS)))
            export.export_param_map(output.qmap, prefix, windows, comment)
            if output.trace:
                export.write_trace(output.trace, prefix + '_trace.csv',
                                   cfghash)
        export.write_csv_file(self.metrics_table(),
                              os.path.join(outdir, METRICS_FILENAME), cfghash)
        export.write_summary_file(self.stats(),
                                  os.path.join(outdir, 'summary.txt'))


def run_experiment(cfg, outdir):
    """
    full pipeline: phantom, Bloch map, sampling and noise, every method,
    metrics and artifacts

    Args:
        cfg(ExperimentConfig): the configuration
        outdir(str): output directory

    Raises:
        ConfigMismatch: if outdir holds another configuration's results

    Returns:
        manager(ExperimentManager): the finished experiment
    """
    prepare_output_dir(outdir, cfg)
    manager = ExperimentManager(cfg)
    manager.prepare()
    manager.run_all()
    manager.write_artifacts(outdir)
    LOGGER.info('wrote artifacts to %s', outdir)
    return manager
