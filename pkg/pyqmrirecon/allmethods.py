"""
helper module to keep track of all the reconstruction methods we have

Note:
    every runner takes a ReconInputs tuple and a dict of method parameters
    and returns a MethodOutput. Unknown parameters are rejected
"""

import collections
import logging

import pyqmrirecon.core as core
import pyqmrirecon.dictlearn as dictlearn
import pyqmrirecon.integrated as integrated
import pyqmrirecon.mrf as mrf
import pyqmrirecon.rawarray as rawarray
import pyqmrirecon.surrogate as surrogate
import pyqmrirecon.varreg as varreg


LOGGER = logging.getLogger(__name__)


class UnknownMethod(core.ConfigError):
    """
    raise if a method name is not in the registry
    """


class InvalidMethodParams(core.ConfigError):
    """
    raise if method parameters do not fit the method
    """


ReconInputs = collections.namedtuple(
    'ReconInputs',
    ['kspace', 'seq', 'dictionary', 'box', 'sigma', 'workers', 'seed'])

MethodOutput = collections.namedtuple('MethodOutput',
                                      ['qmap', 'trace', 'extras'])


def _checked(name, params):
    params = dict(params or {})
    unknown = set(params) - set(METHODPARAMS[name])
    if unknown:
        raise InvalidMethodParams('{} does not take {}'.format(
            name, ', '.join(sorted(unknown))))
    merged = dict(METHODPARAMS[name])
    merged.update(params)
    return merged


def start_map(inputs, init):
    """
    starting parameters for the iterative methods

    Args:
        inputs(ReconInputs): the data
        init(str): 'mrf' for the dictionary match or a raw parameter map

    Returns:
        qmap(core.ParamMap): the start
    """
    if init == 'mrf':
        return mrf.mrf_reconstruct(inputs.kspace, inputs.dictionary,
                                   inputs.workers)
    qmap, _ = rawarray.read_param_map(init)
    if qmap.grid != inputs.kspace.grid:
        raise core.GridMismatch('start map {} vs data {}'.format(
            qmap.grid, inputs.kspace.grid))
    return qmap


def run_mrf(inputs, params=None):
    """
    dictionary matching of the zero filled series
    """
    _checked('mrf', params)
    qmap = mrf.mrf_reconstruct(inputs.kspace, inputs.dictionary,
                               inputs.workers)
    return MethodOutput(qmap, [], {})


def run_blip(inputs, params=None):
    """
    projected Landweber iteration, trace of data residuals per step
    """
    params = _checked('blip', params)
    result = mrf.blip_reconstruct(inputs.kspace, inputs.dictionary,
                                  int(params['steps']), float(params['mu']),
                                  workers=inputs.workers)
    trace = [{'step': step, 'residual': residual}
             for step, residual in enumerate(result.residuals)]
    return MethodOutput(result.qmap, trace, {})


def run_lm(inputs, params=None):
    """
    projected Levenberg-Marquardt from the MRF match or a given map
    """
    params = _checked('lm', params)
    sigma = params['sigma'] if params['sigma'] is not None else inputs.sigma
    cfg = integrated.LMConfig(params['lambda0'], params['decay'],
                              params['max_iters'], params['tau'], sigma)
    q0 = start_map(inputs, params['init'])
    result = integrated.lm_reconstruct(inputs.kspace, inputs.seq, q0,
                                       inputs.box, cfg)
    return MethodOutput(result.qmap, result.trace, {})


def run_twostep(inputs, params=None):
    """
    TV or TGV frames followed by per voxel regression
    """
    params = _checked('twostep', params)
    if params['alpha_map']:
        weights = varreg.WeightField.from_raw(params['alpha_map'],
                                              params['beta_map'])
    else:
        weights = varreg.WeightField(params['alpha'], params['beta'],
                                     inputs.kspace.grid.shape)
    qmap = varreg.two_step_reconstruct(
        inputs.kspace, inputs.seq, inputs.dictionary, weights, inputs.box,
        int(params['iters']), int(params['steps']), params['regulariser'],
        inputs.workers)
    return MethodOutput(qmap, [], {})


def _schedule(params):
    return dictlearn.ProximalSchedule(params['lam_c'], params['lam_d'],
                                      params['lam_u'])


def run_bcs(inputs, params=None):
    """
    blind compressed sensing per frame, then dictionary matching

    Note:
        the trace has one row per (frame, sweep) objective and the learned
        transforms are returned as extras
    """
    params = _checked('bcs', params)
    kspace = inputs.kspace
    full = kspace.to_full()
    images = []
    transforms = []
    trace = []
    for frame in range(kspace.frames):
        result = dictlearn.bcs_reconstruct(
            full[frame], kspace.masks[frame], int(params['patch']),
            float(params['mu']), float(params['lam']),
            int(params['sparsity']), int(params['sweeps']),
            _schedule(params))
        images.append(result.image)
        transforms.append(result.transform)
        trace.extend({'frame': frame, 'sweep': sweep, 'objective': value}
                     for sweep, value in enumerate(result.objectives))
    series = core.ImageSeries(kspace.grid, images)
    index, rho, _ = mrf.match_series(series.voxel_series(),
                                     inputs.dictionary, 'norm',
                                     workers=inputs.workers)
    qmap = mrf.matches_to_map(kspace.grid, index, rho, inputs.dictionary)
    return MethodOutput(qmap, trace, {'transforms': transforms})


def run_bcs_qmri(inputs, params=None):
    """
    blind compressed sensing directly on the parameter maps
    """
    params = _checked('bcs-qmri', params)
    q0 = start_map(inputs, params['init'])
    result = dictlearn.bcs_qmri_reconstruct(
        inputs.kspace, inputs.seq, inputs.box, int(params['patch']),
        float(params['mu']), float(params['alpha']), float(params['lam']),
        int(params['sparsity']), int(params['sweeps']), q0,
        _schedule(params))
    trace = [{'sweep': sweep, 'objective': value}
             for sweep, value in enumerate(result.objectives)]
    return MethodOutput(result.qmap, trace, {'transform': result.transform})


def load_model(inputs, params):
    """
    the signal model for the learning informed solver

    Note:
        'bloch' gives the exact map, a path loads a trained network (its
        sequence digest must match), None trains a network on the dictionary

    Returns:
        model(object): SurrogateNet or BlochAdapter
    """
    if params['net'] == 'bloch':
        return surrogate.BlochAdapter(inputs.seq)
    if params['net']:
        net, meta = surrogate.load_net(params['net'])
        digest = meta.get('sequence')
        if digest is not None and digest != inputs.seq.digest():
            raise mrf.SequenceMismatch('network was trained for another '
                                       'sequence')
        return net
    cfg = surrogate.TrainConfig(epochs=params['epochs'],
                                seed=inputs.seed)
    pairs = surrogate.make_training_set(inputs.dictionary)
    return surrogate.train_surrogate(pairs, cfg).net


def run_nn(inputs, params=None):
    """
    learning informed projected Gauss-Newton
    """
    params = _checked('nn', params)
    model = load_model(inputs, params)
    q0 = start_map(inputs, params['init'])
    result = surrogate.nn_reconstruct(
        inputs.kspace, model, q0, inputs.box, float(params['alpha']),
        int(params['max_iters']), params['lambda0'], float(params['decay']))
    return MethodOutput(result.qmap, result.trace, {})


METHODPARAMS = {
    'mrf': {},
    'blip': {'steps': 50, 'mu': 1.0},
    'lm': {'init': 'mrf', 'lambda0': None, 'decay': 0.7, 'max_iters': 30,
           'tau': 1.05, 'sigma': None},
    'twostep': {'alpha': 2e-3, 'beta': None, 'alpha_map': None,
                'beta_map': None, 'iters': 500, 'steps': 20,
                'regulariser': 'tv'},
    'bcs': {'patch': 8, 'mu': 1.0, 'lam': 1e-3, 'sparsity': 0, 'sweeps': 10,
            'lam_c': 1e-2, 'lam_d': 1e-2, 'lam_u': 1e-2},
    'bcs-qmri': {'init': 'mrf', 'patch': 4, 'mu': 1.0, 'alpha': 1.0,
                 'lam': 1e-3, 'sparsity': 0, 'sweeps': 10, 'lam_c': 1e-2,
                 'lam_d': 1e-2, 'lam_u': 1e-2},
    'nn': {'net': None, 'epochs': 500, 'init': 'mrf', 'alpha': 0.0,
           'max_iters': 20, 'lambda0': None, 'decay': 0.7}}


ALLMETHODS = {
    'mrf': run_mrf,
    'blip': run_blip,
    'lm': run_lm,
    'twostep': run_twostep,
    'bcs': run_bcs,
    'bcs-qmri': run_bcs_qmri,
    'nn': run_nn}


def validate(name, params=None):
    """
    check a method name and its parameters without running anything

    Raises:
        UnknownMethod: if the name is not registered
        InvalidMethodParams: if a parameter is not accepted

    Returns:
        params(dict): the parameters merged over the defaults
    """
    if name not in ALLMETHODS:
        raise UnknownMethod('unknown method {}, choose from {}'.format(
            name, ', '.join(sorted(ALLMETHODS))))
    return _checked(name, params)


def run_method(name, inputs, params=None):
    """
    run a registered method, errors are re-raised with the method name

    Args:
        name(str): registry key
        inputs(ReconInputs): the data
        params(dict): method parameters

    Returns:
        output(MethodOutput): the reconstruction
    """
    validate(name, params)
    LOGGER.info('running %s', name)
    try:
        return ALLMETHODS[name](inputs, params)
    except (core.ConfigError, core.NumericalFailure) as err:
        raise type(err)('{}: {}'.format(name, err)) from err
