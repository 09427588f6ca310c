"""
command line interface: phantoms, simulated data, reconstructions,
surrogate training, AWS smoothing, metrics and exports

Note:
    exit codes are 0 on success, 2 for configuration errors and 3 for
    numerical failures
"""

import argparse
import hashlib
import json
import logging
import os
import sys

import pyqmrirecon.allmethods as allmethods
import pyqmrirecon.aws as aws
import pyqmrirecon.bloch as bloch
import pyqmrirecon.core as core
import pyqmrirecon.experiment as experiment
import pyqmrirecon.export as export
import pyqmrirecon.integrated as integrated
import pyqmrirecon.logs as logs
import pyqmrirecon.mrf as mrf
import pyqmrirecon.phantom as phantom
import pyqmrirecon.rawarray as rawarray
import pyqmrirecon.surrogate as surrogate
import pyqmrirecon.version as version


LOGGER = logging.getLogger('pyqmrirecon.cli')

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

RECON_FLAGS = ('steps', 'mu', 'init', 'lambda0', 'decay', 'tau', 'max_iters',
               'alpha', 'beta', 'alpha_map', 'beta_map', 'iters',
               'regulariser', 'patch', 'lam', 'sparsity', 'sweeps', 'net',
               'epochs')
UNHASHED = ('func', 'out', 'verbose', 'log_file', 'workers')


def command_hash(args):
    """
    SHA-256 of the canonical JSON of the parsed arguments, recorded in the
    headers of single command outputs
    """
    settings = {key: value for key, value in sorted(vars(args).items())
                if key not in UNHASHED}
    text = json.dumps(settings, sort_keys=True, default=str)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def load_config(args):
    """
    the experiment configuration from --config with --seed applied
    """
    overrides = {} if args.seed is None else {'seed': args.seed}
    if args.config:
        return experiment.ExperimentConfig.from_file(args.config, overrides)
    if getattr(args, 'dictlearn', False):
        return experiment.ExperimentConfig.dictlearn(overrides)
    return experiment.ExperimentConfig(overrides)


def load_box(boxpath):
    """
    box from a JSON file or the default box
    """
    if not boxpath:
        return core.AdmissibleBox.from_dict(phantom.DEFAULT_BOX)
    try:
        with open(boxpath, 'r') as boxfile:
            return core.AdmissibleBox.from_dict(json.load(boxfile))
    except (OSError, ValueError) as err:
        raise core.ConfigError('cannot read box {}'.format(boxpath)) from err


def cmd_phantom(args):
    """
    write the ground truth maps and previews
    """
    cfg = load_config(args)
    truth = experiment.build_phantom(cfg)
    cfghash = cfg.config_hash()
    outpath = os.path.join(args.out, 'phantom.raw')
    rawarray.write_param_map(outpath, truth.qmap, {'config_hash': cfghash})
    rawarray.write_raw(os.path.join(args.out, 'labels.raw'),
                       truth.labels.astype(float),
                       {'config_hash': cfghash, 'names': truth.names})
    export.export_param_map(truth.qmap, os.path.join(args.out, 'phantom'),
                            comment='config {}'.format(cfghash))
    LOGGER.info('wrote %s', outpath)


def cmd_simulate(args):
    """
    phantom, sequence, dictionary and noisy k-space data
    """
    cfg = load_config(args)
    manager = experiment.ExperimentManager(cfg)
    manager.prepare()
    meta = {'config_hash': cfg.config_hash(), 'sigma': cfg['sigma']}
    rawarray.write_param_map(os.path.join(args.out, 'phantom.raw'),
                             manager.phantom.qmap, meta)
    rawarray.write_kspace(os.path.join(args.out, 'kspace.raw'),
                          manager.kspace, meta)
    manager.seq.save(os.path.join(args.out, 'sequence.json'))
    manager.dictionary.save(os.path.join(args.out, 'dictionary.raw'))
    print(export.create_summary_text(manager.stats()))


def method_params(args):
    """
    method parameters from the recon flags that were given
    """
    return {key: getattr(args, key) for key in RECON_FLAGS
            if getattr(args, key, None) is not None}


def cmd_recon(args):
    """
    run one reconstruction method on stored data
    """
    params = method_params(args)
    allmethods.validate(args.method, params)
    kspace, meta = rawarray.read_kspace(args.y)
    seq = bloch.SequenceSpec.load(args.seq)
    if args.dict:
        dictionary = bloch.FingerprintDictionary.load(args.dict)
    else:
        dictionary = bloch.default_dictionary(seq, args.workers)
    sigma = args.sigma if args.sigma is not None else meta.get('sigma')
    seed = bloch.DEFAULT_SEED if args.seed is None else args.seed
    inputs = allmethods.ReconInputs(kspace, seq, dictionary,
                                    load_box(args.box), sigma, args.workers,
                                    seed)
    if dictionary.digest != seq.digest():
        raise mrf.SequenceMismatch(
            'dictionary was built for another sequence')
    output = allmethods.run_method(args.method, inputs, params)
    cfghash = command_hash(args)
    prefix = os.path.join(args.out, args.method)
    rawarray.write_param_map(prefix + '_map.raw', output.qmap,
                             {'config_hash': cfghash, 'method': args.method,
                              'params': params})
    if output.trace:
        export.write_trace(output.trace, prefix + '_trace.csv', cfghash)
    for name, transform in output.extras.items():
        rawarray.write_raw('{}_{}.raw'.format(prefix, name), transform,
                           {'config_hash': cfghash})
    metrics = {'config_hash': cfghash, 'method': args.method,
               'residual': integrated.residual_norm(output.qmap, kspace, seq)}
    export.write_json_file(metrics, prefix + '_metrics.json')
    print(export.create_summary_text(metrics))


def cmd_train(args):
    """
    fit a surrogate network to a dictionary
    """
    dictionary = bloch.FingerprintDictionary.load(args.dict)
    seed = 0 if args.seed is None else args.seed
    cfg = surrogate.TrainConfig(args.epochs, args.batch_size,
                                args.learning_rate, args.gamma, args.penalty,
                                seed)
    result = surrogate.train_surrogate(surrogate.make_training_set(dictionary),
                                       cfg, tuple(args.hidden))
    cfghash = command_hash(args)
    outpath = os.path.join(args.out, 'surrogate.raw')
    surrogate.save_net(outpath, result.net,
                       {'sequence': dictionary.digest, 'config_hash': cfghash,
                        'train': cfg.to_dict(), 'mse': result.mse})
    rows = [['epoch', 'loss']]
    rows.extend([epoch + 1, loss] for epoch, loss in enumerate(result.losses))
    export.write_csv_file(rows, os.path.join(args.out, 'surrogate_loss.csv'),
                          cfghash)
    print(export.create_summary_text({'epochs': cfg.epochs,
                                      'training mse': result.mse}))


def cmd_smooth(args):
    """
    ESTATICS fit, adaptive smoothing and R1 / PD maps
    """
    if args.echoes:
        echoes = aws.EchoSet.load(args.echoes)
    else:
        cfg = load_config(args)
        truth = experiment.build_phantom(cfg)
        echoes = aws.echoes_from_qmap(
            truth.qmap, sigma=args.sigma,
            rng=core.Rng(int(cfg['seed']) + experiment.NOISE_STREAM_OFFSET))
        echoes.save(os.path.join(args.out, 'echoes.json'))
    fit = aws.estatics_fit(echoes)
    awscfg = aws.AWSConfig(args.hmax, args.lam, args.patch_radius)
    smoothed, derived = aws.smooth_qmaps(fit, echoes.a_t1, echoes.a_pd,
                                         echoes.tr, awscfg)
    meta = {'config_hash': command_hash(args)}
    rawarray.write_raw(os.path.join(args.out, 'estatics.raw'),
                       smoothed.theta(), dict(meta, channels=[
                           'u_t1', 'u_pd', 'r2star']))
    for name in ('r1', 'pd'):
        values = getattr(derived, name)
        rawarray.write_raw(os.path.join(args.out, name + '.raw'), values,
                           meta)
        export.export_pgm(values, os.path.join(args.out, name + '.pgm'),
                          comment='config {}'.format(meta['config_hash']))
    print(export.create_summary_text({
        'voxels': int(echoes.grid.size),
        'clamped voxels': int(derived.flags.sum()),
        'bandwidths': [float(h) for h in awscfg.bandwidths()]}))


def cmd_metrics(args):
    """
    relative errors of an estimate against a ground truth map
    """
    estimate, _ = rawarray.read_param_map(args.estimate)
    truth, _ = rawarray.read_param_map(args.truth)
    errors = core.rel_error_map(estimate, truth, truth.rho > 0)
    metrics = dict(errors.means)
    if args.y and args.seq:
        kspace, _ = rawarray.read_kspace(args.y)
        metrics['residual'] = integrated.residual_norm(
            estimate, kspace, bloch.SequenceSpec.load(args.seq))
    rows = [['quantity', 'value']]
    rows.extend([key, experiment.FLOAT_FORMAT.format(metrics[key])]
                for key in sorted(metrics))
    export.write_csv_file(rows, os.path.join(args.out, 'metrics.csv'),
                          command_hash(args))
    print(export.create_summary_text(metrics))


def cmd_export(args):
    """
    PGM previews of a parameter map
    """
    qmap, meta = rawarray.read_param_map(args.map)
    windows = None
    if args.window:
        windows = {name: tuple(args.window) for name in core.PARAMETERS}
    prefix = os.path.join(args.out, os.path.splitext(
        os.path.basename(args.map))[0])
    comment = 'config {}'.format(meta.get('config_hash', command_hash(args)))
    for path in export.export_param_map(qmap, prefix, windows, comment):
        LOGGER.info('wrote %s', path)


def cmd_run(args):
    """
    the full experiment
    """
    cfg = load_config(args)
    manager = experiment.run_experiment(cfg, args.out)
    print(export.create_summary_text(manager.stats()))


def add_recon_flags(parser):
    """
    method flags, only the ones given are passed on
    """
    parser.add_argument('--steps', type=int, help='BLIP steps')
    parser.add_argument('--mu', type=float, help='step or data weight')
    parser.add_argument('--init', help="'mrf' or a raw parameter map")
    parser.add_argument('--lambda0', type=float, help='first LM damping')
    parser.add_argument('--decay', type=float, help='damping decay')
    parser.add_argument('--tau', type=float, help='discrepancy factor')
    parser.add_argument('--max-iters', dest='max_iters', type=int,
                        help='outer iterations')
    parser.add_argument('--alpha', type=float, help='regularisation weight')
    parser.add_argument('--beta', type=float, help='TGV second order weight')
    parser.add_argument('--alpha-map', dest='alpha_map',
                        help='raw per voxel alpha map')
    parser.add_argument('--beta-map', dest='beta_map',
                        help='raw per voxel beta map')
    parser.add_argument('--iters', type=int, help='primal-dual iterations')
    parser.add_argument('--regulariser', choices=('tv', 'tgv'))
    parser.add_argument('--patch', type=int, help='patch side')
    parser.add_argument('--lambda', dest='lam', type=float,
                        help='sparsity weight')
    parser.add_argument('--s', dest='sparsity', type=int, choices=(0, 1),
                        help='0 for l0, 1 for l1')
    parser.add_argument('--sweeps', type=int, help='BCS sweeps')
    parser.add_argument('--net', help="surrogate file or 'bloch'")
    parser.add_argument('--epochs', type=int,
                        help='training epochs when no net is given')


def build_parser():
    """
    the argument parser with every subcommand
    """
    parser = argparse.ArgumentParser(
        prog='pyqmrirecon',
        description='quantitative MRI reconstruction toolkit')
    parser.add_argument('--version', action='version',
                        version='%(prog)s {}'.format(version.VERSION))
    parser.add_argument('--seed', type=int, help='experiment seed')
    parser.add_argument('--out', default='.', help='output directory')
    parser.add_argument('--config', help='experiment JSON file')
    parser.add_argument('--verbose', action='store_true',
                        help='log solver iterations')
    parser.add_argument('--log-file', dest='log_file',
                        help='rotating log file')
    parser.add_argument('--workers', type=int, default=1,
                        help='threads for matching and per frame solves')
    subparsers = parser.add_subparsers(dest='command')
    subparsers.required = True

    phantomparser = subparsers.add_parser('phantom', help='ground truth maps')
    phantomparser.set_defaults(func=cmd_phantom)

    simparser = subparsers.add_parser('simulate', help='simulated k-space')
    simparser.set_defaults(func=cmd_simulate)

    reconparser = subparsers.add_parser('recon', help='reconstruct maps')
    reconparser.add_argument('method', choices=sorted(allmethods.ALLMETHODS))
    reconparser.add_argument('--y', required=True, help='k-space raw file')
    reconparser.add_argument('--seq', required=True, help='sequence JSON')
    reconparser.add_argument('--dict', help='dictionary raw file')
    reconparser.add_argument('--box', help='admissible box JSON')
    reconparser.add_argument('--sigma', type=float, help='noise level')
    add_recon_flags(reconparser)
    reconparser.set_defaults(func=cmd_recon)

    trainparser = subparsers.add_parser('train-surrogate',
                                        help='fit a surrogate network')
    trainparser.add_argument('--dict', required=True,
                             help='dictionary raw file')
    trainparser.add_argument('--epochs', type=int, default=2000)
    trainparser.add_argument('--batch-size', dest='batch_size', type=int,
                             default=256)
    trainparser.add_argument('--learning-rate', dest='learning_rate',
                             type=float, default=1e-3)
    trainparser.add_argument('--gamma', type=float, default=0.999)
    trainparser.add_argument('--penalty', type=float, default=0.0)
    trainparser.add_argument('--hidden', type=int, nargs='*',
                             default=list(surrogate.DEFAULT_HIDDEN))
    trainparser.set_defaults(func=cmd_train)

    smoothparser = subparsers.add_parser('smooth', help='smooth qMRI maps')
    smoothsub = smoothparser.add_subparsers(dest='smoother')
    smoothsub.required = True
    awsparser = smoothsub.add_parser('aws', help='adaptive weights smoothing')
    awsparser.add_argument('--echoes', help='echo set JSON, simulated from '
                           'the phantom if omitted')
    awsparser.add_argument('--sigma', type=float, default=0.01,
                           help='noise of simulated echoes')
    awsparser.add_argument('--lambda', dest='lam', type=float,
                           default=aws.DEFAULT_LAMBDA)
    awsparser.add_argument('--hmax', type=float, default=aws.DEFAULT_HMAX)
    awsparser.add_argument('--patch-radius', dest='patch_radius', type=int,
                           default=0)
    awsparser.set_defaults(func=cmd_smooth)

    metricsparser = subparsers.add_parser('metrics', help='score a map')
    metricsparser.add_argument('--estimate', required=True)
    metricsparser.add_argument('--truth', required=True)
    metricsparser.add_argument('--y', help='k-space for the data residual')
    metricsparser.add_argument('--seq', help='sequence for the residual')
    metricsparser.set_defaults(func=cmd_metrics)

    exportparser = subparsers.add_parser('export', help='PGM previews')
    exportparser.add_argument('--map', required=True)
    exportparser.add_argument('--window', type=float, nargs=2,
                              metavar=('LO', 'HI'))
    exportparser.set_defaults(func=cmd_export)

    runparser = subparsers.add_parser('run', help='full experiment')
    runparser.add_argument('--dictlearn', action='store_true',
                           help='the 32 x 32, 200 frame, factor 16 setting')
    runparser.set_defaults(func=cmd_run)
    return parser


def main(argv=None):
    """
    main program code

    Returns:
        code(int): process exit code
    """
    args = build_parser().parse_args(argv)
    logs.setup_logging(args.verbose, args.log_file)
    try:
        os.makedirs(args.out, exist_ok=True)
        args.func(args)
    except core.ConfigError as err:
        LOGGER.error('configuration error: %s', err)
        return EXIT_CONFIG
    except core.NumericalFailure as err:
        LOGGER.error('numerical failure: %s', err)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
