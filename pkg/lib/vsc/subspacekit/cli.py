#
# Copyright 2024-2026 Ghent University
#
# This file is part of vsc-subspacekit,
# originally created by the HPC team of Ghent University (http://ugent.be/hpc/en),
# with support of Ghent University (http://ugent.be/hpc),
# the Flemish Supercomputer Centre (VSC) (https://www.vscentrum.be),
# the Flemish Research Foundation (FWO) (http://www.fwo.be/en)
# and the Department of Economy, Science and Innovation (EWI) (http://www.ewi-vlaanderen.be/en).
#
# https://github.com/hpcugent/vsc-subspacekit
#
# All rights reserved.
#
"""
Command line front-end of subspacekit.

    subspacekit.py synth --k 4 --dim 3 --per-class 40 --ambient 30 --noise 0 --seed 7 --out s/
    subspacekit.py fit --method shallow --data s/data.sscm --labels s/labels.csv --lambda 1e-4 --report r.json
    subspacekit.py sweep --method shallow --data s/data.sscm --labels s/labels.csv --lambda-range 1:1e6:x10 --out t.csv
    subspacekit.py params --arch eyaleb-dcfsc
"""
import csv
import json
import multiprocessing
import os
import sys
import time

from collections import OrderedDict, namedtuple

import numpy as np

from vsc.subspacekit import SubspaceKitError
from vsc.subspacekit.evaldata import (
    IoFailure, SyntheticSpec, clustering_error, generate_subspaces, load_labels, load_matrix, load_pgm_dir,
    save_labels, save_matrix,
)
from vsc.subspacekit.neuralnet import load_checkpoint, param_count, save_checkpoint, self_expressive_bytes
from vsc.subspacekit.pipeline import (
    TrainConfig, TrainLog, fit_dcfsc, fit_dsc_baseline, fit_shallow, pretrain_autoencoder,
)
from vsc.subspacekit.presets import PRESETS, build_spec, preset_defaults
from vsc.subspacekit.selfexpress import self_expression_residual
from vsc.subspacekit.spectral import ClusterConfig, cluster_from_coefficients
from vsc.utils import fancylogger
from vsc.utils.generaloption import GeneralOption

COMMANDS = ('synth', 'fit', 'sweep', 'params')
METHODS = ('dcfsc', 'dsc', 'shallow')

DEFAULT_ARCH = 'mlp-small'
DEFAULT_EPOCHS = 200
DEFAULT_PRETRAIN_EPOCHS = 100
DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_IMAGE_SIZE = (32, 32)

THREADS_ENV = 'SUBSPACEKIT_THREADS'
SWEEP_COLUMNS = ('lambda', 'clustering_error', 'final_loss', 'wall_seconds')
ERROR_VALUE = 'error'

_log = fancylogger.getLogger(__name__, fname=False)

RunReport = namedtuple('RunReport', [
    'method', 'arch', 'lambda_', 'lambda1', 'lambda2', 'learning_rate', 'epochs', 'pretrain_epochs', 'seed', 'k',
    'n_samples', 'clustering_error', 'final_loss', 'loss_history', 'param_total', 'wall_seconds',
])


class CliError(SubspaceKitError):
    pass


class UsageError(CliError):
    pass


class SubspaceKitOption(GeneralOption):
    """Options of all subspacekit commands; the command is the first positional argument"""

    def common_options(self):
        opts = {
            'arch': (f"Architecture: preset name ({', '.join(sorted(PRESETS))}) or YAML file",
                     'str', 'store', DEFAULT_ARCH),
            'k': ("Number of subspaces (synth) or clusters (fit, sweep)", 'int', 'store', None),
            'seed': ("Random seed", 'int', 'store', 0),
        }
        self.add_group_parser(opts, ("Common options", "Options shared by several commands"))

    def synth_options(self):
        opts = {
            'dim': ("Dimension of every subspace", 'int', 'store', 3),
            'per-class': ("Points per subspace", 'int', 'store', 40),
            'ambient': ("Ambient dimension", 'int', 'store', 30),
            'noise': ("Standard deviation of the additive Gaussian noise", 'float', 'store', 0.0),
            'independent': ("Draw every basis on its own instead of mutually orthogonal", None, 'store_true',
                            False),
        }
        self.add_group_parser(opts, ("Synth options", "Synthetic union of subspaces"))

    def fit_options(self):
        opts = {
            'method': (f"Method: {', '.join(METHODS)}", 'str', 'store', 'dcfsc'),
            'data': ("Data matrix (.csv, .sscm) or directory of PGM images", 'str', 'store', None),
            'labels': ("True labels (.csv), one per line", 'str', 'store', None),
            'image-size': ("Resize PGM images to HxW (default: architecture input)", 'str', 'store', None),
            'subjects': ("Keep only the first K classes of the labels", 'int', 'store', None),
            'lambda': ("Ridge weight of the closed-form self-expression", 'float', 'store', None),
            'lambda1': ("Coefficient regularisation weight (dsc)", 'float', 'store', None),
            'lambda2': ("Self-expression weight (dsc)", 'float', 'store', None),
            'l2-unsquared': ("Use the unsquared Frobenius norm for the lambda1 term (dsc)", None, 'store_true',
                             False),
            'lr': ("Adam learning rate", 'float', 'store', None),
            'epochs': ("Training epochs", 'int', 'store', None),
            'pretrain-epochs': ("Auto-encoder pretraining epochs", 'int', 'store', DEFAULT_PRETRAIN_EPOCHS),
            'no-pretrain': ("Skip auto-encoder pretraining", None, 'store_true', False),
            'preset-defaults': ("Use the defaults of the preset for unset training options", None, 'store_true',
                                False),
            'width': ("Numeric width of training, 32 or 64", 'int', 'store', 64),
            'rho': ("Affinity threshold ratio in (0, 1]", 'float', 'store', 1.0),
            'kmeans-restarts': ("Number of k-means restarts", 'int', 'store', 20),
            'report': ("Write the JSON report to this file (default: standard output)", 'str', 'store', None),
            'pred': ("Write predicted labels to this file (default: <report>.labels.csv)", 'str', 'store', None),
            'trainlog': ("Write the per-epoch training log to this file", 'str', 'store', None),
            'checkpoint': ("Write the final network parameters to this file", 'str', 'store', None),
            'init-checkpoint': ("Start from these network parameters instead of pretraining", 'str', 'store',
                                None),
        }
        self.add_group_parser(opts, ("Fit options", "Training and clustering"))

    def sweep_options(self):
        opts = {
            'lambda-list': ("Comma separated lambda values", 'str', 'store', None),
            'lambda-range': ("Geometric lambda range START:STOP:xFACTOR", 'str', 'store', None),
            'parallel': (f"Run the lambda values in parallel (capped by ${THREADS_ENV})", None, 'store_true',
                         False),
        }
        self.add_group_parser(opts, ("Sweep options", "Lambda sweeps"))

    def output_options(self):
        opts = {
            'out': ("Output directory (synth) or CSV table (sweep)", 'str', 'store', None),
            'samples': ("Size of the self-expressive layer for params (default: preset sample count)",
                        'int', 'store', None),
        }
        self.add_group_parser(opts, ("Output options", "Output locations"))


def _settings(options):
    """Plain dict of the parsed options, picklable for worker processes"""
    names = ['arch', 'k', 'seed', 'method', 'data', 'labels', 'image_size', 'subjects', 'lambda1', 'lambda2',
             'l2_unsquared', 'lr', 'epochs', 'pretrain_epochs', 'no_pretrain', 'preset_defaults', 'width', 'rho',
             'kmeans_restarts', 'report', 'pred', 'trainlog', 'checkpoint', 'init_checkpoint']
    settings = {name: getattr(options, name) for name in names}
    settings['lambda'] = getattr(options, 'lambda')
    return settings


def _require(settings, name, command):
    if settings.get(name) is None:
        raise UsageError(f"{command}: --{name.replace('_', '-')} is required")


def _makedirs(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as err:
        _log.raiseException(f"could not create {path}: {err}", IoFailure)


def cmd_synth(options):
    """Write data.sscm and labels.csv of a synthetic union of subspaces to --out"""
    if options.out is None:
        raise UsageError("synth: --out is required")
    if options.k is None:
        raise UsageError("synth: --k is required")

    spec = SyntheticSpec(options.k, options.dim, options.per_class, options.ambient, noise_sigma=options.noise,
                         seed=options.seed, orthogonal=not options.independent)
    data, labels = generate_subspaces(spec)

    _makedirs(options.out)
    save_matrix(os.path.join(options.out, 'data.sscm'), data)
    save_labels(os.path.join(options.out, 'labels.csv'), labels)
    _log.info("Wrote %dx%d synthetic data to %s", data.shape[0], data.shape[1], options.out)
    return 0


def _image_size(settings, arch):
    if settings['image_size']:
        try:
            height, width = (int(x) for x in settings['image_size'].lower().split('x'))
        except ValueError:
            raise UsageError(f"--image-size must be HxW, got {settings['image_size']}")
        return height, width
    if arch in PRESETS and len(PRESETS[arch].input_shape) == 3:
        return PRESETS[arch].input_shape[:2]
    return DEFAULT_IMAGE_SIZE


def load_inputs(settings):
    """Data matrix and labels (or None) with the --subjects selection applied"""
    _require(settings, 'data', 'fit')
    if os.path.isdir(settings['data']):
        data = load_pgm_dir(settings['data'], *_image_size(settings, settings['arch']))
    else:
        data = load_matrix(settings['data'])

    labels = None
    if settings['labels']:
        labels = load_labels(settings['labels'])
        if labels.size != data.shape[0]:
            raise UsageError(f"{settings['labels']} has {labels.size} labels for {data.shape[0]} samples")

    if settings['subjects']:
        if labels is None:
            raise UsageError("--subjects needs --labels")
        keep = np.isin(labels, np.unique(labels)[:settings['subjects']])
        data, labels = data[keep], labels[keep]
        _log.info("Kept %d samples of the first %d classes", data.shape[0], settings['subjects'])

    return data, labels


def train_config(settings, k, lambda_=None):
    """TrainConfig from explicit options, preset defaults (with --preset-defaults) and built-in defaults"""
    method = settings['method']
    values = {
        'lambda': settings['lambda'] if lambda_ is None else lambda_,
        'learning_rate': settings['lr'],
        'epochs': settings['epochs'],
        'lambda1': settings['lambda1'],
        'lambda2': settings['lambda2'],
    }

    if settings['preset_defaults']:
        if settings['arch'] not in PRESETS:
            raise UsageError(f"--preset-defaults needs a preset architecture, got {settings['arch']}")
        for name, value in preset_defaults(settings['arch'], k).items():
            if values[name] is None:
                values[name] = value

    if values['lambda'] is None and method in ('dcfsc', 'shallow'):
        raise UsageError(f"fit: --lambda is required for method {method}")

    return TrainConfig(
        values['lambda'],
        lambda1=1.0 if values['lambda1'] is None else values['lambda1'],
        lambda2=1.0 if values['lambda2'] is None else values['lambda2'],
        learning_rate=values['learning_rate'] or DEFAULT_LEARNING_RATE,
        epochs=DEFAULT_EPOCHS if values['epochs'] is None else values['epochs'],
        seed=settings['seed'],
        numeric_width=settings['width'],
        squared_l2=not settings['l2_unsquared'],
    ).validate(method=method)


def run_fit(settings, data, labels, lambda_=None):
    """One full run: (pretrain,) fit, cluster and score.

    @return: (RunReport, predicted labels)
    """
    start = time.time()
    method = settings['method']
    if method not in METHODS:
        raise UsageError(f"unknown method {method}, use one of {', '.join(METHODS)}")

    k = settings['k']
    if k is None:
        if labels is None:
            raise UsageError("fit: --k is required without --labels")
        k = int(np.unique(labels).size)

    config = train_config(settings, k, lambda_=lambda_)
    n_samples = data.shape[0]
    pretrain_epochs = 0
    param_total = 0

    if method == 'shallow':
        result = fit_shallow(data, config)
        flat = data.reshape(n_samples, -1)
        final_loss = (self_expression_residual(flat, result.coefficient) +
                      config.lambda_ * float(np.sum(result.coefficient.values ** 2)))
    else:
        spec = build_spec(settings['arch'], sample_shape=data.shape[1:])
        spec = spec.with_self_expressive(n_samples if method == 'dsc' else None)
        param_total = param_count(spec).total
        trainlog = TrainLog(settings['trainlog']) if settings['trainlog'] else None

        try:
            params = None
            if settings['init_checkpoint']:
                params = load_checkpoint(settings['init_checkpoint'])
            elif not settings['no_pretrain']:
                pretrain_epochs = settings['pretrain_epochs']
                ae_spec = spec.with_self_expressive(None)
                params = pretrain_autoencoder(ae_spec, data, config._replace(epochs=pretrain_epochs),
                                              trainlog=trainlog)

            if method == 'dcfsc':
                result = fit_dcfsc(spec, data, config, params=params, trainlog=trainlog)
            else:
                result = fit_dsc_baseline(spec, data, config, params=params, trainlog=trainlog)
        finally:
            if trainlog:
                trainlog.close()

        if settings['checkpoint']:
            save_checkpoint(settings['checkpoint'], result.final_params)
        final_loss = result.loss_history[-1] if result.loss_history else None

    cluster_config = ClusterConfig(k, threshold_ratio=settings['rho'], seed=settings['seed'],
                                   kmeans_restarts=settings['kmeans_restarts'])
    pred = cluster_from_coefficients(result.coefficient, cluster_config)
    error = clustering_error(pred, labels) if labels is not None else None

    report = RunReport(
        method=method,
        arch=None if method == 'shallow' else settings['arch'],
        lambda_=config.lambda_,
        lambda1=config.lambda1 if method == 'dsc' else None,
        lambda2=config.lambda2 if method == 'dsc' else None,
        learning_rate=None if method == 'shallow' else config.learning_rate,
        epochs=0 if method == 'shallow' else config.epochs,
        pretrain_epochs=pretrain_epochs,
        seed=settings['seed'],
        k=k,
        n_samples=n_samples,
        clustering_error=error,
        final_loss=final_loss,
        loss_history=list(result.loss_history),
        param_total=param_total,
        wall_seconds=time.time() - start,
    )
    _log.info("%s lambda %s: clustering error %s", method, config.lambda_, error)
    return report, pred


def report_dict(report):
    """Report as an ordered dict with a 'lambda' key"""
    result = OrderedDict()
    for name, value in report._asdict().items():
        result['lambda' if name == 'lambda_' else name] = value
    return result


def _write_text(path, text):
    try:
        with open(path, 'w') as fp:
            fp.write(text)
    except OSError as err:
        _log.raiseException(f"could not write {path}: {err}", IoFailure)


def cmd_fit(options):
    """Run one fit, write the JSON report and the predicted labels"""
    settings = _settings(options)
    data, labels = load_inputs(settings)
    report, pred = run_fit(settings, data, labels)

    text = json.dumps(report_dict(report), indent=2) + '\n'
    if settings['report']:
        _write_text(settings['report'], text)
        _log.info("Wrote report to %s", settings['report'])
    else:
        sys.stdout.write(text)

    pred_path = settings['pred']
    if pred_path is None and settings['report']:
        pred_path = os.path.splitext(settings['report'])[0] + '.labels.csv'
    if pred_path:
        save_labels(pred_path, pred)
    return 0


def parse_lambdas(lambda_list=None, lambda_range=None):
    """Lambda values of --lambda-list 'a,b,c' or --lambda-range 'START:STOP:xFACTOR'"""
    if bool(lambda_list) == bool(lambda_range):
        raise UsageError("sweep: give exactly one of --lambda-list and --lambda-range")

    if lambda_list:
        try:
            return [float(x) for x in lambda_list.split(',') if x.strip()]
        except ValueError:
            raise UsageError(f"sweep: bad --lambda-list {lambda_list}")

    try:
        start, stop, factor = lambda_range.split(':')
        start, stop = float(start), float(stop)
        if not factor.startswith('x'):
            raise ValueError("factor must be written as xF")
        factor = float(factor[1:])
    except ValueError as err:
        raise UsageError(f"sweep: bad --lambda-range {lambda_range}: {err}")
    if not (start > 0 and stop >= start and factor > 1):
        raise UsageError(f"sweep: --lambda-range needs 0 < START <= STOP and FACTOR > 1, got {lambda_range}")

    values = []
    idx = 0
    while start * factor ** idx <= stop * (1 + 1e-9):
        values.append(start * factor ** idx)
        idx += 1
    return values


def _sweep_row(args):
    """One sweep row; failures of the fit are recorded as 'error'"""
    settings, data, labels, lambda_ = args
    try:
        report, _ = run_fit(settings, data, labels, lambda_=lambda_)
    except UsageError:
        raise
    except SubspaceKitError as err:
        _log.warning("sweep: lambda %s failed: %s: %s", lambda_, err.__class__.__name__, err)
        return [lambda_, ERROR_VALUE, ERROR_VALUE, ERROR_VALUE]
    return [lambda_, report.clustering_error, report.final_loss, report.wall_seconds]


def sweep_workers(count):
    """Number of worker processes for count lambda values"""
    limit = os.environ.get(THREADS_ENV)
    try:
        workers = int(limit) if limit else multiprocessing.cpu_count()
    except ValueError:
        raise UsageError(f"${THREADS_ENV} must be an integer, got {limit}")
    return max(1, min(workers, count))


def cmd_sweep(options):
    """One fit per lambda with identical seed, written as a CSV table"""
    settings = _settings(options)
    if options.out is None:
        raise UsageError("sweep: --out is required")
    lambdas = parse_lambdas(options.lambda_list, options.lambda_range)

    data, labels = load_inputs(settings)
    jobs = [(settings, data, labels, lambda_) for lambda_ in lambdas]

    if options.parallel and len(jobs) > 1:
        with multiprocessing.Pool(sweep_workers(len(jobs))) as pool:
            rows = pool.map(_sweep_row, jobs)
    else:
        rows = [_sweep_row(job) for job in jobs]

    try:
        with open(options.out, 'w', newline='') as fp:
            writer = csv.writer(fp)
            writer.writerow(SWEEP_COLUMNS)
            for row in rows:
                writer.writerow(['' if value is None else value for value in row])
    except OSError as err:
        _log.raiseException(f"could not write {options.out}: {err}", IoFailure)

    _log.info("Wrote %d sweep rows to %s", len(rows), options.out)
    return 0


def cmd_params(options):
    """Print the per-layer and total parameter counts of --arch"""
    spec = build_spec(options.arch, n_samples=options.samples)
    audit = param_count(spec)

    for layer in audit.layers:
        print(f"{layer.name}\t{layer.count}")
    print(f"total\t{audit.total}")
    if spec.self_expressive:
        print(f"self-expressive bytes (64-bit)\t{self_expressive_bytes(spec.self_expressive)}")
    return 0


COMMAND_FUNCTIONS = {
    'synth': cmd_synth,
    'fit': cmd_fit,
    'sweep': cmd_sweep,
    'params': cmd_params,
}


def main(args=None):
    """Parse args (default: sys.argv), run the command and return the exit code"""
    options = SubspaceKitOption(go_args=args, go_useconfigfiles=False)

    try:
        if not options.args or options.args[0] not in COMMANDS:
            raise UsageError(f"first argument must be one of {', '.join(COMMANDS)}, got {options.args}")
        if len(options.args) > 1:
            raise UsageError(f"unexpected arguments {options.args[1:]}")
        return COMMAND_FUNCTIONS[options.args[0]](options.options)
    except UsageError as err:
        sys.stderr.write(f"UsageError: {err}\n")
        return 2
    except SubspaceKitError as err:
        sys.stderr.write(f"{err.__class__.__name__}: {err}\n")
        return 1
