#!/usr/bin/env python
"""cli: batch command line front end

    hemosbi simulate  --network tube1 [--params p.json | --prior-draw]
    hemosbi dataset   --network aorta_radial7 --n 400
    hemosbi train     --dataset runs/dataset-x --site radial@0.90:pressure --snr 0 20
    hemosbi train     --dataset runs/dataset-x --site radial@1.00:ppg_proxy+radial@0.90:pressure
    hemosbi train     --toy linear-gaussian
    hemosbi analyze   --checkpoint runs/train-x/*/model.ckpt --metrics sci calibration
    hemosbi report    runs/analyze-a runs/analyze-b

Every command writes into a run directory (--out, default
$HEMOSBI_OUTPUT_ROOT/<command>-<config hash>) starting with the merged config.json;
existing artifacts are never replaced without --force.

Exit codes: 0 success, 1 error, 2 finished with warnings.
"""

from .utils import ConfigurationError, DomainError, SolverError, NumericError, SimulationBudgetError
from .utils import ShapeError, SignalQualityError, DegenerateDatasetError
from .utils import read_json as _read_json, write_json as _write_json, stable_hash as _stable_hash
from .utils import derive_seed as _derive_seed, code_version as _code_version
from .vessel import load_network, validate_network
from .hemo import SolverConfig, simulate, save_waveform, export_csv
from .population import (ParameterVector, PriorSpec, default_prior, sample_prior, instantiate_network,
                         generate_dataset, save_dataset, load_dataset, INTEREST)
from .npe import TrainConfig, WaveformSource, run_experiment_grid
from .flow import load_checkpoint
from .toys import make_toy, TOYS
from .uncertainty import FlowPosterior, analyze, laplace_baseline, mi_bound
from dataclasses import asdict, dataclass, field, fields
import argparse
import csv
import logging
import math
import os
import sys

import numpy as np

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_WARNING = 2

OUTPUT_ROOT_ENV = 'HEMOSBI_OUTPUT_ROOT'
DEFAULT_OUTPUT_ROOT = 'runs'
METRICS = ('calibration', 'sci', 'point', 'laplace', 'modality')

# errors reported as a one line message with exit code 1
USER_ERRORS = (ConfigurationError, DomainError, SolverError, NumericError, SimulationBudgetError,
               ShapeError, SignalQualityError, DegenerateDatasetError, FileExistsError, FileNotFoundError)


@dataclass(frozen=True)
class RunConfig:
    command: str
    seed: int = 0
    workers: int = 1
    force: bool = False
    out: str = None
    options: dict = field(default_factory=dict)

    def to_dict(self):
        return dict((f.name, getattr(self, f.name)) for f in fields(self))

    @property
    def hash(self):
        data = self.to_dict()
        data.pop('out')
        data.pop('force')
        data.pop('workers')
        return _stable_hash(data)

    def run_dir(self):
        if self.out:
            return self.out
        root = os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)
        return os.path.join(root, "{}-{}".format(self.command, self.hash[:10]))

    def get(self, name, default=None):
        value = self.options.get(name)
        return default if value is None else value


## Argument parsing ##

def _common():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=None, help="master seed (default 0)")
    common.add_argument('--workers', type=int, default=None,
                        help="worker processes (default: number of cores)")
    common.add_argument('--force', action='store_true', default=None,
                        help="overwrite existing artifacts in the run directory")
    common.add_argument('--config', default=None, help="JSON config file, flags override it")
    common.add_argument('--out', default=None, help="run directory")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help="debug logging")
    verbosity.add_argument('-q', '--quiet', action='store_true', help="warnings only")
    return common


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog='hemosbi', description=__doc__.split("\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest='command')

    p = sub.add_parser('simulate', parents=[common], help="simulate one subject")
    p.add_argument('--network', default=None, help="bundled network name or JSON file (default tube1)")
    group = p.add_mutually_exclusive_group()
    group.add_argument('--params', default=None, help="JSON file with the subject parameters")
    group.add_argument('--prior-draw', action='store_true', default=None,
                       help="draw the subject from the default prior")
    p.add_argument('--dx', type=float, default=None, help="target cell width in m")
    p.add_argument('--rate', type=float, default=None, help="output sampling rate in Hz")
    p.add_argument('--max-cycles', type=int, default=None)
    p.add_argument('--tolerance', type=float, default=None)
    p.add_argument('--limiter', choices=('minmod', 'mc', 'superbee'), default=None)

    p = sub.add_parser('dataset', parents=[common], help="generate a simulated population")
    p.add_argument('--network', default=None, help="template network (default aorta_radial7)")
    p.add_argument('--prior', default=None, help="prior spec JSON (default: derived from the template)")
    p.add_argument('--n', type=int, default=None, help="number of subjects")
    p.add_argument('--dx', type=float, default=None)

    p = sub.add_parser('train', parents=[common], help="train posterior estimators")
    src = p.add_mutually_exclusive_group()
    src.add_argument('--dataset', default=None, help="dataset directory")
    src.add_argument('--toy', choices=sorted(TOYS), default=None)
    p.add_argument('--site', nargs='+', default=None,
                   help="measurement site labels, join labels with '+' to observe them together")
    p.add_argument('--snr', nargs='+', default=None, help="SNR levels in dB ('none' for noise free)")
    p.add_argument('--repeats', type=int, default=None)
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--batch-size', type=int, default=None)
    p.add_argument('--learning-rate', type=float, default=None)
    p.add_argument('--width', type=float, default=None)
    p.add_argument('--fixed-noise', action='store_true', default=None,
                   help="one noisy copy per record instead of redrawing every epoch")
    p.add_argument('--toy-size', type=int, nargs=3, default=None, metavar=('TRAIN', 'VAL', 'TEST'))

    p = sub.add_parser('analyze', parents=[common], help="uncertainty analysis of trained models")
    p.add_argument('--checkpoint', nargs='+', default=None, help="model checkpoints")
    p.add_argument('--dataset', default=None, help="dataset directory the models were trained on")
    p.add_argument('--metrics', nargs='*', default=None,
                   help="any of {}".format(", ".join(METRICS)))
    p.add_argument('--snr', nargs='+', default=None,
                   help="evaluate at these SNR levels instead of the training SNR")
    p.add_argument('--samples', type=int, default=None, help="posterior samples per observation")
    p.add_argument('--cells', type=int, default=None, help="SCI cells per parameter")
    p.add_argument('--laplace-count', type=int, default=None,
                   help="test observations used for the Laplace comparison")

    p = sub.add_parser('report', parents=[common], help="consolidate analysis runs")
    p.add_argument('runs', nargs='*', help="analysis run directories")
    return parser


def _snr(value):
    if value is None or str(value).lower() in ('none', 'inf'):
        return None
    return float(value)


GLOBALS = ('seed', 'workers', 'out')


def merge_config(args):
    """Defaults, overridden by the config file, overridden by explicit flags

    The file is either flat ({"n": 50, "seed": 3}) or a config.json written by an
    earlier run ({"seed": 3, "options": {...}}).
    """
    data = {}
    if args.config:
        data = _read_json(args.config)
        if not isinstance(data, dict):
            raise ConfigurationError("{}: expected a JSON object".format(args.config))
    options = dict(data.get('options', data))
    for name in GLOBALS + ('command', 'force', 'code_version'):
        options.pop(name, None)
    skip = {'command', 'config', 'verbose', 'quiet', 'force'} | set(GLOBALS)
    for name, value in vars(args).items():
        if name not in skip and value is not None:
            options[name] = value

    def pick(name, default):
        value = getattr(args, name)
        return data.get(name, default) if value is None else value

    return RunConfig(command=args.command, seed=pick('seed', 0),
                     workers=pick('workers', os.cpu_count() or 1),
                     force=bool(args.force), out=pick('out', None), options=options)


def _prepare(run):
    path = run.run_dir()
    os.makedirs(path, exist_ok=True)
    _write_json(os.path.join(path, 'config.json'), dict(run.to_dict(), code_version=_code_version()),
                force=run.force)
    log.info("run directory %s", path)
    return path


def _solver_config(run):
    cfg = SolverConfig()
    changes = {}
    for option, name in (('dx', 'dx'), ('rate', 'sampling_rate'), ('max_cycles', 'max_cycles'),
                         ('tolerance', 'tolerance'), ('limiter', 'limiter')):
        if run.get(option) is not None:
            changes[name] = run.get(option)
    return SolverConfig.from_dict(dict(cfg.to_dict(), **changes))


## simulate ##

def cmd_simulate(run):
    net = load_network(run.get('network', 'tube1'))
    report = validate_network(net)
    if report:
        for violation in report:
            sys.stderr.write("{}\n".format(violation))
        raise ConfigurationError("invalid network {}".format(net.name))

    subject = None
    if run.get('params'):
        subject = ParameterVector(**_read_json(run.get('params')))
    elif run.get('prior_draw'):
        subject = sample_prior(default_prior(net), run.seed, 1)[0]
    if subject is not None:
        net = instantiate_network(net, subject)

    path = _prepare(run)
    result = simulate(net, _solver_config(run))
    folder = os.path.join(path, 'waveforms')
    os.makedirs(folder, exist_ok=True)
    records = dict(result.records)
    records['root_pressure'] = result.root_pressure
    records['root_flow'] = result.root_flow
    if result.path_end_pressure is not None:
        records['path_end_pressure'] = result.path_end_pressure
    for label, record in sorted(records.items()):
        stem = os.path.join(folder, label.replace('@', '_at_').replace(':', '_'))
        save_waveform(record, stem, force=run.force)
        export_csv(record, stem + '.csv')

    d = result.diagnostics
    diagnostics = {'cycles': d.cycles, 'residual': d.residual, 'converged': d.converged,
                   'steps': d.steps, 'volume_drift_m3': d.volume_drift, 'relative_drift': d.relative_drift,
                   'subject': asdict(subject) if subject is not None else None}
    _write_json(os.path.join(path, 'diagnostics.json'), diagnostics, force=run.force)
    print("{}: {} cycles, residual {:.2e}{}".format(net.name, d.cycles, d.residual,
                                                   "" if d.converged else " (not converged)"))
    return EXIT_OK if d.converged else EXIT_WARNING


## dataset ##

def cmd_dataset(run):
    template = load_network(run.get('network', 'aorta_radial7'))
    spec = PriorSpec.from_dict(_read_json(run.get('prior'))) if run.get('prior') else default_prior(template)
    n = int(run.get('n', 400))
    if n < 10:
        raise ConfigurationError("n too small: a dataset needs at least 10 subjects")
    path = _prepare(run)
    config = _solver_config(run)
    dataset = generate_dataset(spec, template, n, run.seed, workers=run.workers, config=config)
    save_dataset(dataset, os.path.join(path, 'dataset'), force=run.force)
    sizes = [len(dataset.indices(s)) for s in ('train', 'val', 'test')]
    print("{} / {} / {}".format(*sizes))
    return EXIT_WARNING if dataset.failures else EXIT_OK


## train ##

def parameter_bounds(dataset):
    """Prior support of the sampled parameters, widened data range of the derived ones"""
    bounds = []
    for j, name in enumerate(INTEREST):
        if name in dataset.prior.marginals:
            bounds.append(dataset.prior.marginals[name].support)
        elif name == 'lvet':
            bounds.append((dataset.prior.lvet.low, dataset.prior.lvet.high))
        else:
            values = np.array([s.params.interest_array()[j] for s in dataset.subjects])
            low, high = float(np.min(values)), float(np.max(values))
            pad = 0.1 * (high - low) if high > low else 0.1 * abs(high) or 1.0
            bounds.append((low - pad, high + pad))
    return bounds


class DatasetSources(object):
    """Source factory for a dataset directory, picklable for worker processes"""
    def __init__(self, path, redraw=True):
        self.path = path
        self.redraw = redraw
        self._dataset = None

    @property
    def dataset(self):
        if self._dataset is None:
            self._dataset = load_dataset(self.path)
        return self._dataset

    def __getstate__(self):
        return {'path': self.path, 'redraw': self.redraw, '_dataset': None}

    def __call__(self, site, snr_db, seed):
        source = WaveformSource(self.dataset, site, snr_db, seed=seed, redraw=self.redraw)
        source.metadata = {'kind': 'dataset', 'path': os.path.abspath(self.path),
                           'dataset_hash': self.dataset.hash, 'seed': seed,
                           'bounds': parameter_bounds(self.dataset)}
        return source


class ToySources(object):
    """Source factory for a toy problem; the SNR sets the noise level of the toy"""
    def __init__(self, name, sizes=(2000, 500, 200)):
        self.name = name
        self.sizes = tuple(sizes)

    def noise_sd(self, toy, snr_db):
        if snr_db is None:
            return toy.noise_sd
        if hasattr(toy, 'prior_sd'):
            signal = toy.prior_sd
        else:
            signal = (toy.high - toy.low) / math.sqrt(12.0)
        return signal / 10.0 ** (snr_db / 20.0)

    def __call__(self, site, snr_db, seed):
        toy = make_toy(self.name)
        source = toy.source(*self.sizes, seed=seed, noise_sd=self.noise_sd(toy, snr_db))
        source.metadata = {'kind': 'toy', 'toy': self.name, 'sizes': list(self.sizes), 'seed': seed,
                           'snr_db': snr_db, 'bounds': [list(b) for b in toy.bounds]}
        return source


def cmd_train(run):
    toy, dataset = run.get('toy'), run.get('dataset')
    if not toy and not dataset:
        raise ConfigurationError("train needs --dataset or --toy")
    cfg = TrainConfig()
    changes = dict(seed=run.seed)
    for option, name in (('epochs', 'epochs'), ('batch_size', 'batch_size'),
                         ('learning_rate', 'learning_rate'), ('width', 'width')):
        if run.get(option) is not None:
            changes[name] = run.get(option)
    if run.get('fixed_noise'):
        changes['redraw'] = False
    cfg = TrainConfig.from_dict(dict(cfg.to_dict(), **changes))

    if toy:
        sources = ToySources(toy, run.get('toy_size', (2000, 500, 200)))
        sites = [toy]
        snrs = [_snr(s) for s in run.get('snr', ['none'])]
    else:
        sources = DatasetSources(dataset, redraw=cfg.redraw)
        sites = run.get('site') or sources.dataset.sites[:1]
        snrs = [_snr(s) for s in run.get('snr', [cfg.snr_db])]

    path = _prepare(run)
    repeats = int(run.get('repeats', 1))
    seeds = [_derive_seed(run.seed, r) for r in range(repeats)]
    grid = run_experiment_grid(sources, sites, snrs, repeats=repeats, config=cfg, seeds=seeds,
                               out_dir=path, workers=min(run.workers, len(sites) * len(snrs) * repeats),
                               force=run.force)
    _write_csv(os.path.join(path, 'summary.csv'), grid.summary,
               ('site', 'snr_db', 'metric', 'mean', 'std', 'n'), run.force)
    for rid, message in sorted(grid.failures.items()):
        sys.stderr.write("{}: {}\n".format(rid, message))
    print("{} runs trained, {} failed".format(len(grid.runs), len(grid.failures)))
    return EXIT_ERROR if grid.failures else EXIT_OK


## analyze ##

def _source_for(meta, snr_db, dataset_path, force):
    info = meta.get('source', {})
    if info.get('kind') == 'toy':
        return ToySources(info['toy'], info['sizes'])(meta.get('site'), snr_db, info['seed']), info['bounds']
    path = dataset_path or info.get('path')
    if not path:
        raise ConfigurationError("checkpoint does not name its dataset, use --dataset")
    factory = DatasetSources(path)
    if factory.dataset.hash != info.get('dataset_hash') and not force:
        raise ConfigurationError("dataset hash does not match the checkpoint (use --force to analyse anyway)")
    return factory(meta['site'], snr_db, info.get('seed', 0)), parameter_bounds(factory.dataset)


def cmd_analyze(run):
    metrics = run.get('metrics')
    if not metrics:
        raise ConfigurationError("no metrics selected (usage: --metrics {})".format(" ".join(METRICS)))
    unknown = sorted(set(metrics) - set(METRICS))
    if unknown:
        raise ConfigurationError("unknown metrics {} (choose from {})".format(", ".join(unknown), ", ".join(METRICS)))
    checkpoints = run.get('checkpoint') or []
    if not checkpoints:
        raise ConfigurationError("analyze needs at least one --checkpoint")
    n_samples = int(run.get('samples', 1000))
    n_cells = int(run.get('cells', 100))
    laplace_count = int(run.get('laplace_count', 20))
    path = _prepare(run)

    entries, per_obs, laplace_rows, ids = [], [], [], set()
    for ckpt in checkpoints:
        model, meta = load_checkpoint(ckpt)
        cid = meta.get('run_id') or os.path.basename(os.path.dirname(os.path.abspath(ckpt)))
        while cid in ids:
            cid += "'"
        ids.add(cid)
        sweep = [_snr(s) for s in run.get('snr')] if run.get('snr') else [meta.get('snr_db')]
        for snr_db in sweep:
            source, bounds = _source_for(meta, snr_db, run.get('dataset'), run.force)
            theta, x, age = source.batch('test', 0)
            train_theta = source.batch('train', 0)[0]
            posterior = FlowPosterior(model)
            report = analyze(posterior, theta, x, age, source.names, bounds, n_samples=n_samples,
                             n_cells=n_cells, seed=run.seed, modality='modality' in metrics,
                             prior_samples=train_theta)
            body = report.to_json()
            selected = dict((k, body[k]) for k in ('parameters', 'metadata'))
            for metric, keys in (('calibration', ('calibration',)), ('sci', ('sci', 'sci_std', 'prior_sci')),
                                 ('point', ('mae', 'correlation')), ('modality', ('modality',))):
                if metric in metrics:
                    selected.update((k, body[k]) for k in keys)
            if 'sci' in metrics:
                selected['mi_bits'] = information_bits(report, n_cells)
            entries.append({'checkpoint': cid, 'site': meta.get('site'), 'snr_db': snr_db, 'report': selected})
            for row in report.rows():
                per_obs.append(dict(row, checkpoint=cid, snr_db=snr_db))
            if 'laplace' in metrics:
                for i in range(min(laplace_count, len(theta))):
                    result = laplace_baseline(posterior, x[i], age[i], n_samples, _derive_seed(run.seed, i))
                    samples = posterior.sample(x[i], age[i], n_samples, _derive_seed(run.seed, i))
                    for j, name in enumerate(source.names):
                        laplace_rows.append({
                            'checkpoint': cid, 'snr_db': snr_db, 'index': i, 'parameter': name,
                            'label': float(theta[i, j]), 'laplace_mean': float(result.mean[j]),
                            'laplace_std': float(result.std[j]), 'npe_mean': float(samples[:, j].mean()),
                            'npe_std': float(samples[:, j].std()), 'fallback': result.fallback})

    _write_json(os.path.join(path, 'report.json'), {'runs': entries}, force=run.force)
    if per_obs:
        _write_csv(os.path.join(path, 'report.csv'), per_obs, ['checkpoint', 'snr_db'] +
                   [k for k in per_obs[0] if k not in ('checkpoint', 'snr_db')], run.force)
    if 'sci' in metrics:
        _write_csv(os.path.join(path, 'fig2_sci.csv'), sci_rows(entries),
                   ('site', 'snr_db', 'parameter', 'level', 'sci_mean', 'sci_std'), run.force)
    if 'laplace' in metrics:
        _write_csv(os.path.join(path, 'fig3_laplace.csv'), laplace_rows,
                   ('checkpoint', 'snr_db', 'index', 'parameter', 'label', 'laplace_mean', 'laplace_std',
                    'npe_mean', 'npe_std', 'fallback'), run.force)
    print("analysed {} checkpoint(s), {} report(s)".format(len(checkpoints), len(entries)))
    return EXIT_OK


def information_bits(report, n_cells):
    """Information bound in bits per parameter and level, averaged over the observations

    Every observation enters mi_bound with the cell count of its own region.
    """
    bits = {}
    for name, levels in report.sci_cells.items():
        for alpha, cells in levels.items():
            values = [mi_bound(int(c), alpha, n_cells) for c in np.clip(cells, 1, n_cells)]
            bits.setdefault(name, {})['{:g}'.format(alpha)] = float(np.mean(values))
    return bits


def sci_rows(entries):
    """Mean/std of the SCI over the checkpoints (repeats) of every (site, snr, parameter, level)"""
    groups = {}
    for entry in entries:
        for name, levels in entry['report'].get('sci', {}).items():
            for level, value in levels.items():
                key = (entry['site'], entry['snr_db'], name, level)
                groups.setdefault(key, []).append(value)
    rows = []
    for (site, snr, name, level), values in sorted(groups.items(), key=_sort_key):
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        rows.append({'site': site, 'snr_db': snr, 'parameter': name, 'level': level,
                     'sci_mean': float(np.mean(values)), 'sci_std': std})
    return rows


def _sort_key(item):
    site, snr, name, level = item[0]
    return (str(site), -math.inf if snr is None else snr, name, float(level))


## report ##

def cmd_report(run):
    runs = run.get('runs') or []
    if not runs:
        raise ConfigurationError("report needs at least one run directory")
    entries, missing = [], []
    for folder in runs:
        report = os.path.join(folder, 'report.json')
        if not os.path.exists(report):
            missing.append(folder)
            continue
        entries.extend(_read_json(report)['runs'])

    path = _prepare(run)
    rows = sci_rows(entries)
    _write_csv(os.path.join(path, 'summary.csv'), rows,
               ('site', 'snr_db', 'parameter', 'level', 'sci_mean', 'sci_std'), run.force)
    lines = ["# SCI summary", ""]
    for name in sorted(set(r['parameter'] for r in rows)):
        lines += ["## {}".format(name), "", "| site | SNR (dB) | level | SCI mean | SCI std |",
                  "|---|---|---|---|---|"]
        for r in rows:
            if r['parameter'] == name:
                snr = 'none' if r['snr_db'] is None else '{:g}'.format(r['snr_db'])
                lines.append("| {} | {} | {} | {:.6g} | {:.6g} |".format(
                    r['site'], snr, r['level'], r['sci_mean'], r['sci_std']))
        lines.append("")
    if missing:
        lines += ["Missing reports: " + ", ".join(missing), ""]
    md = os.path.join(path, 'report.md')
    if os.path.exists(md) and not run.force:
        raise FileExistsError("{} exists, use --force to overwrite".format(md))
    with open(md, 'w', encoding='utf-8') as f:
        f.write("\n".join(lines))
    for folder in missing:
        sys.stderr.write("missing report: {}\n".format(folder))
    return EXIT_WARNING if missing else EXIT_OK


def _write_csv(path, rows, columns, force=False):
    if os.path.exists(path) and not force:
        raise FileExistsError("{} exists, use --force to overwrite".format(path))

    def cell(value):
        if value is None:
            return ''
        return repr(value) if isinstance(value, float) else value

    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction='ignore')
        writer.writeheader()
        for row in rows:
            writer.writerow(dict((c, cell(row.get(c))) for c in columns))


COMMANDS = {'simulate': cmd_simulate, 'dataset': cmd_dataset, 'train': cmd_train,
            'analyze': cmd_analyze, 'report': cmd_report}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_ERROR if err.code else EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_ERROR

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    try:
        run = merge_config(args)
        return COMMANDS[args.command](run)
    except USER_ERRORS as err:
        sys.stderr.write("hemosbi {}: {}\n".format(args.command, err))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
