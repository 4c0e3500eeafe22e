#!/usr/bin/env python
"""npe: neural posterior estimation training and experiment grids

Training minimises the negative mean conditional log density of the simulated
parameters given their observations with Adam, evaluates the validation loss after
every epoch and returns the model of the best validation epoch.
"""

from .utils import ConfigurationError, DegenerateDatasetError, NumericError, TrainingDivergedError
from .utils import DomainError, SolverError
from .utils import derive_seed as _derive_seed, write_json as _write_json
from .flow import ConditionalFlow, EncoderConfig, loss_and_gradients, log_prob, save_checkpoint
from .measurement import observe_batch, observe_joint, normalize_fit, normalize_fit_channels, OBSERVATION_LENGTH
from .population import INTEREST
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
import copy
import csv
import logging
import os
import time

import numpy as np
import torch

log = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
JOINT = '+'


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    epochs: int = 100
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    snr_db: float = 20.0
    site: str = None
    width: float = 0.2
    steps: int = 3
    hidden: int = None
    redraw: bool = True
    clip_norm: float = 10.0
    double: bool = False

    def violations(self):
        errors = []
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if not self.learning_rate > 0:
            errors.append("learning_rate must be > 0")
        if self.epochs < 0:
            errors.append("epochs must be >= 0")
        if not self.width > 0:
            errors.append("width must be > 0")
        return errors

    def to_dict(self):
        out = dict((f.name, getattr(self, f.name)) for f in fields(self))
        out['betas'] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        unknown = set(data) - set(f.name for f in fields(cls))
        if unknown:
            raise ConfigurationError("train config: unknown keys {}".format(", ".join(sorted(unknown))))
        if 'betas' in data:
            data['betas'] = tuple(data['betas'])
        return cls(**data)


@dataclass
class TrainingHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    def __len__(self):
        return len(self.val_loss)

    @property
    def best_epoch(self):
        """1-based epoch of the lowest validation loss, ties go to the earliest"""
        if not self.val_loss:
            return None
        return int(np.argmin(self.val_loss)) + 1

    @property
    def best_val_loss(self):
        return self.val_loss[self.best_epoch - 1] if self.val_loss else float('nan')

    def append(self, train, val, seconds):
        self.train_loss.append(float(train))
        self.val_loss.append(float(val))
        self.wall_time.append(float(seconds))

    def write_csv(self, path, force=False):
        if os.path.exists(path) and not force:
            raise FileExistsError("{} exists, use --force to overwrite".format(path))
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(('epoch', 'train_loss', 'val_loss', 'wall_time_s'))
            for i, row in enumerate(zip(self.train_loss, self.val_loss, self.wall_time)):
                writer.writerow([i + 1] + [repr(v) for v in row])


## Observation sources ##

class ArraySource(object):
    """Pre-generated (theta, x, age) arrays per split"""
    def __init__(self, theta, x, age=None, names=None):
        missing = [s for s in SPLITS if s not in theta or s not in x]
        if missing:
            raise ConfigurationError("source lacks splits: " + ", ".join(missing))
        self.theta = dict((s, np.asarray(theta[s], dtype=float).reshape(len(theta[s]), -1)) for s in SPLITS)
        self.x = dict((s, np.asarray(x[s], dtype=float).reshape(len(x[s]), -1)) for s in SPLITS)
        self.use_age = age is not None
        self.age = dict((s, np.asarray(age[s], dtype=float) if age is not None else np.zeros(len(self.x[s])))
                        for s in SPLITS)
        self.dim = self.theta['train'].shape[1]
        self.names = tuple(names) if names else tuple("theta{}".format(i) for i in range(self.dim))
        self.input_length = self.x['train'].shape[1]

    def encoder_config(self, width):
        return EncoderConfig(layers=(), width=width, input_length=self.input_length)

    def batch(self, split, epoch=0):
        return self.theta[split], self.x[split], self.age[split]


def split_sites(site):
    """'a+b' or ('a', 'b') -> ('a', 'b'); a single label -> (label,)"""
    if site is None:
        return ()
    if isinstance(site, str):
        return tuple(s for s in site.split(JOINT) if s)
    return tuple(site)


class WaveformSource(object):
    """Observations drawn through the measurement model from a SimulationDataset

    With redraw the training crops and noise are redrawn every epoch; validation and
    test observations always use their fixed seeds. A joint site such as
    'radial@1.00:ppg_proxy+radial@0.90:pressure' stacks the sites as channels cut from
    the same window.
    """
    def __init__(self, dataset, site, snr_db, seed=0, redraw=True, names=INTEREST):
        self.sites = split_sites(site)
        missing = [s for s in self.sites if s not in dataset.sites]
        if not self.sites or missing:
            raise ConfigurationError("dataset has no site {!r} (available: {})".format(
                JOINT.join(missing) or site, ", ".join(dataset.sites)))
        self.dataset = dataset
        self.site = JOINT.join(self.sites)
        self.snr_db = snr_db
        self.seed = seed
        self.redraw = redraw
        self.names = tuple(names)
        self.dim = len(self.names)
        self.use_age = True
        self.input_length = OBSERVATION_LENGTH
        self.channels = len(self.sites)
        self._cache = {}

    def encoder_config(self, width):
        return EncoderConfig(width=width, input_length=self.input_length, in_channels=self.channels)

    def _observe(self, split, seed):
        if self.channels == 1:
            return observe_batch(self.dataset.beats(split, self.site), self.dataset.ages(split), self.snr_db, seed)
        beats = list(zip(*(self.dataset.beats(split, s) for s in self.sites)))
        return observe_joint(beats, self.snr_db, seed)

    def batch(self, split, epoch=0):
        draw = epoch if (split == 'train' and self.redraw) else 0
        key = (split, draw)
        if key not in self._cache:
            x = self._observe(split, _derive_seed(self.seed, split, draw))
            self._cache = dict((k, v) for k, v in self._cache.items() if k[1] == 0)
            self._cache[key] = (self.dataset.interest(split), x, self.dataset.ages(split))
        return self._cache[key]


def fit_normalization(source):
    """(theta mean/std per dimension, x NormStats, age (mean, std)) on the train split

    Stacked observations get one NormStats value per channel.

    :raises DegenerateDatasetError: a parameter or the observations have zero spread
    """
    theta, x, age = source.batch('train', 0)
    std = theta.std(axis=0)
    if np.any(std == 0):
        raise DegenerateDatasetError("parameter(s) {} are constant on the train split".format(
            [source.names[i] for i in np.flatnonzero(std == 0)]))
    age_std = float(np.std(age))
    x_stats = normalize_fit_channels(x) if np.ndim(x) == 3 else normalize_fit(x)
    return (theta.mean(axis=0), std), x_stats, (float(np.mean(age)), age_std if age_std > 0 else 1.0)


def build_model(source, config):
    model = ConditionalFlow(source.dim, source.encoder_config(config.width), hidden=config.hidden,
                            steps=config.steps, seed=config.seed, use_age=source.use_age)
    if config.double:
        model = model.double()
    theta_stats, x_stats, age_stats = fit_normalization(source)
    model.set_normalization(theta=theta_stats, x=x_stats, age=age_stats)
    return model


def validation_loss(model, source, split='val'):
    theta, x, age = source.batch(split, 0)
    with torch.no_grad():
        return float(-log_prob(model, theta, x, age).mean())


def train(source, config=None, model=None):
    """Fit a ConditionalFlow to a source

    Arguments
    ----------
    :param source: ArraySource or WaveformSource with train/val/test splits
    :param TrainConfig config: Optimiser and model options
    :param ConditionalFlow model: Optional initial model, built from config otherwise

    Returns
    --------
    :return: Model with the weights of the best validation epoch and the history
    :rtype: (ConditionalFlow, TrainingHistory)

    Exceptions
    -----------
    :raises ConfigurationError: invalid config
    :raises TrainingDivergedError: the loss became non-finite
    """
    config = config or TrainConfig()
    problems = config.violations()
    if problems:
        raise ConfigurationError("invalid train config: " + "; ".join(problems))
    model = model or build_model(source, config)
    history = TrainingHistory()
    if config.epochs == 0:
        return model, history

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.betas,
                                 eps=config.eps, weight_decay=config.weight_decay)
    best_state = None
    for epoch in range(1, config.epochs + 1):
        started = time.time()
        theta, x, age = source.batch('train', epoch)
        n = len(theta)
        order = torch.randperm(n, generator=torch.Generator().manual_seed(_derive_seed(config.seed, 'shuffle', epoch)))
        total = 0.0
        model.train()
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size].numpy()
            try:
                loss, _ = loss_and_gradients(model, theta[idx], x[idx], age[idx], batch=b)
            except NumericError as err:
                raise TrainingDivergedError("training diverged in epoch {}: {}".format(epoch, err),
                                            history=history, batch=b, epoch=epoch)
            if config.clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
            optimizer.step()
            total += loss * len(idx)
        model.eval()
        try:
            val = validation_loss(model, source)
        except NumericError as err:
            raise TrainingDivergedError("validation diverged in epoch {}: {}".format(epoch, err),
                                        history=history, epoch=epoch)
        if not np.isfinite(val):
            raise TrainingDivergedError("validation loss is not finite in epoch {}".format(epoch),
                                        history=history, epoch=epoch)
        history.append(total / n, val, time.time() - started)
        if history.best_epoch == epoch:
            best_state = copy.deepcopy(model.state_dict())
        log.info("epoch %d: train %.4f val %.4f", epoch, total / n, val)

    model.load_state_dict(best_state)
    return model, history


def select_best(history, checkpoints):
    """Checkpoint of the best validation epoch (checkpoints[i] belongs to epoch i + 1)"""
    assert len(history) >= 1, "select_best needs at least one epoch"
    assert len(checkpoints) == len(history), "one checkpoint per epoch"
    return checkpoints[history.best_epoch - 1]


## Experiment grids ##

@dataclass(frozen=True, eq=False)
class RunResult:
    run_id: str
    site: str
    snr_db: float
    repeat: int
    model: object
    history: TrainingHistory
    metrics: dict


@dataclass(frozen=True, eq=False)
class GridResult:
    runs: dict
    failures: dict
    summary: list


def run_id(site, snr_db, repeat):
    snr = 'none' if snr_db is None else '{:g}'.format(snr_db)
    return "{}-snr{}-r{}".format(site, snr, repeat)


RUN_ARTIFACTS = ('model.ckpt', 'history.csv', 'metrics.json')


def _grid_cell(args):
    make_source, site, snr_db, repeat, seed, config, evaluate, out_dir, force = args
    rid = run_id(site, snr_db, repeat)
    folder = os.path.join(out_dir, rid) if out_dir else None
    if folder:
        existing = [name for name in RUN_ARTIFACTS if os.path.exists(os.path.join(folder, name))]
        if existing and not force:
            return 'failed', "FileExistsError: {} already holds {}, use --force to overwrite".format(
                folder, ", ".join(existing))
        os.makedirs(folder, exist_ok=True)
    try:
        source = make_source(site, snr_db, seed)
        cfg = replace(config, seed=seed, snr_db=snr_db, site=site)
        model, history = train(source, cfg)
        metrics = {'best_val_loss': history.best_val_loss}
        if evaluate is not None:
            metrics.update(evaluate(model, source))
        if folder:
            history.write_csv(os.path.join(folder, 'history.csv'), force=force)
            metadata = {'train': cfg.to_dict(), 'run_id': rid, 'site': site, 'snr_db': snr_db,
                        'names': list(source.names), 'source': getattr(source, 'metadata', {})}
            save_checkpoint(model, os.path.join(folder, 'model.ckpt'), metadata=metadata, force=force)
            _write_json(os.path.join(folder, 'metrics.json'), metrics, force=force)
        return 'ok', RunResult(rid, site, snr_db, repeat, model, history, metrics)
    except TrainingDivergedError as err:
        if folder and err.history is not None:
            err.history.write_csv(os.path.join(folder, 'history.csv'), force=force)
        return 'failed', "{}: {}".format(type(err).__name__, err)
    except (NumericError, DomainError, ConfigurationError, SolverError) as err:
        return 'failed', "{}: {}".format(type(err).__name__, err)


def summarize(runs):
    """Rows (site, snr_db, metric, mean, std, n) aggregated over repeats"""
    groups = {}
    for run in runs.values():
        for metric, value in run.metrics.items():
            groups.setdefault((run.site, run.snr_db, metric), []).append(float(value))
    rows = []
    for (site, snr, metric), values in sorted(groups.items(), key=lambda kv: (kv[0][0], -np.inf if kv[0][1] is None else kv[0][1], kv[0][2])):
        values = np.asarray(values)
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        rows.append({'site': site, 'snr_db': snr, 'metric': metric, 'mean': float(np.mean(values)),
                     'std': std, 'n': len(values)})
    return rows


def run_experiment_grid(make_source, sites, snr_levels, repeats=3, config=None, seeds=None,
                        evaluate=None, out_dir=None, workers=1, force=False):
    """Train one model per (site, SNR, repeat)

    Arguments
    ----------
    :param make_source: Callable (site, snr_db, seed) -> observation source
    :param sites: Site labels, a joint site as 'a+b' or a tuple of labels
    :param snr_levels: SNR levels in dB (None for noise free)
    :param int repeats: Training instances per cell
    :param TrainConfig config: Base training config, seed/site/snr are set per run
    :param seeds: Seed per repeat, defaults to config.seed + repeat
    :param evaluate: Optional callable (model, source) -> dict of metrics
    :param str out_dir: Write <run id>/{model.ckpt,history.csv,metrics.json} below it
    :param int workers: Worker processes, 1 runs the cells inline
    :param bool force: Replace the artifacts of earlier runs in out_dir, otherwise such
                       cells fail with a FileExistsError message

    Returns
    --------
    :return: Successful runs, failures by run id and the summary rows
    :rtype: GridResult
    """
    config = config or TrainConfig()
    seeds = list(seeds) if seeds is not None else [config.seed + r for r in range(repeats)]
    assert len(seeds) == repeats, "one seed per repeat"
    sites = [JOINT.join(split_sites(site)) for site in sites]
    jobs = [(make_source, site, snr, r, seeds[r], config, evaluate, out_dir, force)
            for site in sites for snr in snr_levels for r in range(repeats)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_grid_cell, jobs))
    else:
        outcomes = [_grid_cell(job) for job in jobs]

    runs, failures = {}, {}
    for job, (status, value) in zip(jobs, outcomes):
        rid = run_id(job[1], job[2], job[3])
        if status == 'ok':
            runs[rid] = value
        else:
            log.warning("run %s failed: %s", rid, value)
            failures[rid] = value
    return GridResult(runs=runs, failures=failures, summary=summarize(runs))
