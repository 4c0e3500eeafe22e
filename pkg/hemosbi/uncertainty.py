#!/usr/bin/env python
"""uncertainty: analyses of trained posteriors

Calibration from rank based credibility levels, size of credible intervals (SCI) on
a fixed grid of cells over the prior support, the information bound implied by an
SCI, a Laplace baseline, point estimate metrics and detection of multimodal
posteriors with the dip test.

Anything with sample(x, age, n, seed) and log_prob(theta, x, age) methods can be
analysed; FlowPosterior adapts a trained ConditionalFlow and ExactPosterior a toy
problem with a known posterior.
"""

from .utils import DomainError
from .utils import derive_seed as _derive_seed
from . import flow as _flow
from ._dip import dip_statistic as _dip_statistic
from dataclasses import dataclass, field
from functools import lru_cache
import logging
import math

from scipy.special import xlogy as _xlogy
from scipy.stats import pearsonr as _pearsonr
import numpy as np
import torch

log = logging.getLogger(__name__)

DEFAULT_LEVELS = (0.68, 0.95)
DEFAULT_CELLS = 100
MIN_DIP_SAMPLES = 200


class FlowPosterior(object):
    def __init__(self, model):
        self.model = model
        self.dim = model.dim

    def sample(self, x, age, n, seed=0):
        return _flow.sample(self.model, x, age, n, seed)

    def log_prob(self, theta, x, age):
        with torch.no_grad():
            return _flow.log_prob(self.model, theta, x, age).cpu().numpy().astype(float)


class ExactPosterior(object):
    """Posterior of a toy problem, scale != 1 shrinks/inflates the linear-Gaussian std"""
    def __init__(self, toy, scale=1.0, noise_sd=None):
        self.toy = toy
        self.dim = toy.dim
        self.scale = scale
        self.noise_sd = noise_sd

    def sample(self, x, age, n, seed=0):
        rng = np.random.default_rng(seed)
        if self.scale != 1.0:
            return self.toy.sample_posterior(x, age, n, rng, scale=self.scale, noise_sd=self.noise_sd)
        return self.toy.sample_posterior(x, age, n, rng, noise_sd=self.noise_sd)

    def log_prob(self, theta, x, age):
        return self.toy.log_posterior(theta, x, age, noise_sd=self.noise_sd)


def draw_samples(posterior, x, age, n_samples, seed=0):
    """Posterior samples per observation, (m, n_samples, k); observation i uses seed (seed, i)"""
    x = np.asarray(x, dtype=float)
    age = np.broadcast_to(np.asarray(age, dtype=float), (len(x),))
    return np.stack([np.asarray(posterior.sample(x[i], age[i], n_samples, _derive_seed(seed, i)))
                     .reshape(n_samples, -1) for i in range(len(x))])


## Calibration ##

def levels_from_samples(theta_star, samples):
    """Rank of theta* among the samples divided by their number, per dimension"""
    samples = np.asarray(samples, dtype=float)
    theta_star = np.asarray(theta_star, dtype=float).reshape(len(samples), 1, -1)
    return np.sum(samples < theta_star, axis=1) / float(samples.shape[1])


def credibility_levels(posterior, theta, x, age, n_samples=1000, seed=0):
    """Rank based credibility level of every true parameter, shape (m, k)"""
    assert n_samples >= 100, "credibility levels need at least 100 samples"
    return levels_from_samples(theta, draw_samples(posterior, x, age, n_samples, seed))


def calibration_score(levels, k=100):
    """Mean absolute gap between the empirical CDF of the levels and the uniform CDF

    Evaluated on the grid i / k, i = 1..k; 0 is perfect calibration, 0.5 the worst
    case. A 2D array gives one score per column.

    :raises DomainError: no levels or k < 10
    """
    levels = np.asarray(levels, dtype=float)
    if levels.size == 0:
        raise DomainError("calibration needs at least one level")
    if k < 10:
        raise DomainError("calibration grid needs k >= 10")
    grid = np.arange(1, k + 1) / float(k)
    if levels.ndim == 1:
        ecdf = np.mean(levels[:, None] <= grid[None, :], axis=0)
        return float(np.mean(np.abs(grid - ecdf)))
    return np.array([calibration_score(levels[:, j], k) for j in range(levels.shape[1])])


## Size of credible intervals ##

@dataclass(frozen=True)
class CredibleRegion:
    level: float
    cells: tuple
    cell_width: float
    low: float
    mass: float

    @property
    def size(self):
        return len(self.cells) * self.cell_width


def credible_region(samples, alpha, bounds, n_cells=DEFAULT_CELLS):
    """Smallest union of grid cells holding posterior mass >= alpha

    Cells are taken in descending count order, equal counts by ascending index.
    Samples outside bounds count in the edge cells. Returns (region, clipped count).
    """
    assert 0 < alpha <= 1, "alpha must be in (0, 1]"
    assert n_cells >= 10, "SCI needs at least 10 cells"
    samples = np.asarray(samples, dtype=float).reshape(-1)
    low, high = float(bounds[0]), float(bounds[1])
    width = (high - low) / n_cells
    index = np.floor((samples - low) / width).astype(int)
    clipped = int(np.sum((index < 0) | (index >= n_cells)))
    index = np.clip(index, 0, n_cells - 1)
    counts = np.bincount(index, minlength=n_cells)
    order = np.argsort(-counts, kind='stable')
    mass = np.cumsum(counts[order]) / float(len(samples))
    selected = int(np.searchsorted(mass, alpha - 1e-9)) + 1
    selected = min(selected, n_cells)
    region = CredibleRegion(level=alpha, cells=tuple(sorted(int(c) for c in order[:selected])),
                            cell_width=width, low=low, mass=float(mass[selected - 1]))
    return region, clipped


def sci_from_samples(samples, alpha, bounds, n_cells=DEFAULT_CELLS):
    """(number of cells, size in parameter units) of the alpha credible region"""
    region, _ = credible_region(samples, alpha, bounds, n_cells)
    return len(region.cells), region.size


@dataclass(frozen=True, eq=False)
class SciResult:
    level: float
    mean: float
    sizes: np.ndarray
    cells: np.ndarray
    clipped: int


def sci_table(samples, alpha, bounds, n_cells=DEFAULT_CELLS):
    """SCI per dimension of pre-drawn samples (m, n, k), one SciResult per dimension"""
    samples = np.asarray(samples, dtype=float)
    results = []
    for j in range(samples.shape[2]):
        cells, sizes, clipped = [], [], 0
        for i in range(samples.shape[0]):
            region, c = credible_region(samples[i, :, j], alpha, bounds[j], n_cells)
            cells.append(len(region.cells))
            sizes.append(region.size)
            clipped += c
        if clipped:
            log.warning("%d samples outside the prior support of dimension %d were clipped", clipped, j)
        sizes = np.asarray(sizes)
        results.append(SciResult(alpha, float(np.mean(sizes)), sizes, np.asarray(cells), clipped))
    return results


def sci(posterior, x, age, alpha, bounds, n_cells=DEFAULT_CELLS, n_samples=1000, seed=0):
    """Average size of the alpha credible interval per dimension over the observations"""
    return sci_table(draw_samples(posterior, x, age, n_samples, seed), alpha, bounds, n_cells)


def prior_sci(prior_samples, alpha, bounds, n_cells=DEFAULT_CELLS):
    """SCI of the prior itself, per dimension"""
    prior_samples = np.asarray(prior_samples, dtype=float)
    prior_samples = prior_samples.reshape(len(prior_samples), -1)
    return [sci_from_samples(prior_samples[:, j], alpha, bounds[j], n_cells)[1]
            for j in range(prior_samples.shape[1])]


def mi_bound(cells, alpha, total_cells):
    """Bits to encode the location of a parameter with an alpha region of `cells` cells

    -alpha log2(alpha / S) - (1 - alpha) log2((1 - alpha) / (N - S)), 0 log 0 = 0; the
    second term vanishes when S = N.

    :raises DomainError: S outside [1, N] or alpha outside [0, 1]
    """
    if not 1 <= cells <= total_cells:
        raise DomainError("need 1 <= S <= N, got S={} N={}".format(cells, total_cells))
    if not 0 <= alpha <= 1:
        raise DomainError("alpha must be in [0, 1]")
    bits = -_xlogy(alpha, alpha / float(cells))
    if cells < total_cells:
        bits -= _xlogy(1.0 - alpha, (1.0 - alpha) / float(total_cells - cells))
    return float(bits / math.log(2.0))


## Laplace baseline ##

@dataclass(frozen=True, eq=False)
class LaplaceResult:
    mean: np.ndarray
    covariance: np.ndarray
    fallback: bool
    sample_covariance: np.ndarray

    @property
    def std(self):
        return np.sqrt(np.diag(self.covariance))


def _hessian(log_prob, point, steps):
    """Central finite difference Hessian, all evaluations in one batch"""
    k = len(point)
    shifts = [np.zeros(k)]
    for i in range(k):
        for si in (1, -1):
            e = np.zeros(k)
            e[i] = si * steps[i]
            shifts.append(e)
    for i in range(k):
        for j in range(i + 1, k):
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                e = np.zeros(k)
                e[i], e[j] = si * steps[i], sj * steps[j]
                shifts.append(e)
    values = np.asarray(log_prob(point[None, :] + np.array(shifts)), dtype=float)
    f0 = values[0]
    hess = np.zeros((k, k))
    for i in range(k):
        plus, minus = values[1 + 2 * i], values[2 + 2 * i]
        hess[i, i] = (plus - 2.0 * f0 + minus) / steps[i] ** 2
    pos = 1 + 2 * k
    for i in range(k):
        for j in range(i + 1, k):
            pp, pm, mp, mm = values[pos:pos + 4]
            hess[i, j] = hess[j, i] = (pp - pm - mp + mm) / (4.0 * steps[i] * steps[j])
            pos += 4
    return hess


def laplace_baseline(posterior, x, age, n_samples=1000, seed=0, relative_step=1e-2):
    """Gaussian around the posterior sample mean with covariance -H^-1

    H is the finite difference Hessian of log_prob at the mean. When -H is not
    positive definite (eg between the modes of a bimodal posterior) the sample
    covariance is returned instead and fallback is set.
    """
    samples = np.asarray(posterior.sample(x, age, n_samples, seed), dtype=float).reshape(n_samples, -1)
    mean = samples.mean(axis=0)
    sample_cov = np.atleast_2d(np.cov(samples, rowvar=False))
    steps = relative_step * np.where(samples.std(axis=0) > 0, samples.std(axis=0), 1.0)
    hess = _hessian(lambda theta: posterior.log_prob(theta, x, age), mean, steps)
    try:
        if not np.all(np.isfinite(hess)):
            raise np.linalg.LinAlgError("non-finite Hessian")
        np.linalg.cholesky(-hess)
        cov = np.linalg.inv(-hess)
        cov = 0.5 * (cov + cov.T)
        fallback = False
    except np.linalg.LinAlgError:
        log.debug("Hessian not negative definite, using the sample covariance")
        cov, fallback = sample_cov, True
    return LaplaceResult(mean, cov, fallback, sample_cov)


## Point estimates ##

@dataclass(frozen=True)
class PointMetrics:
    mae: float
    correlation: float
    defined: bool


def point_estimate_metrics(estimates, labels):
    """MAE and Pearson correlation per parameter; correlation is nan (defined=False)
    when either side has zero variance

    :raises DomainError: fewer than 10 test points
    """
    estimates = np.asarray(estimates, dtype=float)
    labels = np.asarray(labels, dtype=float)
    estimates = estimates.reshape(len(estimates), -1)
    labels = labels.reshape(len(labels), -1)
    if len(labels) < 10:
        raise DomainError("point estimate metrics need at least 10 test points")
    out = []
    for j in range(labels.shape[1]):
        mae = float(np.mean(np.abs(estimates[:, j] - labels[:, j])))
        if np.std(labels[:, j]) == 0 or np.std(estimates[:, j]) == 0:
            out.append(PointMetrics(mae, float('nan'), False))
        else:
            out.append(PointMetrics(mae, float(_pearsonr(estimates[:, j], labels[:, j])[0]), True))
    return out


## Multimodality ##

@lru_cache(maxsize=32)
def calibrate_dip_threshold(n, quantile=0.95, trials=400, seed=0):
    """Dip value exceeded by standard normal samples of size n with probability 1 - quantile"""
    rng = np.random.default_rng(seed)
    dips = [_dip_statistic(np.sort(rng.standard_normal(n))) for _ in range(trials)]
    return float(np.quantile(dips, quantile))


def dip_multimodality(samples, threshold=None):
    """(dip statistic, dip > threshold) of a one dimensional sample

    The default threshold is calibrated on standard normal samples of the same size.

    :raises DomainError: fewer than 200 samples or not one dimensional
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 1:
        raise DomainError("dip test needs one dimensional samples")
    if len(samples) < MIN_DIP_SAMPLES:
        raise DomainError("dip test needs at least {} samples".format(MIN_DIP_SAMPLES))
    if threshold is None:
        threshold = calibrate_dip_threshold(len(samples))
    dip = _dip_statistic(np.sort(samples))
    return dip, dip > threshold


@dataclass(frozen=True, eq=False)
class Stratification:
    labels: list
    groups: dict
    sci: dict
    correlation: dict
    dips: np.ndarray


def population_stratify(samples, parameters=(0, 1), bounds=None, alpha=0.95, n_cells=DEFAULT_CELLS,
                        threshold=None):
    """Split observations into unimodal / multimodal posteriors

    An observation is multimodal when the marginal of any of the named parameters
    fails the dip test. Per group the mean SCI of every parameter and the mean sample
    correlation between the first two named parameters are reported.

    Arguments
    ----------
    :param samples: Posterior samples (m, n, k)
    :param parameters: Indices of the parameters to test
    :param bounds: Per dimension prior support, required for the SCI
    """
    samples = np.asarray(samples, dtype=float)
    m = samples.shape[0]
    dips = np.zeros((m, len(parameters)))
    labels = []
    for i in range(m):
        flagged = False
        for c, j in enumerate(parameters):
            dips[i, c], flag = dip_multimodality(samples[i, :, j], threshold)
            flagged = flagged or flag
        labels.append('multimodal' if flagged else 'unimodal')

    groups = {}
    for i, label in enumerate(labels):
        groups.setdefault(label, []).append(i)

    sci_by_group, corr_by_group = {}, {}
    for label, members in groups.items():
        group = samples[members]
        if bounds is not None:
            sci_by_group[label] = [r.mean for r in sci_table(group, alpha, bounds, n_cells)]
        if len(parameters) >= 2:
            a, b = parameters[0], parameters[1]
            values = []
            for obs in group:
                if np.std(obs[:, a]) > 0 and np.std(obs[:, b]) > 0:
                    values.append(np.corrcoef(obs[:, a], obs[:, b])[0, 1])
            corr_by_group[label] = float(np.mean(values)) if values else float('nan')
    return Stratification(labels, groups, sci_by_group, corr_by_group, dips)


## Reports ##

@dataclass(eq=False)
class UncertaintyReport:
    names: tuple
    calibration: dict
    sci: dict
    sci_std: dict
    prior_sci: dict
    mae: dict
    correlation: dict
    modality: dict = field(default_factory=dict)
    observations: list = field(default_factory=list)
    sci_cells: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self):
        def level_key(table):
            return dict((name, dict(('{:g}'.format(a), v) for a, v in levels.items()))
                        for name, levels in table.items())
        return {
            'parameters': list(self.names),
            'calibration': self.calibration,
            'sci': level_key(self.sci),
            'sci_std': level_key(self.sci_std),
            'prior_sci': level_key(self.prior_sci),
            'mae': self.mae,
            'correlation': dict((k, None if v != v else v) for k, v in self.correlation.items()),
            'modality': self.modality,
            'metadata': self.metadata,
        }

    def rows(self):
        return list(self.observations)


def analyze(posterior, theta, x, age, names, bounds, n_samples=1000, levels=DEFAULT_LEVELS,
            n_cells=DEFAULT_CELLS, seed=0, modality=False, prior_samples=None, k=100):
    """Every analysis of one posterior on one test set, from a single set of samples

    Arguments
    ----------
    :param posterior: FlowPosterior, ExactPosterior or compatible
    :param theta: True parameters (m, k)
    :param x: Observations (m, ...)
    :param age: Ages (m,)
    :param names: Parameter names
    :param bounds: Per parameter (low, high) prior support
    :param bool modality: Run the dip test on every marginal
    :param prior_samples: Optional prior draws for the prior SCI reference

    Returns
    --------
    :return: The aggregated and the per observation results
    :rtype: UncertaintyReport
    """
    theta = np.asarray(theta, dtype=float).reshape(len(theta), -1)
    samples = draw_samples(posterior, x, age, n_samples, seed)
    cred = levels_from_samples(theta, samples)
    calibration = calibration_score(cred, k)
    estimates = samples.mean(axis=1)
    metrics = point_estimate_metrics(estimates, theta)

    sci_mean, sci_std, sci_cells, per_obs = {}, {}, {}, {}
    for alpha in levels:
        for j, result in enumerate(sci_table(samples, alpha, bounds, n_cells)):
            sci_mean.setdefault(names[j], {})[alpha] = result.mean
            sci_std.setdefault(names[j], {})[alpha] = float(np.std(result.sizes))
            sci_cells.setdefault(names[j], {})[alpha] = result.cells
            per_obs[(names[j], alpha)] = result.sizes
    prior = {}
    if prior_samples is not None:
        for alpha in levels:
            for name, value in zip(names, prior_sci(prior_samples, alpha, bounds, n_cells)):
                prior.setdefault(name, {})[alpha] = value

    flags = {}
    if modality:
        for j, name in enumerate(names):
            flags[name] = [dip_multimodality(samples[i, :, j]) for i in range(len(samples))]

    rows = []
    for i in range(len(theta)):
        for j, name in enumerate(names):
            row = {'index': i, 'parameter': name, 'label': float(theta[i, j]),
                   'estimate': float(estimates[i, j]), 'credibility_level': float(cred[i, j])}
            for alpha in levels:
                row['sci_{:g}'.format(alpha)] = float(per_obs[(name, alpha)][i])
            if modality:
                row['dip'], row['multimodal'] = float(flags[name][i][0]), bool(flags[name][i][1])
            rows.append(row)

    return UncertaintyReport(
        names=tuple(names),
        calibration=dict(zip(names, (float(c) for c in calibration))),
        sci=sci_mean, sci_std=sci_std, prior_sci=prior,
        mae=dict((name, m.mae) for name, m in zip(names, metrics)),
        correlation=dict((name, m.correlation) for name, m in zip(names, metrics)),
        modality=dict((name, float(np.mean([f for _, f in flags[name]]))) for name in flags),
        observations=rows,
        sci_cells=sci_cells,
        metadata={'n_samples': n_samples, 'n_cells': n_cells, 'seed': seed, 'n_test': len(theta)},
    )
