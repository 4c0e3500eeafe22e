#!/usr/bin/env python
"""population: prior over subjects, dataset generation and biomarker derivation

A subject is a ParameterVector: the five biomarkers of interest (HR, LVET, Diameter,
PWV, SVR), the nuisance parameters needed to run the solver and the age covariate.
PWV and SVR are not sampled, they are measured on the simulated waveforms and filled
in by generate_dataset.
"""

from .utils import ConfigurationError, DomainError, SignalQualityError, SolverError
from .utils import SimulationBudgetError
from .utils import derive_seed as _derive_seed, stable_hash as _stable_hash
from .utils import write_json as _write_json, read_json as _read_json, code_version as _code_version
from .vessel import HeartFunction, validate_network, path_length, network_to_dict, network_from_dict
from .hemo import SolverConfig, simulate, resample_record, save_waveform, load_waveform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace, asdict
import csv
import logging
import math
import os

from scipy.stats import truncnorm as _truncnorm
import numpy as np

log = logging.getLogger(__name__)

INTEREST = ('hr', 'lvet', 'diameter', 'pwv', 'svr')
NUISANCE = ('sv', 'pft', 'rfv', 'e_scale', 'r_scale', 'c_scale', 'length_scale')
SAMPLED = ('hr', 'diameter') + NUISANCE

UNITS = {
    'hr': 'bpm', 'lvet': 's', 'diameter': 'm', 'pwv': 'm_s', 'svr': 'pa_s_m3',
    'sv': 'm3', 'pft': 's', 'rfv': '1', 'e_scale': '1', 'r_scale': '1', 'c_scale': '1',
    'length_scale': '1', 'age': 'years', 'map': 'pa',
}

SPLITS = ('train', 'val', 'test')
SPLIT_FRACTIONS = (0.7, 0.1)
MAX_FAILURE_FRACTION = 0.1
STORAGE_RATE = 125.0
BIOMARKER_RATE = 1000.0


@dataclass(frozen=True)
class ParameterVector:
    hr: float
    lvet: float
    diameter: float
    sv: float
    pft: float
    rfv: float = 0.0
    e_scale: float = 1.0
    r_scale: float = 1.0
    c_scale: float = 1.0
    length_scale: float = 1.0
    age: float = 50.0
    pwv: float = float('nan')
    svr: float = float('nan')
    id: int = 0

    def interest_array(self):
        return np.array([getattr(self, name) for name in INTEREST], dtype=float)

    def nuisance_array(self):
        return np.array([getattr(self, name) for name in NUISANCE], dtype=float)

    @property
    def heart(self):
        return HeartFunction(heart_rate=self.hr, stroke_volume=self.sv, lvet=self.lvet,
                             pft=self.pft, rfv=self.rfv)

    def with_derived(self, pwv, svr):
        return replace(self, pwv=float(pwv), svr=float(svr))

    def violations(self):
        errors = []
        for name in ('hr', 'lvet', 'diameter', 'sv', 'pft', 'e_scale', 'r_scale', 'c_scale',
                     'length_scale', 'age'):
            if not getattr(self, name) > 0:
                errors.append("{} must be > 0".format(name))
        if not self.lvet < 60.0 / self.hr:
            errors.append("LVET must be shorter than the beat period")
        return errors + self.heart.violations()


@dataclass(frozen=True)
class Marginal:
    """One prior marginal

    family is 'uniform' (low, high), 'truncnorm' (loc, scale truncated to [low, high])
    or 'point' (loc). age_curve holds (age, shift) knots of a piecewise linear
    location shift; uniform bounds move with the shift, the truncnorm location moves
    inside fixed bounds.
    """
    family: str
    low: float = None
    high: float = None
    loc: float = None
    scale: float = None
    age_curve: tuple = ()

    def violations(self):
        if self.family == 'point':
            return [] if self.loc is not None else ["point mass needs loc"]
        if self.family not in ('uniform', 'truncnorm'):
            return ["unknown family {!r}".format(self.family)]
        if self.low is None or self.high is None or not self.low <= self.high:
            return ["bounds must satisfy low <= high"]
        if self.family == 'truncnorm' and not (self.scale is not None and self.scale > 0 and self.loc is not None):
            return ["truncnorm needs loc and scale > 0"]
        return []

    def shift(self, age):
        if not self.age_curve:
            return np.zeros_like(np.asarray(age, dtype=float))
        knots = np.asarray(self.age_curve, dtype=float)
        return np.interp(age, knots[:, 0], knots[:, 1])

    def sample(self, rng, age):
        age = np.asarray(age, dtype=float)
        n = len(age)
        if self.family == 'point':
            return np.full(n, float(self.loc))
        shift = self.shift(age)
        if self.family == 'uniform':
            return rng.uniform(self.low + shift, self.high + shift) if self.high > self.low \
                else self.low + shift
        loc = self.loc + shift
        a, b = (self.low - loc) / self.scale, (self.high - loc) / self.scale
        return _truncnorm.rvs(a, b, loc=loc, scale=self.scale, size=n, random_state=rng)

    @property
    def support(self):
        if self.family == 'point':
            return float(self.loc), float(self.loc)
        if self.family == 'truncnorm' or not self.age_curve:
            return float(self.low), float(self.high)
        shifts = [s for _, s in self.age_curve]
        return float(self.low + min(shifts)), float(self.high + max(shifts))

    def to_dict(self):
        out = dict((f.name, getattr(self, f.name)) for f in fields(self))
        out['age_curve'] = [list(knot) for knot in self.age_curve]
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['age_curve'] = tuple(tuple(knot) for knot in data.get('age_curve', ()))
        unknown = set(data) - set(f.name for f in fields(cls))
        if unknown:
            raise ConfigurationError("marginal: unknown keys {}".format(", ".join(sorted(unknown))))
        return cls(**data)


@dataclass(frozen=True)
class LvetLink:
    """LVET = c0 - c1 HR + c_sv (SV - sv_ref) + N(0, jitter_sd), kept inside [low, high]"""
    c0: float = 0.413
    c1: float = 0.0017
    c_sv: float = 1000.0
    sv_ref: float = 70e-6
    jitter_sd: float = 0.01
    low: float = 0.2
    high: float = 0.4

    def deterministic(self, hr, sv):
        return self.c0 - self.c1 * np.asarray(hr) + self.c_sv * (np.asarray(sv) - self.sv_ref)

    def sample(self, rng, hr, sv):
        lvet = self.deterministic(hr, sv)
        if self.jitter_sd > 0:
            lvet = lvet + rng.normal(0.0, self.jitter_sd, size=np.shape(lvet))
        return lvet


@dataclass(frozen=True)
class PriorSpec:
    marginals: dict
    lvet: LvetLink = field(default_factory=LvetLink)
    age: Marginal = field(default_factory=lambda: Marginal('uniform', 25.0, 75.0))
    max_rounds: int = 100

    def violations(self):
        errors = []
        missing = [name for name in SAMPLED if name not in self.marginals]
        if missing:
            errors.append("missing marginals: " + ", ".join(missing))
        for name, marginal in sorted(self.marginals.items()):
            if name not in SAMPLED:
                errors.append("unknown parameter {!r}".format(name))
            errors.extend("{}: {}".format(name, e) for e in marginal.violations())
        errors.extend("age: {}".format(e) for e in self.age.violations())
        if not self.lvet.low <= self.lvet.high:
            errors.append("lvet: bounds must satisfy low <= high")
        return errors

    def to_dict(self):
        return {
            'marginals': dict((name, m.to_dict()) for name, m in sorted(self.marginals.items())),
            'lvet': asdict(self.lvet),
            'age': self.age.to_dict(),
            'max_rounds': self.max_rounds,
        }

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {'marginals', 'lvet', 'age', 'max_rounds'}
        if unknown:
            raise ConfigurationError("prior: unknown keys {}".format(", ".join(sorted(unknown))))
        try:
            return cls(marginals=dict((k, Marginal.from_dict(v)) for k, v in data['marginals'].items()),
                       lvet=LvetLink(**data.get('lvet', {})),
                       age=Marginal.from_dict(data['age']) if 'age' in data else Marginal('uniform', 25.0, 75.0),
                       max_rounds=data.get('max_rounds', 100))
        except (KeyError, TypeError) as err:
            raise ConfigurationError("prior: {}".format(err))

    @property
    def hash(self):
        return _stable_hash(self.to_dict())


def template_diameter(net):
    """Length weighted mean reference diameter of the network"""
    total = sum(seg.length for seg in net.segments)
    return sum(seg.length * seg.mean_diameter for seg in net.segments) / total


def default_prior(template):
    d = template_diameter(template)
    return PriorSpec(marginals={
        'hr': Marginal('truncnorm', 50.0, 100.0, loc=72.0, scale=10.0),
        'sv': Marginal('truncnorm', 45e-6, 100e-6, loc=70e-6, scale=12e-6,
                       age_curve=((25.0, 3e-6), (75.0, -5e-6))),
        'pft': Marginal('uniform', 0.06, 0.095),
        'rfv': Marginal('uniform', 0.0, 0.15),
        'e_scale': Marginal('truncnorm', 0.6, 1.6, loc=1.0, scale=0.15,
                            age_curve=((25.0, -0.2), (75.0, 0.3))),
        'r_scale': Marginal('truncnorm', 0.6, 1.6, loc=1.0, scale=0.15,
                            age_curve=((25.0, -0.05), (75.0, 0.1))),
        'c_scale': Marginal('truncnorm', 0.5, 1.5, loc=1.0, scale=0.15,
                            age_curve=((25.0, 0.1), (75.0, -0.2))),
        'length_scale': Marginal('uniform', 0.9, 1.1),
        'diameter': Marginal('truncnorm', 0.75 * d, 1.25 * d, loc=d, scale=0.1 * d,
                             age_curve=((25.0, -0.05 * d), (75.0, 0.05 * d))),
    })


def sample_prior(spec, seed, n):
    """n independent subjects from the prior

    Candidates are drawn in rounds and rejected when LVET leaves its bounds, is not
    shorter than the beat or when PFT >= LVET / 2.

    Arguments
    ----------
    :param PriorSpec spec: The prior
    :param int seed: RNG seed, the draws are a pure function of (spec, seed, n)
    :param int n: Number of subjects

    Returns
    --------
    :return: The accepted draws, ids 0..n-1
    :rtype: list of ParameterVector

    Exceptions
    -----------
    :raises ConfigurationError: invalid spec or no candidate satisfies the constraints
    """
    assert n >= 0, "n must be >= 0"
    problems = spec.violations()
    if problems:
        raise ConfigurationError("invalid prior: " + "; ".join(problems))
    rng = np.random.default_rng(seed)
    accepted = []
    for _ in range(spec.max_rounds):
        if len(accepted) >= n:
            break
        m = max(2 * (n - len(accepted)), 16)
        age = spec.age.sample(rng, np.zeros(m))
        draws = dict((name, spec.marginals[name].sample(rng, age)) for name in SAMPLED)
        lvet = spec.lvet.sample(rng, draws['hr'], draws['sv'])
        ok = ((lvet >= spec.lvet.low) & (lvet <= spec.lvet.high) & (lvet < 60.0 / draws['hr'])
              & (draws['pft'] < 0.5 * lvet) & (draws['pft'] > 0))
        for name in ('hr', 'diameter', 'sv', 'e_scale', 'r_scale', 'c_scale', 'length_scale'):
            ok &= draws[name] > 0
        ok &= (draws['rfv'] >= 0) & (draws['rfv'] < 1)
        for i in np.flatnonzero(ok):
            if len(accepted) >= n:
                break
            values = dict((name, float(draws[name][i])) for name in SAMPLED)
            accepted.append(ParameterVector(lvet=float(lvet[i]), age=float(age[i]),
                                            id=len(accepted), **values))
    if len(accepted) < n:
        raise ConfigurationError("prior support is empty after the LVET/PFT constraints "
                                 "({} of {} draws accepted)".format(len(accepted), n))
    return accepted


def instantiate_network(template, p):
    """Apply a subject to a template network

    Reference radii scale by p.diameter / template_diameter(template), elastic moduli
    by e_scale, the root length by length_scale, bed resistances by r_scale and bed
    compliances by c_scale; the heart is replaced by the subject's.

    :raises ConfigurationError: the resulting network is invalid
    """
    factor = p.diameter / template_diameter(template)
    segments = []
    for seg in template.segments:
        changes = {
            'radius_proximal': seg.radius_proximal * factor,
            'radius_distal': seg.radius_distal * factor,
            'elastic_modulus': seg.elastic_modulus * p.e_scale,
        }
        if seg.id == template.root:
            changes['length'] = seg.length * p.length_scale
        segments.append(replace(seg, **changes))
    beds = dict((sid, replace(bed, proximal_resistance=bed.proximal_resistance * p.r_scale,
                              distal_resistance=bed.distal_resistance * p.r_scale,
                              compliance=bed.compliance * p.c_scale))
                for sid, bed in template.beds.items())
    net = replace(template, segments=tuple(segments), beds=beds, heart=p.heart)
    report = validate_network(net)
    if report:
        raise ConfigurationError("subject {} gives an invalid network: {}".format(
            p.id, "; ".join(str(v) for v in report)))
    return net


## Biomarkers ##

def foot_time(record):
    """Onset of the upstroke by the intersecting tangent method

    The tangent at the steepest upstroke point is intersected with the horizontal line
    through the minimum that precedes it (within half a beat, cyclically).

    :raises SignalQualityError: flat signal or no rising upstroke
    """
    y = np.asarray(record.samples, dtype=float)
    n = len(y)
    if n < 4 or not np.ptp(y) > 0:
        raise SignalQualityError("cannot detect the foot of a flat waveform at {}".format(record.site.label))
    dt = 1.0 / record.sampling_rate
    slope = (np.roll(y, -1) - np.roll(y, 1)) / (2.0 * dt)
    peak = int(np.argmax(slope))
    if not slope[peak] > 0:
        raise SignalQualityError("no upstroke at {}".format(record.site.label))
    window = np.arange(peak - n // 2, peak + 1) % n
    low = float(np.min(y[window]))
    foot = peak * dt - (y[peak] - low) / slope[peak]
    return foot % (n * dt)


def derive_pwv(proximal, distal, net):
    """Foot to foot pulse wave velocity between two pressure records on one path

    :raises SignalQualityError: a foot cannot be detected or the transit time is zero
    :raises ConfigurationError: the sites are not on one root to leaf path
    """
    distance = path_length(net, proximal.site, distal.site)
    period = proximal.beat_period
    transit = (foot_time(distal) - foot_time(proximal)) % period
    if not transit > 0:
        raise SignalQualityError("zero transit time between {} and {}".format(
            proximal.site.label, distal.site.label))
    return distance / transit


def derive_svr(root_pressure, p, outflow_pressure=0.0):
    """SVR = (MAP - P_out) / CO with MAP the cycle mean root pressure, CO = HR SV / 60

    :raises DomainError: cardiac output is zero
    """
    co = p.hr * p.sv / 60.0
    if not co > 0:
        raise DomainError("cardiac output is zero")
    mean_pressure = float(np.mean(root_pressure.samples))
    return (mean_pressure - outflow_pressure) / co


## Datasets ##

@dataclass(frozen=True, eq=False)
class Subject:
    params: ParameterVector
    records: dict
    achieved_map: float


@dataclass(frozen=True, eq=False)
class SimulationDataset:
    subjects: tuple
    splits: tuple
    seed: int
    prior: PriorSpec
    template: object
    failures: int = 0
    config: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if len(self.subjects) != len(self.splits):
            raise ConfigurationError("one split label per subject")

    def __len__(self):
        return len(self.subjects)

    def indices(self, split):
        assert split in SPLITS, "unknown split {!r}".format(split)
        return [i for i, s in enumerate(self.splits) if s == split]

    def subset(self, split):
        return [self.subjects[i] for i in self.indices(split)]

    def interest(self, split):
        return np.array([s.params.interest_array() for s in self.subset(split)]).reshape(-1, len(INTEREST))

    def ages(self, split):
        return np.array([s.params.age for s in self.subset(split)], dtype=float)

    def beats(self, split, site):
        return [s.records[site] for s in self.subset(split)]

    @property
    def sites(self):
        return sorted(self.subjects[0].records) if self.subjects else []

    @property
    def hash(self):
        digest = []
        for subject in self.subjects:
            waves = dict((label, _stable_hash(np.asarray(r.samples, dtype='<f4').tobytes()))
                         for label, r in subject.records.items())
            digest.append([asdict(subject.params), waves])
        return _stable_hash({'subjects': digest, 'splits': list(self.splits),
                             'seed': self.seed, 'prior': self.prior.hash})


def _run_subject(template, p, config, rate):
    """Simulate one subject, returns (params with PWV/SVR, storage records, MAP)"""
    net = instantiate_network(template, p)
    result = simulate(net, replace(config, sampling_rate=BIOMARKER_RATE, record_path_end=True))
    pwv = derive_pwv(result.root_pressure, result.path_end_pressure, net)
    p_out = float(np.mean([bed.outflow_pressure for bed in net.beds.values()]))
    svr = derive_svr(result.root_pressure, p, p_out)
    records = dict((label, resample_record(r, rate)) for label, r in result.records.items())
    return p.with_derived(pwv, svr), records, float(np.mean(result.root_pressure.samples))


def _subject_job(args):
    template, p, config, rate = args
    try:
        return 'ok', _run_subject(template, p, config, rate)
    except (SolverError, SignalQualityError, DomainError, ConfigurationError) as err:
        return 'failed', "{}: {}".format(type(err).__name__, err)


def assign_splits(n, seed):
    """Random 70/10/20 split labels (train/val/test) from a seeded permutation"""
    rng = np.random.default_rng(_derive_seed(seed, 'split'))
    order = rng.permutation(n)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    labels = [None] * n
    for rank, i in enumerate(order):
        labels[i] = 'train' if rank < n_train else 'val' if rank < n_train + n_val else 'test'
    return tuple(labels)


def generate_dataset(spec, template, n, seed, workers=1, config=None, rate=STORAGE_RATE):
    """Sample, simulate and split n subjects

    Failed simulations are logged and the subject is redrawn from the prior with a
    derived seed; the total number of failures may not exceed 10% of n.

    Arguments
    ----------
    :param PriorSpec spec: The prior
    :param ArterialNetwork template: Network the subjects are instantiated from
    :param int n: Number of subjects, >= 10
    :param int seed: Master seed
    :param int workers: Worker processes, 1 runs inline
    :param SolverConfig config: Solver options, biomarkers are measured at 1000 Hz
    :param float rate: Sampling rate of the stored records

    Returns
    --------
    :return: Subjects in index order with their split labels
    :rtype: SimulationDataset

    Exceptions
    -----------
    :raises ConfigurationError: n < 10 or invalid prior/template
    :raises SimulationBudgetError: more than 10% of the simulations failed
    """
    if n < 10:
        raise ConfigurationError("n too small: a dataset needs at least 10 subjects")
    config = config or SolverConfig()
    params = sample_prior(spec, seed, n)
    results = [None] * n
    failures = []
    pending = list(range(n))
    attempt = 0
    budget = int(math.floor(MAX_FAILURE_FRACTION * n))
    while pending:
        jobs = [(template, params[i], config, rate) for i in pending]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(_subject_job, jobs))
        else:
            outcomes = [_subject_job(job) for job in jobs]

        attempt += 1
        retry = []
        for i, (status, value) in zip(pending, outcomes):
            if status == 'ok':
                results[i] = Subject(*value)
                continue
            log.warning("subject %d failed (%s), redrawing", i, value)
            failures.append((i, value))
            if len(failures) > budget:
                raise SimulationBudgetError("{} of {} simulations failed".format(len(failures), n),
                                            failures=failures)
            redraw = sample_prior(spec, _derive_seed(seed, i, attempt), 1)[0]
            params[i] = replace(redraw, id=i)
            retry.append(i)
        pending = retry
        log.info("simulated %d/%d subjects", n - len(pending), n)

    if failures:
        log.warning("%d simulations failed and were redrawn", len(failures))
    return SimulationDataset(subjects=tuple(results), splits=assign_splits(n, seed), seed=seed,
                             prior=spec, template=template, failures=len(failures), config=config)


def _columns():
    names = list(INTEREST) + list(NUISANCE) + ['age']
    return ['id', 'split'] + ["{}_{}".format(name, UNITS[name]) for name in names] + ['map_pa']


def _safe(label):
    return label.replace('@', '_at_').replace(':', '_')


def save_dataset(dataset, path, force=False):
    """Write params.csv, waveforms/<id>/<site>.{f32,json} and manifest.json"""
    os.makedirs(os.path.join(path, 'waveforms'), exist_ok=True)
    params_path = os.path.join(path, 'params.csv')
    if os.path.exists(params_path) and not force:
        raise FileExistsError("{} exists, use --force to overwrite".format(params_path))
    names = list(INTEREST) + list(NUISANCE) + ['age']
    with open(params_path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(_columns())
        for subject, split in zip(dataset.subjects, dataset.splits):
            p = subject.params
            row = [p.id, split] + [repr(float(getattr(p, name))) for name in names]
            writer.writerow(row + [repr(subject.achieved_map)])

    sites = {}
    for subject in dataset.subjects:
        folder = os.path.join(path, 'waveforms', str(subject.params.id))
        os.makedirs(folder, exist_ok=True)
        for label, record in sorted(subject.records.items()):
            sites[label] = _safe(label)
            save_waveform(record, os.path.join(folder, _safe(label)), force=force)

    manifest = {
        'n': len(dataset),
        'seed': dataset.seed,
        'prior': dataset.prior.to_dict(),
        'prior_hash': dataset.prior.hash,
        'splits': list(dataset.splits),
        'sites': sites,
        'failures': dataset.failures,
        'solver': dataset.config.to_dict(),
        'template': network_to_dict(dataset.template),
        'dataset_hash': dataset.hash,
        'code_version': _code_version(),
    }
    _write_json(os.path.join(path, 'manifest.json'), manifest, force=force)


def load_dataset(path):
    manifest = _read_json(os.path.join(path, 'manifest.json'))
    names = list(INTEREST) + list(NUISANCE) + ['age']
    subjects = []
    columns = _columns()
    with open(os.path.join(path, 'params.csv'), newline='') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != columns:
            raise ConfigurationError("{}: unexpected params.csv header".format(path))
        for row in reader:
            if not row['id']:
                continue
            values = dict((name, float(row[column])) for name, column in zip(names, columns[2:-1]))
            p = ParameterVector(id=int(row['id']), **values)
            folder = os.path.join(path, 'waveforms', row['id'])
            records = dict((label, load_waveform(os.path.join(folder, stem)))
                           for label, stem in manifest['sites'].items())
            subjects.append(Subject(p, records, float(row['map_pa'])))
    return SimulationDataset(subjects=tuple(subjects), splits=tuple(manifest['splits']),
                             seed=manifest['seed'], prior=PriorSpec.from_dict(manifest['prior']),
                             template=network_from_dict(manifest['template']),
                             failures=manifest['failures'],
                             config=SolverConfig.from_dict(manifest['solver']))
