#!/usr/bin/env python
"""measurement: turn one simulated beat into a noisy fixed length observation

beat -> tile to >= 10 s -> random 8 s crop -> white noise at a given SNR -> optional
normalisation with statistics fitted on the training split. Joint observations cut
several sites of one subject from the same window.
"""

from .utils import DomainError, DegenerateSignalError, DegenerateDatasetError, ShapeError
from .utils import derive_seed as _derive_seed
from .hemo import resample_record
from dataclasses import dataclass
import math

import numpy as np

OBSERVATION_RATE = 125.0
OBSERVATION_DURATION = 8.0
OBSERVATION_LENGTH = 1000
TILE_DURATION = 10.0
DEFAULT_SNR_LEVELS = (0.0, 5.0, 10.0, 15.0, 20.0)


@dataclass(frozen=True)
class NormStats:
    """Scalar statistics, or one value per channel for stacked observations"""
    mean: float
    std: float

    def to_dict(self):
        return {'mean': self.mean, 'std': self.std}

    @classmethod
    def from_dict(cls, data):
        mean, std = data['mean'], data['std']
        if isinstance(mean, (list, tuple)):
            return cls(tuple(float(m) for m in mean), tuple(float(s) for s in std))
        return cls(float(mean), float(std))


@dataclass(frozen=True, eq=False)
class Observation:
    samples: np.ndarray
    age: float
    snr_db: float = None
    kind: str = 'pressure'
    seed: int = None
    norm: NormStats = None

    def __post_init__(self):
        if np.shape(self.samples) != (OBSERVATION_LENGTH,):
            raise ShapeError("observation must have {} samples, got shape {}".format(
                OBSERVATION_LENGTH, np.shape(self.samples)))
        if not np.all(np.isfinite(self.samples)):
            raise DomainError("observation has non-finite samples")


def tile_beat(beat, min_duration=TILE_DURATION):
    """Repeat one beat the smallest integer number of times covering min_duration"""
    assert beat.duration > 0, "beat duration must be > 0"
    repetitions = int(math.ceil(min_duration / beat.duration - 1e-9))
    repetitions = max(repetitions, 1)
    return beat.with_samples(np.tile(np.asarray(beat.samples, dtype=float), repetitions),
                             duration=repetitions * beat.duration)


def crop_offset(length, crop, rng):
    if length < crop:
        raise DomainError("segment of {} samples is shorter than the {} sample crop".format(length, crop))
    return int(rng.integers(0, length - crop + 1))


def random_crop(segment, rng, duration=OBSERVATION_DURATION, sampling_rate=None):
    """Uniformly placed window of `duration` seconds

    segment is a WaveformRecord or an array sampled at sampling_rate (default 125 Hz).

    :raises DomainError: segment shorter than the window
    """
    if hasattr(segment, 'samples'):
        sampling_rate = segment.sampling_rate
        segment = segment.samples
    sampling_rate = sampling_rate or OBSERVATION_RATE
    samples = np.asarray(segment, dtype=float)
    crop = int(round(duration * sampling_rate))
    start = crop_offset(len(samples), crop, rng)
    return samples[start:start + crop].copy()


def add_noise_snr(samples, snr_db, rng):
    """Add white Gaussian noise with std rms(x - mean(x)) / 10^(snr_db / 20)

    snr_db None or +inf returns the samples unchanged.

    :raises DegenerateSignalError: samples are constant
    """
    samples = np.asarray(samples, dtype=float)
    ac = samples - np.mean(samples)
    rms = math.sqrt(float(np.mean(ac * ac)))
    if not rms > 0:
        raise DegenerateSignalError("cannot set an SNR on a constant signal")
    if snr_db is None or np.isposinf(snr_db):
        return samples.copy()
    sigma = rms / 10.0 ** (snr_db / 20.0)
    return samples + rng.normal(0.0, sigma, size=samples.shape)


def normalize_fit(data):
    """Scalar mean and std pooled over every sample of every observation

    :raises DegenerateDatasetError: the pooled std is zero
    """
    if isinstance(data, np.ndarray):
        pooled = data.ravel()
    elif len(data) == 0:
        pooled = np.empty(0)
    else:
        pooled = np.concatenate([np.ravel(np.asarray(getattr(x, 'samples', x), dtype=float)) for x in data])
    if pooled.size == 0:
        raise DegenerateDatasetError("cannot fit normalisation on an empty dataset")
    mean = float(np.mean(pooled))
    std = float(np.std(pooled))
    if not std > 0:
        raise DegenerateDatasetError("pooled standard deviation is zero")
    return NormStats(mean, std)


def normalize_apply(samples, stats):
    return (np.asarray(samples, dtype=float) - stats.mean) / stats.std


def make_observation(beat, age, snr_db, seed, norm=None):
    """beat -> tiled -> cropped -> noisy (-> normalised) observation

    The result is a pure function of (beat, age, snr_db, seed, norm).
    """
    rng = np.random.default_rng(seed)
    if beat.sampling_rate != OBSERVATION_RATE:
        beat = resample_record(beat, OBSERVATION_RATE)
    tiled = tile_beat(beat)
    samples = add_noise_snr(random_crop(tiled, rng), snr_db, rng)
    if norm is not None:
        samples = normalize_apply(samples, norm)
    return Observation(samples=samples, age=float(age), snr_db=snr_db, kind=beat.site.kind,
                       seed=seed, norm=norm)


def observe_batch(beats, ages, snr_db, seed, norm=None):
    """Observations of many beats as an (n, 1000) array, seed i derived from (seed, i)"""
    out = np.empty((len(beats), OBSERVATION_LENGTH))
    for i, (beat, age) in enumerate(zip(beats, ages)):
        out[i] = make_observation(beat, age, snr_db, _derive_seed(seed, i), norm).samples
    return out


def normalize_fit_channels(data):
    """Per channel NormStats of stacked observations, data shaped (n, channels, L)

    :raises DegenerateDatasetError: a channel has zero spread
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 3:
        raise ShapeError("stacked observations must be (n, channels, samples), got {}".format(data.shape))
    stats = [normalize_fit(data[:, c]) for c in range(data.shape[1])]
    return NormStats(tuple(s.mean for s in stats), tuple(s.std for s in stats))


def make_joint_observation(beats, snr_db, seed):
    """Simultaneous observations of several sites, shape (sites, 1000)

    All sites are cut from the same window of the tiled beat; every site gets its own
    noise at snr_db relative to its own signal.

    :raises ShapeError: the beats do not span the same number of samples
    """
    rng = np.random.default_rng(seed)
    tiled = [tile_beat(b if b.sampling_rate == OBSERVATION_RATE else resample_record(b, OBSERVATION_RATE))
             for b in beats]
    lengths = set(len(t.samples) for t in tiled)
    if len(lengths) != 1:
        raise ShapeError("sites of one subject must share the beat length, got {}".format(sorted(lengths)))
    start = crop_offset(lengths.pop(), OBSERVATION_LENGTH, rng)
    out = np.empty((len(tiled), OBSERVATION_LENGTH))
    for c, t in enumerate(tiled):
        out[c] = add_noise_snr(np.asarray(t.samples[start:start + OBSERVATION_LENGTH], dtype=float), snr_db, rng)
    return out


def observe_joint(beats, snr_db, seed):
    """(n, sites, 1000) array from one tuple of per site beats per subject"""
    out = np.empty((len(beats), len(beats[0]) if len(beats) else 0, OBSERVATION_LENGTH))
    for i, group in enumerate(beats):
        out[i] = make_joint_observation(group, snr_db, _derive_seed(seed, i))
    return out
