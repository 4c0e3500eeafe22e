#!/usr/bin/env python
"""utils: exceptions, unit conversions and the small serialisation helpers shared by
every other module"""

from numpy.random import SeedSequence as _SeedSequence
import subprocess as _subprocess
import hashlib
import json
import os

import numpy as np

# 1 mmHg in Pa, fixed conversion used at every I/O boundary
MMHG = 133.322
# 1 mL in m^3
ML = 1e-6


class InternalError(Exception):
    """This Error occured due to an internal bug, please report it with the traceback"""


class DomainError(ValueError):
    """Argument lies outside the domain of the operation"""


class DegenerateSignalError(DomainError):
    """Waveform is constant or has zero AC power"""


class DegenerateDatasetError(DomainError):
    """Dataset has zero spread and cannot be normalised"""


class ShapeError(ValueError):
    """Array has the wrong length or dimension"""


class ConfigurationError(ValueError):
    """Configuration, network file or prior specification is invalid"""


class SignalQualityError(ValueError):
    """A feature (eg the foot of a pressure wave) could not be detected"""


class SolverError(RuntimeError):
    """Numerical blow up or non-convergence inside the hemodynamics solver"""
    def __init__(self, message, segment=None, cell=None, time=None, residual=None):
        super(SolverError, self).__init__(message)
        self.message = message
        self.segment = segment
        self.cell = cell
        self.time = time
        self.residual = residual

    def __str__(self):
        extra = []
        for name in ('segment', 'cell', 'time', 'residual'):
            value = getattr(self, name)
            if value is not None:
                extra.append("{}={}".format(name, value))
        if extra:
            return "{} ({})".format(self.message, ", ".join(extra))
        return self.message

    def __reduce__(self):
        # keep the context attributes when crossing a process pool
        return (self.__class__, (self.message, self.segment, self.cell, self.time, self.residual))


class NumericError(ArithmeticError):
    """Non-finite value produced by the flow or its loss"""
    def __init__(self, message, step=None, batch=None):
        super(NumericError, self).__init__(message)
        self.message = message
        self.step = step
        self.batch = batch

    def __str__(self):
        if self.step is not None:
            return "{} (step={})".format(self.message, self.step)
        if self.batch is not None:
            return "{} (batch={})".format(self.message, self.batch)
        return self.message


class TrainingDivergedError(NumericError):
    """Training loss became non-finite, the history up to that point is attached"""
    def __init__(self, message, history=None, batch=None, epoch=None):
        super(TrainingDivergedError, self).__init__(message, batch=batch)
        self.history = history
        self.epoch = epoch


class SimulationBudgetError(RuntimeError):
    """Too many simulations failed while generating a dataset"""
    def __init__(self, message, failures=()):
        super(SimulationBudgetError, self).__init__(message)
        self.failures = list(failures)


def mmhg_to_pa(value):
    return value * MMHG


def pa_to_mmhg(value):
    return value / MMHG


def ml_to_m3(value):
    return value * ML


def m3_to_ml(value):
    return value / ML


def strip_comments(text):
    """Remove full line '//' and '#' comments from a JSON document"""
    lines = []
    for line in text.splitlines():
        stripped = line.lstrip()
        if stripped.startswith('//') or stripped.startswith('#'):
            continue
        lines.append(line)
    return "\n".join(lines)


def read_json(path):
    """Read a JSON file that may carry full line comments

    Exceptions
    -----------
    :raises ConfigurationError: The file is not valid JSON
    """
    with open(path) as f:
        text = f.read()
    try:
        return json.loads(strip_comments(text))
    except ValueError as err:
        raise ConfigurationError("{}: invalid JSON: {}".format(path, err))


def write_json(path, obj, force=False):
    """Write obj as JSON, refusing to replace an existing file unless force is set

    Exceptions
    -----------
    :raises FileExistsError: path exists and force is False
    """
    if os.path.exists(path) and not force:
        raise FileExistsError("{} exists, use --force to overwrite".format(path))
    with open(path, 'w') as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError("{!r} is not JSON serializable".format(obj))


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(',', ':'), default=_json_default)


def stable_hash(obj):
    """SHA-256 of the canonical JSON form of obj (or of raw bytes)"""
    h = hashlib.sha256()
    if isinstance(obj, bytes):
        h.update(obj)
    else:
        h.update(canonical_json(obj).encode('utf-8'))
    return h.hexdigest()


def derive_seed(*parts):
    """Deterministic 32 bit child seed from integer/string parts"""
    entropy = []
    for part in parts:
        if isinstance(part, str):
            entropy.append(int(hashlib.sha256(part.encode('utf-8')).hexdigest()[:8], 16))
        elif part is None:
            entropy.append(0)
        else:
            entropy.append(int(part))
    return int(_SeedSequence(entropy).generate_state(1)[0])


def code_version():
    """git describe of the working tree, falling back to the package version"""
    from . import __version__
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = _subprocess.run(['git', 'describe', '--always', '--dirty'], cwd=here,
                              stdout=_subprocess.PIPE, stderr=_subprocess.DEVNULL,
                              timeout=5)
    except (OSError, _subprocess.SubprocessError):
        return __version__
    version = out.stdout.decode('utf-8', 'replace').strip()
    return version if out.returncode == 0 and version else __version__
