#!/usr/bin/env python
"""hemo: time domain solution of the 1D blood flow equations on an arterial network

The heart inflow drives the root segment, junctions are coupled by conservation of
mass and continuity of total pressure and every leaf ends in a 3-element Windkessel.
Whole heartbeats are simulated until consecutive cycles agree, the final cycle is
returned per measurement site.

>>> net = load_network('tube1')
>>> result = simulate(net)
>>> result.records['aorta@0.50:pressure'].samples
"""

from .utils import ConfigurationError, DomainError, DegenerateSignalError, ShapeError, SolverError
from .utils import read_json as _read_json, write_json as _write_json
from .vessel import MeasurementSite, validate_network
from . import _hemo
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
import csv
import logging
import math
import os

from scipy.integrate import quad as _quad
from scipy.linalg import expm as _expm
from scipy.signal import resample as _resample
import numpy as np

log = logging.getLogger(__name__)

MAX_STEPS_PER_CYCLE = 2000000


@dataclass(frozen=True)
class SolverConfig:
    dx: float = 0.02
    cfl: float = 0.9
    min_cells: int = 4
    limiter: str = 'minmod'
    junction_pressure: str = 'total'
    tolerance: float = 1e-3
    drift_tolerance: float = 1e-3
    max_cycles: int = 15
    min_cycles: int = 2
    sampling_rate: float = 125.0
    friction: bool = True
    viscous: bool = True
    record_path_end: bool = True

    def violations(self):
        errors = []
        if not self.dx > 0:
            errors.append("dx must be > 0")
        if not 0 < self.cfl <= 1:
            errors.append("CFL number must be in (0, 1]")
        if self.min_cells < 4:
            errors.append("min_cells must be >= 4")
        if self.limiter not in _hemo.LIMITERS:
            errors.append("unknown limiter {!r}".format(self.limiter))
        if self.junction_pressure not in ('total', 'static'):
            errors.append("junction_pressure must be 'total' or 'static'")
        if not self.sampling_rate > 0:
            errors.append("sampling rate must be > 0")
        if self.max_cycles < 1:
            errors.append("max_cycles must be >= 1")
        if not self.drift_tolerance > 0:
            errors.append("drift_tolerance must be > 0")
        return errors

    def to_dict(self):
        return dict((f.name, getattr(self, f.name)) for f in fields(self))

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(f.name for f in fields(cls))
        if unknown:
            raise ConfigurationError("solver config: unknown keys {}".format(", ".join(sorted(unknown))))
        return cls(**data)


@dataclass(frozen=True)
class SolverGrid:
    cells: tuple
    dx: tuple
    dt: float
    cfl: float

    def __post_init__(self):
        if any(n < 4 for n in self.cells):
            raise ConfigurationError("every segment needs at least 4 cells")
        if not self.dt > 0:
            raise ConfigurationError("time step must be > 0")
        if not 0 < self.cfl <= 1:
            raise ConfigurationError("CFL number must be in (0, 1]")


@dataclass(frozen=True)
class BoundaryFlux:
    inflow: float
    outflow: dict

    @property
    def net(self):
        return self.inflow - math.fsum(self.outflow.values())


@dataclass(frozen=True)
class SolverState:
    """Cell areas and flows per segment id, plus the Windkessel bed pressures"""
    area: dict
    flow: dict
    time: float
    bed_pressure: dict
    boundary: BoundaryFlux = None

    def volume(self, grid, net):
        return math.fsum(float(np.sum(self.area[seg.id])) * dx
                         for seg, dx in zip(net.segments, grid.dx))


@dataclass(frozen=True, eq=False)
class WaveformRecord:
    samples: np.ndarray
    sampling_rate: float
    duration: float
    site: MeasurementSite
    beat_period: float
    units: str = 'Pa'
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sampling_rate > 0:
            raise DomainError("sampling rate must be > 0")
        expected = int(round(self.duration * self.sampling_rate))
        if len(self.samples) != expected:
            raise ShapeError("waveform has {} samples, expected {} for {} s at {} Hz".format(
                len(self.samples), expected, self.duration, self.sampling_rate))

    @property
    def times(self):
        return np.arange(len(self.samples)) / self.sampling_rate

    def with_samples(self, samples, **changes):
        return replace(self, samples=np.asarray(samples, dtype=float), **changes)


@dataclass(frozen=True)
class ConvergenceDiagnostics:
    cycles: int
    residual: float
    converged: bool
    steps: int
    volume_drift: float
    relative_drift: float


@dataclass(frozen=True, eq=False)
class SimulationResult:
    records: dict
    root_pressure: WaveformRecord
    root_flow: WaveformRecord
    path_end_pressure: WaveformRecord
    diagnostics: ConvergenceDiagnostics


## Heart inflow ##

@lru_cache(maxsize=1024)
def _inflow_shape(heart):
    """(exponent p, main lobe amplitude, reflected lobe amplitude)"""
    p = math.log(0.5) / math.log(heart.pft / heart.lvet)
    integral, _ = _quad(lambda x: math.sin(math.pi * x ** p), 0.0, 1.0, limit=200)
    main = (1.0 - heart.rfv) * heart.stroke_volume / (heart.lvet * integral)
    reflected = math.pi * heart.rfv * heart.stroke_volume / heart.lvet
    return p, main, reflected


def inflow_waveform(heart, t):
    """Aortic root inflow of a periodic heartbeat

    The ejection lobe a sin(pi (tau / LVET)^p) peaks at tau = PFT, a reflected lobe
    b sin(2 pi (tau - LVET/2) / LVET) carries the fraction RFV of the stroke volume
    over [LVET/2, LVET]; there is no flow for tau in [LVET, T).

    Arguments
    ----------
    :param HeartFunction heart: The five heart parameters
    :param t: Time(s) in seconds, t >= 0

    Returns
    --------
    :return: Flow in m^3/s
    :rtype: float or numpy.ndarray

    Exceptions
    -----------
    :raises DomainError: heart violates its invariants or t < 0
    """
    problems = heart.violations()
    if problems:
        raise DomainError("invalid heart function: " + "; ".join(problems))
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("inflow time must be >= 0")

    p, main, reflected = _inflow_shape(heart)
    lvet = heart.lvet
    tau = np.mod(t, heart.period)
    ejecting = tau < lvet
    phase = np.clip(tau / lvet, 0.0, 1.0)
    q = np.where(ejecting, main * np.sin(np.pi * phase ** p), 0.0)
    late = ejecting & (tau >= 0.5 * lvet)
    q = q + np.where(late, reflected * np.sin(2.0 * np.pi * (tau - 0.5 * lvet) / lvet), 0.0)
    q = np.maximum(q, 0.0)
    return float(q) if q.ndim == 0 else q


## Grid and state ##

def make_grid(net, config=None):
    """Discretise every segment with cells no wider than config.dx

    :raises ConfigurationError: degenerate geometry or configuration
    """
    config = config or SolverConfig()
    problems = config.violations()
    if problems:
        raise ConfigurationError("invalid solver config: " + "; ".join(problems))
    cells, widths = [], []
    for seg in net.segments:
        if not seg.length > 0:
            raise ConfigurationError("segment {} has a degenerate length".format(seg.id))
        n = max(config.min_cells, int(math.ceil(seg.length / config.dx - 1e-9)))
        cells.append(n)
        widths.append(seg.length / n)
    plan = _hemo.NetworkPlan(net, cells)
    areas = dict((sid, s.a0.copy()) for sid, s in plan.segments.items())
    flows = dict((sid, np.zeros(s.n)) for sid, s in plan.segments.items())
    dt = _hemo.timestep(plan, areas, flows, config.cfl)
    return SolverGrid(cells=tuple(cells), dx=tuple(widths), dt=dt, cfl=config.cfl)


def make_plan(net, grid):
    if len(grid.cells) != len(net.segments):
        raise ConfigurationError("grid does not match the network")
    return _hemo.NetworkPlan(net, grid.cells)


def stable_timestep(net, grid, state=None, plan=None):
    """CFL limited time step CFL * min(dx / (|u| + c)) over all cells

    Without a state the network is taken at rest (A = A0, Q = 0).

    :raises ConfigurationError: a cell width is not positive
    """
    if any(not dx > 0 for dx in grid.dx):
        raise ConfigurationError("cell width must be > 0")
    plan = plan or make_plan(net, grid)
    if state is None:
        areas = dict((sid, s.a0) for sid, s in plan.segments.items())
        flows = dict((sid, np.zeros(s.n)) for sid, s in plan.segments.items())
    else:
        areas, flows = state.area, state.flow
    return _hemo.timestep(plan, areas, flows, grid.cfl)


def network_resistance(net):
    """Resistance of all beds in parallel"""
    conductance = sum(1.0 / bed.total_resistance for bed in net.beds.values() if bed.total_resistance > 0)
    return 1.0 / conductance if conductance > 0 else 0.0


def _vessel_compliance(plan, pressure):
    """dV/dP of all segments at a uniform pressure"""
    total = 0.0
    for s in plan.segments.values():
        root = s.sqrt_a0 + (pressure - s.p_ext) / s.beta
        total += float(np.sum(2.0 * np.maximum(root, 0.0) / s.beta)) * s.dx
    return total


def _periodic_linear(M, b, h):
    """Periodic solution of x' = M x + b(t) with b held constant over each step h

    b has one row per step; returns the state at the start of every step.
    """
    n = M.shape[0]
    phi = _expm(M * h)
    gamma = np.linalg.solve(M, phi - np.eye(n))
    x = np.zeros(n)
    for row in b:
        x = phi @ x + gamma @ row
    x = np.linalg.solve(np.eye(n) - np.linalg.matrix_power(phi, len(b)), x)
    states = np.empty((len(b), n))
    for k, row in enumerate(b):
        states[k] = x
        x = phi @ x + gamma @ row
    return states


def _bed_cycle(q, h, bed, cv):
    """(proximal pressure, bed pressure) over one beat of one bed fed the flow q

    cv is the vessel compliance in front of R1.
    """
    r1, r2, c, p_out = bed.proximal_resistance, bed.distal_resistance, bed.compliance, bed.outflow_pressure
    steps = len(q)
    if r2 > 0 and r1 > 0 and cv > 0:
        M = np.array([[-1.0 / (cv * r1), 1.0 / (cv * r1)],
                      [1.0 / (c * r1), -1.0 / (c * r1) - 1.0 / (c * r2)]])
        b = np.column_stack([q / cv, np.full(steps, p_out / (c * r2))])
        x = _periodic_linear(M, b, h)
        return x[:, 0], x[:, 1]
    if r2 > 0:
        cap = c + cv if r1 == 0 else c
        pc = _periodic_linear(np.array([[-1.0 / (cap * r2)]]), ((q + p_out / r2) / cap)[:, None], h)[:, 0]
        return pc + r1 * q, pc
    pinned = np.full(steps, p_out)
    if r1 > 0 and cv > 0:
        p = _periodic_linear(np.array([[-1.0 / (cv * r1)]]), (q / cv + p_out / (cv * r1))[:, None], h)[:, 0]
        return p, pinned
    return p_out + r1 * q, pinned


def lumped_cycle(net, plan=None, steps=2000):
    """Periodic beat of a lumped model of the network

    Every bed receives its conductance share of the heart inflow and the same share
    of the vessel compliance, which sits in front of R1. The cycle mean pressure is
    P_out + mean inflow x network resistance, as in the 1D model.

    Returns (times, proximal pressure, {leaf: bed pressure}), sampled at the start of
    each of the `steps` intervals of one beat.
    """
    plan = plan or _hemo.NetworkPlan(net, [4] * len(net.segments))
    period = net.heart.period
    h = period / steps
    times = np.arange(steps) * h
    q = inflow_waveform(net.heart, times + 0.5 * h)
    p_out = float(np.mean([bed.outflow_pressure for bed in net.beds.values()]))
    cv = _vessel_compliance(plan, p_out + net.heart.mean_flow * network_resistance(net))
    conductance = dict((leaf, 1.0 / bed.total_resistance if bed.total_resistance > 0 else 0.0)
                       for leaf, bed in plan.beds.items())
    total = math.fsum(conductance.values())
    proximal = np.zeros(steps)
    beds = {}
    for leaf, bed in plan.beds.items():
        share = conductance[leaf] / total if total > 0 else 1.0 / len(plan.beds)
        p, pc = _bed_cycle(share * q, h, bed, share * cv)
        proximal += share * p
        beds[leaf] = pc
    return times, proximal, beds


def rest_state(net, grid, plan=None, pressure=None):
    """Network at a uniform pressure with zero flow

    Without a pressure the network starts from the end diastolic state of
    lumped_cycle, with every bed pre-charged to its periodic value at t = 0. With a
    pressure the beds carry the steady outflow at that pressure.
    """
    plan = plan or make_plan(net, grid)
    if pressure is None:
        _, proximal, cycle = lumped_cycle(net, plan)
        pressure = float(proximal[0])
        beds = dict((leaf, float(pc[0])) for leaf, pc in cycle.items())
    else:
        beds = {}
        for leaf, bed in plan.beds.items():
            q = (pressure - bed.outflow_pressure) / bed.total_resistance if bed.total_resistance > 0 else 0.0
            beds[leaf] = bed.outflow_pressure + bed.distal_resistance * q
    areas, flows = {}, {}
    for seg in net.segments:
        s = plan.segments[seg.id]
        root = s.sqrt_a0 + (pressure - s.p_ext) / s.beta
        if np.any(root <= 0):
            raise DomainError("pressure {} Pa collapses segment {}".format(pressure, seg.id))
        areas[seg.id] = root * root
        flows[seg.id] = np.zeros(s.n)
    return SolverState(area=areas, flow=flows, time=0.0, bed_pressure=beds)


def _inflow_function(net, inflow):
    if inflow is None:
        heart = net.heart
        return lambda t: inflow_waveform(heart, t)
    if callable(inflow):
        return inflow
    value = float(inflow)
    return lambda t: value


def _advance(state, plan, dt, inflow, config):
    areas, flows, beds, q_in, q_out = _hemo.ssp_rk2_step(
        plan, state.area, state.flow, state.time, state.bed_pressure, dt, inflow,
        _hemo.LIMITERS[config.limiter], config.friction, config.viscous,
        config.junction_pressure == 'total')
    return SolverState(area=areas, flow=flows, time=state.time + dt, bed_pressure=beds,
                       boundary=BoundaryFlux(q_in, q_out))


def advance_step(state, net, grid, inflow=None, plan=None, config=None):
    """Advance the network by one time step grid.dt

    Second order MUSCL reconstruction with slope limiting, Rusanov fluxes and SSP-RK2
    time integration; friction -K_R Q/A and the taper terms are explicit sources, the
    wall viscosity is an implicit split on Q.

    Arguments
    ----------
    :param SolverState state: Current state
    :param ArterialNetwork net: The network
    :param SolverGrid grid: Discretisation, grid.dt is the step taken
    :param inflow: None for the heart inflow of net, a constant flow or a callable of t
    :param plan: Optional precomputed plan from make_plan
    :param SolverConfig config: Limiter, junction and source term options

    Returns
    --------
    :return: New state, its boundary attribute holds the inflow/outflow of the step
    :rtype: SolverState

    Exceptions
    -----------
    :raises SolverError: non-finite or non-positive area after the step
    """
    config = config or SolverConfig()
    plan = plan or make_plan(net, grid)
    return _advance(state, plan, grid.dt, _inflow_function(net, inflow), config)


## Boundary helpers exposed for direct use ##

@dataclass(frozen=True)
class WindkesselUpdate:
    terminal_pressure: float
    bed_pressure: float
    mismatch: float


def windkessel_outflow(q_end, p_end, bed, bed_pressure, dt):
    """Implicit Euler step of a 3-element Windkessel driven by the outflow q_end

    Returns the terminal pressure P_c(new) + R1 q_end, the new bed pressure and the
    mismatch p_end - terminal pressure that the coupled solve drives to zero.
    """
    if not bed.compliance > 0:
        raise DomainError("bed compliance must be > 0")
    pc, _ = _hemo.windkessel_update(bed_pressure, q_end, bed, dt)
    terminal = pc + bed.proximal_resistance * q_end
    return WindkesselUpdate(terminal, pc, p_end - terminal)


@dataclass(frozen=True)
class JunctionSolution:
    parent: tuple
    children: tuple
    iterations: int
    residual: float


def junction_coupling(parent_end, children_start, parent, children, blood, pressure='total'):
    """Solve the coupling of one parent end with its children

    Arguments
    ----------
    :param parent_end: (A, Q) of the last parent cell
    :param children_start: [(A, Q)] of the first cell of every child
    :param VesselSegment parent: The parent segment
    :param children: Child VesselSegments in the order of children_start
    :param BloodProperties blood: Blood properties
    :param str pressure: 'total' or 'static' pressure continuity

    Returns
    --------
    :return: Face states (A*, Q*) of every end
    :rtype: JunctionSolution

    Exceptions
    -----------
    :raises SolverError: Newton did not reach the tolerance in 50 iterations
    """
    assert len(children) >= 1, "a junction needs at least one child"
    assert len(children) == len(children_start), "one start state per child"
    rho = blood.density
    face = _hemo.make_face(parent.reference_area_at(1.0), parent.beta_at(1.0), parent.external_pressure, rho)
    ends = [(parent_end[0], parent_end[1], _hemo.CellCoefficients(face.a0, face.beta), face, 1.0)]
    for seg, (A, Q) in zip(children, children_start):
        face = _hemo.make_face(seg.reference_area_at(0.0), seg.beta_at(0.0), seg.external_pressure, rho)
        ends.append((A, Q, _hemo.CellCoefficients(face.a0, face.beta), face, -1.0))
    states, iterations, residual = _hemo.solve_junction(ends, rho, pressure == 'total')
    return JunctionSolution(states[0], tuple(states[1:]), iterations, residual)


## Whole heartbeat simulation ##

class _Probe(object):
    """Records one quantity at one site after every step"""
    def __init__(self, plan, site, quantity):
        self.seg = plan.segments[site.segment]
        self.site = site
        self.quantity = quantity
        self.gamma = float(np.interp(site.position * self.seg.length, self.seg.centers, self.seg.gamma))
        self.times = [0.0]
        self.values = []

    def value(self, state, previous, dt):
        seg, z = self.seg, self.site.position
        if self.quantity == 'flow':
            return seg.interpolate(state.flow[seg.id], z)
        area = seg.interpolate(state.area[seg.id], z)
        if self.quantity == 'area':
            return area
        pressure = seg.interpolate(seg.pressure(state.area[seg.id]), z)
        if previous is not None and dt > 0:
            darea = (area - seg.interpolate(previous.area[seg.id], z)) / dt
            pressure += self.gamma / math.sqrt(area) * darea
        return pressure

    def start(self, value):
        self.times = [0.0]
        self.values = [value]

    def beat(self, n_samples, rate):
        return np.interp(np.arange(n_samples) / rate, self.times, self.values)


def _relative_change(current, previous):
    norm = np.linalg.norm(current)
    diff = np.linalg.norm(current - previous)
    if norm == 0:
        return diff
    return diff / norm


def simulate(net, config=None, extra_sites=()):
    """Simulate heartbeats until the waveforms at every site are periodic

    A cycle counts as periodic when every recorded beat changes by less than
    config.tolerance (relative L2) and the network volume drifts by less than
    config.drift_tolerance x SV over the cycle. The first beat starts from the
    pre-charged rest_state.

    Arguments
    ----------
    :param ArterialNetwork net: A valid network, its heart drives the root
    :param SolverConfig config: Grid, convergence and sampling options
    :param extra_sites: Additional MeasurementSites to record

    Returns
    --------
    :return: Site label -> WaveformRecord of the final cycle resampled to
             config.sampling_rate, root pressure/flow, the path end pressure and the
             convergence diagnostics
    :rtype: SimulationResult

    Exceptions
    -----------
    :raises ConfigurationError: invalid network or configuration
    :raises SolverError: numerical blow up
    """
    config = config or SolverConfig()
    report = validate_network(net)
    if report:
        raise ConfigurationError("invalid network: " + "; ".join(str(v) for v in report))
    grid = make_grid(net, config)
    plan = make_plan(net, grid)
    state = rest_state(net, grid, plan)
    inflow = _inflow_function(net, None)
    period = net.heart.period
    rate = config.sampling_rate
    n_samples = int(round(period * rate))

    sites = list(net.sites) + list(extra_sites)
    probes = []
    for site in sites:
        probes.append(_Probe(plan, site, 'area' if site.kind == 'ppg_proxy' else 'pressure'))
    root_site = MeasurementSite(net.root, 0.0, 'pressure')
    root_pressure = _Probe(plan, root_site, 'pressure')
    root_flow = _Probe(plan, MeasurementSite(net.root, 0.0, 'flow'), 'flow')
    path_end = None
    if config.record_path_end:
        path_end = _Probe(plan, MeasurementSite(net.deepest_leaf(), 1.0, 'pressure'), 'pressure')
    all_probes = probes + [root_pressure, root_flow] + ([path_end] if path_end else [])

    for probe in all_probes:
        probe.start(probe.value(state, None, 0.0))

    previous_beats = None
    residual = np.inf
    converged = False
    total_steps = 0
    cycle_start_volume = cycle_end_volume = plan.volume(state.area)
    cycles = 0
    last_values = None
    sv = net.heart.stroke_volume
    for cycle in range(config.max_cycles):
        cycles = cycle + 1
        t_end = (cycle + 1) * period
        t_start = cycle * period
        cycle_start_volume = plan.volume(state.area)
        if cycle > 0:
            for probe, value in zip(all_probes, last_values):
                probe.start(value)
        steps = 0
        while state.time < t_end - 1e-12:
            dt = _hemo.timestep(plan, state.area, state.flow, config.cfl)
            last = t_end - state.time <= dt * (1.0 + 1e-9)
            if last:
                dt = t_end - state.time
            previous = state
            state = _advance(state, plan, dt, inflow, config)
            if last:
                state = replace(state, time=t_end)
            steps += 1
            if steps > MAX_STEPS_PER_CYCLE:
                raise SolverError("time step collapsed", time=state.time)
            for probe in all_probes:
                probe.times.append(state.time - t_start)
                probe.values.append(probe.value(state, previous, dt))
        total_steps += steps
        cycle_end_volume = plan.volume(state.area)
        last_values = [probe.values[-1] for probe in all_probes]

        beats = [probe.beat(n_samples, rate) for probe in all_probes]
        if previous_beats is not None:
            residual = max(_relative_change(b, p) for b, p in zip(beats, previous_beats))
            drifting = sv > 0 and abs(cycle_end_volume - cycle_start_volume) >= config.drift_tolerance * sv
            log.debug("%s: cycle %d residual %.3e (%d steps)", net.name, cycles, residual, steps)
            if residual < config.tolerance and not drifting and cycles >= config.min_cycles:
                converged = True
                break
        previous_beats = beats

    if not converged:
        log.warning("%s: no periodic convergence after %d cycles (residual %.3e)",
                    net.name, cycles, residual)

    drift = cycle_end_volume - cycle_start_volume
    diagnostics = ConvergenceDiagnostics(cycles=cycles, residual=float(residual), converged=converged,
                                         steps=total_steps, volume_drift=drift,
                                         relative_drift=abs(drift) / sv if sv > 0 else float('nan'))

    def record(probe, units):
        samples = probe.beat(n_samples, rate)
        return WaveformRecord(samples=samples, sampling_rate=rate, duration=n_samples / rate,
                              site=probe.site, beat_period=period, units=units,
                              provenance={'network': net.name})

    records = {}
    for probe in probes:
        if probe.quantity == 'area':
            area = record(probe, 'm^2')
            try:
                records[probe.site.label] = extract_ppg(area)
            except DegenerateSignalError:
                log.warning("%s: constant area at %s, PPG proxy set to zero", net.name, probe.site.label)
                records[probe.site.label] = area.with_samples(np.zeros(n_samples), units='1')
        else:
            records[probe.site.label] = record(probe, 'Pa')

    return SimulationResult(records=records,
                            root_pressure=record(root_pressure, 'Pa'),
                            root_flow=record(root_flow, 'm^3/s'),
                            path_end_pressure=record(path_end, 'Pa') if path_end else None,
                            diagnostics=diagnostics)


def extract_ppg(record):
    """PPG proxy: the local area waveform min-max normalised to [0, 1]

    :raises DegenerateSignalError: the waveform is constant
    """
    samples = np.asarray(record.samples, dtype=float)
    low, high = np.min(samples), np.max(samples)
    if not high > low:
        raise DegenerateSignalError("constant waveform at {}".format(record.site.label))
    site = replace(record.site, kind='ppg_proxy')
    return record.with_samples((samples - low) / (high - low), site=site, units='1')


def resample_record(record, rate):
    """Periodic (Fourier) resampling of one beat to a new sampling rate"""
    if rate == record.sampling_rate:
        return record
    n = int(round(record.duration * rate))
    samples = _resample(np.asarray(record.samples, dtype=float), n)
    return replace(record, samples=samples, sampling_rate=float(rate), duration=n / float(rate))


## Persistence ##

def save_waveform(record, stem, force=False):
    """Write <stem>.f32 (little-endian float32 samples) and the <stem>.json sidecar"""
    binary = stem + '.f32'
    if os.path.exists(binary) and not force:
        raise FileExistsError("{} exists, use --force to overwrite".format(binary))
    sidecar = {
        'site': {'segment': record.site.segment, 'position': record.site.position,
                 'kind': record.site.kind},
        'sampling_rate_hz': record.sampling_rate,
        'duration_s': record.duration,
        'beat_period_s': record.beat_period,
        'units': record.units,
        'n_samples': len(record.samples),
        'dtype': '<f4',
        'provenance': record.provenance,
    }
    _write_json(stem + '.json', sidecar, force=force)
    with open(binary, 'wb') as f:
        f.write(np.asarray(record.samples, dtype='<f4').tobytes())


def load_waveform(stem):
    meta = _read_json(stem + '.json')
    with open(stem + '.f32', 'rb') as f:
        samples = np.frombuffer(f.read(), dtype='<f4').astype(float)
    if len(samples) != meta['n_samples']:
        raise ShapeError("{}: expected {} samples, found {}".format(stem, meta['n_samples'], len(samples)))
    return WaveformRecord(samples=samples, sampling_rate=meta['sampling_rate_hz'],
                          duration=meta['duration_s'], site=MeasurementSite(**meta['site']),
                          beat_period=meta['beat_period_s'], units=meta['units'],
                          provenance=meta.get('provenance', {}))


def export_csv(record, path):
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(('time_s', record.units or 'value'))
        writer.writerows((repr(float(t)), repr(float(value))) for t, value in zip(record.times, record.samples))
