#!/usr/bin/env python

from hemosbi.hemo import SolverConfig, SolverGrid, WaveformRecord, inflow_waveform
from hemosbi.hemo import make_grid, make_plan, stable_timestep, rest_state, advance_step, lumped_cycle
from hemosbi.hemo import network_resistance
from hemosbi.hemo import windkessel_outflow, junction_coupling, extract_ppg, resample_record
from hemosbi.hemo import save_waveform, load_waveform, export_csv
from hemosbi.vessel import HeartFunction, MeasurementSite, WindkesselBed, load_network, tube_law_pressure
from hemosbi.utils import ConfigurationError, DomainError, DegenerateSignalError, ShapeError
from hemosbi import _hemo
from dataclasses import replace
from types import SimpleNamespace
from pytest import raises
from scipy.integrate import quad
import csv
import numpy as np
import pytest

HEART = HeartFunction(heart_rate=75.0, stroke_volume=70e-6, lvet=0.29, pft=0.08, rfv=0.05)
SITE = MeasurementSite('aorta', 0.5)


@pytest.fixture(scope='module')
def tube():
    return load_network('tube1')


def _record(samples, rate=125.0, site=SITE):
    samples = np.asarray(samples, dtype=float)
    return WaveformRecord(samples=samples, sampling_rate=rate, duration=len(samples) / rate,
                          site=site, beat_period=len(samples) / rate)


@pytest.mark.parametrize('heart', [
 HEART,
 replace(HEART, rfv=0.0),
 replace(HEART, heart_rate=50.0, lvet=0.33, pft=0.07),
 replace(HEART, heart_rate=110.0, stroke_volume=50e-6, lvet=0.22, pft=0.09, rfv=0.15),
 ])
@pytest.mark.unit
@pytest.mark.hemo
def test_inflow_integrates_to_stroke_volume(heart):
    ejected, _ = quad(lambda t: inflow_waveform(heart, t), 0.0, heart.lvet, points=[heart.pft, heart.lvet / 2],
                      limit=200)
    assert ejected == pytest.approx(heart.stroke_volume, rel=1e-4), 'inflow does not eject the stroke volume'


@pytest.mark.unit
@pytest.mark.hemo
def test_inflow_shape():
    heart = replace(HEART, rfv=0.0)
    t = np.linspace(0.0, heart.period, 8001, endpoint=False)
    q = inflow_waveform(heart, t)
    assert np.all(q >= 0), 'inflow must be non-negative'
    assert t[np.argmax(q)] == pytest.approx(heart.pft, abs=1e-3), 'peak flow must be at PFT'
    assert np.all(q[t >= heart.lvet] == 0), 'no flow after ejection'


@pytest.mark.unit
@pytest.mark.hemo
def test_inflow_periodic():
    t = np.linspace(0.0, 0.8, 50)
    assert np.allclose(inflow_waveform(HEART, t), inflow_waveform(HEART, t + 3 * HEART.period))
    assert isinstance(inflow_waveform(HEART, 0.1), float)


@pytest.mark.unit
@pytest.mark.hemo
def test_inflow_zero_stroke_volume():
    assert inflow_waveform(replace(HEART, stroke_volume=0.0), 0.05) == 0.0


@pytest.mark.parametrize('heart,t', [
 (HEART, -0.1),
 (replace(HEART, pft=0.3), 0.1),
 (replace(HEART, lvet=0.9), 0.1),
 ])
@pytest.mark.unit
@pytest.mark.hemo
def test_inflow_domain(heart, t):
    with raises(DomainError):
        inflow_waveform(heart, t)


@pytest.mark.unit
@pytest.mark.hemo
def test_make_grid(tube):
    grid = make_grid(tube, SolverConfig(dx=0.02))
    assert grid.cells == (20,)
    assert grid.dx[0] == pytest.approx(0.02)
    assert grid.dt == pytest.approx(stable_timestep(tube, grid)), 'grid step is the rest state CFL step'


@pytest.mark.unit
@pytest.mark.hemo
def test_make_grid_minimum_cells(tube):
    grid = make_grid(tube, SolverConfig(dx=1.0))
    assert grid.cells == (4,), 'every segment has at least 4 cells'


@pytest.mark.unit
@pytest.mark.hemo
def test_stable_timestep_scales_with_cfl(tube):
    full = make_grid(tube, SolverConfig(cfl=1.0))
    half = make_grid(tube, SolverConfig(cfl=0.5))
    assert half.dt == pytest.approx(0.5 * full.dt)


@pytest.mark.unit
@pytest.mark.hemo
def test_stable_timestep_rejects_degenerate_grid(tube):
    grid = make_grid(tube)
    bad = SolverGrid(cells=grid.cells, dx=(0.0,), dt=grid.dt, cfl=grid.cfl)
    with raises(ConfigurationError):
        stable_timestep(tube, bad)


@pytest.mark.parametrize('config', [
 SolverConfig(dx=0.0),
 SolverConfig(cfl=1.5),
 SolverConfig(limiter='vanleer'),
 SolverConfig(junction_pressure='dynamic'),
 SolverConfig(drift_tolerance=0.0),
 ])
@pytest.mark.unit
@pytest.mark.hemo
def test_invalid_solver_config(tube, config):
    with raises(ConfigurationError):
        make_grid(tube, config)


@pytest.mark.unit
@pytest.mark.hemo
def test_solver_config_round_trip():
    config = SolverConfig(dx=0.01, limiter='superbee')
    assert SolverConfig.from_dict(config.to_dict()) == config
    with raises(ConfigurationError):
        SolverConfig.from_dict({'dt': 1e-4})


@pytest.mark.unit
@pytest.mark.hemo
def test_rest_state_is_steady(tube):
    """Zero inflow into an unpressurised network leaves it untouched"""
    grid = make_grid(tube)
    plan = make_plan(tube, grid)
    state = rest_state(tube, grid, plan, pressure=0.0)
    for _ in range(10):
        state = advance_step(state, tube, grid, inflow=0.0, plan=plan)
    seg = plan.segments['aorta']
    assert np.allclose(state.area['aorta'], seg.a0, rtol=1e-12, atol=0.0)
    assert np.allclose(state.flow['aorta'], 0.0, atol=1e-15)


@pytest.mark.parametrize('name', ['tube1', 'bifurcation3', 'aorta_radial7'])
@pytest.mark.unit
@pytest.mark.hemo
def test_lumped_cycle_mean_pressure(name):
    """The lumped beat carries the mean inflow through the network resistance"""
    net = load_network(name)
    times, proximal, beds = lumped_cycle(net)
    assert len(times) == len(proximal) == 2000
    p_out = np.mean([bed.outflow_pressure for bed in net.beds.values()])
    expected = p_out + net.heart.mean_flow * network_resistance(net)
    assert np.mean(proximal) == pytest.approx(expected, rel=1e-3)
    assert set(beds) == set(net.leaves())
    for leaf, pc in beds.items():
        assert np.all(pc < np.max(proximal)), 'bed pressure above the proximal pressure'


@pytest.mark.unit
@pytest.mark.hemo
def test_lumped_cycle_without_inflow(tube):
    _, proximal, beds = lumped_cycle(replace(tube, heart=replace(tube.heart, stroke_volume=0.0)))
    assert np.allclose(proximal, 0.0, atol=1e-9)
    assert np.allclose(beds['aorta'], 0.0, atol=1e-9)


@pytest.mark.unit
@pytest.mark.hemo
def test_rest_state_is_precharged(tube):
    """The default start is the end diastolic state of the lumped beat"""
    grid = make_grid(tube)
    state = rest_state(tube, grid)
    _, proximal, beds = lumped_cycle(tube, make_plan(tube, grid))
    pressure = tube_law_pressure(state.area['aorta'][0], 0.0, tube.segment('aorta'))
    assert pressure == pytest.approx(proximal[0], rel=1e-9)
    assert pressure < np.mean(proximal), 'the beat starts in diastole'
    assert state.bed_pressure['aorta'] == pytest.approx(beds['aorta'][0])
    assert np.all(state.flow['aorta'] == 0.0)


@pytest.mark.unit
@pytest.mark.hemo
def test_rest_state_at_given_pressure(tube):
    grid = make_grid(tube)
    state = rest_state(tube, grid, pressure=12000.0)
    bed = tube.beds['aorta']
    pressure = tube_law_pressure(state.area['aorta'][-1], 0.0, tube.segment('aorta'))
    assert pressure == pytest.approx(12000.0, rel=1e-9)
    assert state.bed_pressure['aorta'] == pytest.approx(12000.0 * bed.distal_resistance / bed.total_resistance)


@pytest.mark.parametrize('inflow', [1e-5, lambda t: 2e-5 * np.sin(20 * t) ** 2])
@pytest.mark.unit
@pytest.mark.hemo
def test_mass_conservation(tube, inflow):
    """Volume changes by exactly the boundary fluxes"""
    grid = make_grid(tube)
    plan = make_plan(tube, grid)
    state = rest_state(tube, grid, plan)
    for step in range(40):
        before = state.volume(grid, tube)
        state = advance_step(state, tube, grid, inflow=inflow, plan=plan)
        exchanged = state.boundary.net * grid.dt
        assert state.volume(grid, tube) - before == pytest.approx(exchanged, rel=1e-10, abs=1e-20), \
            'volume not conserved in step {}'.format(step)


@pytest.mark.unit
@pytest.mark.hemo
def test_mass_conservation_with_junction():
    net = load_network('bifurcation3')
    grid = make_grid(net)
    plan = make_plan(net, grid)
    state = rest_state(net, grid, plan)
    for step in range(40):
        before = state.volume(grid, net)
        state = advance_step(state, net, grid, inflow=3e-5, plan=plan)
        exchanged = state.boundary.net * grid.dt
        assert state.volume(grid, net) - before == pytest.approx(exchanged, rel=1e-10, abs=1e-20), \
            'volume not conserved in step {}'.format(step)
    assert set(state.boundary.outflow) == {'left_iliac', 'right_iliac'}


@pytest.mark.unit
@pytest.mark.hemo
def test_windkessel_steady_state():
    """With a steady outflow the bed settles at P_out + R2 q and the terminal pressure at P_out + (R1 + R2) q"""
    bed = WindkesselBed(1e7, 1e8, 1e-8, outflow_pressure=500.0)
    q = 5e-5
    steady = bed.outflow_pressure + bed.distal_resistance * q
    update = windkessel_outflow(q, steady + bed.proximal_resistance * q, bed, steady, dt=1e-3)
    assert update.bed_pressure == pytest.approx(steady)
    assert update.terminal_pressure == pytest.approx(bed.outflow_pressure + bed.total_resistance * q)
    assert update.mismatch == pytest.approx(0.0, abs=1e-6)


@pytest.mark.unit
@pytest.mark.hemo
def test_windkessel_discharges_without_inflow():
    """Without outflow into the bed its pressure relaxes to P_out with time constant R2 C"""
    bed = WindkesselBed(1e7, 1e8, 1e-8, outflow_pressure=500.0)
    pc, dt = 10000.0, 1e-3
    for _ in range(100):
        update = windkessel_outflow(0.0, pc, bed, pc, dt)
        assert bed.outflow_pressure < update.bed_pressure < pc
        pc = update.bed_pressure
    exact = 500.0 + 9500.0 * np.exp(-0.1 / (bed.distal_resistance * bed.compliance))
    assert pc == pytest.approx(exact, rel=1e-2), 'implicit Euler strays from the exponential decay'
    for _ in range(20000):
        pc = windkessel_outflow(0.0, pc, bed, pc, dt).bed_pressure
    assert pc == pytest.approx(bed.outflow_pressure, abs=1e-3)


@pytest.mark.unit
@pytest.mark.hemo
def test_windkessel_large_compliance():
    """A very compliant bed holds its pressure whatever flows in"""
    bed = WindkesselBed(1e7, 1e8, 1.0)
    update = windkessel_outflow(5e-5, 0.0, bed, 8000.0, 1e-3)
    assert update.bed_pressure == pytest.approx(8000.0, rel=1e-6)
    assert update.terminal_pressure == pytest.approx(8000.0 + 1e7 * 5e-5, rel=1e-6)


@pytest.mark.unit
@pytest.mark.hemo
def test_windkessel_rejects_compliance():
    with raises(DomainError):
        windkessel_outflow(1e-5, 0.0, WindkesselBed(1e7, 1e8, 0.0), 0.0, 1e-3)


@pytest.mark.unit
@pytest.mark.hemo
def test_junction_at_rest():
    net = load_network('bifurcation3')
    parent = net.segment('aorta')
    children = [net.segment('left_iliac'), net.segment('right_iliac')]
    starts = [(c.reference_area_at(0.0), 0.0) for c in children]
    solution = junction_coupling((parent.reference_area_at(1.0), 0.0), starts, parent, children, net.blood)
    assert solution.iterations == 0
    assert solution.parent[0] == pytest.approx(parent.reference_area_at(1.0))
    assert all(q == 0 for _, q in solution.children)


@pytest.mark.parametrize('pressure', ['total', 'static'])
@pytest.mark.unit
@pytest.mark.hemo
def test_junction_coupling(pressure):
    net = load_network('bifurcation3')
    rho = net.blood.density
    parent = net.segment('aorta')
    children = [net.segment('left_iliac'), net.segment('right_iliac')]
    parent_end = (parent.reference_area_at(1.0) * 1.1, 4e-5)
    starts = [(c.reference_area_at(0.0) * 1.05, 1e-5) for c in children]
    solution = junction_coupling(parent_end, starts, parent, children, net.blood, pressure=pressure)

    a_p, q_p = solution.parent
    assert q_p == pytest.approx(sum(q for _, q in solution.children), rel=1e-12), 'mass not conserved'
    kinetic = 1.0 if pressure == 'total' else 0.0
    head = tube_law_pressure(a_p, 0.0, parent, 1.0) + kinetic * 0.5 * rho * (q_p / a_p) ** 2
    for (a, q), child in zip(solution.children, children):
        child_head = tube_law_pressure(a, 0.0, child, 0.0) + kinetic * 0.5 * rho * (q / a) ** 2
        assert child_head == pytest.approx(head, rel=1e-6, abs=1e-3), 'pressure is discontinuous'


@pytest.mark.parametrize('pressure', ['total', 'static'])
@pytest.mark.unit
@pytest.mark.hemo
def test_pass_through_junction(pressure):
    """A junction with one identical child passes the flow on unchanged"""
    net = load_network('bifurcation3')
    parent = net.segment('aorta')
    child = replace(parent, id='extension', radius_proximal=parent.radius_distal)
    a0 = parent.reference_area_at(1.0)
    solution = junction_coupling((a0 * 1.05, 3e-5), [(a0 * 1.02, 2e-5)], parent, [child], net.blood,
                                 pressure=pressure)
    (a_p, q_p), ((a_c, q_c),) = solution.parent, solution.children
    assert abs(q_p - q_c) <= 1e-8 * abs(q_p), 'flux differs across a pass-through junction'
    assert a_c == pytest.approx(a_p, rel=1e-8)


@pytest.mark.unit
@pytest.mark.hemo
def test_extract_ppg():
    record = _record(2.0 + np.sin(np.linspace(0, 2 * np.pi, 100, endpoint=False)))
    ppg = extract_ppg(record)
    assert ppg.samples.min() == pytest.approx(0.0) and ppg.samples.max() == pytest.approx(1.0)
    assert ppg.site.kind == 'ppg_proxy'
    assert ppg.units == '1'


@pytest.mark.unit
@pytest.mark.hemo
def test_extract_ppg_constant():
    with raises(DegenerateSignalError):
        extract_ppg(_record(np.full(100, 3.0)))


@pytest.mark.unit
@pytest.mark.hemo
def test_waveform_length_checked():
    with raises(ShapeError):
        WaveformRecord(samples=np.zeros(99), sampling_rate=125.0, duration=0.8, site=SITE, beat_period=0.8)


@pytest.mark.unit
@pytest.mark.hemo
def test_resample_record():
    t = np.arange(800) / 1000.0
    record = _record(np.sin(2 * np.pi * t / 0.8), rate=1000.0)
    low = resample_record(record, 125.0)
    assert len(low.samples) == 100
    assert low.sampling_rate == 125.0
    assert np.allclose(low.samples, np.sin(2 * np.pi * low.times / 0.8), atol=1e-6)


@pytest.mark.unit
@pytest.mark.hemo
def test_waveform_files(tmp_path):
    record = _record(np.linspace(0.0, 1.0, 100))
    stem = str(tmp_path / 'aorta')
    save_waveform(record, stem)
    loaded = load_waveform(stem)
    assert np.allclose(loaded.samples, record.samples, atol=1e-7)
    assert loaded.site == record.site and loaded.sampling_rate == 125.0
    with raises(FileExistsError):
        save_waveform(record, stem)

    export_csv(record, stem + '.csv')
    lines = (tmp_path / 'aorta.csv').read_text().splitlines()
    assert lines[0] == 'time_s,Pa'
    assert len(lines) == 101
    export_csv(record.with_samples(record.samples, units='mmHg, gauge'), stem + '-gauge.csv')
    with open(stem + '-gauge.csv', newline='') as f:
        header, first = list(csv.reader(f))[:2]
    assert header == ['time_s', 'mmHg, gauge']
    assert float(first[1]) == record.samples[0]


@pytest.mark.unit
@pytest.mark.hemo
def test_viscous_split_smooths_flow():
    """The wall viscosity step diffuses Q and keeps its total on a uniform segment"""
    n = 50
    seg = SimpleNamespace(n=n, dx=0.01, gamma=np.full(n, 2e3))
    area = np.full(n, 3e-4)
    flow = np.zeros(n)
    flow[n // 2] = 1e-4
    smoothed = _hemo.viscous_split(seg, area, flow, 1e-4, 1060.0)
    assert smoothed.sum() == pytest.approx(flow.sum(), rel=1e-12)
    assert smoothed.max() < flow.max(), 'the peak should spread to its neighbours'
    assert np.all(smoothed >= 0.0)
    assert np.array_equal(area, np.full(n, 3e-4))
    still = SimpleNamespace(n=n, dx=0.01, gamma=np.zeros(n))
    assert _hemo.viscous_split(still, area, flow, 1e-4, 1060.0) is flow
