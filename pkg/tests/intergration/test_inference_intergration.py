#!/usr/bin/env python

from hemosbi.cli import main, information_bits, parameter_bounds, ToySources, EXIT_OK
from hemosbi.flow import load_checkpoint, sample
from hemosbi.npe import TrainConfig, WaveformSource, train, validation_loss
from hemosbi.population import default_prior, generate_dataset, save_dataset
from hemosbi.toys import LinearGaussianToy, SquaredToy
from hemosbi.uncertainty import ExactPosterior, FlowPosterior, analyze, population_stratify, draw_samples
from hemosbi.vessel import load_network
from hemosbi.utils import read_json
import numpy as np
import os
import pytest


@pytest.fixture(scope='module')
def trained_toy(tmp_path_factory):
    """Train on the linear-Gaussian toy through the command line"""
    root = tmp_path_factory.mktemp('toy')
    out = str(root / 'train')
    code = main(['train', '--toy', 'linear-gaussian', '--snr', 'none', '10', '--epochs', '40',
                 '--learning-rate', '0.005', '--toy-size', '2000', '200', '200', '--workers', '1',
                 '--out', out, '-q'])
    assert code == EXIT_OK
    return root, out


@pytest.mark.intergration
@pytest.mark.npe
def test_train_command_outputs(trained_toy):
    root, out = trained_toy
    for rid in ('linear-gaussian-snrnone-r0', 'linear-gaussian-snr10-r0'):
        for name in ('model.ckpt', 'history.csv', 'metrics.json'):
            assert os.path.exists(os.path.join(out, rid, name)), '{}/{} missing'.format(rid, name)
    summary = open(os.path.join(out, 'summary.csv')).read().splitlines()
    assert summary[0] == 'site,snr_db,metric,mean,std,n'
    assert len(summary) == 3


@pytest.mark.intergration
@pytest.mark.npe
def test_trained_posterior_matches_conjugate(trained_toy):
    root, out = trained_toy
    model, meta = load_checkpoint(os.path.join(out, 'linear-gaussian-snrnone-r0', 'model.ckpt'))
    assert meta['names'] == ['phi1']
    assert meta['source']['kind'] == 'toy'
    toy = LinearGaussianToy()
    _, xs, _ = toy.source(1, 1, 100, seed=11).batch('test')
    errors_mean, errors_std = [], []
    for i, x in enumerate(xs[:, 0]):
        draws = sample(model, np.array([x]), 50.0, 2000, seed=i)[:, 0]
        errors_mean.append(abs(draws.mean() - toy.posterior_mean([x], 50.0)[0, 0]))
        errors_std.append(abs(draws.std() / toy.posterior_std() - 1.0))
    assert len(errors_mean) == 100
    assert np.mean(errors_mean) < 0.05, 'posterior mean is off by {:.3f}'.format(np.mean(errors_mean))
    assert np.mean(errors_std) < 0.1, 'posterior spread is off by {:.0%}'.format(np.mean(errors_std))


@pytest.mark.intergration
@pytest.mark.uncertainty
def test_analyze_and_report_commands(trained_toy):
    root, out = trained_toy
    checkpoints = [os.path.join(out, rid, 'model.ckpt')
                   for rid in ('linear-gaussian-snrnone-r0', 'linear-gaussian-snr10-r0')]
    analysis = str(root / 'analysis')
    code = main(['analyze', '--checkpoint'] + checkpoints +
                ['--metrics', 'calibration', 'sci', 'point', 'laplace', '--samples', '300',
                 '--laplace-count', '3', '--out', analysis, '-q'])
    assert code == EXIT_OK
    report = read_json(os.path.join(analysis, 'report.json'))
    assert len(report['runs']) == 2
    entry = report['runs'][0]['report']
    assert set(entry) >= {'calibration', 'sci', 'sci_std', 'prior_sci', 'mae', 'correlation', 'mi_bits'}
    assert entry['calibration']['phi1'] < 0.15
    assert entry['sci']['phi1']['0.95'] < entry['prior_sci']['phi1']['0.95']
    noisy = next(r['report'] for r in report['runs'] if r['snr_db'] == 10.0)
    assert noisy['mi_bits']['phi1']['0.95'] <= entry['mi_bits']['phi1']['0.95'] + 0.5
    laplace = open(os.path.join(analysis, 'fig3_laplace.csv')).read().splitlines()
    assert len(laplace) == 1 + 2 * 3
    rows = open(os.path.join(analysis, 'report.csv')).read().splitlines()
    assert len(rows) == 1 + 2 * 200
    assert os.path.exists(os.path.join(analysis, 'fig2_sci.csv'))

    summary = str(root / 'report')
    assert main(['report', analysis, '--out', summary, '-q']) == EXIT_OK
    assert 'phi1' in open(os.path.join(summary, 'report.md')).read()


@pytest.mark.intergration
@pytest.mark.uncertainty
def test_noise_sweep_at_analysis(trained_toy):
    root, out = trained_toy
    analysis = str(root / 'sweep')
    checkpoint = os.path.join(out, 'linear-gaussian-snrnone-r0', 'model.ckpt')
    assert main(['analyze', '--checkpoint', checkpoint, '--metrics', 'sci', '--snr', '0', '20',
                 '--samples', '200', '--out', analysis, '-q']) == EXIT_OK
    runs = read_json(os.path.join(analysis, 'report.json'))['runs']
    assert [r['snr_db'] for r in runs] == [0.0, 20.0]


@pytest.mark.intergration
@pytest.mark.uncertainty
def test_squared_toy_stratification():
    """A flow trained on x = phi^2 + noise puts a mode at each of +-sqrt(x1)"""
    toy = SquaredToy(noise_sd=0.05)
    source = toy.source(4000, 500, 200, seed=0)
    model, history = train(source, TrainConfig(epochs=30, learning_rate=5e-3, seed=0))
    theta, x, age = source.batch('test')
    samples = draw_samples(FlowPosterior(model), x[:60], age[:60], 500)
    strat = population_stratify(samples, (0, 1), bounds=toy.bounds)
    assert len(strat.labels) == 60 and strat.dips.shape == (60, 2)
    far = np.flatnonzero(x[:60, 0] > 0.25)
    assert len(far) > 10
    both_signs = np.minimum((samples[far, :, 0] > 0).mean(axis=1), (samples[far, :, 0] < 0).mean(axis=1))
    assert both_signs.mean() > 0.2, 'the flow did not learn the sign ambiguity'
    root = np.sqrt(x[far, 0])
    upper = np.array([_peak(s[s > 0]) for s in samples[far, :, 0]])
    lower = np.array([_peak(s[s < 0]) for s in samples[far, :, 0]])
    assert np.median(np.abs(upper - root)) < 0.1, 'positive mode away from +sqrt(x1)'
    assert np.median(np.abs(lower + root)) < 0.1, 'negative mode away from -sqrt(x1)'
    reference = analyze(ExactPosterior(toy), theta, x, age, source.names, toy.bounds, n_samples=300)
    learned = analyze(FlowPosterior(model), theta, x, age, source.names, toy.bounds, n_samples=300)
    assert learned.sci['phi2'][0.95] < 2.0 * reference.sci['phi2'][0.95] + 0.1


def _peak(values, width=0.02):
    """Centre of the fullest bin of a histogram"""
    if len(values) == 0:
        return np.nan
    edges = np.arange(np.min(values), np.max(values) + width, width)
    if len(edges) < 2:
        return float(np.mean(values))
    counts, edges = np.histogram(values, edges)
    k = int(np.argmax(counts))
    return 0.5 * (edges[k] + edges[k + 1])


@pytest.mark.intergration
@pytest.mark.uncertainty
def test_information_bound_falls_with_snr():
    toy = LinearGaussianToy()
    factory = ToySources('linear-gaussian', (10, 10, 200))
    bits, sizes = [], []
    for snr in (0.0, 5.0, 10.0, 15.0, 20.0):
        theta, x, age = factory('linear-gaussian', snr, 0).batch('test')
        posterior = ExactPosterior(toy, noise_sd=factory.noise_sd(toy, snr))
        report = analyze(posterior, theta, x, age, ['phi1'], toy.bounds, n_samples=500)
        sizes.append(report.sci['phi1'][0.95])
        bits.append(information_bits(report, 100)['phi1']['0.95'])
    assert all(b < a for a, b in zip(sizes, sizes[1:])), 'SCI {}'.format(sizes)
    assert all(b < a for a, b in zip(bits, bits[1:])), 'bits {}'.format(bits)


@pytest.fixture(scope='module')
def tube_dataset():
    template = load_network('tube1')
    return generate_dataset(default_prior(template), template, 20, seed=1)


@pytest.mark.slow
@pytest.mark.intergration
@pytest.mark.npe
def test_waveform_training(tube_dataset):
    dataset = tube_dataset
    source = WaveformSource(dataset, dataset.sites[0], 20.0, seed=0)
    model, history = train(source, TrainConfig(epochs=2, batch_size=7))
    assert len(history) == 2
    assert np.isfinite(validation_loss(model, source))
    theta, x, age = source.batch('test')
    report = analyze(FlowPosterior(model), theta, x, age, source.names,
                     [(v.min() - 1, v.max() + 1) for v in dataset.interest('train').T], n_samples=100)
    assert set(report.sci) == {'hr', 'lvet', 'diameter', 'pwv', 'svr'}


@pytest.mark.slow
@pytest.mark.intergration
@pytest.mark.cli
def test_joint_site_commands(tube_dataset, tmp_path):
    path = str(tmp_path / 'dataset')
    save_dataset(tube_dataset, path)
    joint = 'aorta@0.00:pressure+aorta@1.00:pressure'
    out = str(tmp_path / 'train')
    assert main(['train', '--dataset', path, '--site', joint, 'aorta@0.50:pressure', '--snr', '20',
                 '--epochs', '2', '--batch-size', '7', '--workers', '1', '--out', out, '-q']) == EXIT_OK
    checkpoint = os.path.join(out, joint + '-snr20-r0', 'model.ckpt')
    model, meta = load_checkpoint(checkpoint)
    assert meta['site'] == joint
    assert model.encoder_config.in_channels == 2
    analysis = str(tmp_path / 'analysis')
    assert main(['analyze', '--checkpoint', checkpoint, '--metrics', 'sci', '--samples', '100',
                 '--out', analysis, '-q']) == EXIT_OK
    runs = read_json(os.path.join(analysis, 'report.json'))['runs']
    assert runs[0]['site'] == joint and 'hr' in runs[0]['report']['sci']


@pytest.mark.slow
@pytest.mark.intergration
@pytest.mark.uncertainty
def test_heart_rate_interval_shrinks_with_snr():
    """Radial pressure on the arm tree: the HR interval narrows as the noise falls"""
    template = load_network('aorta_radial7')
    dataset = generate_dataset(default_prior(template), template, 300, seed=0,
                               workers=max(1, min(8, os.cpu_count() or 1)))
    bounds = parameter_bounds(dataset)
    low, high = bounds[0]
    sizes = []
    for snr in (0.0, 10.0, 20.0):
        source = WaveformSource(dataset, 'radial@0.90:pressure', snr, seed=0)
        model, _ = train(source, TrainConfig(epochs=40, batch_size=50, seed=0))
        theta, x, age = source.batch('test')
        report = analyze(FlowPosterior(model), theta, x, age, source.names, bounds, n_samples=300)
        sizes.append(report.sci['hr'][0.95])
    for noisier, cleaner in zip(sizes, sizes[1:]):
        assert cleaner <= 1.1 * noisier, 'HR SCI@95 grew with the SNR: {}'.format(sizes)
    assert sizes[-1] < 0.2 * (high - low), 'HR SCI@95 at 20 dB is {:.1f} bpm of {:.1f}'.format(
        sizes[-1], high - low)
