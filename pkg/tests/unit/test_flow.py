#!/usr/bin/env python

from hemosbi.flow import EncoderConfig, Encoder, ConditionalFlow, MADE, made_masks
from hemosbi.flow import encode, flow_forward, flow_inverse, log_prob, sample, loss_and_gradients
from hemosbi.flow import save_checkpoint, load_checkpoint, CHECKPOINT_MAGIC
from hemosbi.utils import ConfigurationError, NumericError, ShapeError
from scipy.integrate import trapezoid
from scipy.stats import norm
from pytest import raises
import struct
import numpy as np
import pytest
import torch

IDENTITY = EncoderConfig(layers=(), input_length=4)


def _perturb(module, scale=0.1, seed=0):
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in module.parameters():
            param.add_(scale * torch.randn(param.shape, generator=generator))
    return module


def _toy_flow(dim=2, steps=3, seed=0, use_age=True):
    return _perturb(ConditionalFlow(dim, IDENTITY, hidden=16, steps=steps, seed=seed, use_age=use_age),
                    seed=seed)


@pytest.mark.parametrize('config,length,embedding', [
 (EncoderConfig(), 9, 18),
 (EncoderConfig(width=1.0), 9, 90),
 (EncoderConfig(layers=(40,), width=0.5), 499, 20 * 499),
 (IDENTITY, 4, 4),
 (EncoderConfig(layers=(), input_length=4, in_channels=2), 4, 8),
 (EncoderConfig(in_channels=3), 9, 18),
 ])
@pytest.mark.unit
@pytest.mark.flow
def test_encoder_lengths(config, length, embedding):
    assert config.output_length() == length
    assert config.embedding_dim == embedding


@pytest.mark.unit
@pytest.mark.flow
def test_encoder_output_shape():
    encoder = Encoder(EncoderConfig())
    assert encoder(torch.zeros(3, 1, 1000)).shape == (3, 18)
    stacked = Encoder(EncoderConfig(in_channels=2))
    assert stacked(torch.zeros(3, 2, 1000)).shape == (3, 18)


@pytest.mark.unit
@pytest.mark.flow
def test_encoder_too_deep():
    with raises(ConfigurationError):
        EncoderConfig(input_length=8).output_length()


@pytest.mark.unit
@pytest.mark.flow
def test_encoder_config_dict():
    config = EncoderConfig(width=0.5, in_channels=2)
    assert EncoderConfig.from_dict(config.to_dict()) == config
    with raises(ConfigurationError):
        EncoderConfig.from_dict({'depth': 3})


@pytest.mark.parametrize('dim,hidden', [(1, 8), (3, 12), (5, 7)])
@pytest.mark.unit
@pytest.mark.flow
def test_made_masks_autoregressive(dim, hidden):
    masks = made_masks(dim, hidden)
    connected = masks[0]
    for mask in masks[1:]:
        connected = mask @ connected
    for out in range(2 * dim):
        i = out % dim
        assert torch.all(connected[out, i:] == 0), 'output {} sees input >= {}'.format(out, i)


@pytest.mark.unit
@pytest.mark.flow
def test_made_gradients_autoregressive():
    made = _perturb(MADE(3, 12, cond_dim=2))
    theta = torch.randn(4, 3, requires_grad=True)
    mu, sigma = made(theta, torch.randn(4, 2))
    for i in range(3):
        for out in (mu, sigma):
            grad, = torch.autograd.grad(out[:, i].sum(), theta, retain_graph=True)
            assert torch.all(grad[:, i:] == 0), 'coordinate {} depends on later coordinates'.format(i)


@pytest.mark.unit
@pytest.mark.flow
def test_fresh_flow_is_base_density():
    """Zero output weights make every step the identity"""
    model = ConditionalFlow(2, IDENTITY, hidden=16)
    mean, std = np.array([70.0, 0.3]), np.array([10.0, 0.05])
    model.set_normalization(theta=(mean, std))
    theta = np.array([[72.0, 0.28], [55.0, 0.35]])
    expected = norm.logpdf(theta, mean, std).sum(axis=1)
    with torch.no_grad():
        got = log_prob(model, theta, np.zeros(4), 50.0).numpy()
    assert got == pytest.approx(expected, rel=1e-5)


@pytest.mark.unit
@pytest.mark.flow
def test_inverse_round_trip():
    model = _toy_flow(dim=3)
    with torch.no_grad():
        h = encode(model, np.ones(4), 40.0).expand(5, -1)
        theta = torch.randn(5, 3, generator=torch.Generator().manual_seed(1))
        z, _ = flow_forward(model, theta, h)
        back = flow_inverse(model, z, h)
    assert torch.allclose(back, theta, atol=1e-4), 'inverse does not undo the forward pass'


@pytest.mark.unit
@pytest.mark.flow
def test_inverse_round_trip_double():
    model = _toy_flow(dim=3).double()
    theta = torch.randn(1000, 3, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    with torch.no_grad():
        h = encode(model, np.ones(4), 40.0).expand(1000, -1)
        z, _ = flow_forward(model, theta, h)
        back = flow_inverse(model, z, h)
    assert float((back - theta).abs().max()) < 1e-12


def _numeric_jacobian(f, point, eps=1e-6):
    columns = []
    for j in range(len(point)):
        step = np.zeros(len(point))
        step[j] = eps
        columns.append((f(point + step) - f(point - step)) / (2.0 * eps))
    return np.stack(columns, axis=1)


@pytest.mark.parametrize('seed', [0, 1, 2])
@pytest.mark.unit
@pytest.mark.flow
def test_logdet_matches_jacobian(seed):
    model = _toy_flow(dim=3, seed=seed).double()
    with torch.no_grad():
        h = encode(model, np.linspace(-1, 1, 4), 60.0)

        def forward(point):
            return flow_forward(model, torch.as_tensor(point[None, :]), h)[0][0].numpy()

        point = np.random.default_rng(seed).normal(size=3)
        _, logdet = flow_forward(model, torch.as_tensor(point[None, :]), h)
    sign, expected = np.linalg.slogdet(_numeric_jacobian(forward, point))
    assert sign > 0, 'each affine step is increasing'
    assert float(logdet[0]) == pytest.approx(expected, abs=1e-8)


@pytest.mark.unit
@pytest.mark.flow
def test_gradients_match_central_differences():
    model = _perturb(ConditionalFlow(3, IDENTITY, hidden=8, steps=3, seed=5), seed=5).double()
    rng = np.random.default_rng(5)
    theta, x, age = rng.normal(size=(16, 3)), rng.normal(size=(16, 4)), rng.uniform(20, 80, size=16)
    _, bundle = loss_and_gradients(model, theta, x, age)

    def loss():
        with torch.no_grad():
            return float(-log_prob(model, theta, x, age).mean())

    eps = 1e-6
    for name, param in model.named_parameters():
        numeric = torch.zeros_like(param)
        flat, out = param.data.view(-1), numeric.view(-1)
        for i in range(flat.numel()):
            original = float(flat[i])
            flat[i] = original + eps
            up = loss()
            flat[i] = original - eps
            down = loss()
            flat[i] = original
            out[i] = (up - down) / (2.0 * eps)
        scale = max(float(bundle.grads[name].abs().max()), 1e-3)
        error = float((bundle.grads[name] - numeric).abs().max()) / scale
        assert error < 1e-6, '{}: relative gradient error {:.2e}'.format(name, error)


@pytest.mark.unit
@pytest.mark.flow
def test_log_prob_normalised():
    model = _toy_flow(dim=2)
    grid = np.linspace(-8.0, 8.0, 321)
    a, b = np.meshgrid(grid, grid, indexing='ij')
    theta = np.stack([a.ravel(), b.ravel()], axis=1)
    with torch.no_grad():
        density = np.exp(log_prob(model, theta, np.ones(4), 50.0).numpy()).reshape(a.shape)
    assert trapezoid(trapezoid(density, grid), grid) == pytest.approx(1.0, abs=5e-3)


@pytest.mark.unit
@pytest.mark.flow
def test_sample():
    model = _toy_flow(dim=3)
    x = np.linspace(0, 1, 4)
    draws = sample(model, x, 50.0, 200, seed=4)
    assert draws.shape == (200, 3)
    assert np.all(np.isfinite(draws))
    assert np.array_equal(draws, sample(model, x, 50.0, 200, seed=4)), 'sampling must be seeded'
    assert not np.array_equal(draws, sample(model, x, 50.0, 200, seed=5))


@pytest.mark.unit
@pytest.mark.flow
def test_sample_single_observation_only():
    with raises(ShapeError):
        sample(_toy_flow(), np.zeros((2, 4)), [50.0, 60.0], 10)


@pytest.mark.unit
@pytest.mark.flow
def test_encode_shapes():
    model = _toy_flow()
    assert encode(model, np.zeros((6, 4)), 30.0).shape == (6, 5)
    assert encode(_toy_flow(use_age=False), np.zeros((6, 4)), None).shape == (6, 4)
    with raises(ShapeError):
        encode(model, np.zeros(5), 30.0)


@pytest.mark.unit
@pytest.mark.flow
def test_encode_stacked_sites():
    model = _perturb(ConditionalFlow(2, EncoderConfig(layers=(), input_length=4, in_channels=2), hidden=16))
    assert encode(model, np.zeros((6, 2, 4)), 30.0).shape == (6, 9)
    assert encode(model, np.zeros((2, 4)), 30.0).shape == (1, 9), 'a (C, L) array is one observation'
    with raises(ShapeError):
        encode(model, np.zeros((6, 4)), 30.0)
    model.set_normalization(x=((1.0, 100.0), (2.0, 50.0)))
    x = np.stack([np.full(4, 1.0), np.full(4, 150.0)])
    with torch.no_grad():
        h = encode(model, x, 30.0)[0].numpy()
    assert np.allclose(h[:4], 0.0) and np.allclose(h[4:8], 1.0), 'every channel has its own statistics'
    assert not torch.allclose(log_prob(model, np.zeros(2), x, 30.0),
                              log_prob(model, np.zeros(2), x[::-1].copy(), 30.0))


@pytest.mark.unit
@pytest.mark.flow
def test_encoder_needs_a_channel():
    with raises(ConfigurationError):
        Encoder(EncoderConfig(in_channels=0))


@pytest.mark.unit
@pytest.mark.flow
def test_age_changes_the_posterior():
    model = _toy_flow()
    theta = np.zeros((1, 2))
    with torch.no_grad():
        young = log_prob(model, theta, np.ones(4), 25.0)
        old = log_prob(model, theta, np.ones(4), 75.0)
    assert not torch.allclose(young, old)


@pytest.mark.unit
@pytest.mark.flow
def test_permutations_follow_the_seed():
    first = ConditionalFlow(5, IDENTITY, steps=3, seed=1)
    again = ConditionalFlow(5, IDENTITY, steps=3, seed=1)
    for step in range(3):
        assert torch.equal(first.permutation(step), again.permutation(step))
        assert sorted(first.permutation(step).tolist()) == list(range(5))


@pytest.mark.unit
@pytest.mark.flow
def test_loss_and_gradients():
    model = _toy_flow()
    theta = np.random.default_rng(0).normal(size=(8, 2))
    loss, bundle = loss_and_gradients(model, theta, np.zeros((8, 4)), np.full(8, 50.0))
    assert np.isfinite(loss)
    assert bundle.finite and bundle.norm > 0
    assert set(bundle.grads) == set(name for name, _ in model.named_parameters())


@pytest.mark.unit
@pytest.mark.flow
def test_loss_non_finite():
    theta = np.full((4, 2), np.nan)
    with raises(NumericError):
        loss_and_gradients(_toy_flow(), theta, np.zeros((4, 4)), np.full(4, 50.0), batch=3)


@pytest.mark.unit
@pytest.mark.flow
def test_checkpoint_round_trip(tmp_path):
    model = _toy_flow(dim=3)
    model.set_normalization(theta=([1.0, 2.0, 3.0], [0.5, 0.5, 2.0]), x=(0.1, 2.0), age=(50.0, 14.0))
    path = str(tmp_path / 'model.ckpt')
    save_checkpoint(model, path, metadata={'names': ['a', 'b', 'c']})
    with raises(FileExistsError):
        save_checkpoint(model, path)
    save_checkpoint(model, path, metadata={'names': ['a', 'b', 'c']}, force=True)
    loaded, metadata = load_checkpoint(path)
    assert metadata == {'names': ['a', 'b', 'c']}
    assert loaded.config() == model.config()
    theta = np.array([[1.0, 2.5, 2.0]])
    with torch.no_grad():
        assert torch.allclose(log_prob(loaded, theta, np.ones(4), 44.0),
                              log_prob(model, theta, np.ones(4), 44.0))


@pytest.mark.unit
@pytest.mark.flow
def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / 'model.ckpt'
    path.write_bytes(b'not a checkpoint')
    with raises(ConfigurationError):
        load_checkpoint(str(path))


@pytest.mark.unit
@pytest.mark.flow
def test_checkpoint_version(tmp_path):
    path = tmp_path / 'model.ckpt'
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack('<II', 99, 2) + b'{}')
    with raises(ConfigurationError) as info:
        load_checkpoint(str(path))
    assert 'version 99' in str(info.value)
