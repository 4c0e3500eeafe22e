#!/usr/bin/env python
"""flow: conditional normalizing flow p(theta | x, age)

A 1D CNN embeds the observation, the normalised age is appended and the result
conditions a stack of affine masked autoregressive steps, each followed by a fixed
permutation:

    u_i = theta_i exp(sigma_i(theta_<i, h)) + mu_i(theta_<i, h)

The base density is a standard normal. Parameters are standardised with stored
statistics, the log-Jacobian of that map is part of log_prob so densities are in
physical units.
"""

from .utils import NumericError, ShapeError, ConfigurationError
from dataclasses import dataclass, fields
import json
import logging
import math
import os
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

SIGMA_CLAMP = 7.0
DEFAULT_HIDDEN = 350
CHECKPOINT_MAGIC = b'HEMOSBI\x00'
CHECKPOINT_VERSION = 2


@dataclass(frozen=True)
class EncoderConfig:
    """CNN layers: ints are conv channels (scaled by width), 'pool' a max pool

    An empty layer list makes the encoder the identity on the (normalised) input,
    which the low dimensional toy problems use. in_channels > 1 stacks simultaneous
    observations of several sites as the channels of the first convolution.
    """
    layers: tuple = (40, 40, 40, 'pool', 20, 10)
    width: float = 0.2
    kernel: int = 3
    stride: int = 2
    pool: int = 3
    input_length: int = 1000
    in_channels: int = 1

    def channels(self):
        return [layer if layer == 'pool' else max(1, int(round(layer * self.width)))
                for layer in self.layers]

    def output_length(self):
        length = self.input_length
        for layer in self.layers:
            if layer == 'pool':
                length = (length - self.pool) // self.pool + 1
            else:
                length = (length - self.kernel) // self.stride + 1
            if length < 1:
                raise ConfigurationError("encoder layers reduce an input of {} samples to nothing".format(
                    self.input_length))
        return length

    @property
    def embedding_dim(self):
        convs = [c for c in self.channels() if c != 'pool']
        if not convs:
            return self.in_channels * self.input_length
        return convs[-1] * self.output_length()

    def to_dict(self):
        out = dict((f.name, getattr(self, f.name)) for f in fields(self))
        out['layers'] = list(self.layers)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        unknown = set(data) - set(f.name for f in fields(cls))
        if unknown:
            raise ConfigurationError("encoder config: unknown keys {}".format(", ".join(sorted(unknown))))
        if 'layers' in data:
            data['layers'] = tuple(data['layers'])
        return cls(**data)


class Encoder(nn.Module):
    def __init__(self, config):
        super(Encoder, self).__init__()
        self.config = config
        if config.in_channels < 1:
            raise ConfigurationError("the encoder needs at least one input channel")
        modules = []
        in_channels = config.in_channels
        convs = [c for c in config.channels() if c != 'pool']
        seen = 0
        for layer in config.channels():
            if layer == 'pool':
                modules.append(nn.MaxPool1d(config.pool))
                continue
            modules.append(nn.Conv1d(in_channels, layer, config.kernel, stride=config.stride))
            seen += 1
            if seen < len(convs):
                modules.append(nn.ReLU())
            in_channels = layer
        self.net = nn.Sequential(*modules)
        config.output_length()

    def forward(self, x):
        """x: (B, in_channels, L)"""
        if len(self.net) == 0:
            return x.flatten(1)
        return self.net(x).flatten(1)


def made_masks(dim, hidden, layers=3):
    """MADE masks: hidden unit degrees cycle through 0..dim-1

    A hidden unit of degree m sees inputs 1..m, output i (degree i+1) sees hidden units
    of degree <= i, so output i depends on inputs < i only; the conditioning input
    is unmasked.
    """
    d_in = torch.arange(1, dim + 1)
    d_hidden = torch.arange(hidden) % dim
    masks = [(d_hidden.unsqueeze(1) >= d_in.unsqueeze(0)).to(torch.get_default_dtype())]
    for _ in range(layers - 1):
        masks.append((d_hidden.unsqueeze(1) >= d_hidden.unsqueeze(0)).to(torch.get_default_dtype()))
    d_out = torch.cat([d_in, d_in])
    masks.append((d_out.unsqueeze(1) > d_hidden.unsqueeze(0)).to(torch.get_default_dtype()))
    return masks


class MaskedLinear(nn.Module):
    def __init__(self, in_features, out_features, mask, cond_in_features=None):
        super(MaskedLinear, self).__init__()
        self.linear = nn.Linear(in_features, out_features)
        if cond_in_features:
            self.cond_linear = nn.Linear(cond_in_features, out_features, bias=False)
        else:
            self.cond_linear = None
        self.register_buffer('mask', mask)

    def forward(self, inputs, cond_inputs=None):
        output = F.linear(inputs, self.linear.weight * self.mask, self.linear.bias)
        if self.cond_linear is not None:
            output = output + self.cond_linear(cond_inputs)
        return output


class MADE(nn.Module):
    """Autoregressive conditioner returning (mu, sigma) of one flow step"""
    def __init__(self, dim, hidden, cond_dim, layers=3):
        super(MADE, self).__init__()
        masks = made_masks(dim, hidden, layers)
        self.dim = dim
        self.joiner = MaskedLinear(dim, hidden, masks[0], cond_dim)
        self.hidden = nn.ModuleList(MaskedLinear(hidden, hidden, m) for m in masks[1:-1])
        self.output = MaskedLinear(hidden, 2 * dim, masks[-1])
        for layer in [self.joiner] + list(self.hidden):
            nn.init.kaiming_normal_(layer.linear.weight, nonlinearity='relu')
            nn.init.zeros_(layer.linear.bias)
        nn.init.zeros_(self.output.linear.weight)
        nn.init.zeros_(self.output.linear.bias)

    def forward(self, theta, h):
        out = F.relu(self.joiner(theta, h))
        for layer in self.hidden:
            out = F.relu(layer(out))
        mu, sigma = self.output(out).chunk(2, dim=1)
        return mu, torch.clamp(sigma, -SIGMA_CLAMP, SIGMA_CLAMP)


class ConditionalFlow(nn.Module):
    """Conditional MAF over dim parameters

    Arguments
    ----------
    :param int dim: Number of parameters k
    :param EncoderConfig encoder: Observation encoder
    :param int hidden: Conditioner width, defaults to 350 scaled by encoder.width
    :param int steps: Number of autoregressive steps
    :param int seed: Seed of the initial weights and of the permutations
    :param bool use_age: Append the normalised age to the embedding
    """
    def __init__(self, dim, encoder=None, hidden=None, steps=3, seed=0, use_age=True):
        super(ConditionalFlow, self).__init__()
        assert dim >= 1, "the flow needs at least one parameter"
        assert steps >= 1, "the flow needs at least one step"
        encoder = encoder or EncoderConfig()
        if hidden is None:
            hidden = max(dim, int(round(DEFAULT_HIDDEN * encoder.width)))
        self.dim = dim
        self.steps = steps
        self.hidden_width = hidden
        self.seed = seed
        self.use_age = use_age
        self.encoder_config = encoder
        self.cond_dim = encoder.embedding_dim + (1 if use_age else 0)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = Encoder(encoder)
            self.conditioners = nn.ModuleList(MADE(dim, hidden, self.cond_dim) for _ in range(steps))
            generator = torch.Generator().manual_seed(seed)
            for i in range(steps):
                self.register_buffer('perm{}'.format(i), torch.randperm(dim, generator=generator))

        self.register_buffer('theta_mean', torch.zeros(dim))
        self.register_buffer('theta_std', torch.ones(dim))
        channels = encoder.in_channels
        self.register_buffer('x_stats', torch.tensor([[0.0] * channels, [1.0] * channels]))
        self.register_buffer('age_stats', torch.tensor([0.0, 1.0]))

    def permutation(self, step):
        return getattr(self, 'perm{}'.format(step))

    def set_normalization(self, theta=None, x=None, age=None):
        """theta: (mean array, std array); x and age: NormStats or (mean, std)

        x statistics may be scalars or one value per input channel.
        """
        with torch.no_grad():
            if theta is not None:
                self.theta_mean.copy_(torch.as_tensor(np.asarray(theta[0], dtype=float)))
                self.theta_std.copy_(torch.as_tensor(np.asarray(theta[1], dtype=float)))
            for buffer, stats in ((self.x_stats, x), (self.age_stats, age)):
                if stats is not None:
                    mean, std = (stats.mean, stats.std) if hasattr(stats, 'mean') else stats
                    shape = buffer.shape[1:]
                    buffer.copy_(torch.as_tensor(np.stack([np.broadcast_to(np.asarray(mean, dtype=float), shape),
                                                           np.broadcast_to(np.asarray(std, dtype=float), shape)])))

    def num_parameters(self):
        return sum(p.numel() for p in self.parameters())

    def config(self):
        return {
            'dim': self.dim, 'steps': self.steps, 'hidden': self.hidden_width,
            'seed': self.seed, 'use_age': self.use_age, 'encoder': self.encoder_config.to_dict(),
        }


def _tensor(value, model):
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(np.asarray(value) if not torch.is_tensor(value) else value, dtype=dtype)


def encode(model, x, age):
    """Embedding h = concat(cnn(normalised x), normalised age)

    Arguments
    ----------
    :param ConditionalFlow model: The flow
    :param x: Observation(s), shape (L,) or (B, L) with L the encoder input length; with
              C > 1 input channels (C, L) or (B, C, L)
    :param age: Age(s) in years, scalar or (B,)

    Returns
    --------
    :return: Conditioning vectors, shape (B, cond_dim)
    :rtype: torch.Tensor

    Exceptions
    -----------
    :raises ShapeError: wrong observation length
    """
    x = _tensor(x, model)
    length = model.encoder_config.input_length
    channels = model.encoder_config.in_channels
    single = 1 if channels == 1 else 2
    if x.dim() == single:
        x = x.unsqueeze(0)
    if channels == 1 and x.dim() == 2:
        x = x.unsqueeze(1)
    if x.dim() != 3 or tuple(x.shape[1:]) != (channels, length):
        raise ShapeError("observation must have {} channel(s) of {} samples, got shape {}".format(
            channels, length, tuple(x.shape)))
    x = (x - model.x_stats[0].view(1, -1, 1)) / model.x_stats[1].view(1, -1, 1)
    h = model.encoder(x)
    if not model.use_age:
        return h
    age = _tensor(age, model).reshape(-1)
    if age.numel() == 1 and h.shape[0] > 1:
        age = age.expand(h.shape[0])
    age = (age - model.age_stats[0]) / model.age_stats[1]
    return torch.cat([h, age.unsqueeze(1)], dim=1)


def flow_forward(model, theta, h):
    """theta (standardised) -> (z, logdet), logdet summed over steps and dims

    :raises NumericError: non-finite intermediate, carries the step index
    """
    u = theta
    logdet = torch.zeros(theta.shape[0], dtype=theta.dtype)
    for step, made in enumerate(model.conditioners):
        mu, sigma = made(u, h)
        u = u * torch.exp(sigma) + mu
        logdet = logdet + sigma.sum(dim=1)
        u = u[:, model.permutation(step)]
        if not (torch.isfinite(u).all() and torch.isfinite(logdet).all()):
            raise NumericError("non-finite value in the flow", step=step)
    return u, logdet


def flow_inverse(model, z, h):
    """Sequential inverse of flow_forward, one coordinate at a time per step

    :raises NumericError: non-finite intermediate, carries the step index
    """
    u = z
    for step in reversed(range(model.steps)):
        inverse = torch.argsort(model.permutation(step))
        u = u[:, inverse]
        theta = torch.zeros_like(u)
        made = model.conditioners[step]
        for i in range(model.dim):
            mu, sigma = made(theta, h)
            theta = theta.clone()
            theta[:, i] = (u[:, i] - mu[:, i]) * torch.exp(-sigma[:, i])
        if not torch.isfinite(theta).all():
            raise NumericError("non-finite value in the inverse flow", step=step)
        u = theta
    return u


def _standard_normal_log_prob(z):
    return -0.5 * (z * z).sum(dim=1) - 0.5 * z.shape[1] * math.log(2.0 * math.pi)


def log_prob(model, theta, x, age, h=None):
    """log p(theta | x, age) in physical units of theta, shape (B,)"""
    theta = _tensor(theta, model)
    if theta.dim() == 1:
        theta = theta.unsqueeze(0)
    if h is None:
        h = encode(model, x, age)
    if h.shape[0] == 1 and theta.shape[0] > 1:
        h = h.expand(theta.shape[0], -1)
    standard = (theta - model.theta_mean) / model.theta_std
    z, logdet = flow_forward(model, standard, h)
    return _standard_normal_log_prob(z) + logdet - torch.log(model.theta_std).sum()


def sample(model, x, age, n, seed=0):
    """n posterior draws for one observation, deterministic given seed"""
    assert n >= 1, "n must be >= 1"
    with torch.no_grad():
        h = encode(model, x, age)
        if h.shape[0] != 1:
            raise ShapeError("sample expects a single observation")
        generator = torch.Generator().manual_seed(int(seed))
        z = torch.randn(n, model.dim, generator=generator, dtype=h.dtype)
        standard = flow_inverse(model, z, h.expand(n, -1))
        return (standard * model.theta_std + model.theta_mean).cpu().numpy()


@dataclass(frozen=True)
class GradientBundle:
    grads: dict
    norm: float
    finite: bool


def loss_and_gradients(model, theta, x, age, batch=None):
    """Negative mean log_prob of a batch and its exact gradients

    Gradients are left in the .grad fields of the parameters (as an optimizer step
    expects them) and are also returned as copies.

    :raises NumericError: the loss is not finite, carries the batch index
    """
    model.zero_grad()
    loss = -log_prob(model, theta, x, age).mean()
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss", batch=batch)
    loss.backward()
    grads = {}
    total = 0.0
    for name, param in model.named_parameters():
        grad = param.grad if param.grad is not None else torch.zeros_like(param)
        grads[name] = grad.detach().clone()
        total += float((grad * grad).sum())
    finite = all(bool(torch.isfinite(g).all()) for g in grads.values())
    return float(loss), GradientBundle(grads, math.sqrt(total), finite)


## Checkpoints ##

def save_checkpoint(model, path, metadata=None, force=False):
    """Single file checkpoint: magic, version, JSON header, little-endian tensors

    :raises FileExistsError: path exists and force is not set
    """
    if os.path.exists(path) and not force:
        raise FileExistsError("{} exists, use --force to overwrite".format(path))
    state = model.state_dict()
    entries, blobs, offset = [], [], 0
    for name, tensor in state.items():
        array = tensor.detach().cpu().numpy()
        dtype = '<i4' if np.issubdtype(array.dtype, np.integer) else '<f4'
        data = array.astype(dtype).tobytes()
        entries.append({'name': name, 'shape': list(array.shape), 'dtype': dtype, 'offset': offset})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({'model': model.config(), 'tensors': entries,
                         'metadata': metadata or {}}, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<II', CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for data in blobs:
            f.write(data)


def load_checkpoint(path):
    """Returns (model, metadata)

    :raises ConfigurationError: not a checkpoint or an unsupported version
    """
    with open(path, 'rb') as f:
        raw = f.read()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ConfigurationError("{} is not a model checkpoint".format(path))
    start = len(CHECKPOINT_MAGIC)
    version, size = struct.unpack('<II', raw[start:start + 8])
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError("{}: unsupported checkpoint version {}".format(path, version))
    header = json.loads(raw[start + 8:start + 8 + size].decode('utf-8'))
    body = raw[start + 8 + size:]

    cfg = header['model']
    model = ConditionalFlow(cfg['dim'], EncoderConfig.from_dict(cfg['encoder']), hidden=cfg['hidden'],
                            steps=cfg['steps'], seed=cfg['seed'], use_age=cfg['use_age'])
    state = {}
    reference = model.state_dict()
    for entry in header['tensors']:
        dtype = np.dtype(entry['dtype'])
        count = int(np.prod(entry['shape'])) if entry['shape'] else 1
        array = np.frombuffer(body, dtype=dtype, count=count, offset=entry['offset']).reshape(entry['shape'])
        state[entry['name']] = torch.as_tensor(array.copy()).to(reference[entry['name']].dtype)
    model.load_state_dict(state)
    return model, header['metadata']
