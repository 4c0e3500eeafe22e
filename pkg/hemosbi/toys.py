#!/usr/bin/env python
"""toys: inference problems with known posteriors

linear-gaussian
    phi ~ N(0, prior_sd^2), x = phi + age_effect (age - 50) / 25 + N(0, noise_sd^2);
    conjugate, the posterior is Gaussian in closed form.

squared
    phi ~ U(-1, 1)^dim, x1 = phi1^2 + eps, x2 = phi2 + eps; the posterior of phi1 is
    symmetric and bimodal at +-sqrt(x1) whenever x1 is well above the noise.
"""

from .utils import DomainError
from .npe import ArraySource
from dataclasses import dataclass
import math

from scipy.integrate import trapezoid as _trapezoid
from scipy.stats import norm as _norm
import numpy as np

AGE_RANGE = (25.0, 75.0)
GRID_POINTS = 4001


def _splits(n_train, n_val, n_test):
    return (('train', n_train), ('val', n_val), ('test', n_test))


@dataclass(frozen=True)
class LinearGaussianToy:
    prior_sd: float = 1.0
    noise_sd: float = 0.5
    age_effect: float = 0.0
    dim: int = 1

    name = 'linear-gaussian'

    @property
    def bounds(self):
        return [(-4.0 * self.prior_sd, 4.0 * self.prior_sd)] * self.dim

    def shift(self, age):
        return self.age_effect * (np.asarray(age, dtype=float) - 50.0) / 25.0

    def simulate(self, n, rng, noise_sd=None):
        noise_sd = self.noise_sd if noise_sd is None else noise_sd
        theta = rng.normal(0.0, self.prior_sd, size=(n, self.dim))
        age = rng.uniform(*AGE_RANGE, size=n)
        x = theta + self.shift(age)[:, None] + rng.normal(0.0, noise_sd, size=(n, self.dim))
        return theta, x, age

    def posterior_std(self, noise_sd=None):
        noise_sd = self.noise_sd if noise_sd is None else noise_sd
        return 1.0 / math.sqrt(1.0 / self.prior_sd ** 2 + 1.0 / noise_sd ** 2)

    def posterior_mean(self, x, age, noise_sd=None):
        noise_sd = self.noise_sd if noise_sd is None else noise_sd
        x = np.atleast_2d(np.asarray(x, dtype=float))
        residual = x - self.shift(np.atleast_1d(age))[:, None]
        return residual * self.posterior_std(noise_sd) ** 2 / noise_sd ** 2

    def sample_posterior(self, x, age, n, rng, scale=1.0, noise_sd=None):
        """n exact posterior draws for one observation, scale shrinks/inflates the std"""
        mean = self.posterior_mean(x, age, noise_sd)[0]
        return mean + scale * self.posterior_std(noise_sd) * rng.standard_normal((n, self.dim))

    def log_posterior(self, theta, x, age, noise_sd=None):
        mean = self.posterior_mean(x, age, noise_sd)[0]
        sd = self.posterior_std(noise_sd)
        return _norm.logpdf(np.atleast_2d(theta), mean, sd).sum(axis=1)

    def source(self, n_train, n_val, n_test, seed, noise_sd=None):
        rng = np.random.default_rng(seed)
        theta, x, age = {}, {}, {}
        for split, n in _splits(n_train, n_val, n_test):
            theta[split], x[split], age[split] = self.simulate(n, rng, noise_sd)
        return ArraySource(theta, x, age if self.age_effect else None,
                           names=["phi{}".format(i + 1) for i in range(self.dim)])


@dataclass(frozen=True)
class SquaredToy:
    noise_sd: float = 0.05
    dim: int = 2
    low: float = -1.0
    high: float = 1.0

    name = 'squared'

    @property
    def bounds(self):
        return [(self.low, self.high)] * self.dim

    def forward(self, theta):
        x = np.array(theta, dtype=float, copy=True)
        x[:, 0] = x[:, 0] ** 2
        return x

    def simulate(self, n, rng, noise_sd=None):
        noise_sd = self.noise_sd if noise_sd is None else noise_sd
        theta = rng.uniform(self.low, self.high, size=(n, self.dim))
        x = self.forward(theta) + rng.normal(0.0, noise_sd, size=(n, self.dim))
        return theta, x, np.zeros(n)

    def _grid(self, x, noise_sd=None):
        """Per dimension (grid, normalised density) of the exact posterior"""
        noise_sd = self.noise_sd if noise_sd is None else noise_sd
        x = np.asarray(x, dtype=float).reshape(-1)
        if len(x) != self.dim:
            raise DomainError("observation must have {} coordinates".format(self.dim))
        grid = np.linspace(self.low, self.high, GRID_POINTS)
        out = []
        for i in range(self.dim):
            mean = grid ** 2 if i == 0 else grid
            logp = -0.5 * ((x[i] - mean) / noise_sd) ** 2
            density = np.exp(logp - logp.max())
            density /= _trapezoid(density, grid)
            out.append(density)
        return grid, out

    def sample_posterior(self, x, age, n, rng, noise_sd=None):
        """Exact draws by inverse CDF sampling on a fine grid"""
        grid, densities = self._grid(x, noise_sd)
        samples = np.empty((n, self.dim))
        for i, density in enumerate(densities):
            cdf = np.concatenate([[0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * np.diff(grid))])
            cdf /= cdf[-1]
            samples[:, i] = np.interp(rng.uniform(size=n), cdf, grid)
        return samples

    def log_posterior(self, theta, x, age, noise_sd=None):
        grid, densities = self._grid(x, noise_sd)
        theta = np.atleast_2d(theta)
        out = np.zeros(len(theta))
        for i, density in enumerate(densities):
            inside = (theta[:, i] >= self.low) & (theta[:, i] <= self.high)
            value = np.interp(theta[:, i], grid, density)
            out += np.where(inside & (value > 0), np.log(np.where(value > 0, value, 1.0)), -np.inf)
        return out

    def source(self, n_train, n_val, n_test, seed, noise_sd=None):
        rng = np.random.default_rng(seed)
        theta, x = {}, {}
        for split, n in _splits(n_train, n_val, n_test):
            theta[split], x[split], _ = self.simulate(n, rng, noise_sd)
        return ArraySource(theta, x, None, names=["phi{}".format(i + 1) for i in range(self.dim)])


TOYS = {'linear-gaussian': LinearGaussianToy, 'squared': SquaredToy}


def make_toy(name, **kwargs):
    try:
        return TOYS[name](**kwargs)
    except KeyError:
        raise DomainError("unknown toy {!r} (choose from {})".format(name, ", ".join(sorted(TOYS))))
