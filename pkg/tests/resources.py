import math

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from satde.density import GridParams, QuantizedDensity, saturate

# grids small enough for the convolution-heavy tests
COARSE = GridParams(0.125, 32.0)
WIDE = GridParams(0.125, 48.0)


def random_symmetric_density(rng, grid=COARSE, reach=8.0, points=6, with_inf=True):
    '''
    Returns a random symmetric density: pairs mass(x), mass(-x) = e^{-x}
    mass(x) at a few grid magnitudes up to reach, optionally with mass at 0
    and at +infinity.
    '''
    top = int(round(reach / grid.delta))
    mags = rng.choice(np.arange(1, top + 1), size=points, replace=False)
    weights = rng.random(points)
    interior = np.zeros(grid.size)
    for j, w in zip(mags, weights):
        x = j * grid.delta
        interior[grid.n + j] += w / (1.0 + math.exp(-x))
        interior[grid.n - j] += w * math.exp(-x) / (1.0 + math.exp(-x))
    interior[grid.n] += rng.random() * 0.3
    pos_inf = rng.random() * 0.3 if with_inf and rng.random() < 0.5 else 0.0
    total = interior.sum() + pos_inf
    return QuantizedDensity(grid, interior / total, atom_pos_inf=pos_inf / total, symmetric=True)


def random_density(rng, grid=COARSE, reach=8.0, points=8):
    '''
    Returns a random density with no symmetry, mass spread over grid points
    in [-reach, reach].
    '''
    top = int(round(reach / grid.delta))
    ks = rng.choice(np.arange(-top, top + 1), size=points, replace=False)
    interior = np.zeros(grid.size)
    interior[grid.n + ks] = rng.random(points)
    return QuantizedDensity(grid, interior / interior.sum())


def random_saturated_density(rng, K, grid=COARSE):
    '''
    A non-symmetric density with rail atoms at +-K
    '''
    return saturate(random_density(rng, grid, reach=min(2 * K, grid.support)), K)


def binary_entropy(p):
    if p in (0.0, 1.0):
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def inverse_binary_entropy(h):
    return brentq(lambda p: binary_entropy(p) - h, 1e-15, 0.5)


def biawgn_entropy(sigma):
    '''
    E[log2(1 + e^{-Z})] for Z ~ N(2/sigma^2, 4/sigma^2) by adaptive quadrature
    '''
    mean = 2.0 / sigma ** 2
    std = 2.0 / sigma

    def integrand(z):
        pdf = math.exp(-0.5 * ((z - mean) / std) ** 2) / (std * math.sqrt(2.0 * math.pi))
        return pdf * np.logaddexp(0.0, -z) / math.log(2.0)

    value, _ = quad(integrand, mean - 12 * std, mean + 12 * std, limit=200)
    return value


def scalar_bec_threshold(l, r, points=400001):
    '''
    Largest eps for which x = eps (1 - (1 - x)^{r-1})^{l-1} has no root in
    (0, 1], found by scanning x.
    '''
    xs = np.linspace(1e-6, 1.0, points)
    return float(np.min(xs / (1.0 - (1.0 - xs) ** (r - 1)) ** (l - 1)))


def scalar_bec_recursion(eps, l, r, n_iters):
    x = 1.0
    out = []
    for _ in range(n_iters):
        x = eps * (1.0 - (1.0 - x) ** (r - 1)) ** (l - 1)
        out.append(x)
    return out
