'''
satde/channels.py

Ordered BMS channel families (BEC, BSC, BIAWGN) as quantized L-densities.
'''
import os
import math
import json
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import yaml
from scipy.optimize import bisect
from scipy.stats import norm

from satde import defaults, root_dir
from satde.common import ValidationError
from satde.density import (GridParams, QuantizedDensity, delta_at, two_atom, saturate_sym,
                           entropy)

log = logging.getLogger(__name__)

KINDS = ('BEC', 'BSC', 'BIAWGN')

BUILTIN_RANGES = {
    'BEC': (0.0, 1.0),
    'BSC': (0.0, 0.5),
    'BIAWGN': (0.2, 3.0),
}


@dataclass(frozen=True)
class ChannelFamily:
    '''
    A channel family ordered by degradation in its parameter.

    :param kind: one of BEC, BSC, BIAWGN
    :param parameter_range: closed range of the natural parameter
    :param support_clip: symmetric-saturate the channel at this level when set
    '''
    kind: str
    parameter_range: Tuple[float, float]
    support_clip: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError("unknown channel family %r, expected one of %s" % (self.kind, ', '.join(KINDS)),
                                  field='family')
        lo, hi = self.parameter_range
        if not lo < hi:
            raise ValidationError("empty parameter range %r" % (self.parameter_range,), field='parameter_range')
        if self.support_clip is not None and not self.support_clip > 0:
            raise ValidationError("channel clip must be positive, got %r" % self.support_clip, field='clip')

    def contains(self, param):
        lo, hi = self.parameter_range
        return lo <= param <= hi


@dataclass(frozen=True)
class ChannelSpec:
    '''
    One member of a family, as given on the command line.
    '''
    kind: str
    param: float
    clip: Optional[float] = None

    @property
    def family(self):
        return get_family(self.kind, clip=self.clip)

    def density(self, grid=None):
        return make_channel(self.family, self.param, grid)

    def to_dict(self):
        return {'family': self.kind, 'param': self.param, 'clip': self.clip}


def load_families(path=None):
    '''
    Returns {kind: ChannelFamily} read from the channel table, falling back
    to the built-in ranges when the file is missing or malformed.

    :param path: YAML file with a ``families`` mapping
    '''
    path = path or defaults.CHANNELS_FILE
    if not os.path.isabs(path):
        path = os.path.join(root_dir, path)
    families = {kind: ChannelFamily(kind, rng) for kind, rng in BUILTIN_RANGES.items()}
    try:
        with open(path) as f:
            table = yaml.safe_load(f) or {}
        for kind, entry in table.get('families', {}).items():
            lo, hi = entry['parameter_range']
            clip = entry.get('clip')
            families[kind.upper()] = ChannelFamily(kind.upper(), (float(lo), float(hi)),
                                                   float(clip) if clip is not None else None)
    except Exception as e:
        log.error("Error loading channel table %s: %s", path, str(e))
    return families


def get_family(kind, clip=None, families=None):
    '''
    Returns the ChannelFamily for kind. An explicit clip overrides the
    table's default clip.
    '''
    kind = str(kind).upper()
    families = families or load_families()
    if kind not in families:
        raise ValidationError("unknown channel family %r" % kind, field='family')
    family = families[kind]
    if clip is not None:
        family = ChannelFamily(kind, family.parameter_range, clip)
    return family


def parse_channel(spec):
    '''
    Parses "BSC:0.07", "BSC:0.07:12" or {"family": "BSC", "param": 0.07,
    "clip": 12.0} into a ChannelSpec.
    '''
    if isinstance(spec, ChannelSpec):
        return spec
    if isinstance(spec, str) and spec.strip().startswith('{'):
        try:
            spec = json.loads(spec)
        except ValueError as e:
            raise ValidationError("channel is not valid JSON: %s" % e, field='channel')
    try:
        if isinstance(spec, dict):
            kind, param, clip = spec['family'], spec['param'], spec.get('clip')
        else:
            parts = str(spec).split(':')
            if len(parts) not in (2, 3):
                raise ValueError("expected FAMILY:PARAM[:CLIP]")
            kind, param = parts[0], parts[1]
            clip = parts[2] if len(parts) == 3 else None
        kind = str(kind).upper()
        param = float(param)
        clip = float(clip) if clip not in (None, '') else None
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError("malformed channel %r: %s" % (spec, e), field='channel')
    if kind not in KINDS:
        raise ValidationError("unknown channel family %r" % kind, field='channel')
    return ChannelSpec(kind, param, clip)


def bsc_magnitude(eps):
    return math.log((1.0 - eps) / eps)


def _biawgn(sigma, grid):
    '''
    Gaussian L-density N(2/sigma^2, 4/sigma^2). Each positive grid point
    gets the Gaussian mass of its bin, the last one the whole upper tail;
    the negative half follows from mass(-x) = e^{-x} mass(x).
    '''
    n = grid.n
    dist = norm(loc=2.0 / sigma ** 2, scale=2.0 / sigma)
    edges = (np.arange(n + 1) + 0.5) * grid.delta
    upper = dist.sf(edges)
    positive = np.empty(n + 1)
    positive[0] = dist.cdf(edges[0]) - dist.cdf(-edges[0])
    positive[1:n] = upper[:n - 1] - upper[1:n]
    positive[n] = upper[n - 1]
    interior = np.zeros(grid.size)
    interior[n:] = positive
    interior[:n] = (np.exp(-grid.points[n + 1:]) * positive[1:])[::-1]
    interior /= interior.sum()
    return QuantizedDensity(grid, interior, symmetric=True)


def make_channel(family, sigma, grid=None):
    '''
    Returns the L-density of the family member at parameter sigma.

    :param family: ChannelFamily
    :param sigma: natural parameter (erasure or crossover probability, noise std)
    :param grid: GridParams, the configured default grid when omitted
    '''
    grid = grid or GridParams.default()
    if not family.contains(sigma):
        raise ValidationError("%s parameter %r outside %r" % (family.kind, sigma, family.parameter_range),
                              field='param')

    if family.kind == 'BEC':
        interior = np.zeros(grid.size)
        interior[grid.n] = sigma
        c = QuantizedDensity(grid, interior, atom_pos_inf=1.0 - sigma, symmetric=True)
    elif family.kind == 'BSC':
        if sigma == 0:
            c = delta_at(math.inf, grid)
        elif sigma == 0.5:
            c = delta_at(0.0, grid)
        else:
            magnitude = bsc_magnitude(sigma)
            if magnitude > grid.support:
                log.warning("BSC(%g) magnitude %.4g exceeds the support bound, placed at %g",
                            sigma, magnitude, grid.support)
                magnitude = grid.support
            c = two_atom(sigma, magnitude, grid)
    else:
        c = _biawgn(sigma, grid)

    if family.support_clip is not None:
        c = saturate_sym(c, family.support_clip)
    return c


def entropy_to_parameter(family, h, grid=None, xtol=1e-12):
    '''
    Returns the parameter whose channel has entropy h, by bisection over the
    family's (monotone) entropy.
    '''
    grid = grid or GridParams.default()
    if not 0 <= h <= 1:
        raise ValidationError("entropy must lie in [0, 1], got %r" % h, field='h')
    lo, hi = family.parameter_range

    def gap(sigma):
        return entropy(make_channel(family, sigma, grid)) - h

    g_lo, g_hi = gap(lo), gap(hi)
    if abs(g_lo) <= 1e-12:
        return lo
    if abs(g_hi) <= 1e-12:
        return hi
    if g_lo > 0 or g_hi < 0:
        raise ValidationError("entropy %r is not attainable by %s on %r" % (h, family.kind, family.parameter_range),
                              field='h')
    return bisect(gap, lo, hi, xtol=xtol, maxiter=200)


def bhattacharyya_closed_form(kind, param):
    '''
    B of the unquantized channel: eps (BEC), 2 sqrt(eps (1 - eps)) (BSC),
    exp(-1 / (2 sigma^2)) (BIAWGN).
    '''
    kind = kind.upper()
    if kind == 'BEC':
        return float(param)
    if kind == 'BSC':
        return 2.0 * math.sqrt(param * (1.0 - param))
    if kind == 'BIAWGN':
        return math.exp(-1.0 / (2.0 * param ** 2))
    raise ValidationError("unknown channel family %r" % kind, field='family')


def channel_support_edge(kind, param, clip=None):
    '''
    Returns L, the magnitude of the most negative channel LLR (0 for the
    BEC, infinite for the BIAWGN unless clipped).
    '''
    kind = kind.upper()
    if kind == 'BEC':
        edge = 0.0
    elif kind == 'BSC':
        edge = bsc_magnitude(param) if 0 < param < 0.5 else 0.0
    elif kind == 'BIAWGN':
        edge = math.inf
    else:
        raise ValidationError("unknown channel family %r" % kind, field='family')
    if clip is not None:
        edge = min(edge, clip)
    return edge


def sample_llrs(kind, param, n, rng, clip=None):
    '''
    Draws n channel LLRs for the all-zero codeword.

    :param rng: numpy Generator
    '''
    kind = kind.upper()
    if kind == 'BEC':
        llrs = np.where(rng.random(n) < param, 0.0, np.inf)
    elif kind == 'BSC':
        if param == 0:
            llrs = np.full(n, np.inf)
        else:
            magnitude = bsc_magnitude(param)
            llrs = np.where(rng.random(n) < param, -magnitude, magnitude)
    elif kind == 'BIAWGN':
        llrs = rng.normal(2.0 / param ** 2, 2.0 / param, n)
    else:
        raise ValidationError("unknown channel family %r" % kind, field='family')
    if clip is not None:
        # symmetric saturation of the channel: rail values flip to keep the identity
        magnitude = np.abs(llrs)
        rail = magnitude >= clip
        p = math.exp(-clip) / (1.0 + math.exp(-clip))
        wrong = rng.random(n) < p
        llrs = np.where(rail, np.where(wrong, -clip, clip), llrs)
    return llrs
