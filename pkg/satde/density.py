'''
satde/density.py

Quantized L-densities. A density is probability mass on a uniform LLR grid
plus exact atoms: one pair at +-R (the rail, created by saturation or by a
two-atom channel) and one pair at +-infinity.
'''
import json
import math
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.stats import wasserstein_distance

from satde import defaults
from satde.common import ValidationError, NumericalError, SCHEMA_VERSION

log = logging.getLogger(__name__)

# total mass must be 1 within this
MASS_TOL = 1e-12
# a value within this many grid steps of a grid point is on the grid
GRID_SNAP = 1e-9
# mass lost by an operation before it is treated as a numerical failure
MASS_LOSS_TOL = 1e-9


def symmetric_error_fraction(z):
    '''
    Returns e^{-z}/(1+e^{-z}), the wrong-sign share of a symmetric two-atom
    density at magnitude z.
    '''
    if math.isinf(z):
        return 0.0
    return math.exp(-z) / (1.0 + math.exp(-z))


def boxplus_magnitude(x, y):
    '''
    Check-node rule 2 atanh(tanh(x/2) tanh(y/2)) for magnitudes x, y >= 0,
    written as min(x, y) + log1p(e^{-(x+y)}) - log1p(e^{-|x-y|}) so that large
    magnitudes keep their precision. An infinite operand is the identity.
    '''
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(invalid='ignore', over='ignore'):
        value = np.minimum(x, y) + np.log1p(np.exp(-(x + y))) - np.log1p(np.exp(-np.abs(x - y)))
    value = np.where(np.isinf(x), y, np.where(np.isinf(y), x, value))
    value = np.maximum(value, 0.0)
    if value.ndim == 0:
        return float(value)
    return value


def boxplus(x, y):
    '''
    Signed check-node rule. Odd in each argument, bit for bit.
    '''
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    value = np.sign(x) * np.sign(y) * boxplus_magnitude(np.abs(x), np.abs(y))
    if np.ndim(value) == 0:
        return float(value)
    return value


@dataclass(frozen=True)
class GridParams:
    '''
    Uniform LLR grid {-S, -S+delta, ..., S}.
    '''
    delta: float = 0.0625
    support: float = 64.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValidationError("grid spacing must be positive, got %r" % self.delta, field='grid_spacing')
        if not self.support > 0:
            raise ValidationError("support bound must be positive, got %r" % self.support, field='support_bound')
        ratio = self.support / self.delta
        if abs(ratio - round(ratio)) > GRID_SNAP * max(1.0, ratio):
            raise ValidationError("support bound %r is not a multiple of the grid spacing %r"
                                  % (self.support, self.delta), field='support_bound')

    @classmethod
    def default(cls):
        return cls(defaults.GRID_DELTA, defaults.SUPPORT_BOUND)

    @property
    def n(self):
        return int(round(self.support / self.delta))

    @property
    def size(self):
        return 2 * self.n + 1

    @property
    def points(self):
        return (np.arange(self.size) - self.n) * self.delta

    def on_grid(self, z):
        t = z / self.delta
        return abs(t - round(t)) <= GRID_SNAP * max(1.0, abs(t))

    def index_of(self, z):
        '''
        Returns the array index of the grid point z

        :param z: LLR value, must be a grid point inside the support
        '''
        if not self.on_grid(z):
            raise ValidationError("%r is not on the grid of spacing %r" % (z, self.delta), field='z')
        k = int(round(z / self.delta))
        if abs(k) > self.n:
            raise ValidationError("%r lies outside the support bound %r" % (z, self.support), field='z')
        return k + self.n

    def to_dict(self):
        return {'grid_spacing': self.delta, 'support_bound': self.support}


@dataclass(frozen=True, eq=False)
class QuantizedDensity:
    '''
    An L-density on a quantized grid with exact atoms.

    :param grid: GridParams of the interior grid
    :param interior_mass: mass per grid point, index i is LLR (i - n) * delta
    :param atom_neg_sat: atom at -rail
    :param atom_pos_sat: atom at +rail
    :param atom_neg_inf: atom at -infinity
    :param atom_pos_inf: atom at +infinity
    :param rail: magnitude of the exact atom pair, None when there is none
    :param symmetric: metadata flag, True when the density stems from a
                      symmetric construction
    '''
    grid: GridParams
    interior_mass: np.ndarray
    atom_neg_sat: float = 0.0
    atom_pos_sat: float = 0.0
    atom_neg_inf: float = 0.0
    atom_pos_inf: float = 0.0
    rail: Optional[float] = None
    symmetric: bool = False

    def __post_init__(self):
        mass = np.array(self.interior_mass, dtype=np.float64)
        if mass.shape != (self.grid.size,):
            raise ValidationError("interior mass has shape %s, grid needs (%d,)"
                                  % (mass.shape, self.grid.size), field='interior_mass')
        if not np.all(np.isfinite(mass)):
            raise NumericalError("interior mass contains NaN or infinite entries")
        if mass.size and mass.min() < -MASS_TOL:
            raise ValidationError("interior mass has negative entries", field='interior_mass')
        mass = np.clip(mass, 0.0, None)
        mass.setflags(write=False)
        object.__setattr__(self, 'interior_mass', mass)

        for name in ('atom_neg_sat', 'atom_pos_sat', 'atom_neg_inf', 'atom_pos_inf'):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise NumericalError("%s is not finite" % name)
            if value < -MASS_TOL:
                raise ValidationError("%s is negative" % name, field=name)
            object.__setattr__(self, name, max(value, 0.0))

        if self.rail is not None:
            rail = float(self.rail)
            if not 0 < rail <= self.grid.support * (1 + GRID_SNAP):
                raise ValidationError("rail %r must lie in (0, %r]" % (rail, self.grid.support),
                                      field='saturation_K')
            object.__setattr__(self, 'rail', rail)
        elif self.atom_neg_sat or self.atom_pos_sat:
            raise ValidationError("rail atoms given without a rail magnitude", field='saturation_K')

        total = self.total_mass
        if abs(total - 1.0) > MASS_TOL:
            raise ValidationError("total mass is %r, expected 1" % total, field='interior_mass')

    @property
    def grid_spacing(self):
        return self.grid.delta

    @property
    def support_bound(self):
        return self.grid.support

    @property
    def saturation_K(self):
        return self.rail

    @property
    def rail_mass(self):
        return self.atom_pos_sat + self.atom_neg_sat

    @property
    def interior_total(self):
        return float(self.interior_mass.sum())

    @property
    def finite_mass(self):
        return self.interior_total + self.rail_mass

    @property
    def total_mass(self):
        return self.finite_mass + self.atom_pos_inf + self.atom_neg_inf

    @property
    def nonpositive_interior_mass(self):
        '''
        Grid mass at LLR <= 0.
        '''
        return float(self.interior_mass[:self.grid.n + 1].sum())

    def support(self):
        '''
        Returns (positions, masses) of every point carrying mass, atoms
        included. Positions may be +-inf.
        '''
        nz = self.interior_mass > 0
        xs = [self.grid.points[nz]]
        ms = [self.interior_mass[nz]]
        atoms = []
        if self.rail is not None:
            atoms += [(self.rail, self.atom_pos_sat), (-self.rail, self.atom_neg_sat)]
        atoms += [(math.inf, self.atom_pos_inf), (-math.inf, self.atom_neg_inf)]
        atoms = [(x, m) for x, m in atoms if m > 0]
        if atoms:
            xs.append(np.array([x for x, _ in atoms]))
            ms.append(np.array([m for _, m in atoms]))
        return np.concatenate(xs), np.concatenate(ms)

    def is_delta_zero(self):
        return (self.interior_mass[self.grid.n] >= 1.0 - 1e-15
                and self.rail_mass == 0 and self.atom_pos_inf == 0 and self.atom_neg_inf == 0)

    def with_symmetric(self, flag):
        return QuantizedDensity(self.grid, self.interior_mass, self.atom_neg_sat, self.atom_pos_sat,
                                self.atom_neg_inf, self.atom_pos_inf, self.rail, flag)

    def to_dict(self):
        return {
            'schema_version': SCHEMA_VERSION,
            'grid_spacing': self.grid.delta,
            'support_bound': self.grid.support,
            'interior_mass': self.interior_mass.tolist(),
            'atoms': {
                'neg_sat': self.atom_neg_sat,
                'pos_sat': self.atom_pos_sat,
                'neg_inf': self.atom_neg_inf,
                'pos_inf': self.atom_pos_inf,
            },
            'saturation_K': self.rail,
            'symmetric_flag': self.symmetric,
        }

    @classmethod
    def from_dict(cls, data):
        try:
            atoms = data['atoms']
            grid = GridParams(float(data['grid_spacing']), float(data['support_bound']))
            return cls(grid, np.array(data['interior_mass'], dtype=np.float64),
                       atom_neg_sat=atoms.get('neg_sat', 0.0),
                       atom_pos_sat=atoms.get('pos_sat', 0.0),
                       atom_neg_inf=atoms.get('neg_inf', 0.0),
                       atom_pos_inf=atoms.get('pos_inf', 0.0),
                       rail=data.get('saturation_K'),
                       symmetric=bool(data.get('symmetric_flag', False)))
        except (KeyError, TypeError) as e:
            raise ValidationError("malformed density document: %s" % e, field='density')

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except ValueError as e:
            raise ValidationError("density is not valid JSON: %s" % e, field='density')
        return cls.from_dict(data)


@dataclass(frozen=True)
class SaturatedMassDecomposition:
    '''
    a = gamma D(p, magnitude) + (1 - gamma) residual
    '''
    gamma: float
    p: float
    magnitude: float
    residual: QuantizedDensity

    @property
    def gamma_bar(self):
        return 1.0 - self.gamma

    @property
    def wrong_rail_mass(self):
        return self.gamma * self.p

    def reconstruct(self):
        if self.gamma <= 0:
            return self.residual
        rails = two_atom(self.p, self.magnitude, self.residual.grid)
        return mix([rails, self.residual], [self.gamma, self.gamma_bar], rail=self.magnitude)


class _MassBuilder(object):
    '''
    Accumulates point masses on an extended grid and turns them into a
    QuantizedDensity. Off-grid values are split between the two adjacent grid
    points so that mass and mean are preserved.
    '''
    def __init__(self, grid, reach):
        self.grid = grid
        self.offset = reach
        self.mass = np.zeros(2 * reach + 3)
        self.pos_inf = 0.0
        self.neg_inf = 0.0
        self.rail = None
        self.rail_pos = 0.0
        self.rail_neg = 0.0

    def add_grid(self, masses, start):
        '''
        Adds an array of grid masses whose first entry sits at grid index start
        '''
        lo = start + self.offset
        self.mass[lo:lo + len(masses)] += masses

    def add_points(self, xs, weights):
        xs = np.asarray(xs, dtype=np.float64).ravel()
        weights = np.asarray(weights, dtype=np.float64).ravel()
        keep = weights > 0
        if not keep.any():
            return
        xs = xs[keep]
        weights = weights[keep]
        t = xs / self.grid.delta
        k = np.rint(t)
        exact = np.abs(t - k) <= GRID_SNAP * np.maximum(1.0, np.abs(t))
        lo = np.where(exact, k, np.floor(t))
        frac = np.where(exact, 0.0, t - lo)
        self._deposit(lo.astype(np.int64), frac, weights)

    def add_split_magnitudes(self, lo, frac, w_pos, w_neg):
        '''
        Deposits magnitudes given as (lower grid index, fraction) pairs with
        the masses landing on the positive and the negative side
        '''
        lo = lo.ravel()
        frac = frac.ravel()
        self._deposit(np.concatenate([lo, -lo]), np.concatenate([frac, -frac]),
                      np.concatenate([w_pos.ravel(), w_neg.ravel()]))

    def add_magnitudes(self, magnitudes, w_pos, w_neg):
        magnitudes = np.asarray(magnitudes, dtype=np.float64)
        self.add_points(np.concatenate([magnitudes, -magnitudes]), np.concatenate([w_pos, w_neg]))

    def _deposit(self, lo, frac, weights):
        # a negative fraction splits towards the next lower index
        step = np.where(frac < 0, -1, 1)
        frac = np.abs(frac)
        idx = np.concatenate([lo, lo + step]) + self.offset
        if idx.size and (idx.min() < 0 or idx.max() >= self.mass.size):
            raise NumericalError("mass landed outside the working grid")
        w = np.concatenate([weights * (1.0 - frac), weights * frac])
        self.mass += np.bincount(idx, weights=w, minlength=self.mass.size)

    def reserve_rail(self, magnitude):
        self.rail = magnitude

    def add_atom(self, magnitude, pos, neg):
        if pos <= 0 and neg <= 0:
            return
        if math.isinf(magnitude):
            self.add_inf(pos, neg)
        elif self.rail is None:
            self.rail = magnitude
            self.rail_pos += pos
            self.rail_neg += neg
        elif abs(magnitude - self.rail) <= GRID_SNAP * self.grid.delta:
            self.rail_pos += pos
            self.rail_neg += neg
        else:
            self.add_points([magnitude, -magnitude], [pos, neg])

    def add_inf(self, pos, neg):
        self.pos_inf += pos
        self.neg_inf += neg

    def build(self, symmetric):
        grid = self.grid
        n = grid.n
        ks = np.arange(self.mass.size) - self.offset
        inside = (ks >= -n) & (ks <= n)
        interior = self.mass[inside].copy()
        lower = float(self.mass[ks < -n].sum())
        upper = float(self.mass[ks > n].sum())
        if lower > 0 or upper > 0:
            log.debug("Folded mass %.3g / %.3g beyond the support bound into the end points", lower, upper)
            interior[0] += lower
            interior[-1] += upper

        rail = self.rail
        rail_pos, rail_neg = self.rail_pos, self.rail_neg
        if rail is not None:
            # grid mass at or beyond the rail belongs to the rail
            pts = grid.points
            beyond = np.abs(pts) >= rail - GRID_SNAP * grid.delta
            rail_pos += float(interior[beyond & (pts > 0)].sum())
            rail_neg += float(interior[beyond & (pts < 0)].sum())
            interior[beyond] = 0.0
            if rail_pos <= 0 and rail_neg <= 0:
                rail = None
                rail_pos = rail_neg = 0.0

        total = interior.sum() + rail_pos + rail_neg + self.pos_inf + self.neg_inf
        if not math.isfinite(total):
            raise NumericalError("density mass is not finite")
        if abs(total - 1.0) > MASS_LOSS_TOL:
            raise NumericalError("density mass drifted to %r" % total)
        return QuantizedDensity(grid, interior / total,
                                atom_neg_sat=rail_neg / total, atom_pos_sat=rail_pos / total,
                                atom_neg_inf=self.neg_inf / total, atom_pos_inf=self.pos_inf / total,
                                rail=rail, symmetric=symmetric)


def _require_compatible(a, b):
    if a.grid != b.grid:
        raise ValidationError("densities live on different grids (%s vs %s)" % (a.grid, b.grid), field='grid')


def _require_level(a, K):
    if not K > 0 or math.isinf(K):
        raise ValidationError("saturation level must be a positive real, got %r" % K, field='K')
    if not a.grid.on_grid(K):
        raise ValidationError("saturation level %r is not a grid point (spacing %r)" % (K, a.grid.delta), field='K')
    if K > a.grid.support * (1 + GRID_SNAP):
        raise ValidationError("saturation level %r exceeds the support bound %r" % (K, a.grid.support), field='K')


def _magnitude_masses(a):
    '''
    Returns (positive, negative) mass arrays indexed by magnitude j * delta
    '''
    n = a.grid.n
    m = a.interior_mass
    pos = m[n:].copy()
    neg = np.zeros(n + 1)
    neg[1:] = m[:n][::-1]
    return pos, neg


@lru_cache(maxsize=4)
def _boxplus_table(delta, n):
    mags = np.arange(n + 1) * delta
    values = boxplus_magnitude(mags[:, None], mags[None, :])
    t = values / delta
    k = np.rint(t)
    exact = np.abs(t - k) <= GRID_SNAP * np.maximum(1.0, t)
    lo = np.where(exact, k, np.floor(t)).astype(np.int64)
    frac = np.where(exact, 0.0, t - lo)
    # nonzero outputs keep their sign: (0, delta) goes to delta
    tiny = (lo == 0) & (frac > 0)
    lo[tiny] = 1
    frac[tiny] = 0.0
    lo.setflags(write=False)
    frac.setflags(write=False)
    return lo, frac


def delta_at(z, grid=None):
    '''
    Unit atom at z, a grid point or +-inf.
    '''
    grid = grid or GridParams.default()
    interior = np.zeros(grid.size)
    if z == math.inf:
        return QuantizedDensity(grid, interior, atom_pos_inf=1.0, symmetric=True)
    if z == -math.inf:
        return QuantizedDensity(grid, interior, atom_neg_inf=1.0, symmetric=False)
    interior[grid.index_of(z)] = 1.0
    return QuantizedDensity(grid, interior, symmetric=(z == 0))


def two_atom(p, z, grid=None):
    '''
    D(p, z) = p Delta_{-z} + (1 - p) Delta_{z}, with both atoms kept exact.
    '''
    grid = grid or GridParams.default()
    if not 0 <= p <= 1:
        raise ValidationError("wrong-sign fraction must lie in [0, 1], got %r" % p, field='p')
    if not z >= 0:
        raise ValidationError("magnitude must be nonnegative, got %r" % z, field='z')
    if z == 0:
        return delta_at(0.0, grid)
    symmetric = abs(p - symmetric_error_fraction(z)) <= 1e-12
    interior = np.zeros(grid.size)
    if math.isinf(z):
        return QuantizedDensity(grid, interior, atom_neg_inf=p, atom_pos_inf=1.0 - p, symmetric=symmetric)
    if z > grid.support * (1 + GRID_SNAP):
        raise ValidationError("magnitude %r exceeds the support bound %r" % (z, grid.support), field='z')
    return QuantizedDensity(grid, interior, atom_neg_sat=p, atom_pos_sat=1.0 - p, rail=z, symmetric=symmetric)


def mix(densities, weights, rail=None):
    '''
    Convex combination of densities on a common grid. At most one rail can
    stay exact: the requested one, otherwise the one carrying the most mass.
    Other rail atoms are split onto the grid.
    '''
    densities = list(densities)
    weights = [float(w) for w in weights]
    if not densities or len(densities) != len(weights):
        raise ValidationError("mix needs one weight per density", field='weights')
    if min(weights) < 0 or abs(sum(weights) - 1.0) > MASS_TOL:
        raise ValidationError("mixing weights must be nonnegative and sum to 1", field='weights')
    grid = densities[0].grid
    for d in densities[1:]:
        _require_compatible(densities[0], d)

    if rail is None:
        candidates = [(w * d.rail_mass, d.rail) for d, w in zip(densities, weights) if w > 0 and d.rail_mass > 0]
        if candidates:
            rail = max(candidates)[1]

    builder = _MassBuilder(grid, reach=grid.n + 1)
    if rail is not None:
        builder.reserve_rail(rail)
    for d, w in zip(densities, weights):
        if w == 0:
            continue
        builder.add_grid(w * d.interior_mass, start=-grid.n)
        if d.rail is not None:
            builder.add_atom(d.rail, w * d.atom_pos_sat, w * d.atom_neg_sat)
        builder.add_inf(w * d.atom_pos_inf, w * d.atom_neg_inf)
    symmetric = all(d.symmetric for d, w in zip(densities, weights) if w > 0)
    return builder.build(symmetric)


def bhattacharyya(a):
    '''
    B(a) = E[e^{-Z/2}]. Mass at -infinity gives +inf.
    '''
    x, m = a.support()
    if np.any(x == -math.inf):
        return math.inf
    return float(np.sum(m * np.exp(-x / 2.0)))


def entropy(a):
    '''
    H(a) = E[log2(1 + e^{-Z})] in bits. Mass at -infinity gives +inf.
    '''
    x, m = a.support()
    if np.any(x == -math.inf):
        return math.inf
    return float(np.sum(m * np.logaddexp(0.0, -x)) / math.log(2.0))


def error_probability(a):
    '''
    E(a) = P{Z < 0} + P{Z = 0} / 2
    '''
    x, m = a.support()
    return float(m[x < 0].sum() + 0.5 * m[x == 0].sum())


def symmetry_defect(a):
    '''
    Largest violation of mass(-x) = e^{-x} mass(x) over the support.
    '''
    n = a.grid.n
    m = a.interior_mass
    x = a.grid.points[n + 1:]
    defect = np.abs(m[:n][::-1] - np.exp(-x) * m[n + 1:])
    worst = float(defect.max()) if defect.size else 0.0
    if a.rail is not None:
        worst = max(worst, abs(a.atom_neg_sat - math.exp(-a.rail) * a.atom_pos_sat))
    return max(worst, a.atom_neg_inf)


def total_variation(a, b):
    _require_compatible(a, b)
    xa, ma = a.support()
    xb, mb = b.support()
    xs, inverse = np.unique(np.concatenate([xa, xb]), return_inverse=True)
    diff = np.zeros(xs.size)
    np.add.at(diff, inverse, np.concatenate([ma, -mb]))
    return 0.5 * float(np.abs(diff).sum())


def var_convolve(a, b):
    '''
    Distribution of Z_a + Z_b (variable node rule).
    '''
    _require_compatible(a, b)
    if a.is_delta_zero():
        return b
    if b.is_delta_zero():
        return a
    grid = a.grid
    n = grid.n
    builder = _MassBuilder(grid, reach=2 * n + 1)

    if a.interior_total > 0 and b.interior_total > 0:
        builder.add_grid(np.convolve(a.interior_mass, b.interior_mass), start=-2 * n)

    for u, v in ((a, b), (b, a)):
        if u.rail_mass > 0 and v.interior_total > 0:
            _add_shifted(builder, v, u.rail, u.atom_pos_sat)
            _add_shifted(builder, v, -u.rail, u.atom_neg_sat)

    if a.rail_mass > 0 and b.rail_mass > 0:
        ra, rb = a.rail, b.rail
        builder.add_points([ra + rb, ra - rb, rb - ra, -ra - rb],
                           [a.atom_pos_sat * b.atom_pos_sat, a.atom_pos_sat * b.atom_neg_sat,
                            a.atom_neg_sat * b.atom_pos_sat, a.atom_neg_sat * b.atom_neg_sat])

    # infinite atoms absorb finite mass; +inf + -inf is resolved to 0
    fa, fb = a.finite_mass, b.finite_mass
    builder.add_inf(a.atom_pos_inf * fb + fa * b.atom_pos_inf + a.atom_pos_inf * b.atom_pos_inf,
                    a.atom_neg_inf * fb + fa * b.atom_neg_inf + a.atom_neg_inf * b.atom_neg_inf)
    builder.add_points([0.0], [a.atom_pos_inf * b.atom_neg_inf + a.atom_neg_inf * b.atom_pos_inf])
    return builder.build(a.symmetric and b.symmetric)


def _add_shifted(builder, v, shift, weight):
    if weight <= 0:
        return
    grid = v.grid
    if grid.on_grid(shift):
        builder.add_grid(weight * v.interior_mass, start=-grid.n + int(round(shift / grid.delta)))
    else:
        nz = v.interior_mass > 0
        builder.add_points(grid.points[nz] + shift, weight * v.interior_mass[nz])


def chk_convolve(a, b):
    '''
    Distribution of 2 atanh(tanh(Z_a/2) tanh(Z_b/2)) (check node rule).
    '''
    _require_compatible(a, b)
    grid = a.grid
    n = grid.n
    builder = _MassBuilder(grid, reach=n + 1)
    pa, na = _magnitude_masses(a)
    pb, nb = _magnitude_masses(b)

    # the rail-by-rail product is the output rail
    if a.rail_mass > 0 and b.rail_mass > 0:
        builder.add_atom(boxplus_magnitude(a.rail, b.rail),
                         a.atom_pos_sat * b.atom_pos_sat + a.atom_neg_sat * b.atom_neg_sat,
                         a.atom_pos_sat * b.atom_neg_sat + a.atom_neg_sat * b.atom_pos_sat)

    ia = np.flatnonzero(pa + na)
    ib = np.flatnonzero(pb + nb)
    if ia.size and ib.size:
        lo, frac = _boxplus_table(grid.delta, n)
        lo = lo[np.ix_(ia, ib)]
        frac = frac[np.ix_(ia, ib)]
        w_pos = np.outer(pa[ia], pb[ib]) + np.outer(na[ia], nb[ib])
        w_neg = np.outer(pa[ia], nb[ib]) + np.outer(na[ia], pb[ib])
        builder.add_split_magnitudes(lo, frac, w_pos, w_neg)

    for (pu, nu, iu), v in (((pa, na, ia), b), ((pb, nb, ib), a)):
        if v.rail_mass > 0 and iu.size:
            mags = boxplus_magnitude(iu * grid.delta, v.rail)
            mags = np.where((mags > 0) & (mags < grid.delta), grid.delta, mags)
            builder.add_magnitudes(mags,
                                   pu[iu] * v.atom_pos_sat + nu[iu] * v.atom_neg_sat,
                                   pu[iu] * v.atom_neg_sat + nu[iu] * v.atom_pos_sat)

    # an infinite operand passes the other one through, up to sign
    for u, v in ((a, b), (b, a)):
        if u.atom_pos_inf + u.atom_neg_inf <= 0:
            continue
        builder.add_grid(u.atom_pos_inf * v.interior_mass + u.atom_neg_inf * v.interior_mass[::-1], start=-n)
        if v.rail_mass > 0:
            builder.add_atom(v.rail,
                             u.atom_pos_inf * v.atom_pos_sat + u.atom_neg_inf * v.atom_neg_sat,
                             u.atom_pos_inf * v.atom_neg_sat + u.atom_neg_inf * v.atom_pos_sat)
    builder.add_inf(a.atom_pos_inf * b.atom_pos_inf + a.atom_neg_inf * b.atom_neg_inf,
                    a.atom_pos_inf * b.atom_neg_inf + a.atom_neg_inf * b.atom_pos_inf)
    return builder.build(a.symmetric and b.symmetric)


def saturated_mass(a, K):
    '''
    Returns (positive, negative) mass at |x| >= K and the grid mask of
    the clipped grid points
    '''
    grid = a.grid
    pts = grid.points
    edge = K - GRID_SNAP * grid.delta
    clip_pos = pts >= edge
    clip_neg = pts <= -edge
    pos = float(a.interior_mass[clip_pos].sum()) + a.atom_pos_inf
    neg = float(a.interior_mass[clip_neg].sum()) + a.atom_neg_inf
    if a.rail is not None and a.rail >= edge:
        pos += a.atom_pos_sat
        neg += a.atom_neg_sat
    return pos, neg, clip_pos | clip_neg


def _rebuild_saturated(a, K, pos, neg, clipped, symmetric):
    grid = a.grid
    builder = _MassBuilder(grid, reach=grid.n + 1)
    builder.add_atom(K, pos, neg)
    inner = np.array(a.interior_mass)
    inner[clipped] = 0.0
    builder.add_grid(inner, start=-grid.n)
    if a.rail is not None and a.rail_mass > 0 and a.rail < K - GRID_SNAP * grid.delta:
        # a rail inside (-K, K) cannot stay exact next to the new one
        builder.add_points([a.rail, -a.rail], [a.atom_pos_sat, a.atom_neg_sat])
    return builder.build(symmetric)


def saturate(a, K):
    '''
    Distribution of min(K, |Z|) sgn(Z): mass at |x| >= K moves onto atoms
    at +-K. The result is generally not symmetric.
    '''
    _require_level(a, K)
    pos, neg, clipped = saturated_mass(a, K)
    gamma = pos + neg
    if gamma <= 0:
        return a
    symmetric = a.symmetric and abs(neg / gamma - symmetric_error_fraction(K)) <= 1e-12
    return _rebuild_saturated(a, K, pos, neg, clipped, symmetric)


def saturate_sym(a, K):
    '''
    Symmetric saturation: gamma D(p, K) + a restricted to (-K, K), with
    p = e^{-K}/(1+e^{-K}) and gamma = P{|x| >= K}.
    '''
    if not a.symmetric:
        raise ValidationError("symmetric saturation needs a density flagged symmetric", field='density')
    _require_level(a, K)
    pos, neg, clipped = saturated_mass(a, K)
    gamma = pos + neg
    if gamma <= 0:
        return a
    p = symmetric_error_fraction(K)
    return _rebuild_saturated(a, K, gamma * (1.0 - p), gamma * p, clipped, True)


def abs_d_distribution(a):
    '''
    Returns (values, weights) of the |D| distribution, |tanh(Z/2)|.
    '''
    x, m = a.support()
    return np.tanh(np.abs(x) / 2.0), m


def wasserstein(a, b):
    '''
    Wasserstein distance between the |D| distributions of two symmetric
    densities, the L1 distance of their cumulative distributions on [0, 1].
    '''
    for name, d in (('a', a), ('b', b)):
        if not d.symmetric:
            raise ValidationError("Wasserstein distance needs symmetric densities (%s is not)" % name, field=name)
    ua, wa = abs_d_distribution(a)
    ub, wb = abs_d_distribution(b)
    return float(wasserstein_distance(ua, ub, wa, wb))


def decompose(a, magnitude):
    '''
    Splits a = gamma D(p, magnitude) + (1 - gamma) m with m supported
    strictly inside (-magnitude, magnitude).

    :param a: QuantizedDensity with all mass in [-magnitude, magnitude]
    :param magnitude: rail magnitude (K, K' or K_d)
    '''
    if not magnitude > 0:
        raise ValidationError("decomposition magnitude must be positive", field='magnitude')
    grid = a.grid
    tol = GRID_SNAP * grid.delta
    if a.atom_pos_inf > 0 or a.atom_neg_inf > 0:
        raise ValidationError("density has mass at infinity, outside [-%r, %r]" % (magnitude, magnitude),
                              field='magnitude')
    heavy = a.interior_mass > 0
    reach = np.abs(grid.points)
    if np.any(heavy & (reach > magnitude + tol)):
        raise ValidationError("density has grid mass beyond +-%r" % magnitude, field='magnitude')
    if np.any(heavy & (np.abs(reach - magnitude) <= tol)):
        raise ValidationError("grid mass sits at |x| = %r; rail mass must be an explicit atom" % magnitude,
                              field='magnitude')
    if a.rail is not None and a.rail_mass > 0 and a.rail > magnitude + tol:
        raise ValidationError("rail %r lies beyond +-%r" % (a.rail, magnitude), field='magnitude')

    matches = a.rail is not None and abs(a.rail - magnitude) <= tol
    gamma = a.rail_mass if matches else 0.0
    if gamma <= 0:
        return SaturatedMassDecomposition(0.0, 0.0, magnitude, a)
    p = a.atom_neg_sat / gamma
    inner = a.interior_total
    if inner <= 0:
        residual = delta_at(0.0, grid)
    else:
        residual = QuantizedDensity(grid, a.interior_mass / inner, symmetric=a.symmetric)
    return SaturatedMassDecomposition(gamma, p, magnitude, residual)
