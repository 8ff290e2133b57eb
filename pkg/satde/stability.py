'''
satde/stability.py

Stability analysis of saturated BP: rail flip probabilities, the no-flip
bound, support propagation, the degree-two verdict, near-stability
recursions, the 2x2 contraction test for minimum degree three and a
numerical check of the node inequalities on DE iterates.
'''
import math
import logging
from dataclasses import dataclass, field, asdict
from itertools import islice
from typing import List, Optional

import numpy as np

from satde import defaults
from satde.common import ValidationError, SCHEMA_VERSION
from satde.density import (bhattacharyya, boxplus_magnitude, saturated_mass, symmetric_error_fraction,
                           GRID_SNAP)

log = logging.getLogger(__name__)

DEG2_UNSTABLE = 'deg2_unstable'
NEAR_STABLE_DEG2 = 'near_stable_deg2'
NEAR_STABLE_DEG3 = 'near_stable_deg3'
STABLE_DEG3PLUS = 'stable_deg3plus'
INCONCLUSIVE = 'inconclusive'

ESCAPES_BELOW = 'escapes_below'
SAFE = 'safe'


def flip_probability(z, K):
    '''
    Probability of flipping a rail message whose unsaturated magnitude is z
    so that its wrong-sign probability becomes e^{-K}/(1+e^{-K}).

    :param z: magnitude(s) before saturation, z >= K
    :param K: saturation level
    '''
    if not K > 0:
        raise ValidationError("K must be positive", field='K')
    z = np.asarray(z, dtype=np.float64)
    if np.any(z < K):
        raise ValidationError("flipping applies to saturated messages only (z >= K)", field='z')
    with np.errstate(divide='ignore', invalid='ignore'):
        ratio = np.expm1(K - z) / np.expm1(-z)
    ratio = np.where(np.isinf(z), 1.0, ratio)
    value = symmetric_error_fraction(K) * ratio
    if value.ndim == 0:
        return float(value)
    return value


@dataclass(frozen=True)
class NoFlipBound:
    loose: float
    tight: float


def no_flip_probability_bound(K, n_vars):
    '''
    Lower bounds on the probability that none of n_vars rail messages is
    flipped: max(0, 1 - n e^{-K}) and (1 - e^{-K})^n.
    '''
    if n_vars < 1:
        raise ValidationError("n_vars must be at least 1", field='n_vars')
    loose = max(0.0, 1.0 - n_vars * math.exp(-K))
    tight = math.exp(n_vars * math.log1p(-math.exp(-K)))
    return NoFlipBound(loose, tight)


def tree_size(l, r, depth):
    '''
    Number of variable nodes in the computation tree of one outgoing
    variable message after depth iterations.
    '''
    if depth < 1:
        raise ValidationError("depth must be at least 1", field='depth')
    branching = (l - 1) * (r - 1)
    return sum(branching ** k for k in range(depth))


@dataclass
class SupportIteration:
    iterates: List[float]
    verdict: str


def support_iteration(z0, L, d_l, k_max=64):
    '''
    Follows the lower support edge z_{k+1} = (d_l - 1) z_k - L of message
    densities for a channel with support at -L.

    :param z0: initial lower support edge
    :param L: channel support edge, L > 0
    :param d_l: minimum variable degree, at least 3
    :param k_max: iteration cap
    '''
    if d_l == 2:
        raise ValidationError("degree two has no safe support; use degree_two_verdict", field='d_l')
    if d_l < 2:
        raise ValidationError("minimum variable degree must be at least 3", field='d_l')
    if not L > 0:
        raise ValidationError("channel support edge must be positive", field='L')
    fixed = L / (d_l - 2)
    iterates = []
    z = z0
    for _ in range(k_max):
        z = (d_l - 1) * z - L
        iterates.append(z)
        if z < 0:
            return SupportIteration(iterates, ESCAPES_BELOW)
        if abs(z) > 1e300:
            break
    if z0 >= fixed:
        return SupportIteration(iterates, SAFE)
    return SupportIteration(iterates, ESCAPES_BELOW if z < fixed else SAFE)


@dataclass
class SaturationParams:
    '''
    :param K: message rail
    :param d_r: check degree
    :param K_dprime: channel support bound, 2K' - K when not given
    :param rule: bp or minsum
    '''
    K: float
    d_r: int
    K_dprime: Optional[float] = None
    rule: str = 'bp'

    def __post_init__(self):
        if not self.K > 0:
            raise ValidationError("K must be positive", field='K')
        if self.d_r < 2:
            raise ValidationError("check degree must be at least 2", field='d_r')
        if self.rule not in ('bp', 'minsum'):
            raise ValidationError("unknown check rule %r" % self.rule, field='rule')
        if self.K_dprime is None:
            self.K_dprime = 2 * self.K_prime - self.K

    @classmethod
    def for_rule(cls, K, d_r, rule='bp', K_dprime=None):
        return cls(K, d_r, K_dprime, rule)

    @property
    def K_prime(self):
        if self.rule == 'minsum' or self.d_r == 2:
            return self.K
        return self.K - math.log(self.d_r - 1)

    @property
    def cond_2Kp_gt_K(self):
        return 2 * self.K_prime > self.K

    @property
    def cond_channel(self):
        return self.K_dprime <= 2 * self.K_prime - self.K + 1e-12

    def check_rail(self, d=None):
        '''
        K_d, the check output magnitude when d inputs sit at the rail
        '''
        d = self.d_r - 1 if d is None else d
        if self.rule == 'minsum':
            return self.K
        value = self.K
        for _ in range(d - 1):
            value = boxplus_magnitude(value, self.K)
        return value

    def to_dict(self):
        return {'K': self.K, 'K_prime': self.K_prime, 'K_dprime': self.K_dprime, 'd_r': self.d_r,
                'rule': self.rule, 'cond_2Kp_gt_K': self.cond_2Kp_gt_K, 'cond_channel': self.cond_channel}


@dataclass
class StabilityVerdict:
    regime: str
    matrix_entries: dict = field(default_factory=dict)
    spectral_radius: float = math.nan
    asymptotic_B_bound: float = math.nan
    constants: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)
    inequalities: Optional[List[dict]] = None

    def to_dict(self):
        data = asdict(self)
        data['schema_version'] = SCHEMA_VERSION
        return data


def degree_two_verdict(ens, channel_kind):
    '''
    Returns a deg2_unstable verdict when the ensemble has degree-two
    variable nodes and the channel is not the BEC, None otherwise.
    '''
    if ens.lambda2 > 0 and str(channel_kind).upper() != 'BEC':
        return StabilityVerdict(DEG2_UNSTABLE, notes=[
            "degree-two variable nodes: no zero-error invariant set exists for finite K"])
    return None


@dataclass
class NearStability:
    eta: float
    xi: float
    floor_bound: Optional[float]

    @property
    def conclusive(self):
        return self.floor_bound is not None


def near_stability_deg2(lambda2, B_c, rho_p1, K, xi):
    '''
    eta = lambda2 B(c) rho'(1) + (1 - lambda2) B(c) rho'(1)^2 xi. When
    eta < 1 and xi >= (2 - eta)/(1 - eta) e^{-K/2}, B of the iterates ends
    below e^{-K/2}/(1 - eta).
    '''
    if not xi > 0:
        raise ValidationError("xi must be positive", field='xi')
    eta = lambda2 * B_c * rho_p1 + (1.0 - lambda2) * B_c * rho_p1 ** 2 * xi
    floor = None
    if eta < 1 and xi >= (2.0 - eta) / (1.0 - eta) * math.exp(-K / 2.0):
        floor = math.exp(-K / 2.0) / (1.0 - eta)
    return NearStability(eta, xi, floor)


@dataclass
class NearStabilityDeg3:
    xi: float
    B_var_bound: Optional[float]
    B_check_bound: Optional[float]

    @property
    def conclusive(self):
        return self.B_var_bound is not None


def near_stability_deg3(lambda3, B_c, rho_p1, K):
    '''
    xi solves lambda3 B(c) rho'(1)^2 xi + (1 - lambda3) B(c) rho'(1)^3 xi^2 = 1/2.
    When 2e^{-K/2} < xi the iterates end with B <= 2e^{-K/2} after the
    variable nodes and B <= 2 rho'(1) e^{-K/2} after the check nodes.
    '''
    if not 0 < lambda3 <= 1:
        raise ValidationError("lambda3 must lie in (0, 1]", field='lambda3')
    if not B_c > 0:
        raise ValidationError("B(c) must be positive", field='B_c')
    a = lambda3 * B_c * rho_p1 ** 2
    b = (1.0 - lambda3) * B_c * rho_p1 ** 3
    if b == 0:
        if a <= 0:
            return NearStabilityDeg3(math.nan, None, None)
        xi = 0.5 / a
    else:
        xi = (-a + math.sqrt(a * a + 2.0 * b)) / (2.0 * b)
    if not xi > 0:
        return NearStabilityDeg3(xi, None, None)
    floor = 2.0 * math.exp(-K / 2.0)
    if floor < xi:
        return NearStabilityDeg3(xi, floor, rho_p1 * floor)
    return NearStabilityDeg3(xi, None, None)


def bhattacharyya_recursion_bound(ens, B_c, K, B0, n):
    '''
    Iterates the upper bound on B of saturated DE iterates: the degree-two
    form when lambda2 > 0, the degree-three form otherwise.
    '''
    rp = ens.rho_prime_1
    floor = math.exp(-K / 2.0)
    values = []
    B = B0
    for _ in range(n):
        if ens.lambda2 > 0:
            l2 = ens.lambda2
            B = l2 * B_c * rp * B + (1.0 - l2) * B_c * (rp * B) ** 2 + floor
        else:
            l3 = ens.lambda3
            B = l3 * B_c * (rp * B) ** 2 + (1.0 - l3) * B_c * (rp * B) ** 3 + floor
        values.append(B)
    return values


def _matrix_constants(d_r, c_const=None):
    c_const = 2.0 * (d_r - 1) if c_const is None else c_const
    C_const = 2.0 * (d_r - 1) + 1.0 + math.sqrt(d_r - 1)
    return c_const, C_const


def matrix_entries(K, d_r, d, B_c, c_const=None):
    '''
    The four contraction coefficients for variable degree d + 1.
    '''
    c, C = _matrix_constants(d_r, c_const)
    r = d_r
    half = math.exp(-K / 2.0)
    a = (d_r - 1) * 2.0 ** d * (2.0 * half) ** (d // 2)
    b = B_c * d * math.exp(-(d - 1) * (K / 2.0 - math.log(c))) * (d_r - 1) * C
    cc = (math.exp(-(d / 2.0 - 1.0) * (K - math.log(c))) * math.exp(d / 2.0 * math.log(3.0 * math.e))
          * (1.0 + 2.0 * r) * 2.0 * (d_r - 1) * half)
    dd = b
    return {'a': a, 'b': b, 'c': cc, 'd': dd}


def spectral_radius(entries):
    '''
    Perron root of [[a, b], [c, d]] with nonnegative entries.
    '''
    a, b, c, d = entries['a'], entries['b'], entries['c'], entries['d']
    return 0.5 * (a + d) + math.sqrt(0.25 * (a - d) ** 2 + b * c)


def stability_matrix(K, d_r, degrees, B_c, params=None, c_const=None):
    '''
    Builds the 2x2 bound on (e^{K/2} gamma p, (1 - gamma) B(m)) from one
    iteration to the next, each entry maximized over the variable degrees.

    :param K: saturation level
    :param d_r: check degree
    :param degrees: variable node degrees, all at least 3
    :param B_c: Bhattacharyya parameter of the channel
    :param params: SaturationParams for the precondition flags
    '''
    degrees = sorted(set(int(x) for x in degrees))
    if not degrees or min(degrees) < 3:
        raise ValidationError("the matrix test needs variable degrees >= 3, got %s" % degrees, field='degrees')
    params = params or SaturationParams(K, d_r)
    c_const, C_const = _matrix_constants(d_r, c_const)
    entries = {'a': 0.0, 'b': 0.0, 'c': 0.0, 'd': 0.0}
    for degree in degrees:
        for key, value in matrix_entries(K, d_r, degree - 1, B_c, c_const).items():
            entries[key] = max(entries[key], value)
    radius = spectral_radius(entries)
    flags = params.cond_2Kp_gt_K and params.cond_channel
    regime = STABLE_DEG3PLUS if radius < 1 and flags else INCONCLUSIVE
    notes = ["check degree r in the variable-node coefficient is read as d_r"]
    if radius < 1 and not flags:
        notes.append("radius below 1 but a rail precondition fails")
    log.info("Stability matrix at K=%g: radius %.6g (%s)", K, radius, regime)
    return StabilityVerdict(regime, entries, radius,
                            2.0 * math.exp(-K / 2.0) if regime == STABLE_DEG3PLUS else math.nan,
                            {'c_const': c_const, 'C_const': C_const}, params.to_dict(), notes)


def scan_stability_radius(d_r, degrees, B_c, Ks):
    '''
    Returns (radii, K0) with K0 the smallest scanned K from which on every
    radius is below 1, or None.
    '''
    radii = [stability_matrix(K, d_r, degrees, B_c).spectral_radius for K in Ks]
    K0 = None
    for K, radius in zip(reversed(list(Ks)), reversed(radii)):
        if radius < 1:
            K0 = K
        else:
            break
    return radii, K0


def analyze(ens, channel, K, rule='bp', K_dprime=None, grid=None, xi=None):
    '''
    Dispatches to the degree-two verdict, the near-stability recursions and
    the matrix test and returns one StabilityVerdict.

    :param ens: EnsembleSpec
    :param channel: ChannelSpec
    :param K: saturation level
    :param K_dprime: channel support bound, the support edge of the channel
                     when not given
    '''
    from satde.channels import channel_support_edge
    c = channel.density(grid)
    B_c = bhattacharyya(c)
    rp = ens.rho_prime_1
    if K_dprime is None:
        # infinite for an unclipped BIAWGN, which fails the channel condition
        K_dprime = channel_support_edge(channel.kind, channel.param, channel.clip)
    params = SaturationParams.for_rule(K, ens.d_r, rule, K_dprime)
    constants = {'B_c': B_c, 'rho_prime_1': rp, 'lambda2': ens.lambda2, 'lambda3': ens.lambda3}

    if ens.lambda2 > 0:
        if xi is None:
            spare = 1.0 - ens.lambda2 * B_c * rp
            quad = (1.0 - ens.lambda2) * B_c * rp ** 2
            xi = 0.5 * spare / quad if quad > 0 and spare > 0 else 1.0
        near = near_stability_deg2(ens.lambda2, B_c, rp, K, xi)
        constants.update({'xi': near.xi, 'eta': near.eta})
        verdict = degree_two_verdict(ens, channel.kind)
        if verdict is None:
            verdict = StabilityVerdict(NEAR_STABLE_DEG2 if near.conclusive else INCONCLUSIVE,
                                       notes=["BEC: saturation leaves stability unchanged"])
        verdict.asymptotic_B_bound = near.floor_bound if near.conclusive else math.nan
        verdict.constants.update(constants)
        verdict.params = params.to_dict()
        return verdict

    if ens.d_l == 3:
        near = near_stability_deg3(ens.lambda3, B_c, rp, K)
        constants.update({'xi': near.xi})
    else:
        near = None

    verdict = stability_matrix(K, ens.d_r, ens.variable_degrees, B_c, params)
    verdict.constants.update(constants)
    if not ens.is_regular:
        verdict.notes.append("irregular check side: d_r is the largest check degree")
    if verdict.regime != STABLE_DEG3PLUS and near is not None and near.conclusive:
        verdict.regime = NEAR_STABLE_DEG3
        verdict.asymptotic_B_bound = near.B_var_bound
    return verdict


def collect_iterates(c, ens, mode, K, n_iters):
    '''
    Returns the first n_iters DeIterate records of a saturated DE run.
    '''
    from satde.de_engine import iterate
    return list(islice(iterate(c, ens, mode, K), n_iters))


def symsat_allowance(ens, K, mode):
    '''
    Extra B a symmetric-saturation iterate can carry over the saturated-BP
    bounds: each of the (l-1)(r-1) inputs of a subtree is a forced
    wrong-sign rail with probability at most e^{-K}.
    '''
    if mode != 'symsat':
        return 0.0
    return (ens.d_l_max - 1) * (ens.d_r - 1) * math.exp(-K)


def tail_bounds(iterates, ens, K, tail=10, mode='symsat', slack=None):
    '''
    Checks B <= 2e^{-K/2} after the variable nodes and
    B <= 2 rho'(1) e^{-K/2} after the check nodes over the last tail
    iterates. In symsat mode the variable bound carries symsat_allowance.
    Returns one dict per checked iteration.
    '''
    slack = defaults.VC_SLACK if slack is None else slack
    allowance = symsat_allowance(ens, K, mode)
    var_bound = 2.0 * math.exp(-K / 2.0)
    chk_bound = ens.rho_prime_1 * var_bound
    rows = []
    for it in iterates[-tail:]:
        B_var = bhattacharyya(it.var_out)
        B_chk = bhattacharyya(it.check_out)
        rows.append({'iter': it.ell, 'B_var': B_var, 'B_check': B_chk,
                     'var_ok': B_var <= var_bound + allowance + slack,
                     'check_ok': B_chk <= chk_bound + slack})
    return rows


def _split(density, magnitude):
    '''
    Returns (gamma, p, (1 - gamma) B(m)) for the rail at magnitude. Grid
    mass beyond the magnitude stays in m.
    '''
    if density.atom_neg_inf > 0:
        return 0.0, 0.0, math.inf
    rail = density.rail
    matches = (rail is not None and density.rail_mass > 0
               and abs(rail - magnitude) <= GRID_SNAP * max(1.0, magnitude))
    if not matches:
        return 0.0, 0.0, bhattacharyya(density)
    gamma = density.rail_mass
    residual = float(np.sum(density.interior_mass * np.exp(-density.grid.points / 2.0)))
    return gamma, density.atom_neg_sat / gamma, residual


def verify_vc_inequalities(iterates, params, ens, B_c, mode='symsat', slack=None):
    '''
    Checks the check-node and variable-node rail inequalities on DE
    iterates. Iteration rows where B of the incoming variable output
    exceeds 2e^{-K/2} lie outside the regime the inequalities describe and
    are reported as not applicable; the K_d range K - ln d <= K_d <= K is
    checked on every row. The variable-node wrong-rail bound is judged on
    the wrong-sign mass at |x| >= K before saturation, which forced flips of
    symmetric saturation do not touch.

    :param iterates: DeIterate records of a saturated run
    :param params: SaturationParams
    :param ens: EnsembleSpec
    :param B_c: Bhattacharyya parameter of the channel
    '''
    slack = defaults.VC_SLACK if slack is None else slack
    K = params.K
    d_r = params.d_r
    d = d_r - 1
    K_d = params.check_rail()
    c, C = _matrix_constants(d_r)
    regime = 2.0 * math.exp(-K / 2.0) + symsat_allowance(ens, K, mode)

    rows = []
    for prev, cur in zip(iterates, iterates[1:]):
        row = {'iter': cur.ell, 'K_d': K_d,
               'K_d_range': K - math.log(d) - slack <= K_d <= K + slack}
        if cur.check_out.rail is not None and cur.check_out.rail_mass > 0:
            row['K_d_range'] = row['K_d_range'] and K - math.log(d) - slack <= cur.check_out.rail <= K + slack

        g0, p0, m0 = _split(prev.var_out, K)
        g1, p1, m1 = _split(cur.check_out, K_d)
        g2, p2, m2 = _split(cur.var_out, K)
        wrong_pre = saturated_mass(cur.var_pre, K)[1]
        row.update({'gamma_p_in': g0 * p0, 'gbar_B_in': m0, 'gamma_p_check': g1 * p1, 'gbar_B_check': m1,
                    'gamma_p_out': g2 * p2, 'gbar_B_out': m2,
                    'wrong_pre': wrong_pre})

        applicable = bhattacharyya(prev.var_out) <= regime * (1 + 1e-9)
        row['applicable'] = applicable
        if applicable:
            row['check_wrong_rail'] = g1 * p1 <= d * g0 * p0 + slack
            row['check_interior'] = m1 <= m0 * (g0 * C * d ** 3 + d) + slack
            row['check_wrong_share'] = (g1 == 0) or p1 <= d * p0 + slack
            var_interior = 0.0
            var_wrong = 0.0
            for i, weight in enumerate(ens.lambda_coeffs):
                if weight <= 0:
                    continue
                dv = i
                chain = B_c * dv * math.exp(-(dv - 1) * (K / 2.0 - math.log(c))) * m1
                var_interior += weight * (chain + g1 * p1 * math.exp(-(dv / 2.0 - 1.0) * (K - math.log(c)))
                                          * math.exp(dv / 2.0 * math.log(3.0 * math.e)) * (1.0 + 2.0 * d_r))
                var_wrong += weight * (math.exp(-K / 2.0) * chain + 2.0 ** dv * (g1 * p1) ** ((dv + 2) // 2))
            row['var_interior'] = m2 <= var_interior + slack
            row['var_wrong_rail'] = wrong_pre <= var_wrong + slack
        rows.append(row)
    return rows


def vc_violations(rows):
    '''
    Returns (iteration, inequality) pairs that failed.
    '''
    keys = ('K_d_range', 'check_wrong_rail', 'check_interior', 'check_wrong_share', 'var_interior',
            'var_wrong_rail')
    return [(row['iter'], key) for row in rows for key in keys if key in row and not row[key]]

