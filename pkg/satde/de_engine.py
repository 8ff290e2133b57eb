'''
satde/de_engine.py

Density evolution for plain BP, saturated BP and symmetric-saturated BP,
BP threshold search, and the BP / symmetric-saturation distance bounds.
'''
import io
import json
import math
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from numpy.polynomial import polynomial as P
from scipy.optimize import minimize_scalar

from satde import defaults
from satde.common import ValidationError, NumericalError, SCHEMA_VERSION
from satde.density import (GridParams, delta_at, var_convolve, chk_convolve, mix, saturate,
                           saturate_sym, bhattacharyya, entropy, error_probability, wasserstein)

log = logging.getLogger(__name__)

MODES = ('bp', 'sat', 'symsat')
MODE_LABELS = {'bp': 'BP', 'sat': 'SatBP-K', 'symsat': 'SymSatBP-K'}
_MODE_ALIASES = {
    'bp': 'bp', 'sat': 'sat', 'satbp': 'sat', 'satbp-k': 'sat',
    'symsat': 'symsat', 'symsatbp': 'symsat', 'symsatbp-k': 'symsat',
}

CONVERGED_ZERO = 'converged_zero'
CONVERGED_FLOOR = 'converged_floor'
MAX_ITERS = 'max_iters'
DIVERGED = 'diverged'


def normalize_mode(mode):
    try:
        return _MODE_ALIASES[str(mode).lower()]
    except KeyError:
        raise ValidationError("unknown mode %r, expected one of bp, sat, symsat" % (mode,), field='mode')


def _clean_coeffs(coeffs, name):
    try:
        values = [float(v) for v in coeffs]
    except (TypeError, ValueError):
        raise ValidationError("%s coefficients must be numbers" % name, field=name)
    while values and values[-1] == 0:
        values.pop()
    if not values:
        raise ValidationError("%s has no nonzero coefficient" % name, field=name)
    if min(values) < 0:
        raise ValidationError("%s coefficients must be nonnegative" % name, field=name)
    if abs(sum(values) - 1.0) > 1e-9:
        raise ValidationError("%s coefficients sum to %r, expected 1" % (name, sum(values)), field=name)
    if values[0] != 0:
        raise ValidationError("%s has degree-one mass; the x^0 coefficient must be 0" % name, field=name)
    return tuple(values)


@dataclass(frozen=True)
class EnsembleSpec:
    '''
    Edge-perspective degree distributions. Coefficient i multiplies x^i, so
    it is the fraction of edges attached to nodes of degree i + 1.
    '''
    lambda_coeffs: Tuple[float, ...]
    rho_coeffs: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, 'lambda_coeffs', _clean_coeffs(self.lambda_coeffs, 'lambda'))
        object.__setattr__(self, 'rho_coeffs', _clean_coeffs(self.rho_coeffs, 'rho'))

    @classmethod
    def regular(cls, l, r):
        l, r = int(l), int(r)
        if l < 2 or r < 2:
            raise ValidationError("regular degrees must be at least 2, got (%d, %d)" % (l, r), field='ensemble')
        return cls(tuple([0.0] * (l - 1) + [1.0]), tuple([0.0] * (r - 1) + [1.0]))

    @classmethod
    def from_node_perspective(cls, variable_fractions, check_fractions):
        '''
        Builds the edge perspective from node fractions {degree: fraction}.
        '''
        def to_edge(fractions, name):
            fractions = {int(d): float(f) for d, f in dict(fractions).items() if f}
            if not fractions or min(fractions) < 2:
                raise ValidationError("%s node degrees must be at least 2" % name, field=name)
            weights = {d: d * f for d, f in fractions.items()}
            total = sum(weights.values())
            coeffs = [0.0] * max(weights)
            for d, w in weights.items():
                coeffs[d - 1] = w / total
            return coeffs
        return cls(to_edge(variable_fractions, 'lambda'), to_edge(check_fractions, 'rho'))

    @property
    def variable_degrees(self):
        return [i + 1 for i, v in enumerate(self.lambda_coeffs) if v > 0]

    @property
    def check_degrees(self):
        return [i + 1 for i, v in enumerate(self.rho_coeffs) if v > 0]

    @property
    def d_l(self):
        return min(self.variable_degrees)

    @property
    def d_l_max(self):
        return max(self.variable_degrees)

    @property
    def d_r(self):
        return max(self.check_degrees)

    def _coeff(self, coeffs, i):
        return coeffs[i] if i < len(coeffs) else 0.0

    @property
    def lambda2(self):
        return self._coeff(self.lambda_coeffs, 1)

    @property
    def lambda3(self):
        return self._coeff(self.lambda_coeffs, 2)

    @property
    def rho_prime_1(self):
        return float(sum(i * v for i, v in enumerate(self.rho_coeffs)))

    @property
    def is_regular(self):
        return len(self.variable_degrees) == 1 and len(self.check_degrees) == 1

    @property
    def l(self):
        return self.variable_degrees[0] if self.is_regular else None

    @property
    def r(self):
        return self.check_degrees[0] if self.is_regular else None

    @property
    def design_rate(self):
        var_int = sum(v / (i + 1) for i, v in enumerate(self.lambda_coeffs))
        chk_int = sum(v / (i + 1) for i, v in enumerate(self.rho_coeffs))
        return 1.0 - chk_int / var_int

    def lam(self, x):
        return P.polyval(x, self.lambda_coeffs)

    def rho(self, x):
        return P.polyval(x, self.rho_coeffs)

    def to_dict(self):
        if self.is_regular:
            return {'l': self.l, 'r': self.r}
        return {'lambda': list(self.lambda_coeffs), 'rho': list(self.rho_coeffs)}

    def __str__(self):
        if self.is_regular:
            return '(%d,%d)' % (self.l, self.r)
        return json.dumps(self.to_dict())


def parse_ensemble(spec):
    '''
    Accepts "3,6", {"l": 3, "r": 6}, {"lambda": [...], "rho": [...]} or the
    JSON text of either dictionary.
    '''
    if isinstance(spec, EnsembleSpec):
        return spec
    if isinstance(spec, str):
        text = spec.strip()
        if text.startswith('{'):
            try:
                spec = json.loads(text)
            except ValueError as e:
                raise ValidationError("ensemble is not valid JSON: %s" % e, field='ensemble')
        else:
            parts = text.strip('()').split(',')
            try:
                l, r = (int(p) for p in parts)
            except ValueError:
                raise ValidationError("malformed ensemble %r, expected l,r or JSON lambda/rho" % spec,
                                      field='ensemble')
            return EnsembleSpec.regular(l, r)
    if isinstance(spec, dict):
        if 'lambda' in spec and 'rho' in spec:
            return EnsembleSpec(spec['lambda'], spec['rho'])
        if 'l' in spec and 'r' in spec:
            return EnsembleSpec.regular(spec['l'], spec['r'])
    raise ValidationError("malformed ensemble %r" % (spec,), field='ensemble')


def _power(x, k, op, identity):
    '''
    x^{op k} by binary exponentiation
    '''
    result = identity
    base = x
    while k > 0:
        if k & 1:
            result = base if result is identity else op(result, base)
        k >>= 1
        if k:
            base = op(base, base)
    return result


def _mixed_powers(x, coeffs, op, identity):
    '''
    sum_i coeffs[i] x^{op i}
    '''
    degrees = [i for i, v in enumerate(coeffs) if v > 0]
    if len(degrees) == 1:
        return _power(x, degrees[0], op, identity)
    powers = {}
    current = identity
    for i in range(1, max(degrees) + 1):
        current = x if i == 1 else op(current, x)
        if i in degrees:
            powers[i] = current
    return mix([powers[i] for i in degrees], [coeffs[i] for i in degrees])


def _require_level(mode, K):
    if mode != 'bp' and K is None:
        raise ValidationError("mode %s needs a saturation level K" % mode, field='K')


@dataclass(frozen=True)
class DeIterate:
    '''
    One DE iteration: the check-node output, the variable-node output before
    saturation, and the outgoing (saturated) message density.
    '''
    ell: int
    check_out: object
    var_pre: object
    var_out: object


def _half_steps(c, x, ens, mode, K):
    zero = delta_at(0.0, c.grid)
    check_out = _mixed_powers(x, ens.rho_coeffs, chk_convolve, zero)
    var_pre = var_convolve(c, _mixed_powers(check_out, ens.lambda_coeffs, var_convolve, zero))
    if mode == 'bp':
        var_out = var_pre
    elif mode == 'sat':
        var_out = saturate(var_pre, K)
    else:
        if not var_pre.symmetric:
            raise ValidationError("symmetric saturation needs a symmetric intermediate density", field='mode')
        var_out = saturate_sym(var_pre, K)
    return check_out, var_pre, var_out


def de_step(c, x, ens, mode='bp', K=None):
    '''
    Returns one DE iterate c * lambda(rho(x)), saturated according to mode.

    :param c: channel density
    :param x: incoming message density
    :param ens: EnsembleSpec
    :param mode: bp, sat or symsat
    :param K: saturation level for the saturated modes
    '''
    mode = normalize_mode(mode)
    _require_level(mode, K)
    return _half_steps(c, x, ens, mode, K)[2]


def iterate(c, ens, mode='bp', K=None, x0=None):
    '''
    Yields DeIterate records from x0 (Delta_0 by default) forever.
    '''
    mode = normalize_mode(mode)
    _require_level(mode, K)
    x = x0 if x0 is not None else delta_at(0.0, c.grid)
    ell = 0
    while True:
        ell += 1
        check_out, var_pre, var_out = _half_steps(c, x, ens, mode, K)
        yield DeIterate(ell, check_out, var_pre, var_out)
        x = var_out


@dataclass
class DeRecord:
    iter: int
    B: float
    E: float
    H: float
    wasserstein_step: float


@dataclass
class DeTrace:
    mode: str
    K: Optional[float]
    records: List[DeRecord] = field(default_factory=list)
    status: Optional[str] = None
    final: object = None

    COLUMNS = ['iter', 'B', 'E', 'H', 'wasserstein_step']

    @property
    def E(self):
        return [r.E for r in self.records]

    @property
    def B(self):
        return [r.B for r in self.records]

    @property
    def iterations(self):
        return len(self.records)

    def to_frame(self):
        return pd.DataFrame([vars(r) for r in self.records], columns=self.COLUMNS)

    def to_csv(self, path_or_buf=None, config=None):
        '''
        Writes the trace as CSV, preceded by ``# schema_version`` and
        ``# config:`` comment lines.
        '''
        buf = io.StringIO()
        buf.write('# schema_version: %d\n' % SCHEMA_VERSION)
        buf.write('# status: %s\n' % self.status)
        if config is not None:
            buf.write('# config: %s\n' % json.dumps(config, sort_keys=True))
        self.to_frame().to_csv(buf, index=False, float_format='%.17g')
        text = buf.getvalue()
        if path_or_buf is None:
            return text
        if hasattr(path_or_buf, 'write'):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, 'w') as f:
                f.write(text)


def is_success(x, E, mode, K, success_E=None, interior_tol=None):
    '''
    BP succeeds when E < success_E. A saturated mode succeeds when
    E < e^{-K} + 1e-12 and the grid mass at non-positive LLR is below
    interior_tol.
    '''
    if mode == 'bp':
        success_E = defaults.BP_SUCCESS_E if success_E is None else success_E
        return E < success_E
    interior_tol = defaults.SAT_INTERIOR_TOL if interior_tol is None else interior_tol
    return E < math.exp(-K) + 1e-12 and x.nonpositive_interior_mass < interior_tol


def de_run(c, ens, mode='bp', K=None, max_iters=None, success_E=None, floor_tol=None,
           floor_window=None, interior_tol=None):
    '''
    Runs DE from Delta_0 until success, an error-probability floor, the
    iteration cap, or a numerical failure.

    :param c: channel density
    :param ens: EnsembleSpec
    :param mode: bp, sat or symsat
    :param K: saturation level for the saturated modes
    :param max_iters: iteration cap
    :param success_E: BP success threshold on E
    :param floor_tol: relative change of E over floor_window iterations that counts as a floor
    '''
    mode = normalize_mode(mode)
    _require_level(mode, K)
    max_iters = defaults.DE_MAX_ITERS if max_iters is None else int(max_iters)
    floor_tol = defaults.FLOOR_TOL if floor_tol is None else floor_tol
    floor_window = defaults.FLOOR_WINDOW if floor_window is None else int(floor_window)
    if max_iters < 1:
        raise ValidationError("max_iters must be at least 1", field='max_iters')

    trace = DeTrace(mode, K)
    prev = delta_at(0.0, c.grid)
    status = MAX_ITERS
    for ell in range(1, max_iters + 1):
        try:
            x = de_step(c, prev, ens, mode, K)
        except NumericalError as e:
            log.warning("DE diverged at iteration %d: %s", ell, e)
            status = DIVERGED
            break
        B, E, H = bhattacharyya(x), error_probability(x), entropy(x)
        if math.isnan(B) or math.isnan(E) or math.isnan(H):
            log.warning("DE produced NaN functionals at iteration %d", ell)
            status = DIVERGED
            break
        step = wasserstein(prev, x) if prev.symmetric and x.symmetric else math.nan
        trace.records.append(DeRecord(ell, B, E, H, step))
        log.debug("iter %d B=%.6g E=%.6g H=%.6g", ell, B, E, H)
        prev = x
        if is_success(x, E, mode, K, success_E, interior_tol):
            status = CONVERGED_ZERO
            break
        if ell > floor_window:
            earlier = trace.records[-floor_window - 1].E
            if abs(E - earlier) <= floor_tol * max(earlier, 1e-300):
                status = CONVERGED_FLOOR
                break
    trace.status = status
    trace.final = prev
    log.info("DE %s finished with %s after %d iterations", MODE_LABELS[mode], status, trace.iterations)
    return trace


def probe(family, sigma, ens, mode, K, grid, max_iters=None):
    '''
    Returns True when DE succeeds on the family member at sigma. A
    diverged run raises NumericalError instead of counting as a failure.
    '''
    from satde.channels import make_channel
    trace = de_run(make_channel(family, sigma, grid), ens, mode, K, max_iters=max_iters)
    log.info("Probe %s(%.6g): %s", family.kind, sigma, trace.status)
    if trace.status == DIVERGED:
        raise NumericalError("DE diverged at %s(%.6g)" % (family.kind, sigma))
    return trace.status == CONVERGED_ZERO


@dataclass
class ThresholdResult:
    family: str
    ensemble: dict
    mode: str
    K: Optional[float]
    threshold: float
    entropy: float
    bracket: Tuple[float, float]
    steps: int
    grid: dict
    max_iters: int
    degenerate: Optional[str] = None

    @property
    def bracket_width(self):
        return self.bracket[1] - self.bracket[0]

    def to_dict(self):
        return {
            'schema_version': SCHEMA_VERSION,
            'family': self.family,
            'ensemble': self.ensemble,
            'mode': MODE_LABELS[self.mode],
            'K': self.K,
            'threshold': self.threshold,
            'entropy': self.entropy,
            'bracket': list(self.bracket),
            'bracket_width': self.bracket_width,
            'steps': self.steps,
            'degenerate': self.degenerate,
            'grid': self.grid,
            'max_iters': self.max_iters,
            'success_criterion': {
                'bp_E': defaults.BP_SUCCESS_E,
                'sat_interior_tol': defaults.SAT_INTERIOR_TOL,
                'floor_tol': defaults.FLOOR_TOL,
                'floor_window': defaults.FLOOR_WINDOW,
            },
        }


def threshold_search(family, ens, mode='bp', K=None, tol=None, grid=None, max_iters=None,
                     max_steps=None, probes_per_round=1, queue=None):
    '''
    Brackets the largest parameter at which DE succeeds. Each round probes
    probes_per_round equally spaced interior points; every probe starts
    from Delta_0.

    :param family: ChannelFamily, ordered by degradation
    :param queue: rq Queue to spread the probes of a round over workers
    '''
    from satde.channels import make_channel
    from satde.tasks import run_jobs, probe_channel

    mode = normalize_mode(mode)
    _require_level(mode, K)
    grid = grid or GridParams.default()
    tol = defaults.THRESHOLD_TOL if tol is None else tol
    max_steps = defaults.BISECTION_MAX_STEPS if max_steps is None else max_steps
    max_iters = defaults.DE_MAX_ITERS if max_iters is None else max_iters
    if probes_per_round < 1:
        raise ValidationError("probes_per_round must be at least 1", field='probes_per_round')

    def job_args(sigma):
        return (family.kind, family.parameter_range, family.support_clip, sigma, ens.to_dict(),
                mode, K, grid.to_dict(), max_iters)

    lo, hi = family.parameter_range
    ok_lo, ok_hi = run_jobs(probe_channel, [job_args(lo), job_args(hi)], queue)
    degenerate = None
    steps = 0
    if not ok_lo:
        log.warning("DE fails over the whole range of %s; threshold at the lower edge", family.kind)
        degenerate = 'fails_everywhere'
        hi = lo
    elif ok_hi:
        log.warning("DE succeeds over the whole range of %s; threshold at the upper edge", family.kind)
        degenerate = 'succeeds_everywhere'
        lo = hi
    else:
        while hi - lo > tol and steps < max_steps:
            points = [lo + (hi - lo) * (j + 1) / (probes_per_round + 1) for j in range(probes_per_round)]
            results = run_jobs(probe_channel, [job_args(p) for p in points], queue)
            for p, ok in zip(points, results):
                if ok:
                    lo = p
                else:
                    hi = p
                    break
            steps += 1
            log.info("Threshold bracket [%.8g, %.8g]", lo, hi)

    threshold = 0.5 * (lo + hi)
    h = entropy(make_channel(family, threshold, grid))
    return ThresholdResult(family.kind, ens.to_dict(), mode, K, threshold, h, (lo, hi), steps,
                           grid.to_dict(), max_iters, degenerate)


def bec_erasure_trajectory(eps, ens, n_iters):
    '''
    Scalar BEC recursion x_l = eps lambda(1 - rho(1 - x_{l-1})) from x_0 = 1.
    Returns [x_1, ..., x_n].
    '''
    x = 1.0
    out = []
    for _ in range(n_iters):
        x = eps * ens.lam(1.0 - ens.rho(1.0 - x))
        out.append(float(x))
    return out


def bec_threshold(ens, points=200001):
    '''
    BEC BP threshold inf_{x in (0, 1]} x / lambda(1 - rho(1 - x)).
    '''
    xs = np.linspace(1e-6, 1.0, points)

    def ratio(x):
        return x / ens.lam(1.0 - ens.rho(1.0 - x))

    values = ratio(xs)
    i = int(np.argmin(values))
    lo, hi = xs[max(i - 1, 0)], xs[min(i + 1, points - 1)]
    if hi <= lo:
        return float(values[i])
    best = minimize_scalar(ratio, bounds=(lo, hi), method='bounded', options={'xatol': 1e-14})
    return float(min(best.fun, values[i]))


def symsat_gap_bound(ell, K, l, r, B_bp):
    '''
    B_bp + 2 sqrt(2) e^{(-K + ell ln(2(l-1)(r-1)))/2}, the bound on B of the
    symmetric-saturation iterate given B of the BP iterate.
    '''
    if ell < 1:
        raise ValidationError("iteration index must be at least 1", field='ell')
    if not K > 0:
        raise ValidationError("K must be positive", field='K')
    exponent = (-K + ell * math.log(2.0 * (l - 1) * (r - 1))) / 2.0
    try:
        return B_bp + 2.0 * math.sqrt(2.0) * math.exp(exponent)
    except OverflowError:
        return math.inf


def alpha_ell(a, b, l, r):
    '''
    2(l-1) sum_{j=1}^{r-1} (1-B(a)^2)^{(r-1-j)/2} (1-B(b)^2)^{(j-1)/2}

    :param a: density or its Bhattacharyya value
    :param b: density or its Bhattacharyya value
    '''
    Ba = a if isinstance(a, (int, float)) else bhattacharyya(a)
    Bb = b if isinstance(b, (int, float)) else bhattacharyya(b)
    for name, value in (('a', Ba), ('b', Bb)):
        if value > 1 + 1e-12:
            raise ValidationError("B(%s) = %r exceeds 1" % (name, value), field=name)
    ua = max(1.0 - Ba ** 2, 0.0)
    ub = max(1.0 - Bb ** 2, 0.0)
    total = sum(ua ** ((r - 1 - j) / 2.0) * ub ** ((j - 1) / 2.0) for j in range(1, r))
    return 2.0 * (l - 1) * total


def symsat_distance_bound(alphas, K):
    '''
    (1 - tanh(K/2)) (1 + alpha_l + alpha_l alpha_{l-1} + ... + alpha_l ... alpha_2)

    :param alphas: [alpha_2, ..., alpha_l] in iteration order
    '''
    total = 1.0
    prod = 1.0
    for alpha in reversed(list(alphas)):
        prod *= alpha
        total += prod
    return (1.0 - math.tanh(K / 2.0)) * total


@dataclass
class ComparisonReport:
    K: float
    rows: List[dict] = field(default_factory=list)

    COLUMNS = ['iter', 'B_bp', 'B_symsat', 'B_bound', 'alpha', 'wasserstein', 'distance_bound',
               'E_bp', 'E_symsat']

    def violations(self):
        return [row['iter'] for row in self.rows if row['B_symsat'] > row['B_bound']]

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=self.COLUMNS)


def compare_bp_symsat(c, ens, K, n_iters):
    '''
    Runs BP and symmetric-saturation DE side by side and records B of both,
    the iteration bound on B, the per-iteration contraction factor and the
    Wasserstein distance with its contraction-chain bound.
    '''
    l, r = ens.d_l_max, ens.d_r
    bp = iterate(c, ens, 'bp')
    sym = iterate(c, ens, 'symsat', K)
    prev_bp = prev_sym = delta_at(0.0, c.grid)
    alphas = []
    report = ComparisonReport(K)
    for ell in range(1, n_iters + 1):
        a = next(bp).var_out
        b = next(sym).var_out
        if ell > 1:
            alphas.append(alpha_ell(prev_bp, prev_sym, l, r))
        B_bp, B_sym = bhattacharyya(a), bhattacharyya(b)
        report.rows.append({
            'iter': ell,
            'B_bp': B_bp,
            'B_symsat': B_sym,
            'B_bound': symsat_gap_bound(ell, K, l, r, B_bp),
            'alpha': alphas[-1] if alphas else math.nan,
            'wasserstein': wasserstein(a, b),
            'distance_bound': symsat_distance_bound(alphas, K),
            'E_bp': error_probability(a),
            'E_symsat': error_probability(b),
        })
        prev_bp, prev_sym = a, b
    return report
