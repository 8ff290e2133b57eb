'''
satde/mc_decoder.py

Monte Carlo saturated message passing on sampled regular Tanner graphs,
with optional random flipping of rail messages that makes the message
densities symmetric.
'''
import math
import logging
from dataclasses import dataclass, field, asdict
from typing import List, Optional

import numpy as np
import pandas as pd
from scipy.stats import norm

from satde.common import ValidationError, SCHEMA_VERSION
from satde.density import boxplus
from satde.stability import flip_probability, tree_size, no_flip_probability_bound

log = logging.getLogger(__name__)

RULES = ('bp', 'minsum')


@dataclass
class TannerGraph:
    '''
    Regular bipartite graph. Edge e joins variable edge_var[e] and check
    edge_check[e]; var_edges / check_edges list the edges of every node in
    socket order.
    '''
    n_vars: int
    n_checks: int
    l: int
    r: int
    var_edges: np.ndarray
    check_edges: np.ndarray
    edge_var: np.ndarray
    edge_check: np.ndarray

    @property
    def n_edges(self):
        return self.n_vars * self.l

    @property
    def edges(self):
        '''
        (variable, check, socket) triples, socket being the check socket
        '''
        sockets = np.empty(self.n_edges, dtype=np.int64)
        sockets[self.check_edges.ravel()] = np.arange(self.n_edges)
        return list(zip(self.edge_var.tolist(), self.edge_check.tolist(), sockets.tolist()))

    def variable_degrees(self):
        return np.bincount(self.edge_var, minlength=self.n_vars)

    def check_degrees(self):
        return np.bincount(self.edge_check, minlength=self.n_checks)

    def multi_edges(self):
        '''
        Number of repeated (variable, check) pairs
        '''
        pairs = self.edge_var.astype(np.int64) * self.n_checks + self.edge_check
        return int(pairs.size - np.unique(pairs).size)

    def neighborhood(self, v, depth):
        '''
        Variables reachable from v through at most depth check hops
        '''
        seen = np.zeros(self.n_vars, dtype=bool)
        seen[v] = True
        frontier = np.array([v])
        for _ in range(depth):
            checks = np.unique(self.edge_check[self.var_edges[frontier].ravel()])
            variables = np.unique(self.edge_var[self.check_edges[checks].ravel()])
            frontier = variables[~seen[variables]]
            if frontier.size == 0:
                break
            seen[frontier] = True
        return np.flatnonzero(seen)


def build_regular_graph(n, l, r, seed=None):
    '''
    Samples an (l, r)-regular graph on n variables by uniform socket
    matching. Multi-edges are kept.

    :param n: number of variables
    :param l: variable degree
    :param r: check degree
    :param seed: anything numpy.random.default_rng accepts
    '''
    if n < 1 or l < 1 or r < 1:
        raise ValidationError("graph sizes must be positive", field='n')
    if (n * l) % r != 0:
        raise ValidationError("n * l = %d is not divisible by r = %d" % (n * l, r), field='n')
    rng = np.random.default_rng(seed)
    n_edges = n * l
    n_checks = n_edges // r
    # edge e sits on variable socket e and check socket perm[e]
    perm = rng.permutation(n_edges)
    edge_var = np.arange(n_edges) // l
    edge_check = perm // r
    check_edges = np.empty(n_edges, dtype=np.int64)
    check_edges[perm] = np.arange(n_edges)
    graph = TannerGraph(n, n_checks, l, r, np.arange(n_edges).reshape(n, l), check_edges.reshape(n_checks, r),
                        edge_var, edge_check)
    repeats = graph.multi_edges()
    if repeats:
        log.warning("Sampled graph has %d multi-edges", repeats)
    return graph


@dataclass
class DecoderConfig:
    K: float
    max_iters: int = 10
    rule: str = 'bp'
    symmetrize: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if not self.K > 0:
            raise ValidationError("K must be positive", field='K')
        if self.max_iters < 1:
            raise ValidationError("max_iters must be at least 1", field='max_iters')
        if self.rule not in RULES:
            raise ValidationError("unknown check rule %r, expected bp or minsum" % self.rule, field='rule')
        if not 0 <= int(self.rng_seed) < 2 ** 64:
            raise ValidationError("seed must be a 64-bit unsigned integer", field='seed')

    def to_dict(self):
        return asdict(self)


def _stream(seed, *key):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=key)))


def channel_rng(seed, trial):
    return _stream(seed, trial, 0)


def graph_rng(seed, trial):
    return _stream(seed, trial, 1)


def flip_rng(seed, trial, ell):
    return _stream(seed, trial, 2, ell)


def _minsum(x, y):
    return np.sign(x) * np.sign(y) * np.minimum(np.abs(x), np.abs(y))


def _check_update(inputs, rule):
    '''
    Extrinsic check outputs from prefix and suffix combinations; +inf is
    the identity of both rules.
    '''
    op = boxplus if rule == 'bp' else _minsum
    rows, r = inputs.shape
    prefix = np.empty((rows, r))
    suffix = np.empty((rows, r))
    prefix[:, 0] = np.inf
    suffix[:, r - 1] = np.inf
    for j in range(1, r):
        prefix[:, j] = op(prefix[:, j - 1], inputs[:, j - 1])
        suffix[:, r - 1 - j] = op(suffix[:, r - j], inputs[:, r - j])
    return op(prefix, suffix)


def _variable_update(llrs, inputs):
    rows, l = inputs.shape
    prefix = np.zeros((rows, l))
    suffix = np.zeros((rows, l))
    if l > 1:
        prefix[:, 1:] = np.cumsum(inputs[:, :-1], axis=1)
        suffix[:, :-1] = np.cumsum(inputs[:, :0:-1], axis=1)[:, ::-1]
    return llrs[:, None] + prefix + suffix


def _error_count(values):
    return float(np.count_nonzero(values < 0) + 0.5 * np.count_nonzero(values == 0))


@dataclass
class DecodeResult:
    hard_decisions: np.ndarray
    message_errors: List[float]
    message_erasures: List[float]
    bit_errors: List[float]
    flips: int
    n_messages: int
    messages: Optional[List[np.ndarray]] = None

    @property
    def per_iter_message_error_rate(self):
        return [e / self.n_messages for e in self.message_errors]


def decode(graph, channel_llrs, cfg, trial=0, record=False):
    '''
    Flooding SatBP decoding. Every node output is saturated to [-K, K];
    with cfg.symmetrize, a variable output at the rail has its sign flipped
    with probability flip_probability(|unsaturated value|, K).

    :param graph: TannerGraph
    :param channel_llrs: channel LLR per variable
    :param cfg: DecoderConfig
    :param trial: trial index selecting the flip stream
    :param record: keep the variable-to-check messages of every iteration
    '''
    llrs = np.asarray(channel_llrs, dtype=np.float64)
    if llrs.shape != (graph.n_vars,):
        raise ValidationError("expected %d channel LLRs, got %s" % (graph.n_vars, llrs.shape), field='channel_llrs')
    if np.any(np.isnan(llrs)):
        raise ValidationError("channel LLRs contain NaN", field='channel_llrs')

    K = cfg.K
    n_edges = graph.n_edges
    to_var = np.zeros(n_edges)
    message_errors, message_erasures, bit_errors, history = [], [], [], []
    flips = 0
    for ell in range(1, cfg.max_iters + 1):
        pre = _variable_update(llrs, to_var[graph.var_edges])
        to_check = np.empty(n_edges)
        to_check[graph.var_edges.ravel()] = np.clip(pre, -K, K).ravel()
        if cfg.symmetrize:
            unclipped = np.empty(n_edges)
            unclipped[graph.var_edges.ravel()] = np.abs(pre).ravel()
            uniforms = flip_rng(cfg.rng_seed, trial, ell).random(n_edges)
            rail = unclipped >= K
            flip = np.zeros(n_edges, dtype=bool)
            flip[rail] = uniforms[rail] < flip_probability(unclipped[rail], K)
            to_check[flip] = -to_check[flip]
            flips += int(np.count_nonzero(flip))
        message_errors.append(_error_count(to_check))
        message_erasures.append(float(np.count_nonzero(to_check == 0)))
        if record:
            history.append(to_check.copy())

        out = _check_update(to_check[graph.check_edges], cfg.rule)
        to_var = np.empty(n_edges)
        to_var[graph.check_edges.ravel()] = np.clip(out, -K, K).ravel()

        totals = llrs + to_var[graph.var_edges].sum(axis=1)
        bit_errors.append(_error_count(totals))

    hard = (totals < 0).astype(np.int8)
    return DecodeResult(hard, message_errors, message_erasures, bit_errors, flips, n_edges,
                        history if record else None)


def wilson_interval(successes, trials, confidence=0.95):
    '''
    Wilson score interval for a binomial proportion. Returns (low, high).
    '''
    successes = np.asarray(successes, dtype=np.float64)
    if trials <= 0:
        raise ValidationError("trials must be positive", field='trials')
    z = norm.ppf(0.5 + confidence / 2.0)
    z2 = z * z
    p_hat = successes / trials
    denom = 1.0 + z2 / trials
    center = (p_hat + z2 / (2.0 * trials)) / denom
    margin = z * np.sqrt(p_hat * (1.0 - p_hat) / trials + z2 / (4.0 * trials * trials)) / denom
    return np.clip(center - margin, 0.0, 1.0), np.clip(center + margin, 0.0, 1.0)


@dataclass
class McResult:
    msg_err_rate: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    std_err: np.ndarray
    erasure_rate: np.ndarray
    bit_err_rate: np.ndarray
    flips: int
    trials: int
    config: dict = field(default_factory=dict)

    COLUMNS = ['iter', 'msg_err_rate', 'ci_lo', 'ci_hi', 'std_err', 'erasure_rate', 'bit_err_rate']

    @property
    def ber(self):
        return float(self.bit_err_rate[-1])

    @property
    def message_error_by_iter(self):
        return self.msg_err_rate.tolist()

    @property
    def confidence_95(self):
        return list(zip(self.ci_lo.tolist(), self.ci_hi.tolist()))

    def to_frame(self):
        return pd.DataFrame({
            'iter': np.arange(1, self.msg_err_rate.size + 1),
            'msg_err_rate': self.msg_err_rate,
            'ci_lo': self.ci_lo,
            'ci_hi': self.ci_hi,
            'std_err': self.std_err,
            'erasure_rate': self.erasure_rate,
            'bit_err_rate': self.bit_err_rate,
        }, columns=self.COLUMNS)


def _require_regular(ens):
    if not ens.is_regular:
        raise ValidationError("Monte Carlo decoding samples regular ensembles only", field='ensemble')


def run_trial(l, r, n, channel, cfg, trial):
    '''
    Samples a graph and a channel realization for one trial and decodes.
    Returns plain counts so the result can travel through a job queue.
    '''
    from satde.channels import sample_llrs
    graph = build_regular_graph(n, l, r, graph_rng(cfg.rng_seed, trial))
    llrs = sample_llrs(channel.kind, channel.param, n, channel_rng(cfg.rng_seed, trial), channel.clip)
    result = decode(graph, llrs, cfg, trial)
    return {
        'message_errors': result.message_errors,
        'message_erasures': result.message_erasures,
        'bit_errors': result.bit_errors,
        'flips': result.flips,
        'n_messages': result.n_messages,
        'n_bits': n,
    }


def simulate_ber(ens, channel, cfg, n, trials, queue=None):
    '''
    All-zero codeword simulation averaged over trials, each with its own
    graph and channel realization.

    :param ens: regular EnsembleSpec
    :param channel: ChannelSpec
    :param cfg: DecoderConfig
    :param n: code length
    :param trials: number of independent trials
    :param queue: rq Queue to spread the trials over workers
    '''
    from satde.tasks import run_jobs, mc_trial
    _require_regular(ens)
    if trials < 1:
        raise ValidationError("trials must be at least 1", field='trials')
    args = [(ens.l, ens.r, n, channel.to_dict(), cfg.to_dict(), t) for t in range(trials)]
    results = run_jobs(mc_trial, args, queue)

    errors = np.array([res['message_errors'] for res in results])
    erasures = np.array([res['message_erasures'] for res in results])
    bits = np.array([res['bit_errors'] for res in results])
    per_trial = results[0]['n_messages']
    total = per_trial * trials
    rates = errors / per_trial
    msg_err_rate = errors.sum(axis=0) / total
    ci_lo, ci_hi = wilson_interval(errors.sum(axis=0), total)
    if trials > 1:
        std_err = rates.std(axis=0, ddof=1) / math.sqrt(trials)
    else:
        std_err = np.sqrt(msg_err_rate * (1.0 - msg_err_rate) / total)
    log.info("Simulated %d trials of n=%d: final message error rate %.4g", trials, n, msg_err_rate[-1])
    return McResult(msg_err_rate, ci_lo, ci_hi, std_err, erasures.sum(axis=0) / total,
                    bits.sum(axis=0) / (n * trials), int(sum(res['flips'] for res in results)), trials,
                    {'ensemble': ens.to_dict(), 'channel': channel.to_dict(), 'decoder': cfg.to_dict(),
                     'n': n, 'trials': trials})


@dataclass
class SatComparison:
    rows: List[dict]
    tree_size: int
    no_flip_bound: float
    ratio_ceiling: float
    flips: int

    COLUMNS = ['iter', 'sat_rate', 'symsat_rate', 'ratio', 'sat_std_err', 'symsat_std_err']

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=self.COLUMNS)

    def to_dict(self):
        return {'schema_version': SCHEMA_VERSION, 'rows': self.rows, 'tree_size': self.tree_size,
                'no_flip_bound': self.no_flip_bound, 'ratio_ceiling': self.ratio_ceiling,
                'flips': self.flips}


def compare_sat_vs_symsat(ens, channel, cfg, n, trials, queue=None):
    '''
    Runs the plain and the flipping decoder on the same graphs and channel
    realizations and reports the per-iteration message error rates, their
    ratio and the no-flip bound of the computation tree.
    '''
    _require_regular(ens)
    plain = simulate_ber(ens, channel, DecoderConfig(cfg.K, cfg.max_iters, cfg.rule, False, cfg.rng_seed),
                         n, trials, queue)
    flipped = simulate_ber(ens, channel, DecoderConfig(cfg.K, cfg.max_iters, cfg.rule, True, cfg.rng_seed),
                           n, trials, queue)
    rows = []
    for i in range(cfg.max_iters):
        a, b = float(plain.msg_err_rate[i]), float(flipped.msg_err_rate[i])
        rows.append({'iter': i + 1, 'sat_rate': a, 'symsat_rate': b, 'ratio': a / b if b > 0 else math.nan,
                     'sat_std_err': float(plain.std_err[i]), 'symsat_std_err': float(flipped.std_err[i])})
    size = tree_size(ens.l, ens.r, cfg.max_iters)
    bound = no_flip_probability_bound(cfg.K, size).tight
    ceiling = 1.0 / bound if bound > 0 else math.inf
    return SatComparison(rows, size, bound, ceiling, flipped.flips)
