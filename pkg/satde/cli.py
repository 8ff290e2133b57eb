#!/usr/bin/env python
'''
satde/cli.py

Command line front end: de-run, threshold, stability, mc, wasserstein and
compare.
'''
import io
import os
import sys
import json
import math
import logging
from argparse import ArgumentParser
from dataclasses import dataclass, field
from typing import Optional

import yaml

from satde import defaults, __version__
from satde.common import (log_format_str, log_formatter, SCHEMA_VERSION, EXIT_OK, EXIT_VALIDATION,
                          EXIT_NUMERICAL, EXIT_INCONCLUSIVE, ValidationError, NumericalError,
                          InconclusiveError)

log = logging.getLogger(__name__)

COMMANDS = ('de-run', 'threshold', 'stability', 'mc', 'wasserstein', 'compare')
FORMATS = ('csv', 'json')

# command -> fields that must be set
REQUIRED = {
    'de-run': ('ensemble', 'channel'),
    'threshold': ('ensemble', 'family'),
    'stability': ('ensemble', 'channel', 'K'),
    'mc': ('ensemble', 'channel', 'K'),
    'wasserstein': (),
    'compare': ('ensemble', 'channel', 'K'),
}

# command -> output format when none is given
DEFAULT_FORMAT = {
    'de-run': 'csv',
    'threshold': 'json',
    'stability': 'json',
    'mc': 'csv',
    'wasserstein': 'json',
    'compare': 'csv',
}


@dataclass
class RunConfig:
    '''
    Fully validated settings of one command.
    '''
    command: str
    ensemble: Optional[object] = None
    channel: Optional[object] = None
    family: Optional[str] = None
    mode: str = 'bp'
    K: Optional[float] = None
    grid_spacing: float = 0.0625
    support_bound: float = 64.0
    out: Optional[str] = None
    format: str = 'csv'
    seed: int = 0
    max_iters: Optional[int] = None
    tol: Optional[float] = None
    probes: int = 1
    n: int = 10000
    trials: int = 20
    iters: int = 10
    rule: str = 'bp'
    symmetrize: bool = False
    engine: str = 'de'
    density_a: Optional[str] = None
    density_b: Optional[str] = None
    queue: bool = False
    verbose: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def grid(self):
        from satde.density import GridParams
        return GridParams(self.grid_spacing, self.support_bound)

    def to_dict(self):
        '''
        The resolved settings. Feeding this back through --config repeats
        the run.
        '''
        return {
            'command': self.command,
            'ensemble': self.ensemble.to_dict() if self.ensemble is not None else None,
            'channel': self.channel.to_dict() if self.channel is not None else None,
            'family': self.family,
            'mode': self.mode,
            'K': self.K,
            'grid_spacing': self.grid_spacing,
            'support_bound': self.support_bound,
            'out': self.out,
            'format': self.format,
            'seed': self.seed,
            'max_iters': self.max_iters,
            'tol': self.tol,
            'probes': self.probes,
            'n': self.n,
            'trials': self.trials,
            'iters': self.iters,
            'rule': self.rule,
            'symmetrize': self.symmetrize,
            'engine': self.engine,
            'density_a': self.density_a,
            'density_b': self.density_b,
        }


def get_parser():
    parser = ArgumentParser(prog='satde', description=main.__doc__)
    parser.add_argument('command', nargs='?', choices=COMMANDS, help='Analysis to run')
    parser.add_argument('--config', help='JSON or YAML file with settings; flags win')
    parser.add_argument('--ensemble', help='"l,r" or JSON {"lambda": [...], "rho": [...]}')
    parser.add_argument('--channel', help='FAMILY:PARAM[:CLIP], e.g. BSC:0.07')
    parser.add_argument('--family', help='Channel family for threshold search (BEC, BSC, BIAWGN)')
    parser.add_argument('--clip', type=float, help='Symmetric-saturate the channel at this level')
    parser.add_argument('--mode', help='bp, sat or symsat')
    parser.add_argument('--K', type=float, help='Saturation level')
    parser.add_argument('--grid', type=float, dest='grid_spacing', help='Grid spacing (LLR units)')
    parser.add_argument('--support', type=float, dest='support_bound', help='Grid half width (LLR units)')
    parser.add_argument('--out', help='Output path, stdout when omitted')
    parser.add_argument('--format', choices=FORMATS, help='Output format')
    parser.add_argument('--seed', type=int, help='Random seed')
    parser.add_argument('--max-iters', type=int, dest='max_iters', help='DE iteration cap')
    parser.add_argument('--tol', type=float, help='Threshold bracket width')
    parser.add_argument('--probes', type=int, help='Threshold probes per round')
    parser.add_argument('--n', type=int, help='Code length for Monte Carlo runs')
    parser.add_argument('--trials', type=int, help='Monte Carlo trials')
    parser.add_argument('--iters', type=int, help='Decoder / comparison iterations')
    parser.add_argument('--rule', choices=('bp', 'minsum'), help='Check node rule')
    parser.add_argument('--symmetrize', action='store_true', default=None, help='Flip rail messages')
    parser.add_argument('--engine', choices=('de', 'mc'), help='compare: density evolution or decoder')
    parser.add_argument('--density-a', dest='density_a', help='Serialized density (JSON file)')
    parser.add_argument('--density-b', dest='density_b', help='Serialized density (JSON file)')
    parser.add_argument('--queue', action='store_true', default=None, help='Spread jobs over rq workers')
    parser.add_argument('-v', '--verbose', action='store_true', default=None, help='Turn on debug logging')
    parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    return parser


def load_config_file(path):
    '''
    Reads a JSON or YAML settings file

    :param path: file path
    '''
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ValidationError("cannot read config file %s: %s" % (path, e), field='config')
    if not isinstance(data, dict):
        raise ValidationError("config file %s must hold a mapping" % path, field='config')
    # results echo their settings under "config"
    return data.get('config', data)


def parse_config(argv=None):
    '''
    Parses flags (and an optional config file) into a validated RunConfig.
    '''
    from satde.channels import parse_channel, KINDS
    from satde.de_engine import parse_ensemble, normalize_mode

    args = get_parser().parse_args(argv)
    merged = {
        'grid_spacing': defaults.GRID_DELTA,
        'support_bound': defaults.SUPPORT_BOUND,
    }
    if args.config:
        merged.update({k: v for k, v in load_config_file(args.config).items() if v is not None})
    merged.update({k: v for k, v in vars(args).items() if v is not None and k != 'config'})

    command = merged.pop('command', None)
    if command not in COMMANDS:
        raise ValidationError("missing or unknown command %r" % (command,), field='command')
    for name in REQUIRED[command]:
        if merged.get(name) is None:
            raise ValidationError("%s needs --%s" % (command, name.replace('_', '-')), field=name)

    clip = merged.pop('clip', None)
    config = RunConfig(command)
    known = set(config.to_dict()) | {'queue', 'verbose'}
    for key, value in merged.items():
        if key in known:
            setattr(config, key, value)
        else:
            config.extra[key] = value
    if config.extra:
        raise ValidationError("unknown setting(s): %s" % ', '.join(sorted(config.extra)), field=sorted(config.extra)[0])

    grid = config.grid
    config.grid_spacing, config.support_bound = grid.delta, grid.support
    if config.ensemble is not None:
        config.ensemble = parse_ensemble(config.ensemble)
    if config.channel is not None:
        config.channel = parse_channel(config.channel)
        if clip is not None:
            config.channel = parse_channel(dict(config.channel.to_dict(), clip=clip))
        if config.channel.clip is not None and not grid.on_grid(config.channel.clip):
            raise ValidationError("channel clip %r is not on the grid" % config.channel.clip, field='clip')
    if config.family is not None:
        config.family = str(config.family).upper()
        if config.family not in KINDS:
            raise ValidationError("unknown channel family %r" % config.family, field='family')
    config.mode = normalize_mode(config.mode)
    if config.K is not None:
        config.K = float(config.K)
        if not config.K > 0:
            raise ValidationError("K must be positive", field='K')
        if not grid.on_grid(config.K):
            raise ValidationError("K=%r is not a multiple of the grid spacing %r" % (config.K, grid.delta),
                                  field='K')
        if config.K > grid.support:
            raise ValidationError("K=%r exceeds the support bound %r" % (config.K, grid.support), field='K')
    elif config.mode != 'bp' and command in ('de-run', 'threshold'):
        raise ValidationError("mode %s needs --K" % config.mode, field='K')
    if command == 'wasserstein':
        pair = config.density_a is not None and config.density_b is not None
        if not pair and (config.channel is None or config.K is None):
            raise ValidationError("wasserstein needs --density-a/--density-b or --channel with --K", field='density_a')
    if command in ('mc', 'compare') and config.engine == 'mc' or command == 'mc':
        if not config.ensemble.is_regular:
            raise ValidationError("Monte Carlo runs need a regular ensemble", field='ensemble')
        if (config.n * config.ensemble.l) % config.ensemble.r:
            raise ValidationError("n * l must be divisible by r", field='n')
    for name in ('n', 'trials', 'iters', 'probes'):
        if int(getattr(config, name)) < 1:
            raise ValidationError("%s must be at least 1" % name, field=name)
    if config.format is None or 'format' not in merged:
        config.format = DEFAULT_FORMAT[command]
    return config


def setup_logging(verbose=False):
    '''
    Configures the root logger with the package format
    '''
    level = logging.DEBUG if verbose else getattr(logging, str(defaults.LOG_LEVEL).upper(), logging.INFO)
    logging.basicConfig(format=log_format_str, level=level)
    if defaults.LOG_FILE:
        os.makedirs(defaults.LOG_DIR, exist_ok=True)
        handler = logging.FileHandler(os.path.join(defaults.LOG_DIR, 'satde.log'))
        handler.setFormatter(log_formatter)
        logging.getLogger().addHandler(handler)


def _write(config, text):
    if config.out is None:
        sys.stdout.write(text)
    else:
        with open(config.out, 'w') as f:
            f.write(text)


def _write_json(config, payload):
    payload = dict(payload)
    payload.setdefault('schema_version', SCHEMA_VERSION)
    payload['config'] = config.to_dict()
    _write(config, json.dumps(payload, indent=2, default=_json_default, allow_nan=True) + '\n')


def _write_frame(config, frame, status=None):
    buf = io.StringIO()
    buf.write('# schema_version: %d\n' % SCHEMA_VERSION)
    if status is not None:
        buf.write('# status: %s\n' % status)
    buf.write('# config: %s\n' % json.dumps(config.to_dict(), sort_keys=True))
    frame.to_csv(buf, index=False, float_format='%.17g')
    _write(config, buf.getvalue())


def _json_default(value):
    if hasattr(value, 'tolist'):
        return value.tolist()
    if hasattr(value, 'item'):
        return value.item()
    raise TypeError("%r is not JSON serializable" % (value,))


def _summary(text):
    sys.stderr.write(text + '\n')


def _get_queue(config):
    if not config.queue:
        return None
    from satde.tasks import get_queue
    return get_queue()


def run_de(config):
    from satde.de_engine import de_run, DIVERGED
    c = config.channel.density(config.grid)
    trace = de_run(c, config.ensemble, config.mode, config.K, max_iters=config.max_iters)
    if config.format == 'csv':
        _write(config, trace.to_csv(config=config.to_dict()))
    else:
        _write_json(config, {'status': trace.status, 'records': trace.to_frame().to_dict(orient='records')})
    last = trace.records[-1] if trace.records else None
    _summary("de-run: %s after %d iterations%s" % (trace.status, trace.iterations,
                                                    ", E=%.6g" % last.E if last else ""))
    if trace.status == DIVERGED:
        log.error("DE diverged after %d iterations", trace.iterations)
        return EXIT_NUMERICAL
    return EXIT_OK


def run_threshold(config):
    from satde.channels import get_family
    from satde.de_engine import threshold_search
    family = get_family(config.family)
    result = threshold_search(family, config.ensemble, config.mode, config.K, tol=config.tol, grid=config.grid,
                              max_iters=config.max_iters, probes_per_round=config.probes,
                              queue=_get_queue(config))
    _write_json(config, result.to_dict())
    _summary("threshold: %s %.6g (entropy %.6g, bracket %.3g)" % (family.kind, result.threshold, result.entropy,
                                                                 result.bracket_width))
    return EXIT_OK


def run_stability(config):
    from satde.density import bhattacharyya
    from satde.stability import (analyze, collect_iterates, verify_vc_inequalities, vc_violations,
                                 SaturationParams, INCONCLUSIVE)
    verdict = analyze(config.ensemble, config.channel, config.K, rule=config.rule, grid=config.grid)
    mode = config.mode if config.mode != 'bp' else 'symsat'
    c = config.channel.density(config.grid)
    n_iters = config.max_iters or 50
    iterates = collect_iterates(c, config.ensemble, mode, config.K, n_iters)
    params = SaturationParams.for_rule(config.K, config.ensemble.d_r, config.rule)
    verdict.inequalities = verify_vc_inequalities(iterates, params, config.ensemble, bhattacharyya(c), mode)
    violations = vc_violations(verdict.inequalities)
    payload = verdict.to_dict()
    payload['violations'] = [{'iter': i, 'inequality': k} for i, k in violations]
    _write_json(config, payload)
    _summary("stability: %s, spectral radius %.6g, %d inequality violations"
             % (verdict.regime, verdict.spectral_radius, len(violations)))
    if verdict.regime == INCONCLUSIVE:
        raise InconclusiveError("no stability regime could be established at K=%g" % config.K)
    return EXIT_OK


def run_mc(config):
    from satde.mc_decoder import DecoderConfig, simulate_ber
    cfg = DecoderConfig(config.K, config.iters, config.rule, bool(config.symmetrize), config.seed)
    result = simulate_ber(config.ensemble, config.channel, cfg, config.n, config.trials, _get_queue(config))
    if config.format == 'csv':
        _write_frame(config, result.to_frame())
    else:
        _write_json(config, {'ber': result.ber, 'flips': result.flips,
                             'rows': result.to_frame().to_dict(orient='records')})
    _summary("mc: final message error rate %.6g, bit error rate %.6g" % (result.msg_err_rate[-1], result.ber))
    return EXIT_OK


def _read_density(path):
    from satde.density import QuantizedDensity
    try:
        with open(path) as f:
            return QuantizedDensity.from_json(f.read())
    except OSError as e:
        raise ValidationError("cannot read density %s: %s" % (path, e), field='density')


def run_wasserstein(config):
    from satde.density import wasserstein, saturate_sym
    if config.density_a is not None and config.density_b is not None:
        a, b = _read_density(config.density_a), _read_density(config.density_b)
        payload = {'distance': wasserstein(a, b)}
    else:
        a = config.channel.density(config.grid)
        b = saturate_sym(a, config.K)
        payload = {'distance': wasserstein(a, b), 'bound': 1.0 - math.tanh(config.K / 2.0)}
    _write_json(config, payload)
    _summary("wasserstein: %.6g" % payload['distance'])
    return EXIT_OK


def run_compare(config):
    if config.engine == 'mc':
        from satde.mc_decoder import DecoderConfig, compare_sat_vs_symsat
        cfg = DecoderConfig(config.K, config.iters, config.rule, False, config.seed)
        report = compare_sat_vs_symsat(config.ensemble, config.channel, cfg, config.n, config.trials,
                                       _get_queue(config))
        if config.format == 'csv':
            _write_frame(config, report.to_frame())
        else:
            _write_json(config, report.to_dict())
        _summary("compare: %d flips, ratio ceiling %.6g" % (report.flips, report.ratio_ceiling))
        return EXIT_OK

    from satde.de_engine import compare_bp_symsat
    report = compare_bp_symsat(config.channel.density(config.grid), config.ensemble, config.K, config.iters)
    if config.format == 'csv':
        _write_frame(config, report.to_frame())
    else:
        _write_json(config, {'rows': report.rows, 'violations': report.violations()})
    _summary("compare: %d iterations above the distance bound" % len(report.violations()))
    return EXIT_OK


HANDLERS = {
    'de-run': run_de,
    'threshold': run_threshold,
    'stability': run_stability,
    'mc': run_mc,
    'wasserstein': run_wasserstein,
    'compare': run_compare,
}


def run(config):
    '''
    Runs one command and returns the process exit code

    :param config: RunConfig
    '''
    try:
        return HANDLERS[config.command](config)
    except ValidationError as e:
        log.error("Invalid %s: %s", e.field or 'input', e)
        return EXIT_VALIDATION
    except NumericalError:
        log.exception("Numerical failure in %s", config.command)
        return EXIT_NUMERICAL
    except InconclusiveError as e:
        log.warning("Inconclusive: %s", e)
        return EXIT_INCONCLUSIVE


def main(argv=None):
    '''
    Density evolution and Monte Carlo laboratory for saturated BP decoding

    Example::

        python satde_cli.py de-run --ensemble 3,6 --channel BSC:0.07 --mode symsat --K 20 --out trace.csv
    '''
    try:
        config = parse_config(argv)
    except ValidationError as e:
        sys.stderr.write("satde: invalid %s: %s\n" % (e.field or 'input', e))
        return EXIT_VALIDATION
    setup_logging(config.verbose)
    log.info("Running %s", config.command)
    return run(config)


if __name__ == '__main__':
    sys.exit(main())
