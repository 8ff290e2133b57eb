#!/usr/bin/env python
'''
scripts/stability_scan.py

Scans the spectral radius of the 2x2 stability bound over a range of K and
reports K0, the smallest scanned K from which on the radius stays below 1.
'''
import sys
import json
import logging
from argparse import ArgumentParser

import numpy as np
import pandas as pd

from satde.common import log_format_str, EXIT_OK, EXIT_INCONCLUSIVE, SCHEMA_VERSION
from satde.channels import parse_channel
from satde.de_engine import parse_ensemble
from satde.density import bhattacharyya, GridParams
from satde.stability import scan_stability_radius

log = logging.getLogger(__name__)


def main():
    '''
    Scans the stability matrix radius over K
    '''
    args = get_args()
    setup_logging(args.verbose)

    ens = parse_ensemble(args.ensemble)
    channel = parse_channel(args.channel)
    B_c = bhattacharyya(channel.density(GridParams.default()))
    Ks = np.arange(args.k_min, args.k_max + args.k_step / 2.0, args.k_step)
    radii, K0 = scan_stability_radius(ens.d_r, ens.variable_degrees, B_c, Ks)

    frame = pd.DataFrame({'K': Ks, 'spectral_radius': radii})
    if args.out:
        frame.to_csv(args.out, index=False)
    summary = {'schema_version': SCHEMA_VERSION, 'ensemble': ens.to_dict(), 'channel': channel.to_dict(),
               'B_c': B_c, 'K0': K0}
    print(json.dumps(summary, indent=2))
    if K0 is None:
        log.warning("Radius does not drop below 1 for K <= %g", args.k_max)
        return EXIT_INCONCLUSIVE
    log.info("K0 = %g", K0)
    return EXIT_OK


def setup_logging(verbose=False):
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(format=log_format_str, level=level)


def get_args():
    parser = ArgumentParser(description=main.__doc__)
    parser.add_argument('--ensemble', default='3,6', help='"l,r" or JSON lambda/rho')
    parser.add_argument('--channel', default='BSC:0.07', help='FAMILY:PARAM')
    parser.add_argument('--k-min', type=float, default=1.0, help='First K')
    parser.add_argument('--k-max', type=float, default=40.0, help='Last K')
    parser.add_argument('--k-step', type=float, default=0.5, help='K increment')
    parser.add_argument('--out', help='CSV file for the scanned radii')
    parser.add_argument('-v', '--verbose', action='store_true', help='Turn on debug logging')
    return parser.parse_args()


if __name__ == '__main__':
    sys.exit(main())
