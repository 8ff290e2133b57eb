#!/usr/bin/env python
'''
tests/test_de_engine.py
'''
import io
import math
from itertools import islice
from unittest import TestCase

import numpy as np
import pandas as pd
from numpy.testing import assert_allclose

from satde.common import ValidationError
from satde.channels import ChannelFamily, get_family, make_channel
from satde.de_engine import (EnsembleSpec, parse_ensemble, normalize_mode, de_step, iterate, de_run,
                             threshold_search, bec_threshold, bec_erasure_trajectory, symsat_gap_bound,
                             alpha_ell, symsat_distance_bound, compare_bp_symsat, CONVERGED_ZERO,
                             CONVERGED_FLOOR)
from satde.density import delta_at, two_atom, bhattacharyya, error_probability, total_variation
from tests.resources import COARSE, WIDE, scalar_bec_threshold, scalar_bec_recursion

REGULAR_36 = EnsembleSpec.regular(3, 6)
# lambda(x) = 0.5x + 0.5x^2, rho(x) = x^5
IRREGULAR = EnsembleSpec((0.0, 0.5, 0.5), (0, 0, 0, 0, 0, 1.0))


class TestEnsembleSpec(TestCase):

    def test_regular(self):
        ens = parse_ensemble('3,6')
        assert (ens.l, ens.r, ens.d_l, ens.d_r) == (3, 6, 3, 6)
        assert ens.rho_prime_1 == 5
        assert ens.design_rate == 0.5
        assert ens.to_dict() == {'l': 3, 'r': 6}

    def test_irregular(self):
        ens = parse_ensemble('{"lambda": [0, 0.5, 0.5], "rho": [0, 0, 0, 0, 0, 1]}')
        assert (ens.lambda2, ens.lambda3) == (0.5, 0.5)
        assert ens.variable_degrees == [2, 3]
        assert not ens.is_regular
        assert_allclose(ens.lam(1.0), 1.0)

    def test_node_perspective(self):
        ens = EnsembleSpec.from_node_perspective({3: 1.0}, {6: 1.0})
        assert ens == REGULAR_36

    def test_invalid(self):
        for bad in ('3', '3,x', '{"lambda": [0, 0.7], "rho": [0, 1]}', '{"lambda": [1], "rho": [0, 1]}',
                    {'rho': [0, 1]}):
            with self.assertRaises(ValidationError):
                parse_ensemble(bad)

    def test_modes(self):
        assert normalize_mode('SatBP-K') == 'sat'
        assert normalize_mode('SymSatBP-K') == 'symsat'
        with self.assertRaises(ValidationError):
            normalize_mode('layered')


class TestDeStep(TestCase):

    def test_from_delta_zero(self):
        c = make_channel(get_family('BSC'), 0.05, COARSE)
        assert total_variation(de_step(c, delta_at(0.0, COARSE), REGULAR_36), c) < 1e-12

    def test_from_delta_infinity(self):
        c = make_channel(get_family('BSC'), 0.05, COARSE)
        x = de_step(c, delta_at(math.inf, COARSE), REGULAR_36)
        assert_allclose(x.atom_pos_inf, 1.0, rtol=1e-14)

    def test_level_required(self):
        c = make_channel(get_family('BSC'), 0.05, COARSE)
        with self.assertRaises(ValidationError):
            de_step(c, delta_at(0.0, COARSE), REGULAR_36, 'sat')

    def test_symsat_needs_symmetric_channel(self):
        c = two_atom(0.3, 2.0, COARSE)
        with self.assertRaises(ValidationError):
            de_step(c, delta_at(0.0, COARSE), REGULAR_36, 'symsat', 4.0)

    def test_bec_matches_scalar_recursion(self):
        for ens, (l, r) in ((REGULAR_36, (3, 6)), (EnsembleSpec.regular(4, 8), (4, 8))):
            c = make_channel(get_family('BEC'), 0.4, COARSE)
            erasures = [2 * error_probability(it.var_out) for it in islice(iterate(c, ens), 25)]
            assert_allclose(erasures, scalar_bec_recursion(0.4, l, r, 25), atol=1e-12)
            assert_allclose(bec_erasure_trajectory(0.4, ens, 25), scalar_bec_recursion(0.4, l, r, 25),
                            atol=1e-15)

    def test_saturation_neutral_on_bec(self):
        c = make_channel(get_family('BEC'), 0.4, COARSE)
        bp = [error_probability(it.var_out) for it in islice(iterate(c, REGULAR_36), 30)]
        for K in (5.0, 10.0, 25.0):
            sat = [error_probability(it.var_out) for it in islice(iterate(c, REGULAR_36, 'sat', K), 30)]
            assert_allclose(sat, bp, atol=1e-12)

    def test_modes_degrade_in_order(self):
        c = make_channel(get_family('BSC'), 0.05, COARSE)
        K = 6.0
        runs = [islice(iterate(c, REGULAR_36, mode, None if mode == 'bp' else K), 12)
                for mode in ('bp', 'sat', 'symsat')]
        for bp, sat, sym in zip(*runs):
            E = [error_probability(it.var_out) for it in (bp, sat, sym)]
            assert E[0] <= E[1] + 1e-10
            assert E[1] <= E[2] + 1e-10


class TestDeRun(TestCase):

    def test_bec_below_and_above(self):
        bec = get_family('BEC')
        below = de_run(make_channel(bec, 0.40, COARSE), REGULAR_36)
        assert below.status == CONVERGED_ZERO
        above = de_run(make_channel(bec, 0.45, COARSE), REGULAR_36)
        assert above.status == CONVERGED_FLOOR
        assert above.E[-1] > 0.1

    def test_perfect_channel_saturated(self):
        trace = de_run(delta_at(math.inf, COARSE), REGULAR_36, 'sat', 4.0)
        assert trace.status == CONVERGED_ZERO
        assert trace.iterations == 1
        assert trace.records[0].E == 0
        assert trace.final.rail == 4.0

    def test_max_iters(self):
        trace = de_run(make_channel(get_family('BEC'), 0.40, COARSE), REGULAR_36, max_iters=3)
        assert trace.status == 'max_iters'
        assert trace.iterations == 3
        with self.assertRaises(ValidationError):
            de_run(delta_at(math.inf, COARSE), REGULAR_36, max_iters=0)

    def test_csv(self):
        trace = de_run(make_channel(get_family('BEC'), 0.40, COARSE), REGULAR_36, max_iters=5)
        text = trace.to_csv(config={'command': 'de-run'})
        lines = text.splitlines()
        assert lines[0] == '# schema_version: 1'
        assert lines[1] == '# status: max_iters'
        assert lines[2].startswith('# config: ')
        frame = pd.read_csv(io.StringIO(text), comment='#')
        assert list(frame.columns) == ['iter', 'B', 'E', 'H', 'wasserstein_step']
        assert list(frame['iter']) == [1, 2, 3, 4, 5]

    def test_degree_two_contrast(self):
        '''
        With degree-two variables saturated DE keeps an error floor on the
        BSC but not on the BEC.
        '''
        bsc = de_run(make_channel(get_family('BSC'), 0.01, COARSE), IRREGULAR, 'sat', 10.0)
        assert bsc.status == CONVERGED_FLOOR
        assert bsc.E[-1] > 0
        bec = de_run(make_channel(get_family('BEC'), 0.2, COARSE), IRREGULAR, 'sat', 10.0)
        assert bec.status == CONVERGED_ZERO


class TestThreshold(TestCase):

    def test_bec_threshold_matches_scalar_oracle(self):
        for l, r in ((3, 6), (4, 8)):
            oracle = scalar_bec_threshold(l, r)
            ens = EnsembleSpec.regular(l, r)
            assert_allclose(bec_threshold(ens), oracle, atol=1e-5)
            result = threshold_search(get_family('BEC'), ens, grid=COARSE, max_iters=1000)
            assert abs(result.threshold - oracle) < 1e-3
            assert result.bracket_width <= 1e-3
            assert result.degenerate is None
        assert_allclose(scalar_bec_threshold(3, 6), 0.4294, atol=1e-4)

    def test_saturated_bec_threshold(self):
        bp = threshold_search(get_family('BEC'), REGULAR_36, grid=COARSE, max_iters=1000)
        sat = threshold_search(get_family('BEC'), REGULAR_36, 'sat', 25.0, grid=COARSE, max_iters=1000)
        assert abs(sat.threshold - bp.threshold) <= 1e-3
        assert sat.to_dict()['mode'] == 'SatBP-K'

    def test_degenerate_brackets(self):
        fails = threshold_search(ChannelFamily('BEC', (0.6, 0.9)), REGULAR_36, grid=COARSE)
        assert fails.degenerate == 'fails_everywhere'
        assert fails.threshold == 0.6
        succeeds = threshold_search(ChannelFamily('BEC', (0.0, 0.3)), REGULAR_36, grid=COARSE)
        assert succeeds.degenerate == 'succeeds_everywhere'
        assert succeeds.threshold == 0.3

    def test_result_document(self):
        result = threshold_search(ChannelFamily('BEC', (0.0, 0.3)), REGULAR_36, grid=COARSE)
        doc = result.to_dict()
        assert doc['grid'] == {'grid_spacing': 0.125, 'support_bound': 32.0}
        assert doc['ensemble'] == {'l': 3, 'r': 6}
        assert doc['schema_version'] == 1


class TestDistanceBounds(TestCase):

    def test_gap_bound(self):
        assert_allclose(symsat_gap_bound(10, 100.0, 3, 6, 0.0), 1.75e-15, rtol=1e-2)
        assert_allclose(symsat_gap_bound(10, 100.0, 3, 6, 0.0),
                        2 * math.sqrt(2) * math.exp((-100 + 10 * math.log(20)) / 2), rtol=1e-14)
        assert symsat_gap_bound(11, 100.0, 3, 6, 0.0) > symsat_gap_bound(10, 100.0, 3, 6, 0.0)
        assert symsat_gap_bound(10, 110.0, 3, 6, 0.0) < symsat_gap_bound(10, 100.0, 3, 6, 0.0)
        with self.assertRaises(ValidationError):
            symsat_gap_bound(0, 10.0, 3, 6, 0.0)

    def test_alpha(self):
        assert alpha_ell(0.0, 0.0, 3, 6) == 20
        assert alpha_ell(1.0, 1.0, 3, 6) == 0
        expected = 4 * sum(0.8 ** (5 - j) * 0.6 ** (j - 1) for j in range(1, 6))
        assert_allclose(alpha_ell(0.6, 0.8, 3, 6), expected, rtol=1e-14)
        assert_allclose(expected, 4.9984, rtol=1e-12)
        with self.assertRaises(ValidationError):
            alpha_ell(1.2, 0.5, 3, 6)

    def test_distance_bound(self):
        assert_allclose(symsat_distance_bound([], 4.0), 1 - math.tanh(2.0))
        assert_allclose(symsat_distance_bound([2.0, 3.0], 4.0), (1 - math.tanh(2.0)) * (1 + 3 + 6))

    def test_symsat_tracks_bp(self):
        '''
        B of the symmetric-saturation iterates stays under the bound built
        from B of the BP iterates, at 90% of the measured BSC threshold.
        '''
        bsc = get_family('BSC')
        threshold = threshold_search(bsc, REGULAR_36, grid=WIDE, tol=5e-3, max_iters=500).threshold
        assert 0.07 < threshold < 0.09
        c = make_channel(bsc, 0.9 * threshold, WIDE)
        for K in (10.0, 20.0, 40.0):
            report = compare_bp_symsat(c, REGULAR_36, K, 15)
            assert len(report.rows) == 15
            assert report.violations() == []
            frame = report.to_frame()
            assert np.all(np.isfinite(frame['wasserstein']))

    def test_symsat_floor(self):
        c = make_channel(get_family('BSC'), 0.05, WIDE)
        K = 10.0
        final = list(islice(iterate(c, REGULAR_36, 'symsat', K), 25))[-1].var_out
        assert final.rail == K
        assert bhattacharyya(final) >= final.rail_mass * math.exp(-K / 2)
