#!/usr/bin/env python
'''
tests/test_stability.py
'''
import io
import sys
import json
import math
from unittest import TestCase
from unittest.mock import patch

import numpy as np
from numpy.testing import assert_allclose

from satde.common import ValidationError
from satde.channels import ChannelSpec, get_family, make_channel
from satde.de_engine import EnsembleSpec, DeIterate
from satde.density import bhattacharyya, symmetric_error_fraction, two_atom
from satde.stability import (flip_probability, no_flip_probability_bound, tree_size, support_iteration,
                             degree_two_verdict, near_stability_deg2, near_stability_deg3, stability_matrix,
                             bhattacharyya_recursion_bound,
                             scan_stability_radius, analyze, collect_iterates, tail_bounds,
                             verify_vc_inequalities, vc_violations, SaturationParams, DEG2_UNSTABLE,
                             STABLE_DEG3PLUS, INCONCLUSIVE, ESCAPES_BELOW, SAFE)
from tests.resources import COARSE, WIDE

REGULAR_36 = EnsembleSpec.regular(3, 6)
IRREGULAR = EnsembleSpec((0.0, 0.5, 0.5), (0, 0, 0, 0, 0, 1.0))
# B of BSC(0.02)
B_BSC = 2 * math.sqrt(0.02 * 0.98)


class TestFlipping(TestCase):

    def test_example(self):
        expected = math.exp(-4) / (1 + math.exp(-4)) * (1 - math.exp(-4)) / (1 - math.exp(-8))
        assert_allclose(flip_probability(8.0, 4.0), expected, rtol=1e-14)
        assert_allclose(flip_probability(8.0, 4.0), 0.017665, atol=1e-5)
        assert flip_probability(4.0, 4.0) == 0
        assert_allclose(flip_probability(math.inf, 4.0), symmetric_error_fraction(4.0))

    def test_flipped_rail_is_symmetric(self):
        '''
        Flipping a symmetric rail at z with the flip probability leaves the
        wrong-sign fraction of a symmetric rail at K.
        '''
        rng = np.random.default_rng(7)
        for K, gap in zip(rng.uniform(1.0, 20.0, 1000), rng.uniform(0.0, 20.0, 1000)):
            z = K + gap
            f = flip_probability(z, K)
            pz = symmetric_error_fraction(z)
            assert abs(pz * (1 - f) + (1 - pz) * f - symmetric_error_fraction(K)) <= 1e-12

    def test_below_level(self):
        with self.assertRaises(ValidationError):
            flip_probability(3.0, 4.0)

    def test_no_flip_bound(self):
        bound = no_flip_probability_bound(10.0, 100)
        assert_allclose(bound.loose, 1 - 100 * math.exp(-10))
        assert_allclose(bound.tight, (1 - math.exp(-10)) ** 100, rtol=1e-12)
        assert_allclose(bound.tight, 0.99546, atol=1e-5)
        assert bound.tight >= bound.loose
        assert no_flip_probability_bound(1.0, 100).loose == 0

    def test_tree_size(self):
        assert tree_size(3, 6, 1) == 1
        assert tree_size(3, 6, 2) == 11
        assert tree_size(3, 6, 3) == 111


class TestSupport(TestCase):

    def test_fixed_point_is_safe(self):
        result = support_iteration(2.0, 2.0, 3)
        assert result.verdict == SAFE
        assert_allclose(result.iterates[:3], [2.0, 2.0, 2.0])

    def test_below_fixed_point_escapes(self):
        result = support_iteration(1.5, 2.0, 3)
        assert result.verdict == ESCAPES_BELOW
        assert result.iterates == [1.0, 0.0, -2.0]

    def test_gap_doubles_for_degree_three(self):
        L, z0 = 2.0, 1.875
        result = support_iteration(z0, L, 3)
        assert result.iterates == [1.75, 1.5, 1.0, 0.0, -2.0]
        for k, z in enumerate(result.iterates):
            assert L - z == 2 ** (k + 1) * (L - z0)
        result = support_iteration(2.5, L, 3, k_max=20)
        assert result.verdict == SAFE
        for k, z in enumerate(result.iterates):
            assert L - z == 2 ** (k + 1) * (L - 2.5)

    def test_above_fixed_point(self):
        assert support_iteration(3.0, 2.0, 3).verdict == SAFE
        assert support_iteration(1.0, 3.0, 4).verdict == ESCAPES_BELOW

    def test_degree_two(self):
        with self.assertRaises(ValidationError):
            support_iteration(1.0, 1.0, 2)
        assert degree_two_verdict(IRREGULAR, 'BSC').regime == DEG2_UNSTABLE
        assert degree_two_verdict(IRREGULAR, 'BEC') is None
        assert degree_two_verdict(REGULAR_36, 'BSC') is None


class TestNearStability(TestCase):

    def test_degree_two(self):
        near = near_stability_deg2(1.0, 0.4, 2.0, 20.0, 1.0)
        assert_allclose(near.eta, 0.8)
        assert near.conclusive
        assert_allclose(near.floor_bound, math.exp(-10) / 0.2)
        assert not near_stability_deg2(1.0, 0.6, 2.0, 20.0, 1.0).conclusive

    def test_degree_three(self):
        near = near_stability_deg3(1.0, 0.2, 5.0, 20.0)
        assert_allclose(near.xi, 0.1)
        assert_allclose(near.B_var_bound, 2 * math.exp(-10))
        assert_allclose(near.B_check_bound, 10 * math.exp(-10))
        assert not near_stability_deg3(1.0, 0.2, 5.0, 4.0).conclusive

    def test_mixed_degree_three(self):
        near = near_stability_deg3(0.5, 0.2, 5.0, 20.0)
        a, b = 0.5 * 0.2 * 25, 0.5 * 0.2 * 125
        assert_allclose(a * near.xi + b * near.xi ** 2, 0.5, rtol=1e-12)

    def test_recursion_settles_at_floor(self):
        values = bhattacharyya_recursion_bound(REGULAR_36, 0.28, 40.0, 0.01, 20)
        assert np.all(np.diff(values) <= 0)
        assert_allclose(values[-1], math.exp(-20), rtol=1e-6)
        # degree-two nodes scale the floor by 1 / (1 - lambda2 B_c rho'(1))
        values = bhattacharyya_recursion_bound(IRREGULAR, 0.28, 40.0, 1e-4, 200)
        assert_allclose(values[-1], math.exp(-20) / 0.3, rtol=1e-6)


class TestStabilityMatrix(TestCase):

    def test_radius_scales_with_level(self):
        Ks = np.arange(1.0, 40.5, 0.5)
        radii, K0 = scan_stability_radius(6, [3], B_BSC, Ks)
        scaled = np.array(radii) * np.exp(Ks / 2)
        assert_allclose(scaled, scaled[0], rtol=1e-12)
        assert np.all(np.diff(radii) < 0)
        crossing = 2 * math.log(scaled[0])
        assert abs(crossing - 13.5) < 0.05
        assert K0 == Ks[Ks > crossing][0]

    def test_regimes(self):
        assert stability_matrix(40.0, 6, [3], B_BSC).regime == STABLE_DEG3PLUS
        assert stability_matrix(4.0, 6, [3], B_BSC).regime == INCONCLUSIVE
        with self.assertRaises(ValidationError):
            stability_matrix(40.0, 6, [2, 3], B_BSC)

    def test_unclipped_gaussian_channel(self):
        ens = EnsembleSpec.regular(4, 8)
        verdict = analyze(ens, ChannelSpec('BIAWGN', 0.5), 40.0, grid=COARSE)
        assert verdict.params['K_dprime'] == math.inf
        assert not verdict.params['cond_channel']
        assert verdict.spectral_radius < 1
        assert verdict.regime == INCONCLUSIVE
        clipped = analyze(ens, ChannelSpec('BIAWGN', 0.5, 10.0), 40.0, grid=COARSE)
        assert clipped.params['K_dprime'] == 10.0
        assert clipped.params['cond_channel']
        assert clipped.regime == STABLE_DEG3PLUS
        assert analyze(REGULAR_36, ChannelSpec('BIAWGN', 0.5), 40.0, grid=COARSE).regime != STABLE_DEG3PLUS

    def test_failed_precondition(self):
        params = SaturationParams(40.0, 6, K_dprime=39.0)
        assert not params.cond_channel
        verdict = stability_matrix(40.0, 6, [3], B_BSC, params)
        assert verdict.spectral_radius < 1
        assert verdict.regime == INCONCLUSIVE

    def test_saturation_params(self):
        params = SaturationParams(10.0, 6)
        assert_allclose(params.K_prime, 10 - math.log(5))
        assert_allclose(params.K_dprime, 2 * params.K_prime - 10)
        assert 10 - math.log(5) <= params.check_rail() <= 10
        assert SaturationParams(10.0, 6, rule='minsum').check_rail() == 10
        with self.assertRaises(ValidationError):
            SaturationParams(10.0, 6, rule='layered')

    def test_analyze(self):
        bsc = ChannelSpec('BSC', 0.02)
        verdict = analyze(REGULAR_36, bsc, 40.0, grid=COARSE)
        assert verdict.regime == STABLE_DEG3PLUS
        assert_allclose(verdict.asymptotic_B_bound, 2 * math.exp(-20))
        assert_allclose(verdict.constants['B_c'], B_BSC, rtol=1e-12)
        assert analyze(REGULAR_36, bsc, 4.0, grid=COARSE).regime == INCONCLUSIVE
        assert analyze(IRREGULAR, bsc, 40.0, grid=COARSE).regime == DEG2_UNSTABLE
        assert verdict.to_dict()['schema_version'] == 1


class TestInequalities(TestCase):

    def test_tail_bounds(self):
        c = make_channel(get_family('BSC'), 0.02, WIDE)
        for K in (20.0, 30.0, 40.0):
            rows = tail_bounds(collect_iterates(c, REGULAR_36, 'symsat', K, 30), REGULAR_36, K)
            assert len(rows) == 10
            assert all(row['var_ok'] and row['check_ok'] for row in rows), K

    def test_vc_inequalities_hold(self):
        c = make_channel(get_family('BSC'), 0.02, WIDE)
        K = 30.0
        iterates = collect_iterates(c, REGULAR_36, 'symsat', K, 50)
        rows = verify_vc_inequalities(iterates, SaturationParams(K, 6), REGULAR_36, bhattacharyya(c))
        assert len(rows) == 49
        assert any(row['applicable'] for row in rows)
        assert vc_violations(rows) == []

    def test_wrong_rail_excess_is_flagged(self):
        K = 10.0
        params = SaturationParams(K, 6)
        clean = two_atom(0.0, K, COARSE)
        prev = DeIterate(1, clean, clean, clean)
        cur = DeIterate(2, two_atom(0.3, params.check_rail(), COARSE), clean, clean)
        rows = verify_vc_inequalities([prev, cur], params, REGULAR_36, B_BSC, mode='sat')
        assert rows[0]['applicable']
        assert (2, 'check_wrong_rail') in vc_violations(rows)

    def test_variable_wrong_rail_excess_is_flagged(self):
        K = 10.0
        params = SaturationParams(K, 6)
        clean = two_atom(0.0, K, COARSE)
        check = two_atom(0.0, params.check_rail(), COARSE)
        prev = DeIterate(1, clean, clean, clean)
        cur = DeIterate(2, check, two_atom(0.3, K, COARSE), clean)
        rows = verify_vc_inequalities([prev, cur], params, REGULAR_36, B_BSC)
        assert rows[0]['applicable']
        assert_allclose(rows[0]['wrong_pre'], 0.3)
        violations = vc_violations(rows)
        assert (2, 'var_wrong_rail') in violations
        assert (2, 'check_wrong_rail') not in violations

    def test_forced_flips_do_not_count(self):
        K = 10.0
        params = SaturationParams(K, 6)
        clean = two_atom(0.0, K, COARSE)
        check = two_atom(0.0, params.check_rail(), COARSE)
        flipped = two_atom(5 * symmetric_error_fraction(K), K, COARSE)
        rows = verify_vc_inequalities([DeIterate(1, clean, clean, clean), DeIterate(2, check, clean, flipped)],
                                      params, REGULAR_36, B_BSC)
        assert rows[0]['wrong_pre'] == 0
        assert rows[0]['var_wrong_rail']


class TestStabilityScanScript(TestCase):

    def test_scan(self):
        from scripts import stability_scan
        argv = ['stability_scan.py', '--ensemble', '3,6', '--channel', 'BSC:0.02', '--k-min', '10', '--k-max', '20']
        with patch.object(sys, 'argv', argv), patch('sys.stdout', new_callable=io.StringIO) as out:
            assert stability_scan.main() == 0
        summary = json.loads(out.getvalue())
        assert summary['K0'] == 13.5
        assert_allclose(summary['B_c'], B_BSC, rtol=1e-12)

    def test_scan_never_stable(self):
        from scripts import stability_scan
        argv = ['stability_scan.py', '--channel', 'BSC:0.02', '--k-min', '1', '--k-max', '5']
        with patch.object(sys, 'argv', argv), patch('sys.stdout', new_callable=io.StringIO):
            assert stability_scan.main() == 4
