#!/usr/bin/env python
'''
tests/test_mc_decoder.py
'''
import math
from unittest import TestCase

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from satde.common import ValidationError
from satde.channels import ChannelSpec, get_family, make_channel, sample_llrs
from satde.de_engine import EnsembleSpec, de_run
from satde.density import symmetric_error_fraction
from satde.mc_decoder import (DecoderConfig, build_regular_graph, decode, simulate_ber, compare_sat_vs_symsat,
                              wilson_interval, channel_rng, flip_rng)
from tests.resources import COARSE, scalar_bec_recursion

REGULAR_36 = EnsembleSpec.regular(3, 6)


class TestTannerGraph(TestCase):

    def test_small_graph(self):
        graph = build_regular_graph(6, 2, 3, seed=1)
        assert graph.n_checks == 4
        assert graph.n_edges == 12
        assert len(graph.edges) == 12
        assert_array_equal(graph.variable_degrees(), np.full(6, 2))
        assert_array_equal(graph.check_degrees(), np.full(4, 3))

    def test_edge_tables_agree(self):
        graph = build_regular_graph(60, 3, 6, seed=4)
        for c in range(graph.n_checks):
            assert np.all(graph.edge_check[graph.check_edges[c]] == c)
        for v in range(graph.n_vars):
            assert np.all(graph.edge_var[graph.var_edges[v]] == v)

    def test_deterministic(self):
        a = build_regular_graph(120, 3, 6, seed=11)
        b = build_regular_graph(120, 3, 6, seed=11)
        assert_array_equal(a.edge_check, b.edge_check)
        assert_array_equal(a.check_edges, b.check_edges)

    def test_indivisible(self):
        with self.assertRaises(ValidationError):
            build_regular_graph(7, 2, 3)

    def test_neighborhood(self):
        graph = build_regular_graph(600, 3, 6, seed=2)
        assert graph.neighborhood(0, 0).tolist() == [0]
        assert 1 < graph.neighborhood(0, 1).size <= 16


class TestDecoderConfig(TestCase):

    def test_invalid(self):
        with self.assertRaises(ValidationError):
            DecoderConfig(0.0)
        with self.assertRaises(ValidationError):
            DecoderConfig(10.0, rule='layered')
        with self.assertRaises(ValidationError):
            DecoderConfig(10.0, max_iters=0)

    def test_streams_are_independent(self):
        a = channel_rng(7, 0).random(5)
        assert_array_equal(a, channel_rng(7, 0).random(5))
        assert not np.array_equal(a, channel_rng(7, 1).random(5))
        assert not np.array_equal(flip_rng(7, 0, 1).random(5), flip_rng(7, 0, 2).random(5))


class TestDecode(TestCase):

    def test_perfect_channel(self):
        graph = build_regular_graph(120, 3, 6, seed=0)
        result = decode(graph, np.full(120, np.inf), DecoderConfig(10.0, max_iters=5))
        assert result.message_errors == [0.0] * 5
        assert result.bit_errors == [0.0] * 5
        assert not result.hard_decisions.any()

    def test_first_iteration_is_clipped_channel(self):
        graph = build_regular_graph(120, 3, 6, seed=0)
        llrs = sample_llrs('BIAWGN', 0.8, 120, np.random.default_rng(5))
        result = decode(graph, llrs, DecoderConfig(4.0, max_iters=2), record=True)
        assert_array_equal(result.messages[0], np.clip(llrs, -4.0, 4.0)[graph.edge_var])
        assert np.all(np.abs(result.messages[1]) <= 4.0)

    def test_odd_in_channel_llrs(self):
        '''
        Negating every channel LLR negates every message and complements
        every decision, with and without flipping.
        '''
        graph = build_regular_graph(120, 3, 6, seed=3)
        llrs = sample_llrs('BIAWGN', 0.9, 120, np.random.default_rng(8))
        for symmetrize in (False, True):
            cfg = DecoderConfig(6.0, max_iters=10, symmetrize=symmetrize, rng_seed=9)
            a = decode(graph, llrs, cfg, record=True)
            b = decode(graph, -llrs, cfg, record=True)
            for ma, mb in zip(a.messages, b.messages):
                assert_array_equal(ma, -mb)
            assert_array_equal(a.hard_decisions, 1 - b.hard_decisions)
            assert a.flips == b.flips

    def test_bad_llrs(self):
        graph = build_regular_graph(6, 2, 3, seed=1)
        with self.assertRaises(ValidationError):
            decode(graph, np.zeros(5), DecoderConfig(4.0))
        with self.assertRaises(ValidationError):
            decode(graph, np.full(6, np.nan), DecoderConfig(4.0))


class TestSimulation(TestCase):

    def test_bec_matches_scalar_recursion(self):
        cfg = DecoderConfig(25.0, max_iters=10, rng_seed=7)
        result = simulate_ber(REGULAR_36, ChannelSpec('BEC', 0.40), cfg, 10000, 20)
        expected = np.array(scalar_bec_recursion(0.40, 3, 6, 10))
        assert_allclose(result.erasure_rate[0], 0.40, atol=0.01)
        assert np.all(np.abs(result.msg_err_rate - expected / 2) <= 3 * result.std_err + 0.005)
        assert_allclose(result.msg_err_rate, result.erasure_rate / 2)

    def test_bsc_matches_saturated_de(self):
        cfg = DecoderConfig(20.0, max_iters=10, rng_seed=7)
        result = simulate_ber(REGULAR_36, ChannelSpec('BSC', 0.04), cfg, 10000, 20)
        trace = de_run(make_channel(get_family('BSC'), 0.04, COARSE), REGULAR_36, 'sat', 20.0, max_iters=10)
        expected = np.zeros(10)
        expected[:trace.iterations] = trace.E
        assert np.all(np.abs(result.msg_err_rate - expected) <= 3 * result.std_err + 0.005)
        frame = result.to_frame()
        assert list(frame['iter']) == list(range(1, 11))
        assert np.all(frame['ci_lo'] <= frame['msg_err_rate'])
        assert np.all(frame['msg_err_rate'] <= frame['ci_hi'])

    def test_reproducible(self):
        cfg = DecoderConfig(10.0, max_iters=4, symmetrize=True, rng_seed=3)
        a = simulate_ber(REGULAR_36, ChannelSpec('BSC', 0.05), cfg, 600, 3)
        b = simulate_ber(REGULAR_36, ChannelSpec('BSC', 0.05), cfg, 600, 3)
        assert_array_equal(a.msg_err_rate, b.msg_err_rate)
        assert a.flips == b.flips

    def test_invalid(self):
        irregular = EnsembleSpec((0.0, 0.5, 0.5), (0, 0, 0, 0, 0, 1.0))
        with self.assertRaises(ValidationError):
            simulate_ber(irregular, ChannelSpec('BSC', 0.05), DecoderConfig(10.0), 600, 1)
        with self.assertRaises(ValidationError):
            simulate_ber(REGULAR_36, ChannelSpec('BSC', 0.05), DecoderConfig(10.0), 600, 0)


class TestSymmetrization(TestCase):

    def test_high_level_is_unchanged(self):
        cfg = DecoderConfig(30.0, max_iters=10, rng_seed=5)
        report = compare_sat_vs_symsat(REGULAR_36, ChannelSpec('BSC', 0.04), cfg, 2000, 4)
        assert report.flips == 0
        for row in report.rows:
            assert row['sat_rate'] == row['symsat_rate']
        assert report.tree_size == (10 ** 10 - 1) // 9

    def test_low_level_costs_errors(self):
        cfg = DecoderConfig(3.0, max_iters=10, rng_seed=5)
        report = compare_sat_vs_symsat(REGULAR_36, ChannelSpec('BSC', 0.04), cfg, 6000, 4)
        assert report.flips > 0
        # flipped channel messages carry the symmetric wrong-sign share at K
        assert_allclose(report.rows[0]['symsat_rate'], symmetric_error_fraction(3.0), atol=0.005)
        assert report.rows[-1]['symsat_rate'] > report.rows[-1]['sat_rate']
        assert report.ratio_ceiling == math.inf
        assert report.to_dict()['schema_version'] == 1


class TestWilson(TestCase):

    def test_interval(self):
        lo, hi = wilson_interval(0, 100)
        assert_allclose(lo, 0.0, atol=1e-12)
        assert_allclose(hi, 0.03699, atol=1e-5)
        lo, hi = wilson_interval(50, 100)
        assert_allclose(lo + hi, 1.0, rtol=1e-12)
        assert lo < 0.5 < hi
        with self.assertRaises(ValidationError):
            wilson_interval(1, 0)
