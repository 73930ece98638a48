import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixcaps.capsule import route
from mixcaps.em import (
    MMState,
    em_posterior,
    expert_likelihoods,
    mm_sequence,
    mm_update,
    responsibilities,
    routing_as_moe_report,
)
from mixcaps.errors import ContractError, DegenerateLikelihoodError

from oracles import product_form


def simplex(rng, m):
    return rng.dirichlet(np.ones(m))


class TestPosterior:
    def test_uniform(self):
        np.testing.assert_allclose(em_posterior(np.full(4, 0.25), np.full(4, 0.3)), np.full(4, 0.25), atol=1e-15)

    def test_degenerate_prior(self):
        np.testing.assert_array_equal(em_posterior([1.0, 0.0], [0.2, 0.9]), [1.0, 0.0])

    def test_hand_normalisation(self):
        g, L = np.array([0.2, 0.3, 0.5]), np.array([0.6, 0.1, 0.4])
        joint = [0.2 * 0.6, 0.3 * 0.1, 0.5 * 0.4]
        expected = [x / sum(joint) for x in joint]
        assert np.abs(em_posterior(g, L) - expected).max() < 1e-15

    def test_all_zero_likelihood(self):
        with pytest.raises(DegenerateLikelihoodError):
            em_posterior([0.5, 0.5], [0.0, 0.0])

    def test_disjoint_support(self):
        with pytest.raises(DegenerateLikelihoodError):
            em_posterior([1.0, 0.0], [0.0, 0.7])

    def test_prior_must_be_normalised(self):
        with pytest.raises(ContractError):
            em_posterior([0.5, 0.6], [0.1, 0.1])

    def test_negative_likelihood(self):
        with pytest.raises(ContractError):
            em_posterior([0.5, 0.5], [0.1, -0.1])

    @settings(max_examples=300, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2 ** 32 - 1), st.floats(1e-6, 1e6))
    def test_simplex_and_scale_invariance(self, m, seed, t):
        rng = np.random.default_rng(seed)
        g, L = simplex(rng, m), rng.uniform(0.01, 1, size=m)
        p = em_posterior(g, L)
        assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12
        assert np.abs(em_posterior(g, L * t) - p).max() < 1e-12


class TestMM:
    def test_fixed_point(self):
        s = mm_update(MMState.uniform(3), [0.4, 0.4, 0.4])
        np.testing.assert_allclose(s.weights, np.full(3, 1 / 3), atol=1e-15)
        assert s.step == 1

    def test_monotone_under_constant_evidence(self):
        states = mm_sequence(MMState.uniform(2), [[0.9, 0.1]] * 15)
        w = [s.weights[0] for s in states]
        assert all(b > a for a, b in zip(w, w[1:]))
        assert w[-1] > 0.999

    def test_five_step_product_form(self, rng):
        prior = simplex(rng, 3)
        seq = rng.uniform(0.05, 1, size=(5, 3))
        w = mm_sequence(MMState(prior), seq)[-1].weights
        assert np.abs(w - product_form(prior, seq)).max() < 1e-12

    def test_degenerate(self):
        with pytest.raises(DegenerateLikelihoodError):
            mm_update(MMState.uniform(2), [0.0, 0.0])

    def test_invalid_state(self):
        with pytest.raises(ContractError):
            MMState(np.array([0.7, 0.7]))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 20), st.integers(0, 2 ** 32 - 1))
    def test_sequence_equals_product(self, m, k, seed):
        rng = np.random.default_rng(seed)
        prior = simplex(rng, m)
        seq = rng.uniform(0.01, 1, size=(k, m))
        w = mm_sequence(MMState(prior), seq)[-1].weights
        assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12
        assert np.abs(w - product_form(prior, seq)).max() < 1e-10


class TestResponsibilities:
    def test_class_matched_and_literal(self):
        outs = np.array([[[0.8, 0.1], [0.2, 0.7]],
                         [[0.3, 0.6], [0.5, 0.4]]])  # (M=2, N=2, K=2)
        labels = [0, 1]
        np.testing.assert_array_equal(expert_likelihoods(outs, labels), [[0.8, 0.3], [0.7, 0.4]])
        np.testing.assert_array_equal(expert_likelihoods(outs, labels, literal=True), [[0.1, 0.6], [0.7, 0.4]])

    def test_records(self):
        outs = np.array([[[0.8, 0.1]], [[0.3, 0.6]]])
        recs = responsibilities(np.array([[0.5, 0.5]]), outs, [0])
        assert recs[0].label == 0
        np.testing.assert_allclose(recs[0].posterior, [0.8 / 1.1, 0.3 / 1.1])
        json.dumps(recs[0].to_dict())


class TestRoutingReport:
    def test_any_run_passes(self, rng):
        for _ in range(20):
            u = rng.normal(size=(2, rng.integers(1, 9), rng.integers(1, 9), 4)) * 2
            rep = routing_as_moe_report(route(u, 3))
            assert rep.ok and rep.max_normalisation_error < 1e-9 and rep.max_replay_error < 1e-9

    def test_one_round_uniform(self, rng):
        rep = routing_as_moe_report(route(rng.normal(size=(5, 4, 3)), 1))
        assert len(rep.records) == 1
        np.testing.assert_array_equal(rep.records[0]["c"], np.full((5, 4), 0.25))

    def test_two_by_two_replay(self, rng):
        u = rng.normal(size=(2, 2, 3))
        state = route(u, 3)
        # rebuild every round from the logged agreements alone
        b = np.zeros((2, 2))
        for r in range(3):
            c = np.exp(b) / np.exp(b).sum(axis=1, keepdims=True)
            assert np.abs(c - state.history_c[r]).max() < 1e-15
            if r < 2:
                b = b + state.history_a[r]
        assert routing_as_moe_report(state).ok

    def test_tampered_trace_flagged(self, rng):
        state = route(rng.normal(size=(1, 3, 4, 3)), 3)
        state.history_c[2, 0, 1] += [0.1, -0.05, 0.0, 0.0]
        rep = routing_as_moe_report(state)
        assert not rep.ok
        bad = [r for r in rep.records if r["violations"]]
        assert bad[0]["round"] == 3 and "normalisation" in bad[0]["violations"]

    def test_jsonl(self, rng):
        rep = routing_as_moe_report(route(rng.normal(size=(3, 2, 2)), 2))
        lines = rep.to_jsonl().splitlines()
        assert len(lines) == 2
        assert json.loads(lines[1])["round"] == 2
