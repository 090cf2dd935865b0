import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tlab.errors import ConfigError
from tlab.oracles import (
    TableScorer,
    constant_table,
    exhaustive_argmax,
    random_table,
    sequence_logprob,
    tiny_search_instance,
)
from tlab.scorer import START, ModelConfig, decode_step, init_parameters, zero_state
from tlab.search import (
    BeamConfig,
    DecoderLM,
    Hypothesis,
    ModelScorer,
    UniformLM,
    decode,
    estimate_auto_nstep,
    expansion_histogram,
    expected_nstep,
    fold_expansions,
    greedy,
    nstep_from_histogram,
    recombine,
)

BEAM_STRATEGIES = ("default", "alsd", "tsd", "nsc")


def peaked(V, T, plan, p=0.97):
    """Table whose mode at (t, prefix) is plan.get((t, prefix), blank)."""
    def fn(t, prefix):
        k = plan.get((t, prefix), 0)
        probs = np.full(V + 1, (1 - p) / V)
        probs[k] = p
        return np.log(probs)
    return TableScorer(V, T, fn)


def blank_only(V=2, T=3):
    row = np.full(V + 1, -np.inf)
    row[0] = 0.0
    return TableScorer(V, T, lambda t, prefix: row)


SPELL_21 = {(0, ()): 2, (1, (2,)): 1}


class TestBeamConfig:
    @pytest.mark.parametrize("bad", [
        {"strategy": "viterbi"}, {"beam_size": 0}, {"nbest": 6}, {"nstep": 0},
        {"prefix_alpha": 0}, {"lm_weight": -1.0}, {"max_sym_exp": 0},
    ])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            BeamConfig(**bad).validate()

    def test_param_string(self):
        assert BeamConfig(strategy="nsc", nstep=2).param_string() == "beam=5;nstep=2;auto_nstep=1;alpha=2"


class TestGreedy:
    def test_blank_only(self):
        r = greedy(blank_only(), None)
        assert r.best == () and r.best_score == 0.0

    def test_spells_constructed_sequence(self):
        r = greedy(peaked(2, 3, SPELL_21), None)
        assert r.best == (2, 1)
        assert r.joint_calls == 3 + 2
        assert r.decoder_calls == 1 + 2

    def test_ties_go_to_blank(self):
        r = greedy(constant_table(2, 2, [0.4, 0.4, 0.2]), None)
        assert r.best == ()

    @given(st.integers(0, 10_000))
    def test_call_count(self, seed):
        scorer, T = tiny_search_instance(seed, max_T=6)
        r = greedy(scorer, None)
        assert r.joint_calls == T + len(r.best)


@pytest.mark.parametrize("strategy", BEAM_STRATEGIES)
class TestAllStrategies:
    def test_blank_only(self, strategy):
        r = decode(blank_only(), None, BeamConfig(strategy=strategy))
        assert r.best == () and r.best_score == 0.0

    def test_peaked_matches_greedy_beam1(self, strategy):
        scorer = peaked(2, 3, SPELL_21)
        r = decode(scorer, None, BeamConfig(strategy=strategy, beam_size=1))
        assert r.best == greedy(scorer, None).best

    def test_upper_bound_tiny(self, strategy):
        for seed in range(20):
            scorer = random_table(2, 3, seed)
            r = decode(scorer, None, BeamConfig(strategy=strategy, beam_size=4, nbest=4))
            if r.complete:
                for y, score in r.nbest:
                    assert score <= sequence_logprob(scorer, None, y) + 1e-9

    def test_nbest_sorted_unique(self, strategy):
        scorer, _ = tiny_search_instance(3, max_T=5)
        r = decode(scorer, None, BeamConfig(strategy=strategy, beam_size=6, nbest=6))
        scores = [s for _, s in r.nbest]
        assert scores == sorted(scores, reverse=True)
        assert len({y for y, _ in r.nbest}) == len(r.nbest) <= 6

    def test_deterministic(self, strategy):
        scorer, _ = tiny_search_instance(11, max_T=5)
        cfg = BeamConfig(strategy=strategy, beam_size=3, nbest=3)
        a, b = decode(scorer, None, cfg), decode(scorer, None, cfg)
        assert a.nbest == b.nbest and a.joint_calls == b.joint_calls and a.decoder_calls == b.decoder_calls
        assert a.expansion_histogram == b.expansion_histogram

    def test_exhaustive_oracle(self, strategy):
        hits = 0
        for seed in range(20):
            scorer, T = tiny_search_instance(seed, max_T=4, max_V=2)
            best, _, _ = exhaustive_argmax(scorer, None, max_len=4)
            cfg = BeamConfig(strategy=strategy, beam_size=8, max_sym_exp=4, nstep=3, prefix_alpha=4)
            hits += decode(scorer, None, cfg).best == best
        assert hits >= 18

    def test_model_states_consistent(self, strategy):
        p = init_parameters(ModelConfig(input_dim=3, vocab_size=3, seed=4))
        x = np.random.default_rng(0).normal(size=(5, 3)) * 2
        r = decode(ModelScorer(p), x, BeamConfig(strategy=strategy, beam_size=4, nbest=4))
        for h in r.hypotheses:
            state = zero_state(p)
            _, state = decode_step(p, START, state)
            for k in h.labels:
                _, state = decode_step(p, k, state)
            assert h.dec_state.close_to(state)

    def test_lm_weight_zero_is_neutral(self, strategy):
        p = init_parameters(ModelConfig(input_dim=3, vocab_size=3, seed=2))
        x = np.random.default_rng(5).normal(size=(6, 3))
        scorer = ModelScorer(p)
        base = decode(scorer, x, BeamConfig(strategy=strategy, beam_size=4, nbest=4))
        fused = decode(scorer, x, BeamConfig(strategy=strategy, beam_size=4, nbest=4, lm_enabled=True),
                       lm=DecoderLM(p))
        assert base.nbest == fused.nbest


class TestALSD:
    def test_two_alignments_recombine(self):
        scorer = constant_table(1, 2, [0.5, 0.5])
        r = decode(scorer, None, BeamConfig(strategy="alsd", beam_size=4, nbest=2, u_max=5))
        scores = dict(r.nbest)
        # (1) has two alignments of probability 1/8 each
        assert scores[(1,)] == pytest.approx(math.log(0.25), abs=1e-12)

    def test_call_bound(self):
        for seed in range(30):
            scorer, T = tiny_search_instance(seed, max_T=6)
            cfg = BeamConfig(strategy="alsd", beam_size=3, u_max=4)
            assert decode(scorer, None, cfg).joint_calls <= (T + cfg.u_max) * cfg.beam_size

    def test_incomplete_is_flagged(self):
        # label mass so high that no beam-1 hypothesis finishes inside the u_max budget
        scorer = constant_table(1, 3, [0.01, 0.99])
        r = decode(scorer, None, BeamConfig(strategy="alsd", beam_size=1, u_max=1))
        assert not r.complete and r.nbest


class TestTSD:
    def test_single_expansion_emits_nothing(self):
        r = decode(constant_table(2, 3, [0.1, 0.6, 0.3]), None, BeamConfig(strategy="tsd", max_sym_exp=1))
        assert r.best == ()

    @given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 4))
    def test_call_bound(self, seed, m, beam):
        scorer, T = tiny_search_instance(seed, max_T=6)
        cfg = BeamConfig(strategy="tsd", beam_size=beam, max_sym_exp=m)
        assert decode(scorer, None, cfg).joint_calls <= T * m * beam

    @pytest.mark.parametrize("seed", range(15))
    def test_monotone_without_pruning(self, seed):
        scorer, _ = tiny_search_instance(seed, max_T=3, max_V=2)
        scores = [decode(scorer, None, BeamConfig(strategy="tsd", beam_size=4096, max_sym_exp=m)).best_score
                  for m in (2, 3, 4)]
        assert scores[0] <= scores[1] + 1e-12 <= scores[2] + 2e-12


class TestNSC:
    def test_two_labels_in_one_frame(self):
        scorer = peaked(2, 1, {(0, ()): 1, (0, (1,)): 2})
        one = decode(scorer, None, BeamConfig(strategy="nsc", nstep=1))
        two = decode(scorer, None, BeamConfig(strategy="nsc", nstep=2))
        best, _, _ = exhaustive_argmax(scorer, None, max_len=3)
        assert best == (1, 2) and two.best == (1, 2) and one.best != (1, 2)

    def test_blank_skip_raises_multi_label_score(self):
        scorer = constant_table(2, 2, [0.2, 0.7, 0.1])
        skip = decode(scorer, None, BeamConfig(strategy="nsc", nstep=1, auto_nstep=2, beam_size=4, nbest=4))
        plain = decode(scorer, None, BeamConfig(strategy="nsc", nstep=1, auto_nstep=1, beam_size=4, nbest=4))
        a, b = dict(skip.nbest), dict(plain.nbest)
        assert (1, 1) in a and (1, 1) in b and a[(1, 1)] > b[(1, 1)]

    @given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
    def test_call_bound(self, seed, nstep, beam, alpha):
        scorer, T = tiny_search_instance(seed, max_T=6)
        cfg = BeamConfig(strategy="nsc", beam_size=beam, nstep=nstep, prefix_alpha=min(alpha, 2))
        assert decode(scorer, None, cfg).joint_calls <= T * (nstep + 1) * beam

    def test_more_steps_can_lower_best_score(self):
        # set subtraction drops an extension of a prefix-accumulated hypothesis once
        # its target is already in the beam, so N_step is not monotone in general
        scorer, _ = tiny_search_instance(10, max_T=3, max_V=2)
        one = decode(scorer, None, BeamConfig(strategy="nsc", beam_size=4096, nstep=1))
        two = decode(scorer, None, BeamConfig(strategy="nsc", beam_size=4096, nstep=2))
        assert one.best == two.best == (2, 1)
        assert two.best_score < one.best_score


class TestRecombine:
    def test_two_copies(self):
        hs = [Hypothesis((1,), math.log(0.2)), Hypothesis((1,), math.log(0.3))]
        (out,) = recombine(hs)
        assert out.score == pytest.approx(math.log(0.5), abs=1e-15)

    def test_unique_passthrough(self):
        hs = [Hypothesis((1,), -1.0), Hypothesis((2,), -2.0)]
        assert recombine(hs) == hs

    @given(st.lists(st.tuples(st.sampled_from([(), (1,), (2,), (1, 2)]), st.floats(-20, 0)), max_size=12),
           st.randoms())
    def test_order_independent(self, items, rnd):
        hs = [Hypothesis(y, s) for y, s in items]
        shuffled = hs[:]
        rnd.shuffle(shuffled)
        a = {h.labels: h.score for h in recombine(hs)}
        b = {h.labels: h.score for h in recombine(shuffled)}
        assert a.keys() == b.keys()
        for k in a:
            assert abs(a[k] - b[k]) < 1e-12


class PeakedLM:
    def __init__(self, V, label, p=0.9):
        self.lp = np.full(V + 1, math.log((1 - p) / (V - 1)))
        self.lp[label] = math.log(p)
        self.lp[0] = -np.inf

    def start(self):
        return None, self.lp

    def step(self, state, label):
        return None, self.lp


class TestFusion:
    def test_uniform_lm_shift(self):
        scorer = random_table(3, 3, seed=4)
        w = 0.3
        base = decode(scorer, None, BeamConfig(strategy="tsd", beam_size=64, nbest=20, max_sym_exp=3))
        fused = decode(scorer, None, BeamConfig(strategy="tsd", beam_size=64, nbest=20, max_sym_exp=3,
                                                lm_enabled=True, lm_weight=w), lm=UniformLM(3))
        b, f = dict(base.nbest), dict(fused.nbest)
        for y in set(b) & set(f):
            assert f[y] == pytest.approx(b[y] + len(y) * w * math.log(1 / 3), abs=1e-12)

    def test_peaked_lm_breaks_near_tie(self):
        scorer = constant_table(2, 1, [0.38, 0.30, 0.32])
        plain = decode(scorer, None, BeamConfig(strategy="nsc", beam_size=4, nbest=4))
        assert plain.nbest[0][0] == () and plain.nbest[1][0] == (2,)
        fused = decode(scorer, None, BeamConfig(strategy="nsc", beam_size=4, nbest=4, lm_enabled=True,
                                                lm_weight=0.5), lm=PeakedLM(2, 1))
        ranks = [y for y, _ in fused.nbest]
        assert ranks.index((1,)) < ranks.index((2,))


class TestExpansions:
    def test_histogram(self):
        assert expansion_histogram([0, 0, 2], 4) == {0: 2, 1: 1, 2: 1}

    def test_fold(self):
        assert fold_expansions({0: 5, 1: 2, 3: 1}) == {1: 7, 3: 1}

    @pytest.mark.parametrize("hist,expect", [
        ({1: 0.97, 2: 0.03}, 2),
        ({1: 1.0}, 1),
        ({1: 99.5, 2: 0.5}, 1),
        ({1: 50, 2: 30, 3: 15, 4: 5}, 4),
    ])
    def test_coverage_rule(self, hist, expect):
        assert nstep_from_histogram(hist) == expect

    def test_expected_count_rule(self):
        assert expected_nstep({1: 89.62, 2: 9.52, 3: 0.86}) == 2
        assert expected_nstep({1: 1.0}) == 1

    def test_estimate_needs_calibration(self):
        with pytest.raises(ConfigError):
            estimate_auto_nstep(constant_table(2, 2, [0.5, 0.3, 0.2]), [])

    def test_estimate_on_peaked(self):
        scorer = peaked(2, 2, {(0, ()): 1, (0, (1,)): 2})
        n, hist = estimate_auto_nstep(scorer, [None])
        assert n == 2 and hist == {1: 1, 2: 1}
