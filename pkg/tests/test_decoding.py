"""Decoding contracts: greedy/beam agreement, determinism, scoring
consistency, and sampler behaviour."""

import numpy as np
import pytest

from seqrisk import decoding as dec
from seqrisk import seqmodel as sm
from seqrisk.errors import ContractError


def make_store(seed=0, vocab=20):
    cfg = sm.ModelConfig(vocab_size=vocab, embed_dim=16, num_heads=2,
                         enc_layers=1, dec_layers=1, ffn_dim=24,
                         dropout_rate=0.0, max_seq_len=12)
    return sm.ParameterStore.init(cfg, seed)


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ContractError):
            dec.DecodeConfig(beam_size=0)
        with pytest.raises(ContractError):
            dec.DecodeConfig(max_len=1)
        with pytest.raises(ContractError):
            dec.DecodeConfig(temperature=0.0)

    def test_length_penalty(self):
        assert dec.length_penalty(1, 1.0) == 1.0
        assert dec.length_penalty(7, 1.0) == 2.0
        assert dec.length_penalty(7, 0.0) == 1.0
        assert dec.length_penalty(7, 2.0) == 4.0


class TestBeamSearch:
    def test_beam_one_equals_greedy(self):
        # two separately written loops must produce the same path
        for seed in range(6):
            store = make_store(seed)
            src = [4 + seed, 5, 6]
            beam = dec.beam_search(store, src, dec.DecodeConfig(beam_size=1))[0]
            greedy = dec.greedy_decode(store, src)
            assert beam.tokens == greedy.tokens, f"seed {seed}"
            assert beam.total_log_prob == pytest.approx(
                greedy.total_log_prob, abs=1e-5)

    def test_results_sorted_by_normalized_score(self):
        store = make_store(1)
        hyps = dec.beam_search(store, [4, 5], dec.DecodeConfig(beam_size=5))
        scores = [h.normalized_score for h in hyps]
        assert scores == sorted(scores, reverse=True)
        assert 1 <= len(hyps) <= 5

    def test_deterministic(self):
        store = make_store(2)
        a = dec.beam_search(store, [4, 5, 6], dec.DecodeConfig(beam_size=4))
        b = dec.beam_search(store, [4, 5, 6], dec.DecodeConfig(beam_size=4))
        assert [h.tokens for h in a] == [h.tokens for h in b]
        assert [h.total_log_prob for h in a] == [h.total_log_prob for h in b]

    def test_respects_length_cap(self):
        store = make_store(3)
        hyps = dec.beam_search(store, [4], dec.DecodeConfig(beam_size=3, max_len=5))
        for h in hyps:
            assert len(h.tokens) <= 5
            assert h.tokens[0] == sm.BOS_ID

    def test_never_proposes_pad_or_bos(self):
        for seed in range(4):
            store = make_store(seed + 10)
            for h in dec.beam_search(store, [4, 5], dec.DecodeConfig(beam_size=4)):
                body = h.tokens[1:]
                assert sm.PAD_ID not in body and sm.BOS_ID not in body

    def test_total_matches_teacher_forced_score(self):
        # the summed step scores must equal rescoring the final sequence
        store = make_store(5)
        for h in dec.beam_search(store, [4, 5, 6], dec.DecodeConfig(beam_size=3)):
            total, per_token = dec.score_sequence(store, [4, 5, 6], h.tokens)
            assert total == pytest.approx(h.total_log_prob, abs=1e-4)
            assert len(per_token) == len(h.tokens) - 1

    def test_normalization_uses_length_penalty(self):
        store = make_store(6)
        for h in dec.beam_search(store, [4, 5],
                                 dec.DecodeConfig(beam_size=3, length_norm_alpha=1.0)):
            lp = dec.length_penalty(len(h.tokens) - 1, 1.0)
            assert h.normalized_score == pytest.approx(h.total_log_prob / lp, rel=1e-6)

    def test_hypothesis_generated_strips_frame(self):
        h = dec.Hypothesis([sm.BOS_ID, 7, 8, sm.EOS_ID], -1.0, -0.5, True)
        assert h.generated() == [7, 8]
        h2 = dec.Hypothesis([sm.BOS_ID, 7, 8], -1.0, -0.5, False)
        assert h2.generated() == [7, 8]


def table_step_fn(table, vocab=6):
    """Next-token scorer from a dict of prefix -> {id: prob}; zero-mass ids
    get a large negative log-probability, like a masked softmax row."""
    def step(prefixes):
        rows = []
        for p in prefixes:
            dist = table[tuple(p)]
            rows.append([np.log(dist[i]) if dist.get(i, 0.0) > 0 else -1e9
                         for i in range(vocab)])
        return np.asarray(rows)
    return step


class TestBeamOverFixedTable:
    # explicit conditionals: ids 4/5 are words, 2 is EOS
    TABLE = {
        (1,): {4: 0.5, 5: 0.4, 2: 0.1},
        (1, 4): {2: 0.9, 4: 0.05, 5: 0.05},
        (1, 5): {2: 0.12, 4: 0.6, 5: 0.28},
    }

    def test_two_step_search_is_hand_checkable(self):
        hyps = dec.beam_search_steps(table_step_fn(self.TABLE), max_len=3,
                                     config=dec.DecodeConfig(beam_size=2))
        assert [h.tokens for h in hyps] == [[1, 4, 2], [1, 5, 4]]
        assert hyps[0].total_log_prob == pytest.approx(np.log(0.5 * 0.9))
        assert hyps[0].finished and not hyps[1].finished
        lp = dec.length_penalty(2, 1.0)
        assert hyps[0].normalized_score == pytest.approx(np.log(0.45) / lp)

    def test_beam_one_takes_argmax_path(self):
        hyps = dec.beam_search_steps(table_step_fn(self.TABLE), max_len=3,
                                     config=dec.DecodeConfig(beam_size=1))
        assert [h.tokens for h in hyps] == [[1, 4, 2]]

    def test_short_cap_closes_open_beams(self):
        hyps = dec.beam_search_steps(table_step_fn(self.TABLE), max_len=2,
                                     config=dec.DecodeConfig(beam_size=2))
        assert [h.tokens for h in hyps] == [[1, 4], [1, 5]]
        assert not any(h.finished for h in hyps)

    def test_rejects_degenerate_cap(self):
        with pytest.raises(ContractError):
            dec.beam_search_steps(table_step_fn(self.TABLE), max_len=1)


class TestSampling:
    def test_deterministic_given_rng(self):
        store = make_store(7)
        a = dec.sample_decode(store, [4, 5], np.random.default_rng(3))
        b = dec.sample_decode(store, [4, 5], np.random.default_rng(3))
        assert a == b

    def test_varies_across_draws(self):
        store = make_store(7)
        rng = np.random.default_rng(3)
        draws = {tuple(dec.sample_decode(store, [4, 5], rng)) for _ in range(8)}
        assert len(draws) > 1

    def test_shape_and_termination(self):
        store = make_store(8)
        groups = dec.sample_decode_batch(
            store, np.array([[4, 5], [6, 7]]), 3, np.random.default_rng(0))
        assert len(groups) == 2 and all(len(g) == 3 for g in groups)
        for group in groups:
            for seq in group:
                assert seq[0] == sm.BOS_ID
                assert len(seq) >= 2
                assert len(seq) <= store.config.max_seq_len
                body = seq[1:]
                assert sm.PAD_ID not in body and sm.BOS_ID not in body
                assert sm.EOS_ID not in body[:-1]  # EOS only terminal

    def test_low_temperature_approaches_greedy(self):
        store = make_store(9)
        greedy = dec.greedy_decode(store, [4, 5, 6])
        sampled = dec.sample_decode(store, [4, 5, 6],
                                    np.random.default_rng(0), temperature=0.01)
        assert sampled == greedy.tokens

    def test_rejects_bad_temperature(self):
        store = make_store(10)
        with pytest.raises(ContractError):
            dec.sample_decode_batch(store, np.array([[4]]), 1,
                                    np.random.default_rng(0), temperature=-1.0)


class TestScoreSequence:
    def test_matches_stepwise_scores(self):
        store = make_store(11)
        src = [4, 5, 6]
        tgt = [sm.BOS_ID, 7, 8, 9, sm.EOS_ID]
        total, per_token = dec.score_sequence(store, src, tgt)
        memory = sm.encode(store, src)
        for i in range(1, len(tgt)):
            row = sm.decode_step(store, memory, tgt[:i], src)
            assert per_token[i - 1] == pytest.approx(float(row.data[tgt[i]]), abs=1e-5)
        assert total == pytest.approx(sum(per_token), abs=1e-6)

    def test_requires_bos_and_body(self):
        store = make_store(12)
        with pytest.raises(ContractError):
            dec.score_sequence(store, [4], [sm.BOS_ID])
