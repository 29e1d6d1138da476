"""Decoding strategies over a trained model.

Beam search prunes on raw summed log-probabilities and ranks its finished
pool by a length-normalized score; greedy decoding is written as its own
loop rather than as beam size 1 so the two can cross-check each other in
tests.  Sampling is batched because risk training draws several candidates
per source at every step.

PAD and BOS are never proposed as continuations: PAD doubles as the batch
padding marker so emitting it mid-sequence would corrupt later rescoring,
and a second BOS has no meaning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numkit as nk
from . import seqmodel as sm
from .errors import ContractError

BANNED_CONTINUATIONS = (sm.PAD_ID, sm.BOS_ID)

# maps equal-length BOS-led prefixes to [n, vocab] next-token log-probs
StepFn = Callable[[list[list[int]]], np.ndarray]


@dataclass
class DecodeConfig:
    beam_size: int = 4
    max_len: int | None = None  # total tokens incl. BOS; None -> model max_seq_len
    length_norm_alpha: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ContractError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.max_len is not None and self.max_len < 2:
            raise ContractError(f"max_len must be >= 2, got {self.max_len}")
        if self.temperature <= 0.0:
            raise ContractError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class Hypothesis:
    """A decoded sequence: ids include the leading BOS and, when the beam
    finished naturally, a trailing EOS."""

    tokens: list[int]
    total_log_prob: float
    normalized_score: float
    finished: bool

    def generated(self) -> list[int]:
        """Ids after BOS, without the trailing EOS."""
        out = self.tokens[1:]
        if out and out[-1] == sm.EOS_ID:
            out = out[:-1]
        return out


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def _resolve_max_len(store: sm.ParameterStore, config: DecodeConfig) -> int:
    cap = store.config.max_seq_len
    if config.max_len is None:
        return cap
    return min(config.max_len, cap)


def _tiled_memory(memory: nk.Tensor, count: int) -> nk.Tensor:
    data = np.ascontiguousarray(np.broadcast_to(
        memory.data, (count,) + tuple(memory.shape)))
    return nk.Tensor(data)


def _step_log_probs(store: sm.ParameterStore, memory_one: nk.Tensor,
                    src: Sequence[int], prefixes: list[list[int]]) -> np.ndarray:
    """Next-token log-probs [len(prefixes), vocab] for equal-length prefixes."""
    b = len(prefixes)
    mem = _tiled_memory(memory_one, b)
    src_arr = np.tile(np.asarray([src], dtype=np.int64), (b, 1))
    tgt_arr = np.asarray(prefixes, dtype=np.int64)
    rows = sm.decode_batch(store, mem, src_arr, tgt_arr)
    return rows.data[:, -1, :]


def beam_search_steps(step_fn: StepFn, max_len: int,
                      config: DecodeConfig | None = None) -> list[Hypothesis]:
    """Beam search over an arbitrary next-token scorer.

    Candidates are pruned on raw totals each step.  Beams still open at the
    length cap are closed as-is.  Expansion stops early once no open beam
    could beat the best finished score even with cost-free continuations.
    Exact score ties break toward the lexicographically smaller id sequence.

    Exposed apart from the model-backed entry point so tests can drive the
    search with small hand-specified probability tables.
    """
    config = config or DecodeConfig()
    k = config.beam_size
    alpha = config.length_norm_alpha
    if max_len < 2:
        raise ContractError(f"max_len must be >= 2, got {max_len}")

    live: list[tuple[float, list[int]]] = [(0.0, [sm.BOS_ID])]
    finished: list[Hypothesis] = []

    while live:
        rows = np.asarray(step_fn([t for _, t in live]))
        candidates: list[tuple[float, list[int]]] = []
        for (total, toks), row in zip(live, rows):
            order = np.argsort(-row, kind="stable")  # ties keep lower id first
            taken = 0
            for tok_id in order:
                tok_id = int(tok_id)
                if tok_id in BANNED_CONTINUATIONS:
                    continue
                candidates.append((total + float(row[tok_id]), toks + [tok_id]))
                taken += 1
                if taken >= k:
                    break
        candidates.sort(key=lambda c: (-c[0], c[1]))
        next_live = []
        for total, toks in candidates[: k]:
            gen_len = len(toks) - 1
            if toks[-1] == sm.EOS_ID:
                finished.append(Hypothesis(
                    toks, total, total / length_penalty(gen_len, alpha), True))
            elif len(toks) >= max_len:
                finished.append(Hypothesis(
                    toks, total, total / length_penalty(gen_len, alpha), False))
            else:
                next_live.append((total, toks))
        live = next_live
        if len(finished) >= k:
            break
        if finished and live:
            best_done = max(h.normalized_score for h in finished)
            bound = max(
                max(t / length_penalty(max_len - 1, alpha),
                    t / length_penalty(len(toks) - 1, alpha))
                for t, toks in live)
            if bound <= best_done:
                break

    finished.sort(key=lambda h: (-h.normalized_score, h.tokens))
    return finished[: k]


def beam_search(store: sm.ParameterStore, src: Sequence[int],
                config: DecodeConfig | None = None) -> list[Hypothesis]:
    """Beam search under the model; finished hypotheses sorted by
    normalized score."""
    config = config or DecodeConfig()
    max_len = _resolve_max_len(store, config)
    with nk.no_grad():
        memory = sm.encode(store, src)
        return beam_search_steps(
            lambda prefixes: _step_log_probs(store, memory, src, prefixes),
            max_len, config)


def greedy_decode(store: sm.ParameterStore, src: Sequence[int],
                  max_len: int | None = None,
                  length_norm_alpha: float = 1.0) -> Hypothesis:
    """Plain argmax loop; must agree with beam search at beam size 1."""
    cap = min(max_len or store.config.max_seq_len, store.config.max_seq_len)
    with nk.no_grad():
        memory = sm.encode(store, src)
        toks = [sm.BOS_ID]
        total = 0.0
        finished = False
        while len(toks) < cap:
            row = _step_log_probs(store, memory, src, [toks])[0].copy()
            row[list(BANNED_CONTINUATIONS)] = -np.inf
            best = int(np.argmax(row))  # argmax takes the lowest id on ties
            total += float(row[best])
            toks.append(best)
            if best == sm.EOS_ID:
                finished = True
                break
    gen_len = len(toks) - 1
    return Hypothesis(toks, total, total / length_penalty(gen_len, length_norm_alpha), finished)


def sample_decode_batch(store: sm.ParameterStore, src_batch: np.ndarray,
                        n_samples: int, rng: np.random.Generator,
                        temperature: float = 1.0,
                        max_len: int | None = None) -> list[list[list[int]]]:
    """Ancestral sampling, `n_samples` sequences per source row.

    Returns, per source, a list of id sequences including BOS (and EOS when
    the sample terminated on its own).  All sequences step together in one
    batch; finished rows are frozen with PAD and truncated afterwards.
    """
    if temperature <= 0.0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    src_batch = np.asarray(src_batch, dtype=np.int64)
    bsz = src_batch.shape[0]
    rows_n = bsz * n_samples
    cap = min(max_len or store.config.max_seq_len, store.config.max_seq_len)

    with nk.no_grad():
        memory = sm.encode_batch(store, src_batch)
        mem = nk.Tensor(np.ascontiguousarray(
            np.repeat(memory.data, n_samples, axis=0)))
        src_rep = np.repeat(src_batch, n_samples, axis=0)
        seqs = np.full((rows_n, 1), sm.BOS_ID, dtype=np.int64)
        alive = np.ones(rows_n, dtype=bool)

        while seqs.shape[1] < cap and alive.any():
            out = sm.decode_batch(store, mem, src_rep, seqs)
            logits = out.data[:, -1, :] / temperature
            logits[:, list(BANNED_CONTINUATIONS)] = -np.inf
            shifted = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            cdf = np.cumsum(probs, axis=1)
            draws = 1.0 - rng.random(rows_n)  # (0, 1]: zero-mass ids stay unreachable
            next_ids = (cdf < draws[:, None]).sum(axis=1).astype(np.int64)
            next_ids = np.minimum(next_ids, store.config.vocab_size - 1)
            next_ids[~alive] = sm.PAD_ID
            seqs = np.concatenate([seqs, next_ids[:, None]], axis=1)
            alive &= next_ids != sm.EOS_ID

    out: list[list[list[int]]] = []
    for b in range(bsz):
        group = []
        for j in range(n_samples):
            row = seqs[b * n_samples + j]
            toks = [sm.BOS_ID]
            for t in row[1:]:
                t = int(t)
                if t == sm.PAD_ID:
                    break
                toks.append(t)
                if t == sm.EOS_ID:
                    break
            group.append(toks)
        out.append(group)
    return out


def sample_decode(store: sm.ParameterStore, src: Sequence[int],
                  rng: np.random.Generator, temperature: float = 1.0,
                  max_len: int | None = None) -> list[int]:
    """One sampled sequence for one source; ids include BOS (and EOS if drawn)."""
    return sample_decode_batch(
        store, np.asarray([src], dtype=np.int64), 1, rng, temperature, max_len)[0][0]


def score_sequence(store: sm.ParameterStore, src: Sequence[int],
                   tgt: Sequence[int]) -> tuple[float, list[float]]:
    """Teacher-forced log-probability of `tgt` (BOS-led, usually EOS-ended)
    under the model; returns the total and the per-token contributions for
    tgt[1:]."""
    tgt = list(tgt)
    if len(tgt) < 2:
        raise ContractError("sequence to score needs BOS plus at least one token")
    with nk.no_grad():
        rows = sm.forward_teacher_forced(store, src, tgt)
    per_token = [float(rows.data[i, tgt[i + 1]]) for i in range(len(tgt) - 1)]
    return sum(per_token), per_token
