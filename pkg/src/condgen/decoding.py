"""Left-to-right mask-predict beam search with repeated-bigram blocking.

Each step packs ``[source | [BOS] prefix [MASK]]`` under the dialogue mask
and reads the distribution at the ``[MASK]`` slot.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Vocabulary, dialogue_mask, dialogue_tokens, pack_source
from .model import ConditionedTransformer, InputEncoding, collate

log = logging.getLogger(__name__)


@dataclass
class DecodeConfig:
    beam_size: int = 10
    max_new_tokens: int = 20
    length_normalization_alpha: float = 0.0
    block_repeat_bigrams: bool = True
    exclude_unk: bool = True

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass
class Hypothesis:
    tokens: list[int]  # includes the final [EOS] when one was emitted
    score: float = 0.0
    finished: bool = False
    forced: bool = False

    @property
    def response(self) -> list[int]:
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == Vocabulary.eos_id else list(self.tokens)

    def normalized(self, alpha: float) -> float:
        return self.score / (max(len(self.tokens), 1) ** alpha) if alpha else self.score


def _encode_steps(source: list[int], prefixes: Sequence[Sequence[int]], condition_id) -> list[InputEncoding]:
    encs = []
    for prefix in prefixes:
        target = [Vocabulary.bos_id, *prefix, Vocabulary.mask_id]
        toks = source + target
        n, ns = len(toks), len(source)
        types = np.r_[np.zeros(ns, dtype=np.int64), np.ones(len(target), dtype=np.int64)]
        encs.append(InputEncoding(np.asarray(toks), np.arange(n), types,
                                  dialogue_mask(ns, len(target)), condition_id))
    return encs


def fit_source(model: ConditionedTransformer, history: Sequence[Sequence[int]], prefix_len: int) -> list[int]:
    """Pack the history so that source + [BOS] prefix [MASK] fits; truncate the source only."""
    budget = model.config.max_length - prefix_len - 2
    if budget < 2:
        raise ValueError(f"prefix of {prefix_len} tokens leaves no room for a source within max_length")
    return pack_source(history, budget)


def step_logprobs(model: ConditionedTransformer, history: Sequence[Sequence[int]], condition_id,
                  prefixes: Sequence[Sequence[int]]) -> np.ndarray:
    """Log-probabilities ``[len(prefixes), V]`` for the token after each prefix.

    All prefixes must have the same length (one beam step).
    """
    source = fit_source(model, history, len(prefixes[0]))
    batch = collate(_encode_steps(source, prefixes, condition_id))
    select = batch.token_ids == Vocabulary.mask_id
    select[:, :-1] = False
    with T.no_grad():
        logits = model(batch, select=select).data
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def step_logits(model, history, condition_id, prefix: Sequence[int]) -> np.ndarray:
    """Log-distribution over the vocabulary for the next response token."""
    return step_logprobs(model, history, condition_id, [list(prefix)])[0]


def excluded_ids(vocab_size: int, exclude_unk: bool = True) -> np.ndarray:
    ids = [Vocabulary.pad_id, Vocabulary.cls_id, Vocabulary.sep_id, Vocabulary.mask_id, Vocabulary.bos_id]
    if exclude_unk:
        ids.append(Vocabulary.unk_id)
    return np.asarray([i for i in ids if i < vocab_size], dtype=np.int64)


def blocked_by_bigram(tokens: Sequence[int]) -> set[int]:
    """Tokens whose appending would repeat a bigram already in ``tokens``."""
    if not tokens:
        return set()
    last = tokens[-1]
    return {tokens[i + 1] for i in range(len(tokens) - 1) if tokens[i] == last}


def has_repeated_bigram(tokens: Sequence[int]) -> bool:
    pairs = list(zip(tokens, tokens[1:]))
    return len(pairs) != len(set(pairs))


def beam_search(model: ConditionedTransformer, history: Sequence[Sequence[int]], condition_id,
                cfg: DecodeConfig = DecodeConfig()) -> list[Hypothesis]:
    """Ranked finished hypotheses (best first).

    Live hypotheses and finished ones are kept apart: the beam holds the
    ``beam_size`` best live prefixes, and a separate pool holds the
    ``beam_size`` best finished sequences, so an early [EOS] is never pushed
    out by longer prefixes that later fall below it.
    """
    V = model.config.vocab_size
    never = excluded_ids(V, cfg.exclude_unk)
    alpha = cfg.length_normalization_alpha
    beam = [Hypothesis([])]
    done: list[Hypothesis] = []
    order = lambda c: (-c.score, c.tokens)  # noqa: E731
    for _ in range(cfg.max_new_tokens):
        if not beam:
            break
        logp = step_logprobs(model, history, condition_id, [h.tokens for h in beam])
        cands = []
        for h, lp in zip(beam, logp):
            lp = lp.copy()
            lp[never] = -np.inf
            if cfg.block_repeat_bigrams:
                blocked = blocked_by_bigram(h.tokens)
                if blocked:
                    lp[list(blocked)] = -np.inf
            if not np.isfinite(lp).any():
                done.append(Hypothesis(h.tokens + [Vocabulary.eos_id], h.score, True, True))
                continue
            k = min(cfg.beam_size, int(np.isfinite(lp).sum()))
            for t in np.argpartition(-lp, k - 1)[:k]:
                toks = h.tokens + [int(t)]
                finished = t == Vocabulary.eos_id or len(toks) >= cfg.max_new_tokens
                cands.append(Hypothesis(toks, h.score + float(lp[t]), bool(finished)))
        cands.sort(key=order)
        done = sorted(done + [c for c in cands if c.finished], key=order)[: cfg.beam_size]
        beam = [c for c in cands if not c.finished][: cfg.beam_size]
        # log-probabilities are <= 0, so no live prefix can beat a full pool of raw scores
        if alpha == 0 and beam and len(done) == cfg.beam_size and done[-1].score >= beam[0].score:
            break
    return sorted(done, key=lambda c: (-c.normalized(alpha), c.tokens))


@dataclass
class GenerationSummary:
    count: int = 0
    skipped: list[int] = field(default_factory=list)
    avg_len: float = 0.0

    def footer(self) -> str:
        return f"generated={self.count} skipped={len(self.skipped)} avgLen={self.avg_len:.3f}"


def generate_file(model: ConditionedTransformer, vocab: Vocabulary, conditions: Sequence[str],
                  test_path: str | Path, out_path: str | Path, cfg: DecodeConfig = DecodeConfig()) -> GenerationSummary:
    """Decode every dialogue record of ``test_path`` into ``out_path`` (JSONL).

    Output lines are ``{"index", "condition", "hypothesis", "score", "length"}``
    in input order; ``index`` is the input line number. Malformed lines are
    skipped and their indices logged.
    """
    label_index = {lab: i for i, lab in enumerate(conditions)}
    if not label_index:
        log.info("model has no condition table entries in use: decoding every record unconditioned")
    summary = GenerationSummary()
    lengths = []
    with open(test_path, encoding="utf-8") as src, open(out_path, "w", encoding="utf-8") as out:
        for i, line in enumerate(src):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                hist_toks, _ = dialogue_tokens(rec)
                history = [vocab.encode(h) for h in hist_toks if h]
                if not history:
                    raise ValueError("empty history")
            except (ValueError, AttributeError, TypeError):
                log.warning("%s: skipping malformed line %d", test_path, i)
                summary.skipped.append(i)
                continue
            label = rec.get("condition")
            cid = label_index.get(label) if label is not None else None
            if label is not None and cid is None and label_index:
                log.warning("line %d: unknown condition %r, decoding unconditioned", i, label)
            best = beam_search(model, history, cid, cfg)[0]
            words = vocab.decode(best.response)
            lengths.append(len(words))
            out.write(json.dumps({"index": i, "condition": label, "hypothesis": " ".join(words),
                                  "score": round(best.score, 6), "length": len(words)}) + "\n")
    summary.count = len(lengths)
    summary.avg_len = float(np.mean(lengths)) if lengths else 0.0
    return summary
