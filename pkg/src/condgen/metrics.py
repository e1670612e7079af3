"""Automatic evaluation: corpus BLEU-1/2/3, ROUGE-L, CIDEr, Distinct-1/2, avgLen, paired t-test.

Constants follow the common caption/dialogue evaluation toolkits so numbers
are comparable: BLEU is reported x100, ROUGE-L uses beta = 1.2, CIDEr uses
n-grams up to 4 and is scaled x10 (plain CIDEr, no length penalty).
"""
from __future__ import annotations

import logging
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)

ROUGE_BETA = 1.2
CIDER_MAX_N = 4
CIDER_SCALE = 10.0

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def _check_pairs(hyps, refs):
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("empty hypothesis set")


# ---------------------------------------------------------------------- BLEU


def bleu_n(hyps: Sequence[Tokens], refs: Sequence[Tokens], n: int, *, sentence_average: bool = False) -> float:
    """Corpus BLEU-n x100 with clipped counts and brevity penalty, unsmoothed."""
    _check_pairs(hyps, refs)
    if n < 1:
        raise ValueError("n must be >= 1")
    if sentence_average:
        return float(np.mean([sentence_bleu(h, r, n, smooth=False) for h, r in zip(hyps, refs)]))
    matches = [0] * n
    totals = [0] * n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += len(r)
        for k in range(1, n + 1):
            hc, rc = ngrams(h, k), ngrams(r, k)
            matches[k - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[k - 1] += max(len(h) - k + 1, 0)
    return 100.0 * _combine(matches, totals, hyp_len, ref_len)


def _combine(matches, totals, hyp_len, ref_len, smooth=False) -> float:
    logs = []
    for k, (m, t) in enumerate(zip(matches, totals)):
        if smooth and k > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        logs.append(math.log(m / t))
    if hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(sum(logs) / len(logs))


def sentence_bleu(hyp: Tokens, ref: Tokens, n: int, smooth: bool = True) -> float:
    """Sentence BLEU-n x100; add-one smoothing on orders >= 2 when ``smooth``."""
    matches, totals = [], []
    for k in range(1, n + 1):
        hc, rc = ngrams(hyp, k), ngrams(ref, k)
        matches.append(sum(min(c, rc[g]) for g, c in hc.items()))
        totals.append(max(len(hyp) - k + 1, 0))
    return 100.0 * _combine(matches, totals, len(hyp), len(ref), smooth)


# ------------------------------------------------------------------- ROUGE-L


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(hyp: Tokens, ref: Tokens, beta: float = ROUGE_BETA) -> float:
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return (1 + beta ** 2) * r * p / (r + beta ** 2 * p)


def rouge_l(hyps: Sequence[Tokens], refs: Sequence[Tokens], beta: float = ROUGE_BETA) -> float:
    _check_pairs(hyps, refs)
    return float(np.mean([rouge_l_sentence(h, r, beta) for h, r in zip(hyps, refs)]))


# --------------------------------------------------------------------- CIDEr


def _cider_vectors(tokens: Tokens, df: Counter, log_n: float):
    vecs, norms = [], []
    for n in range(1, CIDER_MAX_N + 1):
        vec = {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in ngrams(tokens, n).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider_sentences(hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> list[float]:
    """Per-pair CIDEr; document frequencies come from the reference corpus."""
    _check_pairs(hyps, refs)
    if len(refs) < 2:
        raise ValueError("CIDEr needs at least 2 pairs: idf is estimated from the reference corpus")
    df: Counter = Counter()
    for r in refs:
        for n in range(1, CIDER_MAX_N + 1):
            df.update(ngrams(r, n).keys())
    log_n = math.log(len(refs))
    scores = []
    for h, r in zip(hyps, refs):
        hv, hn = _cider_vectors(h, df, log_n)
        rv, rn = _cider_vectors(r, df, log_n)
        sims = []
        for n in range(CIDER_MAX_N):
            dot = sum(v * rv[n].get(g, 0.0) for g, v in hv[n].items())
            sims.append(dot / (hn[n] * rn[n]) if hn[n] and rn[n] else 0.0)
        scores.append(CIDER_SCALE * float(np.mean(sims)))
    return scores


def cider(hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> float:
    return float(np.mean(cider_sentences(hyps, refs)))


# ------------------------------------------------------------------ Distinct


def distinct_n(hyps: Sequence[Tokens], n: int) -> float:
    """Unique n-grams over total n-grams, pooled across all hypotheses."""
    seen: set = set()
    total = 0
    for h in hyps:
        grams = ngrams(h, n)
        seen.update(grams)
        total += sum(grams.values())
    if total == 0:
        warnings.warn(f"distinct-{n}: no {n}-grams in the hypotheses", RuntimeWarning, stacklevel=2)
        return 0.0
    return len(seen) / total


def avg_len(hyps: Sequence[Tokens]) -> float:
    return float(np.mean([len(h) for h in hyps])) if hyps else 0.0


# -------------------------------------------------------------- significance


def significance(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Paired two-sided t-test; returns ``(t, p)``.

    Identical vectors give ``(0, 1)``; a constant non-zero difference gives
    ``(+-inf, 0)``.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"score vectors differ in length: {a.shape[0]} vs {b.shape[0]}")
    if a.size < 2:
        raise ValueError("paired t-test needs at least 2 samples")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0 and mean == 0.0:
        return 0.0, 1.0
    if sd <= 1e-12 * abs(mean):  # constant difference up to float rounding
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(d.size))
    return float(t), float(2.0 * stats.t.sf(abs(t), d.size - 1))


def significance_mark(p: float | None) -> str:
    if p is None:
        return ""
    if p < 0.01:
        return "(**)"
    if p < 0.05:
        return "(*)"
    return "(/)"


# -------------------------------------------------------------------- report

METRICS = ("BLEU-1", "BLEU-2", "BLEU-3", "ROUGE-L", "CIDEr", "Dist-1", "Dist-2", "avgLen")


@dataclass
class EvalReport:
    scores: dict[str, float]
    per_sample: dict[str, list[float]] = field(default_factory=dict)
    p_values: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def render(self, name: str = "system") -> str:
        head = "Model".ljust(12) + "".join(m.rjust(14) for m in METRICS)
        cells = []
        for m in METRICS:
            v = self.scores[m]
            txt = f"{v:.1f}" if m == "avgLen" else f"{v:.3f}"
            cells.append((txt + significance_mark(self.p_values.get(m))).rjust(14))
        return head + "\n" + name.ljust(12) + "".join(cells)


def per_sample_scores(hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> dict[str, list[float]]:
    """Sentence-level scores used for significance testing."""
    out = {f"BLEU-{n}": [sentence_bleu(h, r, n) for h, r in zip(hyps, refs)] for n in (1, 2, 3)}
    out["ROUGE-L"] = [rouge_l_sentence(h, r) for h, r in zip(hyps, refs)]
    out["CIDEr"] = cider_sentences(hyps, refs) if len(refs) >= 2 else [0.0] * len(refs)
    for n in (1, 2):
        out[f"Dist-{n}"] = [len(ngrams(h, n)) / max(len(h) - n + 1, 1) for h in hyps]
    out["avgLen"] = [float(len(h)) for h in hyps]
    return out


def evaluate(hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> EvalReport:
    _check_pairs(hyps, refs)
    scores = {f"BLEU-{n}": bleu_n(hyps, refs, n) for n in (1, 2, 3)}
    scores["ROUGE-L"] = rouge_l(hyps, refs)
    scores["CIDEr"] = cider(hyps, refs) if len(refs) >= 2 else 0.0
    scores["Dist-1"] = distinct_n(hyps, 1)
    scores["Dist-2"] = distinct_n(hyps, 2)
    scores["avgLen"] = avg_len(hyps)
    return EvalReport(scores, per_sample_scores(hyps, refs))


def compare(report: EvalReport, baseline: EvalReport) -> dict[str, float]:
    """p-values of the baseline against ``report`` per metric (stored on ``baseline``)."""
    pv = {m: significance(baseline.per_sample[m], report.per_sample[m])[1] for m in METRICS}
    baseline.p_values = pv
    return pv


GATE_METRICS = ("BLEU-1", "BLEU-2", "Dist-2")


def gate_table(reports: dict[str, EvalReport], reference: str = "attention_routing",
               metrics: Sequence[str] = GATE_METRICS) -> tuple[str, dict]:
    """Variant comparison table; every other row is marked against ``reference``.

    Returns the rendered text and a machine-readable dict with scores and p-values.
    """
    if reference not in reports:
        raise ValueError(f"reference variant {reference!r} missing from reports")
    ref = reports[reference]
    width = max(len(v) for v in reports) + 2
    lines = ["Variant".ljust(width) + "".join(m.rjust(14) for m in metrics)]
    data = {}
    for name, rep in reports.items():
        pv = {} if name == reference else {m: significance(rep.per_sample[m], ref.per_sample[m])[1] for m in metrics}
        cells = [(f"{rep.scores[m]:.3f}" + significance_mark(pv.get(m))).rjust(14) for m in metrics]
        lines.append(name.ljust(width) + "".join(cells))
        data[name] = {"scores": {m: rep.scores[m] for m in metrics}, "p_values": pv}
    return "\n".join(lines) + "\n", data
