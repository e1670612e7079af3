"""Vocabulary, corpora, sequence packing, MLM masking and the mixed-batch sampler."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .model import Batch, InputEncoding, collate

log = logging.getLogger(__name__)

PAD, CLS, SEP, MASK, UNK, BOS, EOS = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "[BOS]", "[EOS]"
RESERVED = (PAD, CLS, SEP, MASK, UNK, BOS, EOS)

DIALOGUE_FRACTION = 0.75


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def tokenize(text: str) -> list[str]:
    return text.lower().split()


# ---------------------------------------------------------------- vocabulary


class Vocabulary:
    """Token <-> id bijection with the reserved tokens at ids 0..6."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    pad_id, cls_id, sep_id, mask_id, unk_id, bos_id, eos_id = range(7)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(token_streams: Iterable[Iterable[str]], min_count: int = 1) -> Vocabulary:
    """Deterministic vocabulary: tokens sorted by (-count, token), rare ones dropped."""
    counts: Counter[str] = Counter()
    for toks in token_streams:
        counts.update(toks)
    for r in RESERVED:
        counts.pop(r, None)
    if not counts:
        raise ValueError("empty corpus: no tokens to build a vocabulary from")
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept)


# ------------------------------------------------------------------- corpora


@dataclass
class DialogueSample:
    history: list[list[int]]
    condition_id: int | None
    response: list[int]


@dataclass
class TextSample:
    condition_id: int | None
    text: list[int]


class LabelMap:
    """Condition labels -> dense ids in first-seen order."""

    def __init__(self, labels: Sequence[str] = ()):
        self.labels: list[str] = []
        self.index: dict[str, int] = {}
        for lab in labels:
            self.add(lab)

    def add(self, label: str) -> int:
        if label not in self.index:
            self.index[label] = len(self.labels)
            self.labels.append(label)
        return self.index[label]

    def get(self, label: str | None) -> int | None:
        return None if label is None else self.index.get(label)

    def __len__(self):
        return len(self.labels)


def read_jsonl(path: str | Path) -> list[dict]:
    """Parse line-delimited JSON; malformed lines are skipped and logged by index."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("not an object")
            except ValueError:
                log.warning("%s: skipping malformed line %d", path, i)
                continue
            rec["_line"] = i
            records.append(rec)
    return records


def dialogue_tokens(rec: dict) -> tuple[list[list[str]], list[str]]:
    history = rec.get("history", [])
    if isinstance(history, str):
        history = [history]
    return [tokenize(h) for h in history], tokenize(rec.get("response", "") or "")


def corpus_tokens(dialogue_records: Iterable[dict] = (), text_records: Iterable[dict] = ()) -> Iterator[list[str]]:
    for rec in dialogue_records:
        hist, resp = dialogue_tokens(rec)
        for h in hist:
            yield h
        yield resp
    for rec in text_records:
        yield tokenize(rec.get("text", ""))


def encode_dialogues(records: Iterable[dict], vocab: Vocabulary, labels: LabelMap, *,
                     grow_labels: bool = True, require_response: bool = True) -> list[DialogueSample]:
    out = []
    for rec in records:
        hist, resp = dialogue_tokens(rec)
        hist = [h for h in hist if h]
        if not hist or (require_response and not resp):
            log.warning("skipping dialogue record at line %s: empty history or response", rec.get("_line"))
            continue
        label = rec.get("condition")
        cid = labels.add(label) if (grow_labels and label is not None) else labels.get(label)
        out.append(DialogueSample([vocab.encode(h) for h in hist], cid, vocab.encode(resp)))
    return out


def encode_texts(records: Iterable[dict], vocab: Vocabulary, labels: LabelMap, *,
                 grow_labels: bool = True) -> list[TextSample]:
    out = []
    for rec in records:
        toks = tokenize(rec.get("text", ""))
        if not toks:
            log.warning("skipping empty text record at line %s", rec.get("_line"))
            continue
        label = rec.get("condition")
        cid = labels.add(label) if (grow_labels and label is not None) else labels.get(label)
        out.append(TextSample(cid, vocab.encode(toks)))
    return out


# ------------------------------------------------------------------- packing


def dialogue_mask(n_source: int, n_target: int) -> np.ndarray:
    """Source rows see the whole source; target rows see the source and target prefix."""
    n = n_source + n_target
    m = np.full((n, n), -np.inf)
    m[:, :n_source] = 0.0
    tri = np.tril(np.ones((n_target, n_target), dtype=bool))
    m[n_source:, n_source:][tri] = 0.0
    return m


def text_mask(n: int, attn_choice: str) -> np.ndarray:
    if attn_choice == "bidirectional":
        return np.zeros((n, n))
    if attn_choice == "left_to_right":
        return np.where(np.tril(np.ones((n, n), dtype=bool)), 0.0, -np.inf)
    raise ValueError(f"unknown attention choice {attn_choice!r}")


def pack_source(history: Sequence[Sequence[int]], budget: int) -> list[int]:
    """[CLS] h1 [SEP] h2 [SEP] ... within ``budget`` tokens, dropping the oldest first."""
    hist = [list(h) for h in history]
    while len(hist) > 1 and 1 + sum(len(h) + 1 for h in hist) > budget:
        hist.pop(0)
    if hist and 1 + len(hist[0]) + 1 > budget:
        keep = max(budget - 2, 0)
        hist[0] = hist[0][len(hist[0]) - keep:] if keep else []
    src = [Vocabulary.cls_id]
    for h in hist:
        src += h + [Vocabulary.sep_id]
    return src


def _encoding(tokens, n_source, mask, condition_id) -> InputEncoding:
    n = len(tokens)
    types = np.zeros(n, dtype=np.int64)
    types[n_source:] = 1
    return InputEncoding(np.asarray(tokens), np.arange(n), types, mask, condition_id)


def pack_dialogue(sample: DialogueSample, max_length: int) -> InputEncoding | None:
    """Layout ``[CLS] h1 [SEP] ... [SEP] [BOS] response [EOS]``.

    Returns ``None`` (with a warning) when the response alone does not fit.
    """
    target = [Vocabulary.bos_id] + list(sample.response) + [Vocabulary.eos_id]
    budget = max_length - len(target)
    if budget < 2:
        log.warning("rejecting dialogue sample: response of %d tokens exceeds max_length %d",
                    len(sample.response), max_length)
        return None
    src = pack_source(sample.history, budget)
    return _encoding(src + target, len(src), dialogue_mask(len(src), len(target)), sample.condition_id)


def pack_text(sample: TextSample, attn_choice: str, max_length: int) -> InputEncoding:
    """Layout ``[BOS] text [EOS]``, all target side, no source block."""
    body = list(sample.text)[: max_length - 2]
    tokens = [Vocabulary.bos_id] + body + [Vocabulary.eos_id]
    return _encoding(tokens, 0, text_mask(len(tokens), attn_choice), sample.condition_id)


def unpack(enc: InputEncoding) -> tuple[list[list[int]], list[int]]:
    """Inverse of packing: (history utterances, response/text tokens)."""
    tok = enc.token_ids.tolist()
    n_src = int((enc.type_ids == 0).sum())
    history, cur = [], []
    for t in tok[1:n_src]:
        if t == Vocabulary.sep_id:
            history.append(cur)
            cur = []
        else:
            cur.append(t)
    target = tok[n_src:]
    return history, target[1:-1]


# ------------------------------------------------------------------- masking


@dataclass
class MaskedSample:
    encoding: InputEncoding  # token_ids already carry [MASK]
    targets: np.ndarray  # original ids at masked positions, -1 elsewhere
    kind: str  # "dialogue" or "text"

    @property
    def active(self) -> np.ndarray:
        return self.targets >= 0


def masking_candidates(enc: InputEncoding) -> np.ndarray:
    """Target-side positions except [BOS]."""
    return np.flatnonzero(enc.target_side & (enc.token_ids != Vocabulary.bos_id))


def num_to_mask(n_candidates: int, p: float) -> int:
    return min(n_candidates, max(1, round_half_up(p * n_candidates)))


def _apply(enc: InputEncoding, positions: np.ndarray, kind: str, rng, replace: str, vocab_size: int | None):
    tokens = enc.token_ids.copy()
    targets = np.full(len(tokens), -1, dtype=np.int64)
    targets[positions] = tokens[positions]
    for pos in positions:
        if replace == "mask":
            tokens[pos] = Vocabulary.mask_id
        else:  # 80/10/10
            r = rng.random()
            if r < 0.8:
                tokens[pos] = Vocabulary.mask_id
            elif r < 0.9:
                tokens[pos] = rng.integers(len(RESERVED), vocab_size)
    masked = InputEncoding(tokens, enc.position_ids, enc.type_ids, enc.attention_mask, enc.condition_id)
    return MaskedSample(masked, targets, kind)


def apply_random_masking(enc: InputEncoding, rng: np.random.Generator, p: float = 0.25, *,
                         kind: str = "dialogue", replace: str = "mask",
                         vocab_size: int | None = None) -> MaskedSample:
    """Mask ``max(1, round(p * n))`` target positions chosen uniformly without replacement."""
    cands = masking_candidates(enc)
    if cands.size == 0:
        raise ValueError("no target-side tokens to mask")
    k = num_to_mask(cands.size, p)
    positions = rng.choice(cands, size=k, replace=False)
    return _apply(enc, np.sort(positions), kind, rng, replace, vocab_size)


@dataclass
class TfIdfTable:
    """Smoothed idf over a document collection: idf = ln((1+N)/(1+df)) + 1."""

    num_docs: int
    df: dict[int, int]

    def idf(self, token: int) -> float:
        return math.log((1 + self.num_docs) / (1 + self.df.get(token, 0))) + 1.0

    def weights(self, tokens: Sequence[int]) -> np.ndarray:
        """tf(token, doc) * idf(token) for every position of one document."""
        tf = Counter(tokens)
        return np.array([tf[t] * self.idf(t) for t in tokens], dtype=np.float64)

    def to_json(self, vocab: Vocabulary | None = None) -> dict:
        name = (lambda i: vocab.tokens[i]) if vocab else str
        return {"num_docs": self.num_docs, "df": {name(k): v for k, v in sorted(self.df.items())}}

    @classmethod
    def from_json(cls, d: dict, vocab: Vocabulary | None = None) -> "TfIdfTable":
        key = (lambda t: vocab.index[t]) if vocab else int
        return cls(d["num_docs"], {key(k): int(v) for k, v in d["df"].items()})


def compute_tfidf(documents: Iterable[Sequence[int]]) -> TfIdfTable:
    df: Counter[int] = Counter()
    n = 0
    for doc in documents:
        n += 1
        df.update(set(doc))
    if n == 0:
        raise ValueError("empty corpus: cannot compute tf-idf")
    return TfIdfTable(n, dict(df))


def weighted_sample_without_replacement(weights: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Successive draws, each proportional to the remaining weights. Returns draw order."""
    w = np.asarray(weights, dtype=np.float64).copy()
    chosen = []
    for _ in range(k):
        total = w.sum()
        cdf = np.cumsum(w)
        i = int(np.searchsorted(cdf, rng.random() * total, side="right"))
        i = min(i, len(w) - 1)
        while w[i] == 0.0:  # guard against landing on a zero-weight slot at the edge
            i -= 1
        chosen.append(i)
        w[i] = 0.0
    return np.asarray(chosen, dtype=np.int64)


def apply_tfidf_masking(enc: InputEncoding, table: TfIdfTable, rng: np.random.Generator,
                        p: float = 0.25, *, kind: str = "text", replace: str = "mask",
                        vocab_size: int | None = None) -> MaskedSample:
    """Like random masking, but positions are drawn proportionally to tf-idf.

    Only text samples may be masked this way.
    """
    if kind != "text" or (enc.type_ids == 0).any():
        raise ValueError("tf-idf masking applies to text samples only")
    cands = np.flatnonzero(enc.target_side & (enc.token_ids != Vocabulary.bos_id)
                           & (enc.token_ids != Vocabulary.eos_id))
    if cands.size == 0:
        return apply_random_masking(enc, rng, p, kind=kind, replace=replace, vocab_size=vocab_size)
    doc = enc.token_ids[cands].tolist()
    weights = table.weights(doc)
    k = num_to_mask(cands.size, p)
    if not (weights > 0).any():
        log.warning("all tf-idf weights are zero; falling back to uniform masking")
        weights = np.ones_like(weights)
    picks = weighted_sample_without_replacement(weights, min(k, int((weights > 0).sum())), rng)
    return _apply(enc, np.sort(cands[picks]), kind, rng, replace, vocab_size)


# ------------------------------------------------------------------- batches


@dataclass
class MaskedBatch:
    samples: list[MaskedSample]

    @property
    def kinds(self) -> list[str]:
        return [s.kind for s in self.samples]

    def collate(self) -> tuple[Batch, np.ndarray, np.ndarray]:
        """Model batch, ``[B, n]`` targets (-1 = inactive) and active flags."""
        batch = collate([s.encoding for s in self.samples])
        targets = np.full(batch.token_ids.shape, -1, dtype=np.int64)
        for b, s in enumerate(self.samples):
            targets[b, : len(s.targets)] = s.targets
        return batch, targets, targets >= 0


class _EpochStream:
    """Endless draw: shuffled without replacement within an epoch, reshuffled after."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0

    def next(self) -> int:
        if self.pos >= self.order.size:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        i = int(self.order[self.pos])
        self.pos += 1
        return i


@dataclass
class SamplerConfig:
    batch_size: int = 32
    mask_probability: float = 0.25
    text_masking: str = "tfidf"  # or "random"
    text_bidirectional_p: float = 0.5
    max_length: int = 80
    replace: str = "mask"  # or "bert" for 80/10/10
    dialogue_fraction: float = DIALOGUE_FRACTION


class MixedBatchSampler:
    """Endless stream of masked batches mixing dialogue and text samples.

    Every batch holds exactly ``round(0.75 * batch_size)`` dialogue samples and
    the rest text samples. Dialogue is always randomly masked; text is masked
    by tf-idf (or randomly, for the no-tfidf ablation). With no text corpus
    every batch is all dialogue and ``mode`` reads ``"no_ctext"``.
    """

    def __init__(self, dialogues: Sequence[DialogueSample], texts: Sequence[TextSample],
                 config: SamplerConfig, rng: np.random.Generator, *,
                 tfidf: TfIdfTable | None = None, vocab_size: int | None = None):
        self.config = config
        self.rng = rng
        self.vocab_size = vocab_size
        self.dialogues = [e for e in (pack_dialogue(s, config.max_length) for s in dialogues) if e is not None]
        if not self.dialogues:
            raise ValueError("dialogue corpus is empty")
        self.texts = list(texts)
        self.mode = "full" if self.texts else "no_ctext"
        if self.texts and config.text_masking == "tfidf" and tfidf is None:
            tfidf = compute_tfidf(t.text for t in self.texts)
        self.tfidf = tfidf
        if self.texts:
            self.n_dialogue = round_half_up(config.dialogue_fraction * config.batch_size)
        else:
            self.n_dialogue = config.batch_size
        self.n_text = config.batch_size - self.n_dialogue
        self._d_stream = _EpochStream(len(self.dialogues), rng)
        self._t_stream = _EpochStream(len(self.texts), rng) if self.texts else None

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.dialogues) / max(self.n_dialogue, 1))

    def mask_dialogue(self, enc: InputEncoding) -> MaskedSample:
        c = self.config
        return apply_random_masking(enc, self.rng, c.mask_probability, kind="dialogue",
                                    replace=c.replace, vocab_size=self.vocab_size)

    def mask_text(self, enc: InputEncoding) -> MaskedSample:
        c = self.config
        if c.text_masking == "tfidf":
            return apply_tfidf_masking(enc, self.tfidf, self.rng, c.mask_probability, kind="text",
                                       replace=c.replace, vocab_size=self.vocab_size)
        return apply_random_masking(enc, self.rng, c.mask_probability, kind="text",
                                    replace=c.replace, vocab_size=self.vocab_size)

    def next_batch(self) -> MaskedBatch:
        c = self.config
        out = [self.mask_dialogue(self.dialogues[self._d_stream.next()]) for _ in range(self.n_dialogue)]
        for _ in range(self.n_text):
            sample = self.texts[self._t_stream.next()]
            choice = "bidirectional" if self.rng.random() < c.text_bidirectional_p else "left_to_right"
            out.append(self.mask_text(pack_text(sample, choice, c.max_length)))
        return MaskedBatch(out)

    def __iter__(self) -> Iterator[MaskedBatch]:
        while True:
            yield self.next_batch()
