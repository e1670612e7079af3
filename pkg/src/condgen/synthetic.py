"""Synthetic conditioned corpora with disjoint per-condition response vocabularies.

A dialogue history mentions one shared topic cue; the response repeats the
cue followed by that cue's word in the condition's own vocabulary.
Histories carry no information about the condition, so a model that ignores
the condition can only guess between vocabularies. A conditioned text is a
question followed by its answer, written as one passage.

With ``text_only_fraction > 0`` the last part of the cue range is used only
by the text corpus, so the matching condition words never occur in dialogue.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

OPENERS = [
    "hello there", "hi friend", "good morning", "hey you", "nice day today",
    "long time no see", "how are you", "i was thinking",
]
QUESTIONS = ["what about {} ?", "tell me about {} .", "any thoughts on {} ?"]


@dataclass
class SyntheticSpec:
    num_conditions: int = 2
    vocab_per_condition: int = 50
    num_dialogues: int = 2000
    num_texts: int = 500
    num_test: int = 100
    num_valid: int = 100
    text_only_fraction: float = 0.0
    seed: int = 0


def condition_label(c: int) -> str:
    return f"cond{c}"


def cue_token(k: int) -> str:
    return f"topic{k:02d}"


def condition_word(c: int, k: int) -> str:
    return f"w{c}x{k:02d}"


def condition_vocabularies(spec: SyntheticSpec) -> dict[str, set[str]]:
    return {condition_label(c): {condition_word(c, k) for k in range(spec.vocab_per_condition)}
            for c in range(spec.num_conditions)}


def split_cues(spec: SyntheticSpec) -> tuple[list[int], list[int]]:
    """(cues seen in dialogue, cues seen only in texts)."""
    n = spec.vocab_per_condition
    n_text_only = int(round(spec.text_only_fraction * n))
    return list(range(n - n_text_only)), list(range(n - n_text_only, n))


def text_only_words(spec: SyntheticSpec) -> set[str]:
    _, text_only = split_cues(spec)
    return {condition_word(c, k) for c in range(spec.num_conditions) for k in text_only}


def _statement(c: int, k: int) -> str:
    return f"{cue_token(k)} is {condition_word(c, k)} ."


def _dialogue(rng: np.random.Generator, spec: SyntheticSpec, cue_pool) -> dict:
    c = int(rng.integers(spec.num_conditions))
    k = int(rng.choice(cue_pool))
    question = QUESTIONS[int(rng.integers(len(QUESTIONS)))].format(cue_token(k))
    history = [OPENERS[int(rng.integers(len(OPENERS)))], question]
    return {"history": history, "condition": condition_label(c), "response": _statement(c, k)}


def _text(rng: np.random.Generator, spec: SyntheticSpec, cue_pool, emphasis=None) -> dict:
    c = int(rng.integers(spec.num_conditions))
    pool = emphasis if (emphasis and rng.random() < 0.5) else cue_pool
    k = int(rng.choice(pool))
    question = QUESTIONS[int(rng.integers(len(QUESTIONS)))].format(cue_token(k))
    return {"condition": condition_label(c), "text": f"{question} {_statement(c, k)}"}


def make_corpora(spec: SyntheticSpec) -> dict[str, list[dict]]:
    """Train/valid/test dialogue records and text records, deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    dialog_cues, text_only = split_cues(spec)
    all_cues = dialog_cues + text_only
    train = [_dialogue(rng, spec, dialog_cues) for _ in range(spec.num_dialogues)]
    valid = [_dialogue(rng, spec, dialog_cues) for _ in range(spec.num_valid)]
    texts = [_text(rng, spec, all_cues, text_only or None) for _ in range(spec.num_texts)]
    test = [_dialogue(rng, spec, text_only or dialog_cues) for _ in range(spec.num_test)]
    return {"dialogue_train": train, "dialogue_valid": valid, "dialogue_test": test, "text": texts}


def write_corpora(spec: SyntheticSpec, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, records in make_corpora(spec).items():
        path = out_dir / f"{name}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        paths[name] = path
    meta = {**spec.__dict__, "condition_vocabularies": {k: sorted(v) for k, v in condition_vocabularies(spec).items()},
            "text_only_words": sorted(text_only_words(spec))}
    (out_dir / "synthetic_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return paths


def condition_accuracy(hypotheses: list[list[str]], conditions: list[str], spec: SyntheticSpec) -> tuple[float, list[float]]:
    """Share of condition-vocabulary tokens that belong to the requested condition.

    Returns the pooled accuracy and per-sample accuracies (samples whose
    generation contains no condition-vocabulary token score 0.5, i.e. chance).
    """
    vocabs = condition_vocabularies(spec)
    owner = {w: lab for lab, ws in vocabs.items() for w in ws}
    right = total = 0
    per = []
    for hyp, cond in zip(hypotheses, conditions):
        hits = [owner[t] == cond for t in hyp if t in owner]
        right += sum(hits)
        total += len(hits)
        per.append(float(np.mean(hits)) if hits else 0.5)
    return (right / total if total else 0.0), per


def text_only_coverage(hypotheses: list[list[str]], spec: SyntheticSpec) -> float:
    """Fraction of text-only condition words that appear somewhere in the generations."""
    words = text_only_words(spec)
    if not words:
        return 0.0
    seen = {t for h in hypotheses for t in h if t in words}
    return len(seen) / len(words)
