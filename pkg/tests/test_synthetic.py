import json

from condgen.synthetic import (SyntheticSpec, condition_accuracy, condition_vocabularies, make_corpora,
                               split_cues, text_only_coverage, text_only_words, write_corpora)


def test_default_spec_sizes():
    spec = SyntheticSpec()
    c = make_corpora(spec)
    assert len(c["dialogue_train"]) == 2000 and len(c["text"]) == 500
    vocabs = condition_vocabularies(spec)
    assert len(vocabs) == 2 and all(len(v) == 50 for v in vocabs.values())
    assert not set.intersection(*vocabs.values())


def test_responses_use_own_condition_vocabulary():
    spec = SyntheticSpec(num_dialogues=200, num_texts=50)
    vocabs = condition_vocabularies(spec)
    every = set.union(*vocabs.values())
    for rec in make_corpora(spec)["dialogue_train"]:
        words = [w for w in rec["response"].split() if w in every]
        assert words and all(w in vocabs[rec["condition"]] for w in words)
        # the history carries no condition vocabulary
        assert not any(w in every for turn in rec["history"] for w in turn.split())


def test_deterministic_in_seed(tmp_path):
    a = write_corpora(SyntheticSpec(num_dialogues=30, num_texts=10, seed=4), tmp_path / "a")
    b = write_corpora(SyntheticSpec(num_dialogues=30, num_texts=10, seed=4), tmp_path / "b")
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes()
    assert make_corpora(SyntheticSpec(seed=5))["dialogue_train"] != make_corpora(SyntheticSpec(seed=4))["dialogue_train"]
    meta = json.loads((tmp_path / "a" / "synthetic_meta.json").read_text())
    assert meta["seed"] == 4 and meta["text_only_words"] == []


def test_text_only_words_never_in_dialogue():
    spec = SyntheticSpec(text_only_fraction=0.3, num_dialogues=500, num_texts=500, num_test=50)
    dialog_cues, text_only = split_cues(spec)
    assert len(text_only) == 15 and len(dialog_cues) == 35
    held = text_only_words(spec)
    c = make_corpora(spec)
    train_words = {w for r in c["dialogue_train"] + c["dialogue_valid"] for w in r["response"].split()}
    assert not held & train_words
    text_words = {w for r in c["text"] for w in r["text"].split()}
    assert held <= text_words
    test_words = {w for r in c["dialogue_test"] for w in r["response"].split()}
    assert test_words & held


def test_condition_accuracy_and_coverage():
    spec = SyntheticSpec(vocab_per_condition=4, text_only_fraction=0.5)
    hyps = [["topic00", "is", "w0x00"], ["w1x00", "w0x01"], ["hello"]]
    pooled, per = condition_accuracy(hyps, ["cond0", "cond1", "cond0"], spec)
    assert pooled == 2 / 3 and per == [1.0, 0.5, 0.5]
    assert text_only_coverage([["w0x02"], ["w1x03", "w1x03"]], spec) == 2 / 4
    assert text_only_coverage([], SyntheticSpec()) == 0.0
