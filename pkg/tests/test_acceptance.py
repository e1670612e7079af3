"""Acceptance criteria, one test per criterion.

Each test prints ``PASS criterion N: ...`` or ``FAIL criterion N: ...``; the
lines are repeated in the terminal summary. The synthetic-corpus criteria
(8, 9, 11) share trained runs through module-scoped fixtures, so the whole
file takes roughly a quarter of an hour on one core.
"""
import copy
import dataclasses
import functools
import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

import condgen.data as D
from condgen.cli import main
from condgen.data import (MixedBatchSampler, SamplerConfig, TextSample, Vocabulary, compute_tfidf, pack_dialogue,
                          pack_text, apply_tfidf_masking)
from condgen.decoding import DecodeConfig, beam_search, has_repeated_bigram, step_logits
from condgen.metrics import bleu_n, cider, distinct_n, evaluate, gate_table, rouge_l, significance
from condgen.model import (ConditionTable, ConditionedTransformer, ModelConfig, attention_routing,
                           condition_bias_mask)
from condgen.synthetic import SyntheticSpec, condition_accuracy, text_only_coverage
from condgen.tensor import Tensor

from helpers import (ACCEPTANCE_LINES, fixed_masked_batch, model_gradient_errors, random_dialogue,
                     random_dialogue_encoding, random_text_encoding, sample_parameter_entries, tiny_config)
from oracles import brute_bleu, brute_cider, brute_distinct, brute_rouge_l, exhaustive_best


def _emit(n, ok, text):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@contextmanager
def criterion(n, title):
    """Run a criterion body; ``notes`` collects measured values for the report line."""
    notes = []
    try:
        yield notes
    except BaseException as e:
        _emit(n, False, f"{title} [{'; '.join(notes)}] {type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}")
        raise
    _emit(n, True, f"{title} [{'; '.join(notes)}]")


def cli(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"condgen {' '.join(map(str, argv))} exited with {code}"


def records(path):
    return [json.loads(x) for x in Path(path).read_text().splitlines()]


# ----------------------------------------------------------------- 1


def test_criterion_01_gradient_check():
    with criterion(1, "masked-LM gradient vs central differences, 50 parameters, rel err < 1e-4, < 1 min") as notes:
        t0 = time.perf_counter()
        # 2 layers, d_h 16, 2 heads, V 23, one condition-aware layer
        model = ConditionedTransformer(tiny_config(init_std=0.3), seed=0)
        assert (model.config.num_layers, model.config.hidden_size, model.config.num_heads,
                model.config.vocab_size, model.config.num_condition_layers) == (2, 16, 2, 23, 1)
        rng = np.random.default_rng(0)
        masked = fixed_masked_batch(rng, model.config, size=4)
        for s in masked.samples:  # route every sample through the condition machinery
            if s.encoding.condition_id is None:
                s.encoding.condition_id = 0
        entries = sample_parameter_entries(model, rng, 50)
        errors = model_gradient_errors(model, masked, entries, h=1e-5)
        worst = max(e[2] for e in errors)
        elapsed = time.perf_counter() - t0
        notes += [f"max rel err {worst:.2e}", f"{elapsed:.1f}s"]
        assert len(errors) == 50
        assert worst < 1e-4
        assert elapsed < 60


# ----------------------------------------------------------------- 2


def _check_dialogue_mask(enc):
    m = enc.attention_mask == 0
    src = ~enc.target_side
    tgt = enc.target_side
    n = len(enc)
    assert m[np.ix_(src, src)].all()
    assert not m[np.ix_(src, tgt)].any()
    assert m[np.ix_(tgt, src)].all()
    t_idx = np.flatnonzero(tgt)
    assert (m[np.ix_(t_idx, t_idx)] == np.tril(np.ones((len(t_idx),) * 2, dtype=bool))).all()
    assert set(np.unique(enc.attention_mask)) <= {0.0, -np.inf} and m.shape == (n, n)


def _check_text_mask(enc, choice):
    m = enc.attention_mask == 0
    assert enc.target_side.all()
    want = np.ones_like(m) if choice == "bidirectional" else np.tril(np.ones_like(m))
    assert (m == want).all()


def _perturb_after(enc, t, rng, vocab_size):
    other = copy.deepcopy(enc)
    n = len(enc)
    later = np.arange(t + 1, n)
    other.token_ids[later] = rng.integers(7, vocab_size, size=len(later))
    return other


def test_criterion_02_mask_contract():
    with criterion(2, "mask structure on 1000 packed samples; future target tokens never change current logits "
                      "on 100 model/input draws") as notes:
        rng = np.random.default_rng(2)
        kinds = {"dialogue": 0, "bidirectional": 0, "left_to_right": 0}
        for _ in range(1000):
            if rng.random() < 0.6:
                enc = pack_dialogue(random_dialogue(rng, 40, 3, max_turns=4, max_len=6), 40)
                _check_dialogue_mask(enc)
                mb = condition_bias_mask(enc.target_side)
                assert np.isinf(mb[~enc.target_side, 0]).all() and (mb[enc.target_side, 0] == 0).all()
                assert (mb[:, 1] == 0).all()
                kinds["dialogue"] += 1
            else:
                choice = "bidirectional" if rng.random() < 0.5 else "left_to_right"
                enc = random_text_encoding(rng, 40, 3, 40, choice=choice)
                _check_text_mask(enc, choice)
                kinds[choice] += 1
        notes.append("structural " + ", ".join(f"{k}={v}" for k, v in kinds.items()))

        diffs = 0
        for draw in range(100):
            model = ConditionedTransformer(tiny_config(init_std=0.3), seed=draw)
            if draw % 2 == 0:
                enc = random_dialogue_encoding(rng, allow_none=False)
            else:
                enc = random_text_encoding(rng, choice="left_to_right")
            positions = np.flatnonzero(enc.target_side)[:-1]
            t = int(rng.choice(positions))
            other = _perturb_after(enc, t, rng, model.config.vocab_size)
            if (other.token_ids != enc.token_ids).any():
                diffs += 1
            a, b = model(enc).data, model(other).data
            assert a[: t + 1].tobytes() == b[: t + 1].tobytes(), f"draw {draw}: position {t} saw the future"
        notes.append(f"causality 100 draws ({diffs} with changed future tokens), bit-identical prefixes")


# ----------------------------------------------------------------- 3


def test_criterion_03_routing_identities():
    with criterion(3, "routing identities: NONE = plain stack bitwise, zero source bias, "
                      "|b| <= |v^c|, symmetric logits give 0.5 v^c") as notes:
        rng = np.random.default_rng(3)
        worst_sym = 0.0
        for draw in range(20):
            cfg = tiny_config(init_std=0.3)
            model = ConditionedTransformer(cfg, seed=draw)
            plain = ConditionedTransformer(dataclasses.replace(cfg, num_condition_layers=0), params=model.params)
            enc = random_dialogue_encoding(rng, allow_none=False)
            enc.condition_id = None
            assert model(enc).data.tobytes() == plain(enc).data.tobytes()

            n, ns = 7, 3
            C = Tensor(rng.normal(size=(2, n, cfg.hidden_size)))
            target = np.broadcast_to(np.arange(n) >= ns, (2, n))
            mb = condition_bias_mask(target)
            table = ConditionTable.from_params(model.params)
            cond = np.array([draw % 3, (draw + 1) % 3])
            b = attention_routing(C, cond, table, mb, cfg).data
            assert (b[:, :ns] == 0.0).all()
            for row in range(2):
                bound = np.linalg.norm(table.values.data[cond[row]])
                assert (np.linalg.norm(b[row], axis=-1) <= bound).all()

            table.generic_key.data[:] = table.keys.data[cond[0]]
            b = attention_routing(Tensor(C.data[:1]), cond[:1], table, mb[:1], cfg).data[0]
            err = np.abs(b[ns:] - 0.5 * table.values.data[cond[0]]).max()
            worst_sym = max(worst_sym, float(err))
            assert err <= 1e-12
        notes.append(f"20 draws, symmetric-case max error {worst_sym:.1e}")


# ----------------------------------------------------------------- 4


def test_criterion_04_parameter_count():
    with criterion(4, "condition machinery adds exactly (2C+1)*d_h parameters") as notes:
        checked = []
        for C in (1, 5, 200):
            for d in (8, 16, 32, 64):
                base = dict(vocab_size=50, hidden_size=d, num_layers=2, num_heads=2, num_condition_layers=2)
                with_c = ConditionedTransformer(ModelConfig(num_conditions=C, **base))
                without = ConditionedTransformer(ModelConfig(num_conditions=0, **base))
                extra = with_c.num_parameters() - without.num_parameters()
                assert extra == (2 * C + 1) * d, (C, d, extra)
                assert ConditionTable.from_params(with_c.params).num_parameters() == (2 * C + 1) * d
                assert with_c.condition_parameter_count() == (2 * C + 1) * d
                assert not any("generic_value" in k for k in with_c.params)
                checked.append((C, d))
        notes.append(f"{len(checked)} (C, d_h) pairs, C in {{1, 5, 200}}, d_h in {{8, 16, 32, 64}}")


# ----------------------------------------------------------------- 5


def test_criterion_05_tfidf_law(monkeypatch):
    with criterion(5, "tf-idf masking frequencies within TV 0.02 of normalized weights over 2e4 draws; "
                      "dialogue never tf-idf masked") as notes:
        corpus = [[7, 8], [7, 9, 9], [10], [7, 11], [7, 8, 12], [13]]
        doc = [7, 8, 8, 9, 10, 11, 12, 13, 13, 13]  # 10 tokens, repeated ones carry tf > 1
        table = compute_tfidf(corpus)
        enc = pack_text(TextSample(0, doc), "bidirectional", 20)
        w = table.weights(doc)
        expected = w / w.sum()
        rng = np.random.default_rng(5)
        draws = 20000
        counts = np.zeros(len(doc))
        for _ in range(draws):
            ms = apply_tfidf_masking(enc, table, rng, 0.1)  # one position per draw
            assert ms.active.sum() == 1
            counts += ms.active[1:-1]
        tv = 0.5 * np.abs(counts / draws - expected).sum()
        notes.append(f"TV {tv:.4f}")
        assert tv < 0.02

        with pytest.raises(ValueError):
            apply_tfidf_masking(random_dialogue_encoding(rng), table, rng)
        seen = {"dialogue": 0, "text": 0}
        real = D.apply_tfidf_masking

        def spy(e, *a, **kw):
            seen["dialogue" if (e.type_ids == 0).any() else "text"] += 1
            return real(e, *a, **kw)

        monkeypatch.setattr(D, "apply_tfidf_masking", spy)
        dialogues = [random_dialogue(rng, 30, 2) for _ in range(60)]
        texts = [TextSample(int(rng.integers(2)), list(rng.integers(7, 30, size=6))) for _ in range(20)]
        sampler = MixedBatchSampler(dialogues, texts, SamplerConfig(batch_size=16), rng)
        for _ in range(200):
            sampler.next_batch()
        notes.append(f"sampler: {seen['text']} text / {seen['dialogue']} dialogue tf-idf calls")
        assert seen["dialogue"] == 0 and seen["text"] == 200 * 4


# ----------------------------------------------------------------- 6


def test_criterion_06_batch_mixing():
    with criterion(6, "1000 batches of 160 hold exactly 120 dialogue + 40 text") as notes:
        rng = np.random.default_rng(6)
        dialogues = [random_dialogue(rng, 40, 3) for _ in range(500)]
        texts = [TextSample(int(rng.integers(3)), list(rng.integers(7, 40, size=8))) for _ in range(150)]
        sampler = MixedBatchSampler(dialogues, texts, SamplerConfig(batch_size=160), rng)
        splits = set()
        for _ in range(1000):
            kinds = sampler.next_batch().kinds
            splits.add((len(kinds), kinds.count("dialogue"), kinds.count("text")))
        notes.append(f"observed splits {sorted(splits)}")
        assert splits == {(160, 120, 40)}


# ----------------------------------------------------------------- 7


def test_criterion_07_beam_oracle():
    with criterion(7, "beam 10 = exhaustive argmax (6 symbols, length 4, bigram blocking) on 50 checkpoints; "
                      "no repeated bigram") as notes:
        generatable = [Vocabulary.eos_id, 7, 8, 9, 10, 11]
        matches = 0
        emitted = 0
        for seed in range(50):
            cfg = ModelConfig(vocab_size=12, hidden_size=16, num_layers=2, num_heads=2, max_length=20,
                              num_condition_layers=1, num_conditions=2, dropout_p=0.0, init_std=0.5)
            model = ConditionedTransformer(cfg, seed=seed)
            rng = np.random.default_rng(1000 + seed)
            history = [list(rng.integers(7, 12, size=3))]
            cond = int(rng.integers(2))
            lp = functools.lru_cache(None)(lambda p: step_logits(model, history, cond, list(p)))
            score, best = exhaustive_best(lambda p: lp(tuple(p)), generatable, Vocabulary.eos_id, 4)
            hyps = beam_search(model, history, cond, DecodeConfig(beam_size=10, max_new_tokens=4))
            matches += hyps[0].tokens == best and abs(hyps[0].score - score) < 1e-9
            for h in hyps:
                emitted += 1
                assert not has_repeated_bigram(h.tokens)
            long = beam_search(model, history, cond, DecodeConfig(beam_size=4, max_new_tokens=15))
            for h in long:
                emitted += 1
                assert not has_repeated_bigram(h.tokens)
        notes.append(f"{matches}/50 argmax matches, {emitted} hypotheses without repeated bigrams")
        assert matches == 50


# ------------------------------------------------------- synthetic runs


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def _train_args(corpus):
    return ["--dialogue", corpus / "dialogue_train.jsonl", "--text", corpus / "text.jsonl",
            "--valid", corpus / "dialogue_valid.jsonl", "--profile", "synthetic", "--seed", 0]


@pytest.fixture(scope="module")
def base_corpus(workdir):
    out = workdir / "corpus"
    cli("make-synthetic", "--out", out)
    return out


@pytest.fixture(scope="module")
def gate_runs(workdir, base_corpus):
    out = workdir / "gates"
    t0 = time.perf_counter()
    cli("ablate-gates", *_train_args(base_corpus), "--test", base_corpus / "dialogue_test.jsonl", "--out-dir", out)
    return out, time.perf_counter() - t0


def _train_and_generate(corpus, run_dir, *flags):
    cli("train", *_train_args(corpus), "--run-dir", run_dir, *flags)
    hyp = run_dir / "hypotheses.jsonl"
    cli("generate", "--checkpoint", run_dir / "checkpoint.npz", "--test", corpus / "dialogue_test.jsonl",
        "--out", hyp)
    return records(hyp)


def _accuracy(hyps):
    return condition_accuracy([h["hypothesis"].split() for h in hyps], [h["condition"] for h in hyps],
                              SyntheticSpec())


def test_criterion_08_conditioning_efficacy(workdir, base_corpus, gate_runs):
    with criterion(8, "synthetic corpus: full model >= 90% condition-correct words; "
                      "no-condition ablation indistinguishable from 50% (p > 0.05)") as notes:
        meta = json.loads((base_corpus / "synthetic_meta.json").read_text())
        assert (meta["num_conditions"], meta["vocab_per_condition"], meta["num_dialogues"],
                meta["num_texts"]) == (2, 50, 2000, 500)
        gates_dir, gate_time = gate_runs
        full = records(gates_dir / "attention_routing" / "hypotheses.jsonl")
        acc_full, _ = _accuracy(full)
        t0 = time.perf_counter()
        ablated = _train_and_generate(base_corpus, workdir / "no_condition", "--no-condition")
        ablation_time = time.perf_counter() - t0
        acc_none, per = _accuracy(ablated)
        _, p = significance(per, [0.5] * len(per))
        notes += [f"full {acc_full:.3f} on {len(full)} test dialogues", f"no-condition {acc_none:.3f} p={p:.3f}",
                  f"train+decode {gate_time / 3 + ablation_time:.0f}s"]
        assert acc_full >= 0.9
        assert p > 0.05
        assert gate_time / 3 + ablation_time <= 30 * 60


def test_criterion_09_extra_text_direction(workdir):
    with criterion(9, "30% text-only vocabulary: full model covers more of it than the no-ctext ablation") as notes:
        corpus = workdir / "corpus_text_only"
        cli("make-synthetic", "--out", corpus, "--text-only-fraction", 0.3)
        full = _train_and_generate(corpus, workdir / "tof_full")
        ablated = _train_and_generate(corpus, workdir / "tof_no_ctext", "--no-ctext")
        spec = SyntheticSpec(text_only_fraction=0.3)
        cov_full = text_only_coverage([h["hypothesis"].split() for h in full], spec)
        cov_none = text_only_coverage([h["hypothesis"].split() for h in ablated], spec)
        notes.append(f"coverage full {cov_full:.3f} vs no-ctext {cov_none:.3f}")
        assert cov_full > cov_none


# ----------------------------------------------------------------- 10


FIXTURES = [
    ([["the", "cat", "sat"], ["a", "dog"]], [["the", "cat", "sat", "down"], ["a", "big", "dog"]]),
    ([["a", "a", "a"], ["b", "c", "d", "e"], ["x"]], [["a", "b"], ["b", "c", "e", "d"], ["y", "x"]]),
    ([["i", "like", "tea", "and", "cake"], ["see", "you"], ["good", "night"], ["ok"], ["no", "way", "no"]],
     [["i", "like", "cake", "and", "tea"], ["see", "you", "soon"], ["good", "morning"], ["ok", "then"],
      ["no", "way"]]),
]


def test_criterion_10_metric_oracles():
    with criterion(10, "BLEU/ROUGE-L/CIDEr/Distinct match brute-force oracles within 1e-6; "
                      "self-evaluation BLEU-1 = 100.0") as notes:
        worst = 0.0
        for hyps, refs in FIXTURES:
            assert len(hyps) <= 5
            pairs = [(bleu_n(hyps, refs, n), brute_bleu(hyps, refs, n)) for n in (1, 2, 3)]
            pairs.append((rouge_l(hyps, refs), brute_rouge_l(hyps, refs)))
            pairs.append((cider(hyps, refs), brute_cider(hyps, refs)))
            pairs += [(distinct_n(hyps, n), brute_distinct(hyps, n)) for n in (1, 2)]
            for got, want in pairs:
                worst = max(worst, abs(got - want))
        # frozen hand-derived values
        assert abs(bleu_n([["a", "a", "a"]], [["a", "b"]], 1) - 100 / 3) < 1e-6
        assert abs(rouge_l([["a", "b", "c", "d"]], [["a", "c", "d"]]) - 2.44 * 0.75 / (1 + 1.44 * 0.75)) < 1e-6
        assert abs(distinct_n([["a", "b"], ["a", "c"]], 1) - 0.75) < 1e-6
        refs = FIXTURES[2][1]
        self_bleu = evaluate(refs, refs).scores["BLEU-1"]
        notes += [f"3 fixtures, max |diff| {worst:.1e}", f"self BLEU-1 = {self_bleu!r}"]
        assert worst < 1e-6
        assert self_bleu == 100.0


# ----------------------------------------------------------------- 11


SMALL = ["--set", "model.hidden_size=16", "--set", "model.num_layers=2", "--set", "model.num_heads=2",
         "--set", "train.batch_size=8", "--set", "decode.max_new_tokens=6", "--epochs", 1]


def _small_corpus(path, seed=0):
    cli("make-synthetic", "--out", path, "--num-dialogues", 48, "--num-texts", 16, "--num-test", 8,
        "--num-valid", 4, "--vocab-per-condition", 6, "--seed", seed)
    return path


def test_criterion_11_gate_harness(workdir, gate_runs):
    with criterion(11, "ablate-gates: 3 x 3 table, deterministic, all variants train to loss < 1.0, "
                      "marks correct on injected vectors") as notes:
        out, _ = gate_runs
        lines = (out / "table.txt").read_text().splitlines()
        assert lines[0].split() == ["Variant", "BLEU-1", "BLEU-2", "Dist-2"]
        assert [ln.split()[0] for ln in lines[1:]] == ["attention_routing", "single_gate", "double_gates"]
        assert all(len(ln.split()) == 4 for ln in lines[1:])
        data = json.loads((out / "table.json").read_text())
        losses = {v: data[v]["final_loss"] for v in data}
        notes.append("final losses " + ", ".join(f"{v}={x:.3f}" for v, x in losses.items()))
        assert all(x < 1.0 for x in losses.values())

        # determinism: the same harness twice on a small corpus, byte for byte
        small = _small_corpus(workdir / "small_gates_corpus")
        tables = []
        for k in range(2):
            d = workdir / f"small_gates_{k}"
            cli("ablate-gates", *_train_args(small), *SMALL, "--test", small / "dialogue_test.jsonl", "--out-dir", d)
            tables.append(((d / "table.txt").read_bytes(), (d / "table.json").read_bytes()))
        assert tables[0] == tables[1]
        # the routing row is the standalone default train with the same seed
        solo = workdir / "small_solo"
        cli("train", *_train_args(small), *SMALL, "--run-dir", solo)
        a = np.load(solo / "checkpoint.npz")
        b = np.load(workdir / "small_gates_0" / "attention_routing" / "checkpoint.npz")
        assert sorted(a.files) == sorted(b.files)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a.files)
        notes.append("re-run byte-identical, routing row = standalone run")

        # marks from injected per-sample vectors with known p-values
        rng = np.random.default_rng(11)
        z = rng.standard_normal(10)
        z = (z - z.mean()) / z.std(ddof=1)
        base = rng.standard_normal(10)

        def rep(vec):
            from condgen.metrics import EvalReport
            return EvalReport({m: float(np.mean(vec[m])) for m in vec}, vec)

        ref = rep({"BLEU-1": base, "BLEU-2": base, "Dist-2": base})
        other = rep({"BLEU-1": base + z + 3.5 / np.sqrt(10), "BLEU-2": base + z + 2.5 / np.sqrt(10),
                     "Dist-2": base + z + 1.0 / np.sqrt(10)})
        text, info = gate_table({"attention_routing": ref, "single_gate": other, "double_gates": ref})
        row = text.splitlines()[2].split()
        marks = [c[c.index("("):] for c in row[1:]]
        notes.append(f"injected p-values {[round(info['single_gate']['p_values'][m], 4) for m in info['single_gate']['p_values']]} -> {marks}")
        assert marks == ["(**)", "(*)", "(/)"]
        assert text.splitlines()[3].count("(/)") == 3


# ----------------------------------------------------------------- 12


def test_criterion_12_reproducibility(workdir):
    with criterion(12, "two identical train -> generate -> evaluate pipelines give byte-identical outputs") as notes:
        outputs = []
        for k in range(2):
            root = workdir / f"pipeline_{k}"
            corpus = _small_corpus(root / "corpus")
            run_dir = root / "run"
            cli("train", *_train_args(corpus), *SMALL, "--run-dir", run_dir)
            hyp = run_dir / "hypotheses.jsonl"
            cli("generate", "--checkpoint", run_dir / "checkpoint.npz", "--test", corpus / "dialogue_test.jsonl",
                "--out", hyp)
            report = root / "report.json"
            cli("evaluate", "--hyp", hyp, "--ref", corpus / "dialogue_test.jsonl", "--out", report)
            outputs.append([hyp.read_bytes(), report.read_bytes(), report.with_suffix(".txt").read_bytes(),
                            (run_dir / "checkpoint.npz").read_bytes()])
        notes.append(f"{len(outputs[0][0].splitlines())} hypotheses, report {len(outputs[0][1])} bytes")
        assert outputs[0] == outputs[1]
