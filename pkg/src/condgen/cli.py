"""Command-line entry point: ``condgen <subcommand> ...``.

Exit codes: 0 success, 2 configuration or input-contract error, 3 I/O error,
4 numerical failure (diverged training).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from filelock import FileLock, Timeout

from .config import RunConfig
from .data import (LabelMap, TfIdfTable, Vocabulary, build_vocab, compute_tfidf, corpus_tokens, encode_dialogues,
                   encode_texts, pack_dialogue, pack_text, read_jsonl, tokenize)
from .decoding import generate_file
from .metrics import EvalReport, compare, evaluate, gate_table
from .model import GATE_VARIANTS, Checkpoint, ConditionedTransformer, ConfigError, condition_bias_mask, load_checkpoint
from .synthetic import SyntheticSpec, write_corpora
from .training import configure_ablation, train, TrainingDiverged

log = logging.getLogger("condgen")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
RUN_ROOT_ENV = "CONDGEN_RUN_ROOT"


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def _require(path: str | Path | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"{what} not found: {p}", EXIT_IO)
    return p


def _split_records(paths: Sequence[Path]) -> tuple[list[dict], list[dict]]:
    dialogues, texts = [], []
    for p in paths:
        for rec in read_jsonl(p):
            (texts if "text" in rec and "history" not in rec else dialogues).append(rec)
    return dialogues, texts


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ------------------------------------------------------------------- corpora


def cmd_make_synthetic(args) -> int:
    spec = SyntheticSpec(num_conditions=args.num_conditions, vocab_per_condition=args.vocab_per_condition,
                         num_dialogues=args.num_dialogues, num_texts=args.num_texts, num_test=args.num_test,
                         num_valid=args.num_valid, text_only_fraction=args.text_only_fraction, seed=args.seed)
    for name, path in write_corpora(spec, args.out).items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_build_vocab(args) -> int:
    paths = [_require(p, "corpus file") for p in args.corpus]
    dialogues, texts = _split_records(paths)
    vocab = build_vocab(corpus_tokens(dialogues, texts), min_count=args.min_count)
    vocab.save(args.out)
    print(f"{len(vocab)} tokens -> {args.out} (fingerprint {vocab.fingerprint()})")
    return EXIT_OK


def cmd_tfidf(args) -> int:
    vocab = Vocabulary.load(_require(args.vocab, "vocabulary file"))
    texts = read_jsonl(_require(args.text, "text corpus"))
    table = compute_tfidf(vocab.encode(tokenize(r.get("text", ""))) for r in texts)
    _write_json(Path(args.out), table.to_json(vocab))
    print(f"tf-idf over {table.num_docs} documents -> {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ training


def _train_config(args, gate: str | None = None) -> RunConfig:
    extra = {}
    for flag in ("no_condition", "no_ctext", "no_tfidf"):
        if getattr(args, flag, False):
            extra[f"train.{flag}"] = True
    if gate or getattr(args, "gate", None):
        extra["model.gate_variant"] = gate or args.gate
    if getattr(args, "seed", None) is not None:
        extra["train.seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        extra["train.epochs"] = args.epochs
    return RunConfig.build(args.profile, args.set, extra)


def train_run(args, run_dir: Path, cfg: RunConfig) -> dict:
    """Shared by ``train`` and ``ablate-gates``: returns the run summary."""
    tcfg = cfg.train_config()
    # reject contradictory flags before touching any data
    configure_ablation(tcfg.ablations, cfg.get("model.gate_variant"))
    dial_path = _require(args.dialogue, "dialogue corpus")
    text_path = _require(args.text, "text corpus")
    valid_path = _require(args.valid, "validation corpus")
    dialogue_recs = read_jsonl(dial_path)
    text_recs = read_jsonl(text_path) if text_path else []
    if args.vocab:
        vocab = Vocabulary.load(_require(args.vocab, "vocabulary file"))
    else:
        vocab = build_vocab(corpus_tokens(dialogue_recs, text_recs))
    labels = LabelMap()
    dialogues = encode_dialogues(dialogue_recs, vocab, labels)
    texts = encode_texts(text_recs, vocab, labels)
    valid = encode_dialogues(read_jsonl(valid_path), vocab, labels, grow_labels=False) if valid_path else []
    if args.tfidf:
        tfidf = TfIdfTable.from_json(json.loads(_require(args.tfidf, "tf-idf file").read_text()), vocab)
    else:
        tfidf = compute_tfidf(t.text for t in texts) if texts else None
    mcfg = cfg.model_config(len(vocab), len(labels))

    run_dir.mkdir(parents=True, exist_ok=True)
    try:
        lock = FileLock(str(run_dir / ".lock"), timeout=0)
        lock.acquire()
    except Timeout:
        raise CLIError(f"run directory {run_dir} is locked by another process", EXIT_IO) from None
    try:
        (run_dir / "config.json").write_text(cfg.to_json(), encoding="utf-8")
        vocab.save(run_dir / "vocab.txt")
        for stale in run_dir.glob("log.jsonl"):
            stale.unlink()
        model = ConditionedTransformer(mcfg, seed=tcfg.seed)
        _, run_log = train(model, dialogues, texts, tcfg, run_dir=run_dir, vocab=vocab.tokens,
                           conditions=labels.labels, validation=valid, tfidf=tfidf)
        summary = {**run_log.metadata, "vocab_fingerprint": vocab.fingerprint(), "conditions": labels.labels,
                   "num_dialogues": len(dialogues), "num_texts": len(texts),
                   "final_loss": run_log.epochs[-1]["mean_loss"] if run_log.epochs else None,
                   "epochs": [{k: v for k, v in e.items() if k != "wall_clock"} for e in run_log.epochs]}
        _write_json(run_dir / "run_meta.json", summary)
    finally:
        lock.release()
    return summary


def cmd_train(args) -> int:
    cfg = _train_config(args)
    run_dir = Path(args.run_dir) if args.run_dir else run_root() / args.name
    summary = train_run(args, run_dir, cfg)
    print(f"run {run_dir}: mode={summary['mode']} steps={summary['total_steps']} final_loss={summary['final_loss']}")
    return EXIT_OK


# ---------------------------------------------------------------- generation


def _load_for_decoding(checkpoint: Path) -> tuple[Checkpoint, RunConfig | None]:
    ck = load_checkpoint(checkpoint)
    frozen = checkpoint.parent / "config.json"
    base = RunConfig.from_json(frozen.read_text(encoding="utf-8")) if frozen.is_file() else None
    return ck, base


def _decode_config(args, base: RunConfig | None):
    extra = {}
    if args.beam is not None:
        extra["decode.beam_size"] = args.beam
    if args.max_new_tokens is not None:
        extra["decode.max_new_tokens"] = args.max_new_tokens
    if args.no_bigram_block:
        extra["decode.block_repeat_bigrams"] = False
    return RunConfig.build(args.profile, args.set, extra, base=base).decode_config()


def generate_run(checkpoint: Path, test: Path, out: Path, dcfg, vocab_path: Path | None = None):
    ck, _ = _load_for_decoding(checkpoint)
    vocab = Vocabulary(ck.vocab)
    if vocab_path is not None:
        given = Vocabulary.load(vocab_path)
        if given.tokens != vocab.tokens:
            raise CLIError(f"vocabulary mismatch: checkpoint {vocab.fingerprint()} vs {vocab_path} {given.fingerprint()}")
    return generate_file(ck.model(), vocab, ck.conditions, test, out, dcfg)


def cmd_generate(args) -> int:
    checkpoint = _require(args.checkpoint, "checkpoint")
    test = _require(args.test, "test corpus")
    _, base = _load_for_decoding(checkpoint)
    summary = generate_run(checkpoint, test, Path(args.out), _decode_config(args, base), _require(args.vocab, "vocabulary file"))
    print(summary.footer())
    return EXIT_OK


# ---------------------------------------------------------------- evaluation


def _hypotheses(path: Path) -> tuple[list[int], list[list[str]]]:
    """Generated records; a dialogue file also works (its responses are the hypotheses)."""
    idx, hyps = [], []
    for k, rec in enumerate(read_jsonl(path)):
        idx.append(int(rec.get("index", k)))
        text = rec["hypothesis"] if "hypothesis" in rec else rec.get("response", rec.get("reference", ""))
        hyps.append(tokenize(text))
    return idx, hyps


def _references(path: Path) -> tuple[list[int], list[list[str]]]:
    idx, refs = [], []
    for rec in read_jsonl(path):
        ref = rec.get("response", rec.get("reference"))
        if ref is None:
            continue
        idx.append(rec["_line"])
        refs.append(tokenize(ref))
    return idx, refs


def _check_aligned(a: list[int], b: list[int], what: str) -> None:
    for k, (x, y) in enumerate(zip(a, b)):
        if x != y:
            raise CLIError(f"{what} misaligned at position {k}: index {x} vs {y}")
    if len(a) != len(b):
        k = min(len(a), len(b))
        first = (a if len(a) > len(b) else b)[k]
        raise CLIError(f"{what} misaligned at position {k}: index {first} has no counterpart")


def evaluate_files(hyp: Path, ref: Path, baseline: Path | None = None) -> tuple[EvalReport, EvalReport | None]:
    hi, hyps = _hypotheses(hyp)
    ri, refs = _references(ref)
    _check_aligned(hi, ri, "hypotheses and references")
    if not hyps:
        raise CLIError("no hypotheses to evaluate")
    report = evaluate(hyps, refs)
    base = None
    if baseline is not None:
        bi, bh = _hypotheses(baseline)
        _check_aligned(hi, bi, "hypotheses and baseline")
        base = evaluate(bh, refs)
        compare(report, base)
    return report, base


def cmd_evaluate(args) -> int:
    report, base = evaluate_files(_require(args.hyp, "hypotheses file"), _require(args.ref, "references file"),
                                  _require(args.baseline, "baseline file"))
    text = report.render(args.name)
    if base is not None:
        text += "\n" + base.render(args.baseline_name).splitlines()[1]
    print(text)
    if args.out:
        out = {"system": {"name": args.name, "scores": report.scores}}
        if base is not None:
            out["baseline"] = {"name": args.baseline_name, "scores": base.scores, "p_values": base.p_values}
        _write_json(Path(args.out), out)
        Path(args.out).with_suffix(".txt").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_ablate_gates(args) -> int:
    out_dir = Path(args.out_dir) if args.out_dir else run_root() / "ablate-gates"
    test = _require(args.test, "test corpus")
    reports, losses = {}, {}
    for variant in GATE_VARIANTS:
        cfg = _train_config(args, gate=variant)
        run_dir = out_dir / variant
        summary = train_run(args, run_dir, cfg)
        losses[variant] = summary["final_loss"]
        hyp_path = run_dir / "hypotheses.jsonl"
        generate_run(run_dir / "checkpoint.npz", test, hyp_path, cfg.decode_config())
        reports[variant], _ = evaluate_files(hyp_path, test)
    text, data = gate_table(reports)
    for v in data:
        data[v]["final_loss"] = losses[v]
    (out_dir / "table.txt").write_text(text, encoding="utf-8")
    _write_json(out_dir / "table.json", data)
    print(text, end="")
    return EXIT_OK


# ----------------------------------------------------------------- inspection


def render_masks(enc, tokens: list[str], has_condition: bool) -> str:
    """Character grid of M (``.`` open, ``#`` blocked) plus the two M_b columns."""
    n = len(tokens)
    mb = condition_bias_mask(enc.target_side, np.asarray(has_condition))
    width = max(len(t) for t in tokens) + 1
    head = " " * (width + 6) + "".join(str(j % 10) for j in range(n)) + "  c g"
    lines = [head]
    for i, tok in enumerate(tokens):
        row = "".join("." if enc.attention_mask[i, j] == 0 else "#" for j in range(n))
        side = "T" if enc.target_side[i] else "S"
        cols = " ".join("." if mb[i, k] == 0 else "#" for k in range(2))
        lines.append(f"{i:>3} {side} {tok.ljust(width)}{row}  {cols}")
    return "\n".join(lines)


def cmd_inspect_masks(args) -> int:
    records = read_jsonl(_require(args.file, "sample file"))
    if not 0 <= args.index < len(records):
        raise CLIError(f"index {args.index} out of range: {args.file} has {len(records)} records")
    rec = records[args.index]
    vocab = build_vocab(corpus_tokens([rec] if "history" in rec else [], [] if "history" in rec else [rec]))
    labels = LabelMap()
    if "history" in rec:
        samples = encode_dialogues([rec], vocab, labels)
        enc = pack_dialogue(samples[0], args.max_length) if samples else None
        kind = "dialogue"
    else:
        samples = encode_texts([rec], vocab, labels)
        enc = pack_text(samples[0], args.attn, args.max_length) if samples else None
        kind = f"text, {args.attn}"
    if enc is None:
        raise CLIError(f"record {args.index} cannot be packed")
    tokens = vocab.decode(enc.token_ids.tolist())
    print(f"record {args.index} ({kind}), condition={rec.get('condition')}, n={len(tokens)}")
    print("rows attend to columns: '.' open, '#' blocked; S/T = source/target; c/g = condition/generic route")
    print(render_masks(enc, tokens, enc.condition_id is not None))
    return EXIT_OK


# -------------------------------------------------------------------- parser


def _add_config_flags(p):
    p.add_argument("--profile", help="bundled profile name (paper, synthetic) or path to an INI file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a dotted key, e.g. model.hidden_size=32 (repeatable)")


def _add_train_inputs(p):
    p.add_argument("--dialogue", required=True, help="dialogue corpus (JSONL)")
    p.add_argument("--text", help="conditioned text corpus (JSONL)")
    p.add_argument("--valid", help="held-out dialogues for perplexity")
    p.add_argument("--vocab", help="vocabulary file; built from the corpora when omitted")
    p.add_argument("--tfidf", help="tf-idf table; computed from the text corpus when omitted")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    _add_config_flags(p)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="condgen", description="Conditioned dialogue generation toolkit.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="write the bundled synthetic corpora")
    p.add_argument("--out", required=True)
    d = SyntheticSpec()
    for name in ("num_conditions", "vocab_per_condition", "num_dialogues", "num_texts", "num_test", "num_valid", "seed"):
        p.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(d, name))
    p.add_argument("--text-only-fraction", type=float, default=d.text_only_fraction)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("build-vocab", help="build a vocabulary file")
    p.add_argument("corpus", nargs="+")
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("tfidf", help="precompute document frequencies over the text corpus")
    p.add_argument("--text", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tfidf)

    p = sub.add_parser("train", help="train one model")
    _add_train_inputs(p)
    p.add_argument("--no-condition", action="store_true")
    p.add_argument("--no-ctext", action="store_true")
    p.add_argument("--no-tfidf", action="store_true")
    p.add_argument("--gate", choices=GATE_VARIANTS)
    p.add_argument("--run-dir", help=f"defaults to ${RUN_ROOT_ENV}/<name>")
    p.add_argument("--name", default="run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode a test corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", help="verify the checkpoint uses this vocabulary")
    p.add_argument("--beam", type=int)
    p.add_argument("--max-new-tokens", type=int)
    p.add_argument("--no-bigram-block", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score hypotheses against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--baseline", help="baseline hypotheses, tested against --hyp")
    p.add_argument("--name", default="system")
    p.add_argument("--baseline-name", default="baseline")
    p.add_argument("--out", help="write a JSON report (and a .txt rendering next to it)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate-gates", help="compare attention routing with the two parametric gates")
    _add_train_inputs(p)
    p.add_argument("--test", required=True)
    p.add_argument("--out-dir", help=f"defaults to ${RUN_ROOT_ENV}/ablate-gates")
    p.set_defaults(func=cmd_ablate_gates)

    p = sub.add_parser("inspect-masks", help="render the attention masks of one sample")
    p.add_argument("file")
    p.add_argument("index", type=int)
    p.add_argument("--attn", choices=("bidirectional", "left_to_right"), default="bidirectional")
    p.add_argument("--max-length", type=int, default=80)
    p.set_defaults(func=cmd_inspect_masks)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
