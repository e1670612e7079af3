"""Masked-LM training: AdamW with linear warmup/decay, pooled loss, checkpoints, ablations."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import tensor as T
from .data import (
    DialogueSample,
    MaskedBatch,
    MixedBatchSampler,
    SamplerConfig,
    TextSample,
    TfIdfTable,
    apply_random_masking,
    pack_dialogue,
)
from .model import Checkpoint, ConditionedTransformer, ConfigError, forward, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Ablations:
    no_condition: bool = False
    no_ctext: bool = False
    no_tfidf: bool = False


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    warmup_proportion: float = 0.1
    weight_decay: float = 0.01
    label_smoothing: float = 0.0
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    mask_probability: float = 0.25
    text_bidirectional_p: float = 0.5
    grad_clip: float | None = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-6
    validation_seed: int = 1234
    ablations: Ablations = field(default_factory=Ablations)

    def __post_init__(self):
        if isinstance(self.ablations, dict):
            self.ablations = Ablations(**self.ablations)
        self.adam_betas = tuple(self.adam_betas)
        if not 0.0 <= self.warmup_proportion <= 1.0:
            raise ConfigError(f"warmup_proportion must be in [0, 1], got {self.warmup_proportion}")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.label_smoothing < 0:
            raise ConfigError("learning_rate, weight_decay and label_smoothing must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class EffectivePipeline:
    use_conditions: bool
    use_texts: bool
    text_masking: str
    trainable: Any = None  # predicate on parameter names

    @property
    def mode(self) -> str:
        if not self.use_conditions:
            return "no_condition"
        if not self.use_texts:
            return "no_ctext"
        return "no_tfidf" if self.text_masking == "random" else "full"


def configure_ablation(ablations: Ablations, gate_variant: str = "attention_routing") -> EffectivePipeline:
    """Translate ablation flags into what the pipeline actually does.

    ``no_condition`` drops condition labels and the text corpus and freezes the
    condition machinery; ``no_ctext`` drops the text corpus; ``no_tfidf``
    masks text randomly.
    """
    a = ablations
    if a.no_tfidf and (a.no_ctext or a.no_condition):
        raise ConfigError("no_tfidf has no effect without the text corpus (conflicts with no_ctext/no_condition)")
    if a.no_condition and gate_variant != "attention_routing":
        raise ConfigError("a gate variant cannot be combined with no_condition")
    if a.no_condition:
        return EffectivePipeline(False, False, "random",
                                 lambda name: not name.startswith(("cond.", "gate.")))
    return EffectivePipeline(True, not a.no_ctext, "random" if a.no_tfidf else "tfidf", lambda name: True)


def strip_conditions(samples):
    return [type(s)(**{**s.__dict__, "condition_id": None}) for s in samples]


# ----------------------------------------------------------------- optimizer


def no_decay(name: str) -> bool:
    """Biases and LayerNorm parameters are excluded from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return ".ln" in name or leaf.startswith("b") or name == "lm_bias"


def linear_schedule(step: int, total_steps: int, peak_lr: float, warmup_proportion: float) -> float:
    """0 -> peak over the warmup steps, then linearly back to 0 at ``total_steps``."""
    warmup = warmup_proportion * total_steps
    if total_steps <= 0:
        return 0.0
    if step < warmup:
        return peak_lr * step / warmup
    if step >= total_steps:
        return 0.0
    return peak_lr * (total_steps - step) / (total_steps - warmup)


class AdamW:
    """Adam with decoupled weight decay (bias-corrected moments)."""

    def __init__(self, params: dict[str, T.Tensor], names: Sequence[str], *, betas=(0.9, 0.999),
                 eps=1e-6, weight_decay=0.01):
        self.params = params
        self.names = list(names)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(params[k].data) for k in self.names}
        self.v = {k: np.zeros_like(params[k].data) for k in self.names}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in self.names:
            p = self.params[k]
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if lr == 0.0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and not no_decay(k):
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def state_dict(self) -> dict[str, Any]:
        return {"step": self.t, "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def load_state_dict(self, state: dict[str, Any]) -> None:
        self.t = int(state["step"])
        for k in self.names:
            if k in state["m"]:
                self.m[k] = state["m"][k].copy()
                self.v[k] = state["v"][k].copy()


def clip_grad_norm(params: dict[str, T.Tensor], names: Sequence[str], max_norm: float) -> float:
    total = math.sqrt(float(np.sum([np.sum(params[k].grad ** 2) for k in names])))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in names:
            params[k].grad *= scale
    return total


# ---------------------------------------------------------------------- loss


def batch_loss(model: ConditionedTransformer, masked: MaskedBatch, *, training: bool = False,
               rng: np.random.Generator | None = None, label_smoothing: float = 0.0) -> T.Tensor:
    """Mean cross-entropy pooled over every masked position in the batch."""
    batch, targets, active = masked.collate()
    logits = model(batch, select=active, training=training, rng=rng)
    tgt = targets[active]
    return T.cross_entropy_masked(logits, tgt, np.ones(tgt.shape, dtype=bool), label_smoothing)


@dataclass
class RunLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]


def validate(model: ConditionedTransformer, dialogues: Sequence[DialogueSample], *, seed: int = 1234,
             mask_probability: float = 0.25, batch_size: int = 64) -> float:
    """Masked-LM perplexity, exp(mean NLL over masked positions), with fixed masking."""
    encs = [e for e in (pack_dialogue(s, model.config.max_length) for s in dialogues) if e is not None]
    if not encs:
        raise ValueError("validation set is empty")
    rng = np.random.default_rng(seed)
    masked = [apply_random_masking(e, rng, mask_probability) for e in encs]
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(masked), batch_size):
            mb = MaskedBatch(masked[i: i + batch_size])
            n = int(sum(s.active.sum() for s in mb.samples))
            total += batch_loss(model, mb).item() * n
            count += n
    return math.exp(total / count)


def _write_jsonl(fh, record):
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()


def train(model: ConditionedTransformer, dialogues: Sequence[DialogueSample], texts: Sequence[TextSample],
          cfg: TrainConfig, *, run_dir: str | Path | None = None, vocab: Sequence[str] = (),
          conditions: Sequence[str] = (), validation: Sequence[DialogueSample] = (),
          tfidf: TfIdfTable | None = None) -> tuple[Checkpoint, RunLog]:
    """Train end-to-end; returns the final checkpoint and the run log.

    When ``run_dir`` is given, a checkpoint is written after every epoch
    (``checkpoint_epochN.npz`` plus ``checkpoint.npz`` for the latest) and
    per-step records are appended to ``log.jsonl``. A NaN loss aborts with
    :class:`TrainingDiverged`; the last good checkpoint on disk is kept.
    """
    pipeline = configure_ablation(cfg.ablations, model.config.gate_variant)
    if not pipeline.use_conditions:
        dialogues = strip_conditions(dialogues)
        validation = strip_conditions(validation)
        conditions = ()  # the checkpoint then decodes every record unconditioned
    texts = list(texts) if pipeline.use_texts else []
    if pipeline.use_texts and not texts:
        log.warning("text corpus is empty: training without extra texts (no_ctext mode)")

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    data_rng, drop_rng = (np.random.default_rng(s) for s in seeds)
    sampler = MixedBatchSampler(
        dialogues, texts,
        SamplerConfig(batch_size=cfg.batch_size, mask_probability=cfg.mask_probability,
                      text_masking=pipeline.text_masking, text_bidirectional_p=cfg.text_bidirectional_p,
                      max_length=model.config.max_length),
        data_rng, tfidf=tfidf, vocab_size=model.config.vocab_size,
    )
    names = [k for k in model.params if pipeline.trainable(k)]
    opt = AdamW(model.params, names, betas=cfg.adam_betas, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    steps_per_epoch = sampler.steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    run_log = RunLog(metadata={"mode": pipeline.mode, "sampler_mode": sampler.mode,
                               "dialogue_per_batch": sampler.n_dialogue, "text_per_batch": sampler.n_text,
                               "steps_per_epoch": steps_per_epoch, "total_steps": total})
    run_dir = Path(run_dir) if run_dir else None
    fh = None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        fh = open(run_dir / "log.jsonl", "a", encoding="utf-8")
        _write_jsonl(fh, {"event": "start", **run_log.metadata})

    def snapshot(step):
        return Checkpoint(model.config, model.params, list(vocab), list(conditions), step,
                          opt.state_dict(), {"train_config": cfg.to_dict(), **run_log.metadata})

    step = 0
    t0 = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            for _ in range(steps_per_epoch):
                mb = sampler.next_batch()
                for k in names:
                    model.params[k].zero_grad()
                loss = batch_loss(model, mb, training=True, rng=drop_rng, label_smoothing=cfg.label_smoothing)
                if not np.isfinite(loss.item()):
                    T.get_tape().clear()
                    raise TrainingDiverged(f"loss became {loss.item()} at step {step}")
                T.backward(loss)
                gnorm = clip_grad_norm(model.params, names, cfg.grad_clip) if cfg.grad_clip else None
                lr = linear_schedule(step, total, cfg.learning_rate, cfg.warmup_proportion)
                opt.step(lr)
                kinds = mb.kinds
                rec = {"step": step, "epoch": epoch, "loss": loss.item(), "lr": lr,
                       "n_dialogue": kinds.count("dialogue"), "n_text": kinds.count("text"),
                       "grad_norm": gnorm}
                run_log.steps.append(rec)
                _write_jsonl(fh, rec)
                step += 1
            ep = {"epoch": epoch, "step": step, "wall_clock": time.perf_counter() - t0,
                  "mean_loss": float(np.mean(run_log.losses[-steps_per_epoch:]))}
            if validation:
                ep["val_perplexity"] = validate(model, validation, seed=cfg.validation_seed,
                                                mask_probability=cfg.mask_probability)
            run_log.epochs.append(ep)
            _write_jsonl(fh, {"event": "epoch", **ep})
            log.info("epoch %d: %s", epoch, ep)
            if run_dir:
                ck = snapshot(step)
                save_checkpoint(run_dir / f"checkpoint_epoch{epoch}.npz", ck)
                save_checkpoint(run_dir / "checkpoint.npz", ck)
    finally:
        if fh:
            fh.close()
    return snapshot(step), run_log
