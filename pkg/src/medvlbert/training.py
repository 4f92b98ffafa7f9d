"""Multitask optimisation, the alternate pretraining/transferring schedule,
corpus-to-corpus transfer and validation."""

from __future__ import annotations

import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, TrainingSample
from .errors import ConfigError, ContractError, NumericError
from .metrics import EvalPair, precision_recall_f1, score_corpus
from .model import Batch, MedicalVLBert, collate
from .optim import AdamState, adam_step, clip_grad_norm
from .tensor import Tensor
from .text import Vocabulary, detokenize, split_words

log = logging.getLogger(__name__)


def multitask_loss(l_cls, l_t, lam: float = 1.0):
    """``λ·L_cls + L_T``; works on tensors and plain floats alike."""
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    return lam * l_cls + l_t


@dataclass
class LossBreakdown:
    kind: str
    total: float
    cls: float
    lm: float
    lm_per_token: float
    n_tokens: int
    batch_size: int
    lam: float
    grad_norm: float = 0.0


@dataclass
class ScheduleSpec:
    m: int = 1
    n: int = 3
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.m < 0 or self.n < 0 or self.m + self.n < 1:
            raise ConfigError(f"schedule ({self.m},{self.n}) needs m, n >= 0 and m + n >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")


@dataclass
class AblationFlags:
    alternate_training: bool = True
    transfer_learning: bool = False
    external_knowledge: bool = True


@dataclass
class OptimConfig:
    lr: float = 1e-3
    patch_lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    lam: float = 1.0
    batch_size: int = 8


class Trainer:
    """Owns the model, one ADAM state for all parameters, and the shuffling RNG."""

    def __init__(self, model: MedicalVLBert, optim: OptimConfig, seed: int = 0):
        self.model = model
        self.optim = optim
        self.state = AdamState(
            learning_rate=optim.lr,
            beta1=optim.beta1,
            beta2=optim.beta2,
            epsilon=optim.eps,
            lr_overrides={"patch": optim.patch_lr},
        )
        self.rng = np.random.default_rng(seed)
        self.epoch = 0
        self.global_step = 0
        self.events: list[dict] = []
        self.event_sink: Callable[[dict], None] | None = None

    def emit(self, record: dict) -> None:
        self.events.append(record)
        if self.event_sink is not None:
            self.event_sink(record)

    # -- single steps ----------------------------------------------------------
    def compute_losses(self, batch: Batch) -> tuple[Tensor, LossBreakdown]:
        l_cls, l_t, n_tok = self.model.losses(batch.kind, batch)
        lam = self.optim.lam
        # combined in 64-bit so the logged total matches its parts to well below 1e-6
        total = multitask_loss(T.cast(l_cls, np.float64), T.cast(l_t, np.float64), lam)
        per_tok = float(l_t.data) * len(batch) / max(n_tok, 1)
        bd = LossBreakdown(batch.kind, float(total.data), float(l_cls.data), float(l_t.data), per_tok, n_tok, len(batch), lam)
        return total, bd

    def _step(self, samples: Sequence[TrainingSample] | Batch, kind: str) -> LossBreakdown:
        batch = samples if isinstance(samples, Batch) else collate(samples)
        if batch.kind != kind:
            raise ContractError(f"{kind} step received a {batch.kind} batch")
        self.model.train()
        self.model.zero_grad()
        total, bd = self.compute_losses(batch)
        if not math.isfinite(bd.total):
            raise NumericError(f"non-finite {kind} loss {bd.total} at step {self.global_step}")
        T.backward(total)
        params = self.model.path_parameters(kind)
        bd.grad_norm = clip_grad_norm(params.values(), self.optim.clip_norm)
        adam_step(params, self.state)
        self.global_step += 1
        return bd

    def pretraining_step(self, samples) -> LossBreakdown:
        return self._step(samples, "pretrain")

    def transfer_step(self, samples) -> LossBreakdown:
        return self._step(samples, "transfer")

    # -- passes -----------------------------------------------------------------
    def run_pass(self, dataset: Dataset, kind: str, epoch: int, pass_index: int) -> list[LossBreakdown]:
        if len(dataset) == 0:
            raise ConfigError(f"{kind} corpus is empty")
        order = self.rng.permutation(len(dataset))
        bs = self.optim.batch_size
        out = []
        for start in range(0, len(order), bs):
            chunk = [dataset.samples[i] for i in order[start : start + bs]]
            t0 = time.perf_counter()
            bd = self._step(chunk, kind)
            out.append(bd)
            self.emit(
                {
                    "event": "step",
                    "epoch": epoch,
                    "procedure": kind,
                    "pass": pass_index,
                    "step": self.global_step,
                    "loss": bd.total,
                    "l_cls": bd.cls,
                    "l_t": bd.lm,
                    "lambda": bd.lam,
                    "wall": time.perf_counter() - t0,
                }
            )
        return out


# -- evaluation -------------------------------------------------------------------

@dataclass
class EvalResult:
    metrics: dict[str, float]
    candidates: list[str]
    references: list[str]
    probs: np.ndarray
    sample_ids: list[int]


def evaluate(
    model: MedicalVLBert,
    dataset: Dataset,
    vocab: Vocabulary,
    *,
    mode: str = "greedy",
    beam_width: int = 4,
    lam: float = 1.0,
    chunk: int = 64,
) -> EvalResult:
    """Generate reports for every sample and score them against the ground truth."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate an empty split")
    model.eval()
    kind = dataset.kind
    cands, refs, probs, ids = [], [], [], []
    loss_sum = 0.0
    with T.no_grad():
        for start in range(0, len(dataset), chunk):
            batch = collate(dataset.samples[start : start + chunk])
            tf = model.encode(kind, batch)
            probs.append(T.sigmoid(model.classifier.logits(tf)).data)
            l_cls, l_t, _ = model.losses(kind, batch)
            loss_sum += float(multitask_loss(l_cls, l_t, lam).data) * len(batch)
            for seq in model.decoder.generate(tf, mode=mode, beam_width=beam_width):
                cands.append(detokenize(seq, vocab))
            refs += [detokenize(s.tokens, vocab) for s in dataset.samples[start : start + chunk]]
            ids += batch.sample_ids
    model.train()
    p = np.concatenate(probs)
    corpus = [EvalPair(str(i), tuple(split_words(c)), (tuple(split_words(r)),)) for i, c, r in zip(ids, cands, refs)]
    metrics = score_corpus(corpus)
    metrics.update(precision_recall_f1(p, dataset.labels()))
    metrics["loss"] = loss_sum / len(dataset)
    return EvalResult(metrics, cands, refs, p, ids)


# -- the alternate schedule -------------------------------------------------------

@dataclass
class TrainingReport:
    events: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_cider: float = -math.inf
    best_state: dict | None = None

    def summary_table(self) -> str:
        cols = ("epoch", "pretrain_loss", "transfer_loss", "val_loss", "f1", "BLEU-4", "ROUGE-L", "CIDEr-D")
        lines = ["  ".join(f"{c:>13}" for c in cols)]
        for row in self.epochs:
            vals = []
            for c in cols:
                v = row.get(c)
                vals.append(f"{v:>13}" if isinstance(v, int) else (f"{v:>13.4f}" if isinstance(v, float) else f"{'-':>13}"))
            lines.append("  ".join(vals))
        return "\n".join(lines)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.events:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def epoch_plan(schedule: ScheduleSpec, flags: AblationFlags) -> list[tuple[int, int]]:
    """(pretraining passes, transferring passes) for each epoch in order."""
    if not flags.external_knowledge and schedule.m > 0:
        raise ConfigError("external_knowledge=false forbids pretraining passes (m must be 0)")
    if flags.alternate_training:
        return [(schedule.m, schedule.n)] * schedule.epochs
    # sequential ablation: every pretraining epoch first, then every transferring epoch
    plan = []
    if schedule.m:
        plan += [(schedule.m, 0)] * schedule.epochs
    if schedule.n:
        plan += [(0, schedule.n)] * schedule.epochs
    return plan


def alternate_train(
    trainer: Trainer,
    pretrain_corpus: Dataset | None,
    transfer_corpus: Dataset | None,
    schedule: ScheduleSpec,
    flags: AblationFlags,
    *,
    val: Dataset | None = None,
    vocab: Vocabulary | None = None,
    early_stop_patience: int = 0,
    progress: bool = False,
    on_epoch_end: Callable[[Trainer, dict], None] | None = None,
) -> TrainingReport:
    """Run the epoch plan from ``trainer.epoch`` onward, sharing one decoder.

    Each epoch runs its pretraining passes before its transferring passes.
    Validation (when ``val`` and ``vocab`` are given) follows every epoch;
    the best state by validation CIDEr-D is kept in the report.
    """
    plan = epoch_plan(schedule, flags)
    if any(m for m, _ in plan) and (pretrain_corpus is None or len(pretrain_corpus) == 0):
        raise ConfigError("pretraining passes requested but the textbook corpus is empty")
    if any(n for _, n in plan) and (transfer_corpus is None or len(transfer_corpus) == 0):
        raise ConfigError("transferring passes requested but the transfer corpus is empty")
    report = TrainingReport(events=trainer.events)
    stale = 0
    for epoch in range(trainer.epoch, len(plan)):
        m, n = plan[epoch]
        trainer.emit({"event": "epoch_start", "epoch": epoch, "pretrain_passes": m, "transfer_passes": n})
        row: dict = {"epoch": epoch}
        losses = {"pretrain": [], "transfer": []}
        for i in range(m):
            losses["pretrain"] += trainer.run_pass(pretrain_corpus, "pretrain", epoch, i)
        for i in range(n):
            losses["transfer"] += trainer.run_pass(transfer_corpus, "transfer", epoch, i)
        for kind, bds in losses.items():
            if bds:
                row[f"{kind}_loss"] = float(np.mean([b.total for b in bds]))
        trainer.epoch = epoch + 1
        if val is not None and vocab is not None:
            res = evaluate(trainer.model, val, vocab, lam=trainer.optim.lam)
            row.update({"val_loss": res.metrics["loss"], **{k: v for k, v in res.metrics.items() if k != "loss"}})
            if res.metrics["CIDEr-D"] > report.best_cider:
                report.best_cider = res.metrics["CIDEr-D"]
                report.best_epoch = epoch
                report.best_state = trainer.model.state_dict()
                stale = 0
            else:
                stale += 1
        report.epochs.append(row)
        trainer.emit({"event": "epoch_end", **row})
        if progress:
            shown = " ".join(f"{k}={v:.4f}" for k, v in row.items() if isinstance(v, float))
            print(f"epoch {epoch + 1}/{len(plan)} {shown}", file=sys.stderr)
        if on_epoch_end is not None:
            on_epoch_end(trainer, row)
        if early_stop_patience and stale >= early_stop_patience:
            trainer.emit({"event": "early_stop", "epoch": epoch})
            break
    return report


# -- corpus-to-corpus transfer ----------------------------------------------------

@dataclass
class StageSpec:
    pretrain: Dataset | None
    transfer: Dataset
    val: Dataset | None
    schedule: ScheduleSpec
    lr: float = 5e-5
    patch_lr: float = 1e-6


def check_compatible(a: StageSpec, b: StageSpec) -> None:
    problems = []
    for label, da, db in (("transfer", a.transfer, b.transfer), ("pretrain", a.pretrain, b.pretrain)):
        if da is None or db is None:
            continue
        if da.vocab_sha256 != db.vocab_sha256:
            problems.append(f"{label}: vocabulary differs ({da.vocab_sha256[:12]} vs {db.vocab_sha256[:12]})")
        if da.terminology_names != db.terminology_names:
            only_a = sorted(set(da.terminology_names) - set(db.terminology_names))
            only_b = sorted(set(db.terminology_names) - set(da.terminology_names))
            problems.append(f"{label}: terminology sets differ (only A: {only_a}, only B: {only_b}, or order differs)")
    if problems:
        raise ConfigError("stage A and stage B are incompatible: " + "; ".join(problems))


def transfer_between_corpora(
    model_factory: Callable[[], MedicalVLBert],
    stage_a: StageSpec,
    stage_b: StageSpec,
    flags: AblationFlags,
    optim: OptimConfig,
    *,
    seed: int = 0,
    vocab: Vocabulary | None = None,
    event_sink: Callable[[dict], None] | None = None,
    validate: bool = True,
    **train_kwargs,
) -> tuple[Trainer, TrainingReport | None, TrainingReport]:
    """Train on corpus A, then fine-tune the same weights on corpus B.

    With ``flags.transfer_learning`` off, stage A is skipped and stage B
    starts from a fresh initialisation.  Stage B starts a fresh optimizer
    state at its own learning rates.
    """
    check_compatible(stage_a, stage_b)
    model = model_factory()
    reports: dict[str, TrainingReport] = {}
    stages = (("A", stage_a), ("B", stage_b)) if flags.transfer_learning else (("B", stage_b),)
    for label, stage in stages:
        trainer = Trainer(model, _with_lr(optim, stage), seed=seed + (label == "B"))
        if event_sink is not None:
            trainer.event_sink = lambda rec, label=label: event_sink({**rec, "corpus": label})
        trainer.emit({"event": "stage_start", "stage": label, "epochs": stage.schedule.epochs})
        reports[label] = alternate_train(
            trainer,
            stage.pretrain,
            stage.transfer,
            stage.schedule,
            flags,
            val=stage.val if validate else None,
            vocab=vocab,
            **train_kwargs,
        )
    return trainer, reports.get("A"), reports["B"]


def _with_lr(optim: OptimConfig, stage: StageSpec) -> OptimConfig:
    d = asdict(optim)
    d.update(lr=stage.lr, patch_lr=stage.patch_lr)
    return OptimConfig(**d)
