"""Experiment harness shared by the CLI and the acceptance suite.

Corpus A is the large sibling and corpus B the small one; both share one
vocabulary and terminology inventory so weights move between them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .config import RunConfig
from .data import (
    Corpora,
    Dataset,
    SyntheticGrammar,
    build_vocabulary,
    dataset_to_bytes,
    default_grammar,
    export_text,
    generate_corpora,
    load_dataset,
    save_dataset,
    to_dataset,
)
from .errors import ConfigError
from .metrics import METRIC_NAMES
from .model import MedicalVLBert
from .text import Vocabulary, unk_rate
from .training import (
    AblationFlags,
    EvalResult,
    Trainer,
    TrainingReport,
    StageSpec,
    alternate_train,
    transfer_between_corpora,
    evaluate,
)

log = logging.getLogger(__name__)

CORPORA = ("A", "B")
SPLITS = ("textbook", "train", "val", "test")


@dataclass
class DataBundle:
    vocab: Vocabulary
    grammars: dict[str, SyntheticGrammar]
    datasets: dict[tuple[str, str], Dataset]

    def get(self, corpus: str, split: str) -> Dataset:
        return self.datasets[(corpus, split)]


def generate_bundle(cfg: RunConfig) -> tuple[DataBundle, dict[str, Corpora]]:
    """Generate both sibling corpora in memory; fully determined by the config."""
    d = cfg.data
    grammars = {
        "A": default_grammar(d.n_terms, d.grammar_seed, "A", tuple(d.grid)),
        "B": default_grammar(d.n_terms, d.grammar_seed, "B", tuple(d.grid)),
    }
    raw = {
        "A": generate_corpora(grammars["A"], cfg.sizes.as_dict(), seed=cfg.seed),
        "B": generate_corpora(grammars["B"], cfg.sizes_b.as_dict(), seed=cfg.seed + 1),
    }
    vocab = build_vocabulary(raw.values())
    datasets = {}
    for c in CORPORA:
        g = grammars[c]
        datasets[(c, "textbook")] = to_dataset(raw[c].textbook, vocab, g, c, "textbook", "pretrain", d.max_len)
        for split in ("train", "val", "test"):
            datasets[(c, split)] = to_dataset(raw[c].splits[split], vocab, g, c, split, "transfer", d.max_len)
    return DataBundle(vocab, grammars, datasets), raw


def save_bundle(bundle: DataBundle, directory: str | Path, text_sidecars: bool = True) -> dict:
    """Write every dataset, the vocabulary, the grammars and a manifest of hashes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"files": {}}
    bundle.vocab.save(directory / "vocab.txt")
    for c, g in bundle.grammars.items():
        (directory / f"grammar_{c}.yaml").write_text(g.to_yaml(), encoding="utf-8")
    for (c, split), ds in sorted(bundle.datasets.items()):
        name = f"{c}_{split}.agds"
        manifest["files"][name] = save_dataset(ds, directory / name)
        if text_sidecars:
            export_text(ds, bundle.vocab, directory / f"{c}_{split}.tsv")
    manifest["vocab_sha256"] = bundle.vocab.digest()
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def load_bundle(directory: str | Path) -> DataBundle:
    directory = Path(directory)
    if not (directory / "manifest.json").exists():
        raise FileNotFoundError(f"no datasets under {directory}; run gen-data first")
    vocab = Vocabulary.load(directory / "vocab.txt")
    grammars = {c: SyntheticGrammar.from_yaml((directory / f"grammar_{c}.yaml").read_text(encoding="utf-8")) for c in CORPORA}
    datasets = {(c, s): load_dataset(directory / f"{c}_{s}.agds") for c in CORPORA for s in SPLITS}
    for ds in datasets.values():
        if ds.vocab_sha256 != vocab.digest():
            raise ConfigError(f"{ds.corpus}_{ds.split} was built with a different vocabulary than vocab.txt")
    return DataBundle(vocab, grammars, datasets)


def bundle_digest(bundle: DataBundle) -> str:
    h = hashlib.sha256()
    for key in sorted(bundle.datasets):
        h.update(dataset_to_bytes(bundle.datasets[key]))
    return h.hexdigest()


def summarize_bundle(bundle: DataBundle) -> str:
    lines = [f"vocabulary: {len(bundle.vocab)} tokens"]
    for (c, split), ds in sorted(bundle.datasets.items()):
        prevalence = float(ds.labels().mean()) if len(ds) else 0.0
        rate = unk_rate(s.tokens for s in ds.samples)
        lines.append(f"{c}_{split:<9} n={len(ds):<6} unk_rate={rate:.4f} label_prevalence={prevalence:.4f}")
    return "\n".join(lines)


# -- single runs ----------------------------------------------------------------------

@dataclass
class RunResult:
    trainer: Trainer
    reports: list[TrainingReport]
    test: EvalResult
    target_corpus: str


def build_model(cfg: RunConfig, bundle: DataBundle) -> MedicalVLBert:
    mc = dataclasses.replace(cfg.model, init_seed=cfg.seed)
    return MedicalVLBert(mc, bundle.grammars["A"].names, len(bundle.vocab), tuple(cfg.data.grid))


def _stage(cfg: RunConfig, bundle: DataBundle, corpus: str, epochs: int, lr: float) -> StageSpec:
    return StageSpec(
        pretrain=bundle.get(corpus, "textbook") if cfg.flags.external_knowledge else None,
        transfer=bundle.get(corpus, "train"),
        val=bundle.get(corpus, "val"),
        schedule=cfg.schedule_spec(epochs),
        lr=lr,
        patch_lr=cfg.optim.patch_lr,
    )


def train_run(
    cfg: RunConfig,
    bundle: DataBundle,
    *,
    progress: bool = False,
    event_sink: Callable[[dict], None] | None = None,
    on_epoch_end: Callable[[Trainer, dict], None] | None = None,
    trainer: Trainer | None = None,
    validate: bool = True,
) -> RunResult:
    """One training run per the config.

    With transfer learning on, stage A trains on corpus A and stage B
    continues on corpus B with a fresh optimizer; otherwise a single stage
    trains on ``cfg.train_corpus``.  ``trainer`` resumes a single-stage run.
    """
    val_vocab = bundle.vocab if validate else None
    reports = []
    if cfg.flags.transfer_learning:
        if trainer is not None:
            raise ConfigError("resuming is supported for single-stage runs only (flags.transfer_learning=false)")
        t = cfg.transfer
        trainer, report_a, report_b = transfer_between_corpora(
            lambda: build_model(cfg, bundle),
            _stage(cfg, bundle, "A", t.epochs_a, t.lr_a),
            _stage(cfg, bundle, "B", t.epochs_b, t.lr_b),
            cfg.flags,
            cfg.optim,
            seed=cfg.seed,
            vocab=val_vocab,
            event_sink=event_sink,
            validate=validate,
            progress=progress,
            early_stop_patience=cfg.early_stop_patience,
            on_epoch_end=on_epoch_end,
        )
        reports += [report_a, report_b]
        target = "B"
    else:
        target = cfg.train_corpus
        stage = _stage(cfg, bundle, target, cfg.epochs, cfg.optim.lr)
        if trainer is None:
            trainer = Trainer(build_model(cfg, bundle), cfg.optim, seed=cfg.seed)
        trainer.event_sink = _tagged(event_sink, target)
        reports.append(
            alternate_train(
                trainer, stage.pretrain, stage.transfer, stage.schedule, cfg.flags,
                val=stage.val if validate else None, vocab=val_vocab, progress=progress,
                early_stop_patience=cfg.early_stop_patience, on_epoch_end=on_epoch_end,
            )
        )
    test = evaluate(
        trainer.model, bundle.get(target, "test"), bundle.vocab,
        mode=cfg.eval.decode, beam_width=cfg.eval.beam_width, lam=cfg.optim.lam,
    )
    return RunResult(trainer, reports, test, target)


def _tagged(sink, corpus):
    if sink is None:
        return None
    return lambda rec: sink({**rec, "corpus": corpus})


# -- tables ---------------------------------------------------------------------------

TABLE_METRICS = METRIC_NAMES + ("f1",)


def _fmt(values: Sequence[float]) -> str:
    mean = statistics.fmean(values)
    sd = statistics.stdev(values) if len(values) > 1 else 0.0
    return f"{100 * mean:.2f}±{100 * sd:.2f}"


@dataclass
class ScheduleComparison:
    schedules: list[tuple[int, int]]
    seeds: list[int]
    cells: dict[str, dict[str, float]] = field(default_factory=dict)  # "m,n/seed" -> metrics

    def values(self, sched: tuple[int, int], metric: str) -> list[float]:
        return [self.cells[f"{sched[0]},{sched[1]}/{s}"][metric] for s in self.seeds]

    def table(self) -> str:
        head = ["(m,n)"] + list(TABLE_METRICS)
        rows = [head]
        for sched in self.schedules:
            rows.append([f"({sched[0]},{sched[1]})"] + [_fmt(self.values(sched, k)) for k in TABLE_METRICS])
        note = (
            f"mean±sd x100 over seeds {self.seeds}; synthetic-corpus values, "
            "not comparable to results on clinical data"
        )
        return _grid(rows) + "\n" + note

    def to_json(self) -> str:
        return json.dumps(
            {"schedules": [list(s) for s in self.schedules], "seeds": self.seeds, "cells": self.cells}, sort_keys=True, indent=2
        )


def compare_schedules(
    cfg: RunConfig,
    bundle: DataBundle,
    schedules: Sequence[tuple[int, int]],
    seeds: Sequence[int],
    progress: bool = False,
) -> ScheduleComparison:
    if len(schedules) < 2:
        raise ConfigError("compare-schedules needs at least two schedules")
    if not cfg.flags.external_knowledge and any(m > 0 for m, _ in schedules):
        raise ConfigError("a schedule with m > 0 needs flags.external_knowledge=true")
    out = ScheduleComparison([tuple(s) for s in schedules], list(seeds))
    for m, n in schedules:
        for seed in seeds:
            run_cfg = dataclasses.replace(cfg, schedule=f"{m},{n}", seed=seed)
            res = train_run(run_cfg, bundle, progress=progress, validate=False)
            out.cells[f"{m},{n}/{seed}"] = {k: res.test.metrics[k] for k in TABLE_METRICS}
    return out


ABLATION_GRID = [(ats, tls, ek) for ats in (False, True) for tls in (False, True) for ek in (False, True)]


@dataclass
class AblationTable:
    rows: list[dict] = field(default_factory=list)

    def table(self) -> str:
        grid = [["ATS", "TLS", "EK"] + list(TABLE_METRICS) + ["note"]]
        for r in self.rows:
            mark = lambda b: "x" if b else "-"  # noqa: E731
            grid.append(
                [mark(r["ATS"]), mark(r["TLS"]), mark(r["EK"])]
                + [f"{100 * r['metrics'][k]:.2f}" for k in TABLE_METRICS]
                + [r.get("note", "")]
            )
        return _grid(grid) + "\nx100 on the corpus B test split; synthetic-corpus values"

    def to_json(self) -> str:
        return json.dumps(self.rows, sort_keys=True, indent=2)


def ablation(cfg: RunConfig, bundle: DataBundle, progress: bool = False) -> AblationTable:
    """All eight (ATS, TLS, EK) combinations, each evaluated on corpus B.

    EK off forces zero pretraining passes, so with EK off the ATS toggle has
    nothing to interleave and both rows coincide; the table marks them.
    """
    m, n = cfg.schedule_mn
    out = AblationTable()
    for ats, tls, ek in ABLATION_GRID:
        flags = AblationFlags(alternate_training=ats, transfer_learning=tls, external_knowledge=ek)
        run_cfg = dataclasses.replace(
            cfg, flags=flags, schedule=f"{m if ek else 0},{n}", train_corpus="B", epochs=cfg.transfer.epochs_b
        )
        res = train_run(run_cfg, bundle, progress=progress, validate=False)
        note = "ATS has no effect without EK" if not ek else ""
        out.rows.append({"ATS": ats, "TLS": tls, "EK": ek, "metrics": {k: res.test.metrics[k] for k in TABLE_METRICS}, "note": note})
    return out


def _grid(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows)
