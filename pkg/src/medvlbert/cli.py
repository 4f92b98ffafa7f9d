"""Command-line entry point.

Every subcommand accepts ``--config FILE`` plus one ``--<dotted.key> VALUE``
flag per configuration field; flags override the file.  Outputs go under
``--out-dir``.  Exit codes: 0 success, 2 configuration, 3 I/O, 4 data
integrity, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, flat_keys, load_config, parse_schedule
from .errors import ConfigError, ContractError, DataIntegrityError, NumericError
from .experiments import (
    ablation,
    bundle_digest,
    compare_schedules,
    generate_bundle,
    load_bundle,
    save_bundle,
    summarize_bundle,
    train_run,
)
from .metrics import EvalPair, format_table, precision_recall_f1, read_pairs, score_corpus, write_pairs
from .model import collate
from .text import detokenize, split_words
from .training import evaluate

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5

log = logging.getLogger("medvlbert")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="YAML configuration file")
    defaults = RunConfig().to_dict()
    group = p.add_argument_group("configuration overrides")
    for key, tp in flat_keys().items():
        node = defaults
        for part in key.split("."):
            node = node[part]
        shown = ",".join(map(str, node)) if isinstance(node, list) else node
        names = [f"--{key}"]
        if "_" in key:
            names.append(f"--{key.replace('_', '-')}")
        group.add_argument(*names, dest=f"cfg:{key}", metavar=_type_name(tp).upper(), help=f"default: {shown}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="medvlbert", description="Terminology-grounded report generation on synthetic corpora.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, allow_abbrev=False)
        _add_config_flags(p)
        return p

    command("gen-data", "generate corpora A and B, the vocabulary and a manifest under OUT_DIR/data")
    p = command("train", "train per the schedule and flags; writes events, checkpoints and a summary")
    p.add_argument("--resume", metavar="CKPT", help="continue a single-stage run from a checkpoint")

    p = command("evaluate", "score a checkpoint on a split, or re-score a candidate dump")
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--pairs", metavar="JSONL", help="score an existing candidate/reference dump instead")
    p.add_argument("--references-as-candidates", action="store_true", help="score ground truth against itself")

    p = command("generate", "print generated reports for given sample ids")
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("--sample-id", type=int, nargs="+", required=True)

    p = command("compare-schedules", "train every (schedule, seed) cell and tabulate mean±sd")
    p.add_argument("--schedules", nargs="+", default=["1,1", "1,3", "1,4", "1,5"], metavar="M,N")
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])

    command("ablation", "train the eight ATS/TLS/EK combinations and tabulate them")

    p = command("export-attention", "dump terminology-encoder attention for one sample")
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("--sample-id", type=int, required=True)
    p.add_argument("--branch", choices=("visual", "textual"), default="visual")
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--out", metavar="PATH", help="export path (default OUT_DIR/attention_<branch>_<id>.agat)")

    command("print-config", "print the fully resolved configuration")
    return parser


def _resolve(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    return load_config(args.config, overrides)


def _data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir) / "data"


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    bundle, _ = generate_bundle(cfg)
    manifest = save_bundle(bundle, _data_dir(cfg))
    print(summarize_bundle(bundle))
    for name, digest in sorted(manifest["files"].items()):
        print(f"{digest}  {name}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    bundle = load_bundle(_data_dir(cfg))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    provenance = {"config_sha256": cfg.digest(), "corpus_sha256": bundle_digest(bundle)}
    trainer = None
    best = {"cider": -np.inf}
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        trainer = ckpt.restore()
        best["cider"] = ckpt.extra.get("best_cider", -np.inf)
    mode = "a" if args.resume else "w"
    with open(out / "events.jsonl", mode, encoding="utf-8") as events:

        def sink(rec):
            events.write(json.dumps(rec, sort_keys=True) + "\n")

        def on_epoch_end(tr, row):
            if row.get("CIDEr-D", -np.inf) > best["cider"]:
                best["cider"] = row["CIDEr-D"]
                save_checkpoint(out / "best.agck", tr, provenance, {"best_cider": best["cider"], "epoch": row["epoch"]})
            save_checkpoint(out / "last.agck", tr, provenance, {"best_cider": best["cider"]})
            events.flush()

        result = train_run(cfg, bundle, progress=True, event_sink=sink, on_epoch_end=on_epoch_end, trainer=trainer)
    if not (out / "best.agck").exists():
        save_checkpoint(out / "best.agck", result.trainer, provenance)
    save_checkpoint(out / "last.agck", result.trainer, provenance, {"best_cider": best["cider"]})
    summary = "\n\n".join(r.summary_table() for r in result.reports if r is not None)
    summary += f"\n\ntest metrics (corpus {result.target_corpus}, final weights)\n" + _metric_block(result.test.metrics)
    (out / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    (out / "test_metrics.json").write_text(json.dumps(result.test.metrics, indent=2, sort_keys=True) + "\n")
    print(summary)
    return EXIT_OK


def _metric_block(metrics: dict) -> str:
    cls = {k: metrics[k] for k in ("precision", "recall", "f1") if k in metrics}
    lines = [format_table(metrics)]
    for k, v in cls.items():
        lines.append(f"{k:<10}{v:>12.6f}{100 * v:>12.2f}")
    return "\n".join(lines)


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.pairs:
        metrics = score_corpus(read_pairs(args.pairs))
        print(format_table(metrics))
        return EXIT_OK
    bundle = load_bundle(_data_dir(cfg))
    corpus = cfg.train_corpus if not cfg.flags.transfer_learning else "B"
    ds = bundle.get(corpus, cfg.eval.split)
    refs = ds.texts(bundle.vocab)
    if args.references_as_candidates:
        cands, probs = refs, ds.labels().astype(float)
    else:
        if not args.checkpoint:
            raise ConfigError("evaluate needs --checkpoint, --pairs or --references-as-candidates")
        model = load_checkpoint(args.checkpoint).build_model()
        if model.decoder.vocab_size != len(bundle.vocab) or list(model.terminology.names) != ds.terminology_names:
            raise ConfigError("checkpoint vocabulary or terminology set does not match the dataset")
        res = evaluate(model, ds, bundle.vocab, mode=cfg.eval.decode, beam_width=cfg.eval.beam_width, lam=cfg.optim.lam)
        cands, probs = res.candidates, res.probs
    dump = out / f"candidates_{corpus}_{cfg.eval.split}.jsonl"
    write_pairs(dump, ((str(s.id), c, [r]) for s, c, r in zip(ds.samples, cands, refs)))
    pairs = [EvalPair(str(s.id), tuple(split_words(c)), (tuple(split_words(r)),)) for s, c, r in zip(ds.samples, cands, refs)]
    metrics = score_corpus(pairs)
    metrics.update(precision_recall_f1(probs, ds.labels()))
    (out / f"metrics_{corpus}_{cfg.eval.split}.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(_metric_block(metrics))
    print(f"candidates written to {dump}")
    return EXIT_OK


def cmd_generate(cfg: RunConfig, args) -> int:
    bundle = load_bundle(_data_dir(cfg))
    model = load_checkpoint(args.checkpoint).build_model()
    by_id = {s.id: s for c in ("A", "B") for split in ("train", "val", "test") for s in bundle.get(c, split).samples}
    missing = [i for i in args.sample_id if i not in by_id]
    if missing:
        raise ConfigError(f"unknown transfer sample ids: {missing}")
    samples = [by_id[i] for i in args.sample_id]
    batch = collate(samples)
    tf = model.encode("transfer", batch)
    for s, seq in zip(samples, model.decoder.generate(tf, mode=cfg.eval.decode, beam_width=cfg.eval.beam_width)):
        print(f"{s.id}\tgenerated: {detokenize(seq, bundle.vocab)}")
        print(f"{s.id}\treference: {detokenize(s.tokens, bundle.vocab)}")
    return EXIT_OK


def cmd_compare_schedules(cfg: RunConfig, args) -> int:
    bundle = load_bundle(_data_dir(cfg))
    schedules = [parse_schedule(s) for s in args.schedules]
    table = compare_schedules(cfg, bundle, schedules, args.seeds, progress=True)
    out = Path(cfg.out_dir)
    text = table.table()
    (out / "compare_schedules.txt").write_text(text + "\n", encoding="utf-8")
    (out / "compare_schedules.json").write_text(table.to_json() + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_ablation(cfg: RunConfig, args) -> int:
    bundle = load_bundle(_data_dir(cfg))
    table = ablation(cfg, bundle, progress=True)
    out = Path(cfg.out_dir)
    text = table.table()
    (out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    (out / "ablation.json").write_text(table.to_json() + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_export_attention(cfg: RunConfig, args) -> int:
    bundle = load_bundle(_data_dir(cfg))
    model = load_checkpoint(args.checkpoint).build_model()
    export = export_sample_attention(model, bundle, args.sample_id, args.branch)
    path = Path(args.out) if args.out else Path(cfg.out_dir) / f"attention_{args.branch}_{args.sample_id}.agat"
    path.parent.mkdir(parents=True, exist_ok=True)
    export.save(path)
    lines = []
    for term, top in export.top_context(args.top_k):
        where = "grid cell" if args.branch == "visual" else "token"
        shown = ", ".join(f"{where} {label} ({w:.3f})" for label, w in top)
        lines.append(f"terminology {term} attends most to {shown}")
    summary = "\n".join(lines)
    path.with_suffix(".txt").write_text(summary + "\n\n" + export.to_text() + "\n", encoding="utf-8")
    print(summary)
    print(f"attention written to {path}")
    return EXIT_OK


def export_sample_attention(model, bundle, sample_id: int, branch: str):
    """Record attention for one sample on the chosen branch."""
    if branch == "visual":
        pool = [s for c in ("A", "B") for split in ("train", "val", "test") for s in bundle.get(c, split).samples]
    else:
        pool = [s for c in ("A", "B") for s in bundle.get(c, "textbook").samples]
    sample = next((s for s in pool if s.id == sample_id), None)
    if sample is None:
        raise ConfigError(f"no {branch} sample with id {sample_id}")
    encoder = model.visual_encoder if branch == "visual" else model.textual_encoder
    encoder.set_recording(True)
    try:
        if branch == "visual":
            u, _, _ = model.encode_images(sample.image[None])
        else:
            tokens = [bundle.vocab.token(int(i)) for i in sample.tokens]
            u, _, _ = model.encode_textbook(sample.tokens[None], tokens=[tokens])
        export = encoder.export_attention(u)
    finally:
        encoder.set_recording(False)
    return export


def cmd_print_config(cfg: RunConfig, args) -> int:
    print(cfg.to_yaml(), end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "generate": cmd_generate,
    "compare-schedules": cmd_compare_schedules,
    "ablation": cmd_ablation,
    "export-attention": cmd_export_attention,
    "print-config": cmd_print_config,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataIntegrityError as exc:
        print(f"data integrity error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
