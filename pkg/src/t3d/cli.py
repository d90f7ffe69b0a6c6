"""Operator surface: corpus synthesis, pretraining, evaluation, ablations.

Exit codes are stable: 0 success, 2 config/spec/usage error, 3 I/O error,
4 diverged run, 5 checkpoint or architecture mismatch. Commands are
idempotent: identical inputs and seed rewrite identical outputs (the only
exception is the wall_ms timing field in metrics logs).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import AblationConfig, RunConfig, load_run_config, write_run_config
from .corpus import load_corpus
from .errors import (
    ConfigError,
    DivergedRunError,
    PhantomSpecError,
    PromptError,
    RefuseToResumeError,
    T3DError,
    VocabError,
    VolumeFormatError,
)
from .evaluation import (
    AlignedModel,
    PromptSet,
    linear_probe,
    retrieval_eval,
    score_table_metrics,
    write_report,
    zero_shot_classify,
)
from .phantom import PhantomSpec, default_phantom_spec, synth_corpus
from .training import run_pretraining

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_MISMATCH = 5

RETRIEVAL_KS = (1, 5, 10)


def _load_phantom_spec(path: str | None) -> PhantomSpec:
    if path is None:
        return default_phantom_spec()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"phantom spec file not found: {p}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise PhantomSpecError(f"phantom spec {p} is not valid JSON: {e}") from e
    return PhantomSpec.from_json(obj)


def cmd_synth(args) -> int:
    spec = _load_phantom_spec(args.spec)
    if args.n < 0:
        raise ConfigError(f"--n must be >= 0, got {args.n}")
    manifest = synth_corpus(spec, args.n, args.seed, args.out)
    print(f"synth: wrote {args.n} samples to {manifest}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config, args.override)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_run_config(cfg, out / "config.json")
    result = run_pretraining(cfg.train, cfg.manifest_path, out)
    last = result.state.step
    print(f"pretrain: {last} steps -> {result.checkpoint_path} "
          f"(metrics at {result.metrics_path})")
    return EXIT_OK


def _test_split(corpus, split: str):
    samples = corpus.split(split)
    if not samples:
        raise ConfigError(f"corpus has no samples in split {split!r}")
    return samples


def _eval_model(args, cfg: RunConfig) -> AlignedModel:
    model = AlignedModel.from_checkpoint(args.checkpoint)
    if model.cfg.fingerprint() != cfg.train.fingerprint():
        raise RefuseToResumeError(
            "checkpoint was trained with a different config than the one provided "
            f"({model.cfg.fingerprint()[:12]}... vs {cfg.train.fingerprint()[:12]}...)")
    return model


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, args.override)
    model = _eval_model(args, cfg)
    corpus = load_corpus(cfg.manifest_path, cfg.train.model.max_tokens)
    samples = _test_split(corpus, args.split)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = Path(args.out) if args.out else out / f"report_{args.task}.json"

    if args.task == "retrieval":
        zv = model.embed_volumes([s.volume for s in samples])
        zr = model.embed_texts([s.record.report_text for s in samples], corpus.vocab)
        metrics = retrieval_eval(zv, zr, RETRIEVAL_KS)
        per_attr = None
        summary = ("t2i R@1={R@1:.3f} R@5={R@5:.3f} R@10={R@10:.3f}"
                   .format(**metrics["text_to_image"]))
    elif args.task == "zeroshot":
        if not cfg.prompt_file:
            raise ConfigError("zero-shot evaluation needs paths.prompt_file")
        prompts = PromptSet.from_file(cfg.prompt_file)
        prompts.check_against_labels(corpus.label_names())
        attrs = prompts.attributes()
        labels = corpus.labels_array(samples, attrs)
        table = zero_shot_classify([s.volume for s in samples], prompts, model,
                                   labels, corpus.vocab)
        metrics = score_table_metrics(table)
        per_attr = metrics.pop("per_attribute")
        auc = metrics["auc"]
        summary = f"zero-shot macro AUC={auc:.3f}" if auc is not None else "zero-shot AUC undefined"
    else:  # probe
        attrs = corpus.label_names()
        train_samples = _test_split(corpus, "train")
        usable = [a for a in attrs
                  if len({s.record.labels.get(a, 0) for s in train_samples}) > 1]
        if not usable:
            raise ConfigError("no attribute has two classes in the train split")
        ztr = model.embed_volumes([s.volume for s in train_samples])
        zte = model.embed_volumes([s.volume for s in samples])
        metrics = linear_probe(ztr, corpus.labels_array(train_samples, usable),
                               zte, corpus.labels_array(samples, usable), usable)
        per_attr = metrics.pop("per_attribute")
        auc = metrics["auc"]
        summary = f"probe macro AUC={auc:.3f}" if auc is not None else "probe AUC undefined"

    write_report(report_path, args.task, model.source_hash, cfg.train.to_dict(),
                 metrics, per_attr)
    print(f"eval[{args.task}]: {summary} -> {report_path}")
    return EXIT_OK


def _ablation_variants(cfg: RunConfig, axis: str):
    ab: AblationConfig = cfg.ablation
    base = cfg.train.to_dict()
    variants = []

    def with_updates(name, **updates):
        doc = json.loads(json.dumps(base))
        model_updates = updates.pop("model", {})
        doc.update(updates)
        doc["model"].update(model_updates)
        variants.append((name, doc))

    if axis == "loss":
        names = {(1.0, 0.0): "gca_only", (0.0, 1.0): "tma_only", (1.0, 1.0): "both"}
        for pair in ab.loss:
            name = names.get(tuple(pair), f"gca{pair[0]:g}_tma{pair[1]:g}")
            with_updates(name, gca_weight=pair[0], tma_weight=pair[1])
    elif axis == "views":
        for m in ab.views:
            with_updates(f"views_{m}", views=m)
    elif axis == "layers":
        for k in ab.layers:
            with_updates(f"layers_{k}", model={"fusion_layers": k})
    elif axis == "text_informing":
        for flag in ab.text_informing:
            name = "with_text" if flag else "without_text"
            with_updates(name, model={"text_informing": flag})
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    return variants


def _variant_metrics(cfg: RunConfig, train_doc: dict, out_dir: Path) -> dict:
    from .training import TrainConfig

    tcfg = TrainConfig.from_dict(train_doc)
    result = run_pretraining(tcfg, cfg.manifest_path, out_dir)
    model = AlignedModel.from_checkpoint(result.checkpoint_path)
    corpus = load_corpus(cfg.manifest_path, tcfg.model.max_tokens)
    test = corpus.split("test")
    train_samples = corpus.split("train")
    zv = model.embed_volumes([s.volume for s in test])
    zr = model.embed_texts([s.record.report_text for s in test], corpus.vocab)
    ret = retrieval_eval(zv, zr, RETRIEVAL_KS)
    row = {
        "r1_text_to_image": ret["text_to_image"]["R@1"],
        "r1_image_to_text": ret["image_to_text"]["R@1"],
        "zeroshot_auc": None,
        "probe_auc": None,
    }
    if cfg.prompt_file:
        prompts = PromptSet.from_file(cfg.prompt_file)
        prompts.check_against_labels(corpus.label_names())
        attrs = prompts.attributes()
        table = zero_shot_classify([s.volume for s in test], prompts, model,
                                   corpus.labels_array(test, attrs), corpus.vocab)
        row["zeroshot_auc"] = score_table_metrics(table)["auc"]
    usable = [a for a in corpus.label_names()
              if len({s.record.labels.get(a, 0) for s in train_samples}) > 1
              and len({s.record.labels.get(a, 0) for s in test}) > 1]
    if usable:
        probe = linear_probe(
            model.embed_volumes([s.volume for s in train_samples]),
            corpus.labels_array(train_samples, usable),
            model.embed_volumes([s.volume for s in test]),
            corpus.labels_array(test, usable), usable)
        row["probe_auc"] = probe["auc"]
    return row


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, args.override)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = {}
    for name, train_doc in _ablation_variants(cfg, args.axis):
        rows[name] = _variant_metrics(cfg, train_doc, out / f"ablate_{args.axis}" / name)
    table_path = out / f"ablation_{args.axis}.json"
    table_path.write_text(json.dumps({"axis": args.axis, "rows": rows},
                                     indent=2, sort_keys=True) + "\n", encoding="utf-8")
    cols = ["r1_text_to_image", "r1_image_to_text", "zeroshot_auc", "probe_auc"]
    widths = max(len(n) for n in rows)
    lines = [f"{'variant'.ljust(widths)}  " + "  ".join(f"{c:>17}" for c in cols)]
    for name, row in rows.items():
        cells = ["{:>17}".format("-" if row[c] is None else f"{row[c]:.4f}") for c in cols]
        lines.append(f"{name.ljust(widths)}  " + "  ".join(cells))
    text = "\n".join(lines)
    (out / f"ablation_{args.axis}.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    print(f"ablate[{args.axis}]: table -> {table_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="t3d",
        description="Volume/report contrastive pretraining with text-informed "
                    "multi-view alignment, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a phantom corpus")
    p_synth.add_argument("--spec", default=None, help="phantom spec JSON (default: built-in catalog)")
    p_synth.add_argument("--out", required=True, help="output corpus directory")
    p_synth.add_argument("--n", type=int, required=True, help="number of samples")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth)

    p_pre = sub.add_parser("pretrain", help="run pretraining from a config file")
    p_pre.add_argument("--config", required=True)
    p_pre.add_argument("--override", action="append", default=[], metavar="K=V",
                       help="dotted-key config override, repeatable")
    p_pre.set_defaults(func=cmd_pretrain)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--task", required=True, choices=("zeroshot", "retrieval", "probe"))
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--split", default="test", choices=("train", "val", "test"))
    p_eval.add_argument("--out", default=None, help="report path (default: out_dir/report_<task>.json)")
    p_eval.add_argument("--override", action="append", default=[], metavar="K=V")
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="run an ablation axis and tabulate")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--axis", required=True,
                       choices=("loss", "views", "layers", "text_informing"))
    p_abl.add_argument("--override", action="append", default=[], metavar="K=V")
    p_abl.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PhantomSpecError, VocabError, PromptError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except RefuseToResumeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except DivergedRunError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, VolumeFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except T3DError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
